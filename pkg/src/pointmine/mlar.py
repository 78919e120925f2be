"""Affinity refinement of soft masks on 4-connected pixel grids.

The global filter weights every pixel pair by ``exp(-maxedge / bw^2)``, where
``maxedge`` is the largest edge weight on their minimum-spanning-tree path.
Sorting tree edges and merging components (a single-linkage dendrogram) gives
that quantity for all pairs at once: two pixels first meet at the merge whose
edge weight equals their path maximum. Summing over each merge's sibling
subtrees then turns the all-pairs weighted mean into two linear passes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .losses import LossValue


@dataclass
class AffinityConfig:
    zeta_g: float = 0.1
    sigma_g: float = 0.03
    zeta_l: float = 0.1
    sigma_l: float = 0.1
    kernel_sizes: list[int] = field(default_factory=lambda: [5, 5, 3, 3])
    image_kernel: int = 5
    cascade_blocks: int = 2
    lambda_I: float = 0.5
    lambda_S: float = 0.5
    literal_normalizer: bool = False

    def __post_init__(self):
        for name in ("zeta_g", "sigma_g", "zeta_l", "sigma_l"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for k in list(self.kernel_sizes) + [self.image_kernel]:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and >= 1, got {k}")
        for name in ("lambda_I", "lambda_S"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.cascade_blocks < 0:
            raise ValueError("cascade_blocks must be >= 0")


def _as_chw(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return v[None] if v.ndim == 2 else v


# ---------------------------------------------------------------- graph and tree


@dataclass
class GridGraph:
    """Edge weights of a 4-connected ``H x W`` grid.

    ``right[r, c]`` joins ``(r, c)``-``(r, c+1)``; ``down[r, c]`` joins
    ``(r, c)``-``(r+1, c)``. Node ids are ``r * W + c``.
    """

    H: int
    W: int
    right: np.ndarray
    down: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.H * self.W

    @property
    def n_edges(self) -> int:
        return self.H * (self.W - 1) + self.W * (self.H - 1)

    def edge_list(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """``(u, v, weight, direction)`` with ``u < v``; direction 0=right, 1=down."""
        H, W = self.H, self.W
        ids = np.arange(H * W).reshape(H, W)
        u = np.concatenate([ids[:, :-1].ravel(), ids[:-1, :].ravel()])
        v = np.concatenate([ids[:, 1:].ravel(), ids[1:, :].ravel()])
        w = np.concatenate([self.right.ravel(), self.down.ravel()])
        d = np.concatenate([np.zeros(H * (W - 1), np.int64), np.ones(W * (H - 1), np.int64)])
        return u, v, w, d


def grid_graph(values: np.ndarray) -> GridGraph:
    """Weights are squared Euclidean distances between neighbouring node vectors."""
    v = _as_chw(values)
    _, H, W = v.shape
    right = np.sum((v[:, :, 1:] - v[:, :, :-1]) ** 2, axis=0)
    down = np.sum((v[:, 1:, :] - v[:, :-1, :]) ** 2, axis=0)
    if not (np.all(np.isfinite(right)) and np.all(np.isfinite(down))):
        raise ValueError("grid values must be finite")
    return GridGraph(H, W, right, down)


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        p = self.parent
        root = a
        while p[root] != root:
            root = p[root]
        while p[a] != root:
            p[a], a = root, p[a]
        return root


@dataclass
class SpanningTree:
    """Tree edges in ascending (weight, lower endpoint, direction) order, plus a rooted view."""

    n_nodes: int
    edges_u: np.ndarray
    edges_v: np.ndarray
    edges_w: np.ndarray
    parent: np.ndarray
    parent_weight: np.ndarray
    depth: np.ndarray
    root: int = 0

    @property
    def total_weight(self) -> float:
        return float(np.sum(self.edges_w))


def build_mst(g: GridGraph) -> SpanningTree:
    """Kruskal's algorithm with a fully deterministic edge order."""
    n = g.n_nodes
    u, v, w, d = g.edge_list()
    order = np.lexsort((d, u, w))
    ds = _DisjointSet(n)
    keep = []
    for e in order.tolist():
        a, b = ds.find(int(u[e])), ds.find(int(v[e]))
        if a != b:
            ds.parent[b] = a
            keep.append(e)
            if len(keep) == n - 1:
                break
    keep = np.array(keep, dtype=np.int64)
    eu, ev, ew = u[keep], v[keep], w[keep]
    parent, pw, depth = _root_tree(n, eu, ev, ew)
    return SpanningTree(n, eu, ev, ew, parent, pw, depth)


def _root_tree(n, eu, ev, ew):
    adj: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    for a, b, wt in zip(eu.tolist(), ev.tolist(), ew.tolist()):
        adj[a].append((b, wt))
        adj[b].append((a, wt))
    parent = np.full(n, -1, dtype=np.int64)
    pw = np.zeros(n)
    depth = np.zeros(n, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    stack = [0]
    while stack:
        a = stack.pop()
        for b, wt in adj[a]:
            if not seen[b]:
                seen[b] = True
                parent[b], pw[b], depth[b] = a, wt, depth[a] + 1
                stack.append(b)
    if not seen.all():
        raise ValueError("spanning tree is not connected")
    return parent, pw, depth


def max_edge_on_path(t: SpanningTree, i: int, j: int) -> float:
    best = 0.0
    while t.depth[i] > t.depth[j]:
        best, i = max(best, t.parent_weight[i]), t.parent[i]
    while t.depth[j] > t.depth[i]:
        best, j = max(best, t.parent_weight[j]), t.parent[j]
    while i != j:
        best = max(best, t.parent_weight[i], t.parent_weight[j])
        i, j = t.parent[i], t.parent[j]
    return float(best)


# ---------------------------------------------------------------- global filter


@dataclass
class Dendrogram:
    """Merge tree of the spanning tree's edges; leaves are ``0..n-1``.

    Nodes ``n..2n-2`` are internal, in merge order. Every node's leaves form
    the contiguous range ``[start, end)`` of ``leaf_order``.
    """

    n_leaves: int
    left: np.ndarray
    right: np.ndarray
    weight: np.ndarray  # per internal node, in creation order
    start: np.ndarray = None
    end: np.ndarray = None
    leaf_pos: np.ndarray = None

    def __post_init__(self):
        if self.start is None:
            self._index()

    def _index(self) -> None:
        n = self.n_leaves
        total = 2 * n - 1
        size = [1] * n + [0] * (n - 1)
        left, right = self.left.tolist(), self.right.tolist()
        for k in range(n - 1):
            size[n + k] = size[left[k]] + size[right[k]]
        start = [0] * total
        for k in range(n - 2, -1, -1):
            s0 = start[n + k]
            start[left[k]] = s0
            start[right[k]] = s0 + size[left[k]]
        self.start = np.array(start, dtype=np.int64)
        self.end = self.start + np.array(size, dtype=np.int64)
        self.leaf_pos = self.start[:n].copy()
        # for every non-root node: its sibling and the decay index of its parent
        self._child = np.concatenate([self.left, self.right])
        self._sibling = np.concatenate([self.right, self.left])
        self._merge = np.concatenate([np.arange(n - 1), np.arange(n - 1)])

    @classmethod
    def from_tree(cls, t: SpanningTree) -> "Dendrogram":
        n = t.n_nodes
        order = np.argsort(t.edges_w, kind="stable")
        ds = _DisjointSet(n)
        comp_node = list(range(n))
        left = np.empty(max(n - 1, 0), dtype=np.int64)
        right = np.empty(max(n - 1, 0), dtype=np.int64)
        weight = t.edges_w[order]
        for k, e in enumerate(order.tolist()):
            a, b = ds.find(int(t.edges_u[e])), ds.find(int(t.edges_v[e]))
            left[k], right[k] = comp_node[a], comp_node[b]
            ds.parent[b] = a
            comp_node[a] = n + k
        return cls(n, left, right, weight)

    def filter(self, phi: np.ndarray, bandwidth: float, literal: bool = False) -> np.ndarray:
        """Weighted means ``sum_j psi_ij phi_j / sum_j psi_ij`` for every leaf.

        ``phi`` is ``(n,)`` or ``(n, C)``. With ``literal`` the self weight is
        left out of the normalizer only.
        """
        n = self.n_leaves
        phi = np.asarray(phi, dtype=np.float64)
        flat = phi.reshape(n, -1)
        vals = np.empty((n, flat.shape[1] + 1))
        vals[:, :-1] = flat
        vals[:, -1] = 1.0
        # subtree sums from prefix sums over the leaf order
        ordered = np.empty_like(vals)
        ordered[self.leaf_pos] = vals
        cs = np.zeros((n + 1, vals.shape[1]))
        np.cumsum(ordered, axis=0, out=cs[1:])
        sums = cs[self.end] - cs[self.start]
        decay = np.exp(-self.weight / (bandwidth * bandwidth))
        if literal:
            # the normalizer can be tiny, so accumulate exactly along each root path
            acc_all = np.zeros_like(sums)
            for k in range(n - 2, -1, -1):
                node, l, r = n + k, self.left[k], self.right[k]
                acc_all[l] = acc_all[node] + decay[k] * sums[r]
                acc_all[r] = acc_all[node] + decay[k] * sums[l]
            acc = acc_all[:n]
            den = (1.0 + acc[:, -1]) - 1.0  # the self weight enters and leaves the sum
            with np.errstate(divide="ignore", invalid="ignore"):
                out = np.where(den[:, None] > 0, (flat + acc[:, :-1]) / den[:, None], flat)
            return out.reshape(phi.shape)
        # each child collects its sibling's mass at the merge height; a leaf's
        # total is the sum of those contributions along its path to the root
        contrib = decay[self._merge, None] * sums[self._sibling]
        diff = np.zeros((n + 1, vals.shape[1]))
        np.add.at(diff, self.start[self._child], contrib)
        np.add.at(diff, self.end[self._child], -contrib)
        acc = np.cumsum(diff[:n], axis=0)[self.leaf_pos]
        out = (flat + acc[:, :-1]) / (1.0 + acc[:, -1:])
        return out.reshape(phi.shape)


def tree_filter_global(t: SpanningTree, phi: np.ndarray, bandwidth: float,
                       literal: bool = False) -> np.ndarray:
    """All-pairs tree filter; ``phi`` has one value (or row) per node."""
    if not bandwidth > 0:
        raise ValueError("bandwidth must be > 0")
    phi = np.asarray(phi, dtype=np.float64)
    shape = phi.shape
    flat = phi.reshape(t.n_nodes, -1) if phi.ndim != 1 else phi
    return Dendrogram.from_tree(t).filter(flat, bandwidth, literal).reshape(shape)


# ---------------------------------------------------------------- local filter


def local_gaussian_filter(guidance: np.ndarray, phi: np.ndarray, kernel: int,
                          bandwidth: float) -> np.ndarray:
    """Window-restricted weighted mean with Gaussian guidance affinities.

    Windows are truncated at the image border; the center pixel always
    contributes with weight 1.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("kernel must be odd and >= 1")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be > 0")
    g = _as_chw(guidance)
    phi = np.asarray(phi, dtype=np.float64)
    _, H, W = g.shape
    if phi.shape != (H, W):
        raise ValueError(f"phi shape {phi.shape} does not match guidance {(H, W)}")
    num = np.zeros((H, W))
    den = np.zeros((H, W))
    r = kernel // 2
    inv = 1.0 / (bandwidth * bandwidth)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            ys, ye = max(0, -dy), min(H, H - dy)
            xs, xe = max(0, -dx), min(W, W - dx)
            if ys >= ye or xs >= xe:
                continue
            gi = g[:, ys:ye, xs:xe]
            gj = g[:, ys + dy : ye + dy, xs + dx : xe + dx]
            psi = np.exp(-np.sum((gi - gj) ** 2, axis=0) * inv)
            num[ys:ye, xs:xe] += psi * phi[ys + dy : ye + dy, xs + dx : xe + dx]
            den[ys:ye, xs:xe] += psi
    return num / den


def cascade_refine(phi0: np.ndarray, guidance: np.ndarray, blocks: int, lam: float,
                   bandwidth: float, kernel: int) -> np.ndarray:
    """``x <- lam * local(x) + (1 - lam) * x`` repeated ``blocks`` times."""
    x = np.asarray(phi0, dtype=np.float64)
    for _ in range(blocks):
        x = lam * local_gaussian_filter(guidance, x, kernel, bandwidth) + (1.0 - lam) * x
    return x


# ---------------------------------------------------------------- resampling


def _axis_weights(n_in: int, n_out: int):
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resample_bilinear(plane: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resampling of a ``(C, H, W)`` or ``(H, W)`` array."""
    Ho, Wo = int(size[0]), int(size[1])
    if Ho < 1 or Wo < 1:
        raise ValueError("target size must be positive")
    p = np.asarray(plane, dtype=np.float64)
    squeeze = p.ndim == 2
    p = _as_chw(p)
    _, H, W = p.shape
    if (H, W) == (Ho, Wo):
        out = p.copy()
    else:
        y0, y1, fy = _axis_weights(H, Ho)
        x0, x1, fx = _axis_weights(W, Wo)
        rows = p[:, y0, :] * (1 - fy)[None, :, None] + p[:, y1, :] * fy[None, :, None]
        out = rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx
    return out[0] if squeeze else out


# ---------------------------------------------------------------- refinement


@dataclass
class GuidancePlane:
    """A guidance array at mask resolution with its cached global-filter structure."""

    values: np.ndarray
    dendrogram: Dendrogram

    @classmethod
    def build(cls, values: np.ndarray) -> "GuidancePlane":
        v = _as_chw(values)
        return cls(v, Dendrogram.from_tree(build_mst(grid_graph(v))))

    def refine(self, phi: np.ndarray, zeta: float, sigma_local: float, kernel: int,
               blocks: int, lam: float, literal: bool = False) -> np.ndarray:
        H, W = phi.shape
        y = self.dendrogram.filter(phi.ravel(), zeta, literal).reshape(H, W)
        return cascade_refine(y, self.values, blocks, lam, sigma_local, kernel)


@dataclass
class RefineResult:
    yI: np.ndarray
    yS: np.ndarray | None
    semantic_skipped: bool


def unit_range(values: np.ndarray) -> np.ndarray:
    """Min-max map each channel of a ``(C, H, W)`` array onto [0, 1]; constant channels become 0."""
    v = _as_chw(values)
    lo = v.min(axis=(1, 2), keepdims=True)
    span = v.max(axis=(1, 2), keepdims=True) - lo
    return (v - lo) / np.where(span > 0, span, 1.0)


def prepare_guidance(shape: tuple[int, int], image_plane: np.ndarray | None,
                     pyramid_levels: list[np.ndarray] | None):
    """Resample the image plane and every pyramid level to ``shape`` and cache their trees."""
    img = None
    if image_plane is not None:
        ip = np.asarray(image_plane, dtype=np.float64)
        chw = np.moveaxis(ip, -1, 0) if ip.ndim == 3 else ip[None]
        img = GuidancePlane.build(resample_bilinear(chw, shape))
    levels = None
    if pyramid_levels:
        levels = [GuidancePlane.build(unit_range(resample_bilinear(lv, shape))) for lv in pyramid_levels]
    return img, levels


def mlar_refine(m_pre: np.ndarray, image_plane: np.ndarray | None,
                pyramid_levels: list[np.ndarray] | None, cfg: AffinityConfig,
                guidance=None) -> RefineResult:
    """Global then cascaded local filtering of ``m_pre`` on the image and semantic planes.

    ``guidance`` may carry the output of :func:`prepare_guidance` to reuse
    trees across masks of the same image.
    """
    m = np.asarray(m_pre, dtype=np.float64)
    img, levels = guidance if guidance is not None else prepare_guidance(m.shape, image_plane,
                                                                          pyramid_levels)
    if img is None:
        raise ValueError("an image plane is required for refinement")
    yI = img.refine(m, cfg.zeta_g, cfg.zeta_l, cfg.image_kernel, cfg.cascade_blocks,
                    cfg.lambda_I, cfg.literal_normalizer)
    if not levels:
        warnings.warn("no feature pyramid: semantic refinement skipped", stacklevel=2)
        return RefineResult(yI, None, True)
    outs = []
    for i, lv in enumerate(levels):
        k = cfg.kernel_sizes[min(i, len(cfg.kernel_sizes) - 1)]
        outs.append(lv.refine(m, cfg.sigma_g, cfg.sigma_l, k, cfg.cascade_blocks, cfg.lambda_S,
                              cfg.literal_normalizer))
    return RefineResult(yI, np.mean(outs, axis=0), False)


def affinity_loss(yI: np.ndarray, yS: np.ndarray | None, y_label: np.ndarray,
                  m_supervise: np.ndarray) -> LossValue:
    """``(1/M_reg) sum |yI - y| + |yS - y|``; gradient is ``[d/dyI, d/dyS]``.

    ``M_reg`` is the foreground count of ``m_supervise``; when it is zero the
    loss is 0 and a warning is emitted.
    """
    yI = np.asarray(yI, dtype=np.float64)
    y = np.asarray(y_label, dtype=np.float64)
    if yI.shape != y.shape or np.shape(m_supervise) != y.shape:
        raise ValueError("affinity loss inputs must share one shape")
    m_reg = int(np.count_nonzero(m_supervise))
    parts = [yI] if yS is None else [yI, np.asarray(yS, dtype=np.float64)]
    if m_reg == 0:
        warnings.warn("empty supervision mask: affinity loss defined as 0", stacklevel=2)
        return LossValue(0.0, np.zeros(sum(p.size for p in parts)))
    value = sum(np.sum(np.abs(p - y)) for p in parts) / m_reg
    grad = np.concatenate([np.sign(p - y).ravel() / m_reg for p in parts])
    return LossValue(value, grad)


def write_pgm(path, soft_mask: np.ndarray) -> None:
    """8-bit grayscale dump of a soft mask in [0, 1] for visual inspection."""
    from PIL import Image

    data = np.clip(np.rint(np.asarray(soft_mask) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(str(path), format="PPM")
