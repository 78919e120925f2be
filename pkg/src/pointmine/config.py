"""Flat ``key = value`` configuration mapped onto :class:`PipelineConfig`."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .pipeline import MODES, PipelineConfig


class ConfigError(ValueError):
    """Unknown key, malformed line or a value rejected by a module config."""


REF = "reference setting"
LOCAL = "chosen for this package"


@dataclass(frozen=True)
class Key:
    name: str
    path: tuple[str, ...]  # attribute path inside PipelineConfig
    kind: type
    source: str
    help: str


KEYS: list[Key] = [
    Key("mode", ("mode",), str, LOCAL, f"pipeline variant, one of {', '.join(MODES)}"),
    Key("seed", ("seed",), int, LOCAL, "global seed; per-scene sampling seeds derive from it"),
    Key("parallelism", ("parallelism",), int, LOCAL, "worker threads for per-scene steps"),
    Key("feature_mode", ("feature_mode",), str, LOCAL, "auto, roi, inline or descriptor"),
    Key("distance.d", ("distance", "d"), float, REF, "exponent of the point-distance score"),
    Key("distance.penalize", ("distance", "penalize"), bool, LOCAL,
        "down-weight proposals covering other instances' points"),
    Key("psm.iters", ("psm_trainer", "iters"), int, LOCAL, "gradient steps for the first-stage head"),
    Key("psm.lr", ("psm_trainer", "lr"), float, LOCAL, "step size for the first-stage head"),
    Key("pnpg.v", ("pnpg", "v"), float, LOCAL, "jitter scale of augmented positives"),
    Key("pnpg.t_neg1", ("pnpg", "t_neg1"), float, REF, "IoU ceiling for background negatives"),
    Key("pnpg.t_neg2", ("pnpg", "t_neg2"), float, REF, "IoU ceiling for part negatives"),
    Key("pnpg.n_bg", ("pnpg", "n_bg"), int, LOCAL, "background negatives per image"),
    Key("pnpg.n_part", ("pnpg", "n_part"), int, LOCAL, "part negatives per instance"),
    Key("srm.alpha", ("srm", "alpha"), float, REF, "weight of the negative term"),
    Key("srm.gamma", ("srm", "gamma"), float, REF, "focal exponent"),
    Key("srm.focal_alpha", ("srm", "focal_alpha"), float, REF, "focal class balance"),
    Key("srm.cls_activation", ("srm", "cls_activation"), str, LOCAL,
        "class-branch activation of the second-stage head: sigmoid or softmax"),
    Key("srm.iters", ("srm", "trainer", "iters"), int, LOCAL, "gradient steps for the second-stage head"),
    Key("srm.lr", ("srm", "trainer", "lr"), float, LOCAL, "step size for the second-stage head"),
    Key("bms.k", ("bms", "k"), int, REF, "candidates considered by box mining"),
    Key("bms.t_min1", ("bms", "t_min1"), float, REF, "overlap threshold for growing the box"),
    Key("bms.t_min2", ("bms", "t_min2"), float, REF, "overlap threshold for the containment branch"),
    Key("sasd.k", ("sasd", "k"), int, LOCAL, "top rows averaged into the context feature"),
    Key("sasd.loops", ("sasd", "loops"), int, LOCAL, "self-distillation rounds"),
    Key("sasd.iters", ("sasd", "trainer", "iters"), int, LOCAL, "gradient steps per round"),
    Key("sasd.lr", ("sasd", "trainer", "lr"), float, LOCAL, "initial step size per round"),
    Key("sasd.standardize", ("sasd", "standardize"), bool, LOCAL,
        "standardize enhanced features per column"),
    Key("affinity.zeta_g", ("affinity", "zeta_g"), float, LOCAL, "global bandwidth, image plane"),
    Key("affinity.sigma_g", ("affinity", "sigma_g"), float, LOCAL, "global bandwidth, feature planes"),
    Key("affinity.zeta_l", ("affinity", "zeta_l"), float, LOCAL, "local bandwidth, image plane"),
    Key("affinity.sigma_l", ("affinity", "sigma_l"), float, LOCAL, "local bandwidth, feature planes"),
    Key("affinity.kernel_sizes", ("affinity", "kernel_sizes"), list, REF,
        "local kernel size per pyramid level, comma separated"),
    Key("affinity.image_kernel", ("affinity", "image_kernel"), int, REF, "local kernel size on the image"),
    Key("affinity.cascade_blocks", ("affinity", "cascade_blocks"), int, REF, "local filtering passes"),
    Key("affinity.lambda_I", ("affinity", "lambda_I"), float, REF, "blend weight, image plane"),
    Key("affinity.lambda_S", ("affinity", "lambda_S"), float, REF, "blend weight, feature planes"),
    Key("affinity.literal_normalizer", ("affinity", "literal_normalizer"), bool, LOCAL,
        "normalize the tree filter by the raw weight sum instead of the filtered ones"),
]
BY_NAME = {k.name: k for k in KEYS}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_value(key: Key, text: str):
    text = text.strip()
    try:
        if key.kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError("expected true or false")
        if key.kind is list:
            return [int(v) for v in text.replace(" ", "").split(",") if v]
        return key.kind(text)
    except ValueError as exc:
        raise ConfigError(f"{key.name}: cannot parse {text!r} ({exc})") from None


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return str(v)


def get_value(cfg: PipelineConfig, key: Key):
    obj = cfg
    for attr in key.path:
        obj = getattr(obj, attr)
    return obj


def defaults() -> dict[str, object]:
    base = PipelineConfig()
    return {k.name: get_value(base, k) for k in KEYS}


def parse_text(text: str, where: str = "config") -> dict[str, object]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, object] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{n}: expected key = value")
        name, value = (s.strip() for s in line.split("=", 1))
        if name not in BY_NAME:
            raise ConfigError(f"{where}:{n}: unknown key {name!r}")
        out[name] = parse_value(BY_NAME[name], value)
    return out


def load_file(path) -> dict[str, object]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_text(text, str(path))


def _set(obj, path: tuple[str, ...], value):
    if len(path) == 1:
        return dataclasses.replace(obj, **{path[0]: value})
    child = _set(getattr(obj, path[0]), path[1:], value)
    return dataclasses.replace(obj, **{path[0]: child})


def build(values: dict[str, object]) -> PipelineConfig:
    """Apply ``values`` over the defaults; each module config validates its own fields."""
    cfg = PipelineConfig()
    for name in sorted(values):
        key = BY_NAME.get(name)
        if key is None:
            raise ConfigError(f"unknown key {name!r}")
        try:
            cfg = _set(cfg, key.path, values[name])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from None
    return cfg


def dump(cfg: PipelineConfig) -> str:
    return "".join(f"{k.name} = {format_value(get_value(cfg, k))}\n" for k in KEYS)
