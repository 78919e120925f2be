"""Scene builders shared by the tests."""

from pointmine.dataset_io import parse_scene


def make_scene(points, bags, width=20, height=20, gt=None, image_id="t"):
    """``points``: (x, y, class) per instance; ``bags``: list of box lists per instance."""
    doc = {
        "image_id": image_id,
        "width": width,
        "height": height,
        "annotations": [
            {"instance_id": i, "point": [float(x), float(y)], "class_id": c}
            for i, (x, y, c) in enumerate(points)
        ],
        "bags": [
            {"instance_id": i, "proposals": [{"box": [float(v) for v in b]} for b in boxes]}
            for i, boxes in enumerate(bags)
        ],
    }
    if gt is not None:
        doc["gt"] = [{"instance_id": i, "box": [float(v) for v in b]} for i, b in enumerate(gt)]
    return parse_scene(doc)
