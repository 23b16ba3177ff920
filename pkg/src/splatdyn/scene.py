"""Scene manifests (cameras + per-view images/masks/depths) and labeled-cloud sidecars.

Manifest JSON::

    {"input_image": "input.png", "input_mask": "input_mask.png",
     "region_names": ["rubber", "wood"],              # optional, for the static reasoner
     "views": [{"K": [fx, fy, cx, cy], "R": [9 numbers, row-major], "T": [3 numbers],
                "width": W, "height": H, "image": "...", "mask": "...", "depth": "..."}]}

Relative paths resolve against the manifest's directory. ``depth`` may be a
``.npy`` float array (camera z, +inf for empty) or a 16-bit PGM with a
``depth_max`` entry; without ``depth`` the depth map is rasterized from the cloud.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, DepthMap, read_depth_pgm, render_depth
from .materials import MaterialProperties
from .splat import NO_GROUP

SIDECAR_FORMAT = "splatdyn-labels"
NO_GROUP_U32 = 0xFFFFFFFF


class ManifestError(ValueError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


@dataclass
class ViewEntry:
    camera: Camera
    image: Path
    mask: Path
    depth: Path | None = None
    depth_max: float | None = None


@dataclass
class SceneManifest:
    input_image: Path
    input_mask: Path
    views: list
    region_names: list = field(default_factory=list)
    root: Path = Path(".")


def _resolve(root, rel, what, check=True):
    p = Path(rel)
    if not p.is_absolute():
        p = root / p
    if check and not p.exists():
        raise ManifestError(f"{what} not found: {p}", path=str(p))
    return p


def load_manifest(path, check_files=True) -> SceneManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}", path=str(path))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})", path=str(path)) from exc
    root = path.parent
    try:
        views = []
        for i, v in enumerate(doc["views"]):
            cam = Camera.from_json(v)
            depth = v.get("depth")
            views.append(ViewEntry(
                camera=cam,
                image=_resolve(root, v["image"], f"view {i} image", check_files),
                mask=_resolve(root, v["mask"], f"view {i} mask", check_files),
                depth=_resolve(root, depth, f"view {i} depth", check_files) if depth else None,
                depth_max=v.get("depth_max"),
            ))
        return SceneManifest(
            input_image=_resolve(root, doc["input_image"], "input image", check_files),
            input_mask=_resolve(root, doc["input_mask"], "input mask", check_files),
            views=views,
            region_names=list(doc.get("region_names", [])),
            root=root,
        )
    except KeyError as exc:
        raise ManifestError(f"{path}: missing key {exc}", path=str(path)) from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ManifestError):
            raise
        raise ManifestError(f"{path}: {exc}", path=str(path)) from exc


def save_manifest(path, input_image, input_mask, views, region_names=None):
    """``views``: iterable of (Camera, image, mask, depth, depth_max) with paths relative to ``path``."""
    doc = {"input_image": str(input_image), "input_mask": str(input_mask)}
    if region_names:
        doc["region_names"] = list(region_names)
    doc["views"] = []
    for cam, image, mask, depth, depth_max in views:
        entry = cam.to_json()
        entry.update({"image": str(image), "mask": str(mask)})
        if depth is not None:
            entry["depth"] = str(depth)
        if depth_max is not None:
            entry["depth_max"] = depth_max
        doc["views"].append(entry)
    Path(path).write_text(json.dumps(doc, indent=1))


# --- raster I/O ---------------------------------------------------------------------------

def read_image(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_image(path, rgb):
    from PIL import Image

    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path)


def read_labels(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im).astype(np.int64)


def write_labels(path, labels):
    from PIL import Image

    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 65535:
        raise ValueError("labels must fit in 16 bits")
    Image.fromarray(labels.astype(np.uint16)).save(path)


def read_depth(entry: ViewEntry, cloud=None) -> DepthMap:
    cam = entry.camera
    if entry.depth is None:
        if cloud is None:
            raise ManifestError("view has no depth file and no cloud to rasterize")
        return render_depth(cam, cloud)
    if entry.depth.suffix == ".npy":
        d = np.load(entry.depth)
        return DepthMap(width=d.shape[1], height=d.shape[0], depth=d.astype(np.float64))
    if entry.depth_max is None:
        raise ManifestError(f"PGM depth {entry.depth} needs depth_max", path=str(entry.depth))
    return read_depth_pgm(entry.depth, entry.depth_max)


# --- sidecar ------------------------------------------------------------------------------

def _groups_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".groups.u32")


def write_sidecar(path, group_ids, materials):
    """JSON metadata at ``path`` plus ``<stem>.groups.u32`` (little-endian, one per kernel)."""
    path = Path(path)
    groups = np.asarray(group_ids, dtype=np.int64)
    raw = np.where(groups == NO_GROUP, NO_GROUP_U32, groups).astype("<u4")
    bin_path = _groups_path(path)
    bin_path.write_bytes(raw.tobytes())
    doc = {
        "format": SIDECAR_FORMAT,
        "version": 1,
        "count": int(len(groups)),
        "groups_file": bin_path.name,
        "materials": {str(g): m.to_json() for g, m in sorted(materials.items())},
    }
    path.write_text(json.dumps(doc, indent=2))
    return path, bin_path


def read_sidecar(path):
    """Returns (group_ids int64 array with -1 for none, {group: MaterialProperties})."""
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format") != SIDECAR_FORMAT:
        raise ValueError(f"{path}: not a {SIDECAR_FORMAT} sidecar")
    raw = np.frombuffer((path.parent / doc["groups_file"]).read_bytes(), dtype="<u4")
    if len(raw) != doc["count"]:
        raise ValueError(f"{path}: group file holds {len(raw)} entries, expected {doc['count']}")
    groups = np.where(raw == NO_GROUP_U32, NO_GROUP, raw.astype(np.int64))
    materials = {int(g): MaterialProperties.from_json(m) for g, m in doc["materials"].items()}
    return groups, materials
