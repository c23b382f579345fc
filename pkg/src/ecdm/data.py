"""Synthetic paired visible/thermal scenes, dataset writing and manifest I/O.

Directory layout written by :func:`generate_dataset`::

    <root>/visible/<id>.png        RGB visible rendering
    <root>/thermal/<id>.png        grayscale thermal rendering
    <root>/edges/<id>.png          thermal edge condition, [-1, 1] -> [0, 255]
    <root>/manifest.json           thermal manifest
    <root>/manifest_visible.json   visible manifest (same ids and boxes)

Images map [-1, 1] <-> [0, 255] affinely.
"""

from __future__ import annotations

import json
import os
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from .edges import HighPassConfig, edge_condition

CLASSES = ("person", "car")
SHAPES = ("rect", "ellipse")
MODALITIES = ("visible", "thermal", "edge")
SPLITS = ("train", "val", "test")
SOURCES = ("real", "pseudo")
MIN_OBJECT_AREA = 4
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class ManifestError(ValueError):
    """A manifest violates its schema; the message names the offending record."""


# ---------------------------------------------------------------------------
# image encoding


def to_uint8(x) -> np.ndarray:
    """[-1, 1] float array (H, W) or (C, H, W) -> uint8 (H, W) or (H, W, C)."""
    a = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    a = np.clip((a + 1.0) * 127.5, 0.0, 255.0)
    a = np.floor(a + 0.5).astype(np.uint8)
    if a.ndim == 3:
        a = a[0] if a.shape[0] == 1 else np.transpose(a, (1, 2, 0))
    return a


def from_uint8(a: np.ndarray) -> np.ndarray:
    """uint8 (H, W) or (H, W, C) -> float32 (C, H, W) in [-1, 1]."""
    a = np.asarray(a, dtype=np.float32)
    if a.ndim == 2:
        a = a[None]
    else:
        a = np.transpose(a, (2, 0, 1))
    return a / 127.5 - 1.0


def save_image(x, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(x)).save(path, format="PNG")


def load_image(path: str | os.PathLike, channels: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        if channels == 1:
            im = im.convert("L")
        elif channels == 3:
            im = im.convert("RGB")
        elif im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return from_uint8(np.array(im))


# ---------------------------------------------------------------------------
# scenes


@dataclass
class SceneObject:
    shape: str
    cls: str
    x: int
    y: int
    w: int
    h: int
    temperature: float

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.cls not in CLASSES:
            raise ValueError(f"unknown class {self.cls!r}")
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError(f"temperature must be in [0, 1], got {self.temperature}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError("object size must be positive")


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 80
    objects: list[SceneObject] = field(default_factory=list)
    texture_amplitude: float = 0.15
    illumination: float = 0.8
    background_temperature: float = 0.2

    def __post_init__(self):
        for i, o in enumerate(self.objects):
            if o.x < 0 or o.y < 0 or o.x + o.w > self.width or o.y + o.h > self.height:
                raise ValueError(f"object {i} ({o.x},{o.y},{o.w},{o.h}) leaves the {self.width}x{self.height} canvas")
        if not 0.0 < self.illumination <= 1.0:
            raise ValueError("illumination must lie in (0, 1]")


def object_mask(obj: SceneObject, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    if obj.shape == "rect":
        return (xx >= obj.x) & (xx < obj.x + obj.w) & (yy >= obj.y) & (yy < obj.y + obj.h)
    cx, cy = obj.x + (obj.w - 1) / 2.0, obj.y + (obj.h - 1) / 2.0
    rx, ry = obj.w / 2.0, obj.h / 2.0
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def visible_masks(spec: SceneSpec) -> list[np.ndarray]:
    """Per-object silhouettes after occlusion by later objects (painter's order)."""
    masks = [object_mask(o, spec.height, spec.width) for o in spec.objects]
    out = []
    for i, m in enumerate(masks):
        m = m.copy()
        for later in masks[i + 1 :]:
            m &= ~later
        out.append(m)
    return out


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    """Bilinearly upsampled coarse noise, roughly in [-1, 1]."""
    gh, gw = h // cell + 2, w // cell + 2
    coarse = rng.uniform(-1.0, 1.0, size=(gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


def _stripes(h: int, w: int, angle: float, period: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    phase = (xx * np.cos(angle) + yy * np.sin(angle)) * (2 * np.pi / period)
    return np.sign(np.sin(phase))


def thermal_level(temperature: float) -> float:
    """Thermal intensity in [-1, 1]; strictly increasing in temperature."""
    return -0.8 + 1.6 * temperature


def render_pair(spec: SceneSpec, seed: int = 0) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int, int, int]]]:
    """Render a scene as (visible (3, H, W), thermal (1, H, W), boxes).

    Both renderings share silhouettes exactly.  The visible image carries
    per-object stripe texture and a textured background scaled by the
    illumination; the thermal image is flat apart from a faint smooth
    background drift.  Boxes are ``(x, y, w, h)`` tight bounds of each
    object's visible silhouette.
    """
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    masks = visible_masks(spec)
    for i, m in enumerate(masks):
        if m.sum() < MIN_OBJECT_AREA:
            raise ValueError(f"object {i} has only {int(m.sum())} visible pixels (< {MIN_OBJECT_AREA})")

    # thermal: smooth, low texture
    drift = 0.05 * _smooth_noise(rng, h, w, cell=32)
    thermal = np.full((h, w), thermal_level(spec.background_temperature)) + drift
    for o, m in zip(spec.objects, masks):
        thermal[m] = thermal_level(o.temperature) + 0.5 * drift[m]

    # visible: albedo + texture, scaled by illumination, in [0, 1] before mapping
    bg_color = rng.uniform(0.35, 0.65, size=3)
    bg_tex = spec.texture_amplitude * (
        0.6 * _smooth_noise(rng, h, w, cell=4)
        + 0.4 * _stripes(h, w, rng.uniform(0, np.pi), rng.uniform(6.0, 10.0))
    )
    vis = bg_color[:, None, None] + bg_tex[None]
    for o, m in zip(spec.objects, masks):
        color = rng.uniform(0.1, 0.9, size=3)
        tex = 0.25 * _stripes(h, w, rng.uniform(0, np.pi), rng.uniform(3.0, 6.0))
        vis[:, m] = color[:, None] + tex[m][None]
    vis = np.clip(spec.illumination * vis, 0.0, 1.0) * 2.0 - 1.0
    thermal = np.clip(thermal, -1.0, 1.0)

    boxes = []
    for m in masks:
        ys, xs = np.nonzero(m)
        boxes.append((int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)))
    return vis.astype(np.float32), thermal[None].astype(np.float32), boxes


def random_scene(rng: np.random.Generator, height: int = 64, width: int = 80, max_objects: int = 3) -> SceneSpec:
    # object sizes are tuned for the 64x80 canvas and shrink with smaller ones
    scale = min(height / 64, width / 80, 1.0)

    def size(lo: int, hi: int) -> int:
        return int(rng.integers(max(2, round(lo * scale)), max(3, round(hi * scale))))

    objects = []
    for _ in range(int(rng.integers(1, max_objects + 1))):
        cls = CLASSES[int(rng.integers(0, len(CLASSES)))]
        if cls == "person":
            ow, oh = size(7, 14), size(18, 32)
            shape = "ellipse"
            temp = float(rng.uniform(0.75, 1.0))
        else:
            ow, oh = size(18, 32), size(9, 16)
            shape = "rect"
            temp = float(rng.uniform(0.5, 0.8))
        ox = int(rng.integers(0, width - ow + 1))
        oy = int(rng.integers(0, height - oh + 1))
        objects.append(SceneObject(shape, cls, ox, oy, ow, oh, temp))
    spec = SceneSpec(
        height,
        width,
        objects,
        texture_amplitude=float(rng.uniform(0.1, 0.25)),
        illumination=float(rng.uniform(0.5, 1.0)),
        background_temperature=float(rng.uniform(0.1, 0.35)),
    )
    # drop objects that end up (nearly) fully occluded
    keep = [o for o, m in zip(objects, visible_masks(spec)) if m.sum() >= MIN_OBJECT_AREA]
    spec.objects = keep
    return spec


# ---------------------------------------------------------------------------
# manifests


@dataclass
class DetectionRecord:
    id: str
    image: str
    width: int
    height: int
    boxes: list[list[float]] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)
    source: str = "real"

    def validate(self) -> None:
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        if len(self.boxes) != len(self.labels):
            raise ValueError(f"{len(self.boxes)} boxes but {len(self.labels)} labels")
        for j, box in enumerate(self.boxes):
            if len(box) != 4:
                raise ValueError(f"box {j} is not [x, y, w, h]")
            x, y, bw, bh = box
            if bw <= 0 or bh <= 0:
                raise ValueError(f"box {j} has non-positive size")
            if x < 0 or y < 0 or x + bw > self.width or y + bh > self.height:
                raise ValueError(f"box {j} {list(box)} exceeds {self.width}x{self.height} image")
        for lab in self.labels:
            if not 0 <= int(lab) < len(CLASSES):
                raise ValueError(f"label {lab} outside class vocabulary")


@dataclass
class DatasetManifest:
    name: str
    split: str = "train"
    modality: str = "thermal"
    records: list[DetectionRecord] = field(default_factory=list)
    categories: list[str] = field(default_factory=lambda: list(CLASSES))
    root: str | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.records)

    def path_of(self, record: DetectionRecord) -> Path:
        p = Path(record.image)
        return p if p.is_absolute() or self.root is None else Path(self.root) / p

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "split": self.split,
            "modality": self.modality,
            "categories": list(self.categories),
            "records": [asdict(r) for r in self.records],
        }


def manifest_from_dict(d: dict, root: str | None = None, check_paths: bool = False) -> DatasetManifest:
    for key in ("name", "split", "modality", "records"):
        if key not in d:
            raise ManifestError(f"manifest missing field {key!r}")
    if d["split"] not in SPLITS:
        raise ManifestError(f"split must be one of {SPLITS}, got {d['split']!r}")
    if d["modality"] not in MODALITIES:
        raise ManifestError(f"modality must be one of {MODALITIES}, got {d['modality']!r}")
    records = []
    seen = set()
    for i, raw in enumerate(d["records"]):
        try:
            rec = DetectionRecord(
                id=str(raw["id"]),
                image=str(raw["image"]),
                width=int(raw["width"]),
                height=int(raw["height"]),
                boxes=[[float(v) if not float(v).is_integer() else int(v) for v in b] for b in raw.get("boxes", [])],
                labels=[int(v) for v in raw.get("labels", [])],
                source=str(raw.get("source", "real")),
            )
            rec.validate()
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"record {i} ({raw.get('id', '?') if isinstance(raw, dict) else '?'}): {exc}") from None
        if rec.id in seen:
            raise ManifestError(f"record {i}: duplicate id {rec.id!r}")
        seen.add(rec.id)
        records.append(rec)
    m = DatasetManifest(d["name"], d["split"], d["modality"], records, list(d.get("categories", CLASSES)), root)
    if check_paths:
        for i, rec in enumerate(records):
            if not m.path_of(rec).exists():
                raise ManifestError(f"record {i} ({rec.id}): missing image {m.path_of(rec)}")
    return m


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_manifest(path: str | os.PathLike, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from None
    return manifest_from_dict(d, root=str(path.parent), check_paths=check_paths)


def check_disjoint(a: DatasetManifest, b: DatasetManifest) -> None:
    shared = {r.id for r in a.records} & {r.id for r in b.records}
    if shared:
        raise ManifestError(f"splits share {len(shared)} ids, e.g. {sorted(shared)[:3]}")


# ---------------------------------------------------------------------------
# dataset generation


@dataclass
class GenConfig:
    height: int = 64
    width: int = 80
    max_objects: int = 3
    highpass: HighPassConfig = field(default_factory=HighPassConfig)


def record_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def generate_dataset(
    n: int,
    out_dir: str | os.PathLike,
    seed: int = 0,
    cfg: GenConfig | None = None,
    split: str = "train",
    name: str = "synthetic",
) -> DatasetManifest:
    """Write ``n`` paired renderings plus edges and manifests; returns the thermal manifest."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    cfg = cfg or GenConfig()
    root = Path(out_dir)
    try:
        for sub in ("visible", "thermal", "edges"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    thermal_records, visible_records = [], []
    for i in range(n):
        rs = record_seed(seed, i)
        spec = random_scene(np.random.default_rng(rs), cfg.height, cfg.width, cfg.max_objects)
        vis, tir, boxes = render_pair(spec, seed=rs)
        rid = f"{split}_{i:05d}"
        save_image(vis, root / "visible" / f"{rid}.png")
        save_image(tir, root / "thermal" / f"{rid}.png")
        # edges are extracted from the 8-bit thermal image so they re-derive exactly from disk
        tir_q = torch.from_numpy(from_uint8(to_uint8(tir)))
        save_image(edge_condition(tir_q, cfg.highpass), root / "edges" / f"{rid}.png")
        labels = [CLASSES.index(o.cls) for o in spec.objects]
        blist = [list(b) for b in boxes]
        thermal_records.append(DetectionRecord(rid, f"thermal/{rid}.png", cfg.width, cfg.height, blist, labels))
        visible_records.append(DetectionRecord(rid, f"visible/{rid}.png", cfg.width, cfg.height, [list(b) for b in boxes], list(labels)))
    m_tir = DatasetManifest(name, split, "thermal", thermal_records, root=str(root))
    m_vis = DatasetManifest(name, split, "visible", visible_records, root=str(root))
    save_manifest(m_tir, root / "manifest.json")
    save_manifest(m_vis, root / "manifest_visible.json")
    (root / "highpass.json").write_text(json.dumps(cfg.highpass.to_dict(), sort_keys=True) + "\n")
    return m_tir


def load_images(manifest: DatasetManifest, channels: int | None = None) -> torch.Tensor:
    """Stack every record's image into one (N, C, H, W) float tensor in [-1, 1]."""
    arrays = [load_image(manifest.path_of(r), channels) for r in manifest.records]
    return torch.from_numpy(np.stack(arrays))


# ---------------------------------------------------------------------------
# LLVIP-style paired folders


def _parse_voc(path: Path) -> tuple[list[list[int]], list[int]]:
    boxes, labels = [], []
    tree = ET.parse(path)
    for obj in tree.getroot().iter("object"):
        name = (obj.findtext("name") or "").strip().lower()
        if name not in CLASSES:
            continue
        bb = obj.find("bndbox")
        x1, y1, x2, y2 = (int(float(bb.findtext(k))) for k in ("xmin", "ymin", "xmax", "ymax"))
        boxes.append([x1, y1, x2 - x1, y2 - y1])
        labels.append(CLASSES.index(name))
    return boxes, labels


def load_paired_folders(root: str | os.PathLike, split: str = "train", name: str = "llvip") -> tuple[DatasetManifest, DatasetManifest]:
    """Map ``<root>/{visible,infrared}/<split>/*`` (+ optional ``Annotations/<id>.xml``)
    to a visible and a thermal manifest sharing ids."""
    root = Path(root)
    vis_dir, ir_dir = root / "visible" / split, root / "infrared" / split
    if not vis_dir.is_dir() or not ir_dir.is_dir():
        raise ManifestError(f"expected {vis_dir} and {ir_dir}")
    vis_files = {p.stem: p for p in vis_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    ir_files = {p.stem: p for p in ir_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    unpaired = set(vis_files) ^ set(ir_files)
    if unpaired:
        raise ManifestError(f"unpaired images: {sorted(unpaired)[:5]}")
    vis_recs, ir_recs = [], []
    for rid in sorted(vis_files):
        with Image.open(ir_files[rid]) as im:
            w, h = im.size
        ann = root / "Annotations" / f"{rid}.xml"
        boxes, labels = _parse_voc(ann) if ann.exists() else ([], [])
        for recs, path in ((vis_recs, vis_files[rid]), (ir_recs, ir_files[rid])):
            rec = DetectionRecord(rid, str(path.relative_to(root)), w, h, [list(b) for b in boxes], list(labels))
            try:
                rec.validate()
            except ValueError as exc:
                raise ManifestError(f"record {rid}: {exc}") from None
            recs.append(rec)
    return (
        DatasetManifest(name, split, "visible", vis_recs, root=str(root)),
        DatasetManifest(name, split, "thermal", ir_recs, root=str(root)),
    )
