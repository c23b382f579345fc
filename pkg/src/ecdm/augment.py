"""Pseudo-thermal synthesis and real/pseudo mixing for detection training sets.

Two mixing protocols:

* ``multiple``: keep every real record and add ``round(ratio * n_real)`` pseudo ones.
* ``mixed``: hold the total at ``n_real`` and replace ``round(ratio * n_real)``
  real records by pseudo ones.

Rounding is half-up.
"""

from __future__ import annotations

import dataclasses
import os
import shutil
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np
import torch

from .data import DatasetManifest, DetectionRecord, load_image, record_seed, save_image, save_manifest
from .edges import HighPassConfig, edge_condition
from .samplers import FastSamplerConfig, fast_sample

MODES = ("multiple", "mixed")


@dataclass(frozen=True)
class AugmentPlan:
    mode: str
    ratio: float
    n_real: int
    n_real_used: int
    n_pseudo: int

    @property
    def total(self) -> int:
        return self.n_real_used + self.n_pseudo


def round_half_up(x: float) -> int:
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def plan_counts(n_real: int, ratio: float, mode: str) -> AugmentPlan:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if n_real < 0 or ratio < 0:
        raise ValueError("n_real and ratio must be non-negative")
    if ratio > 1:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    n_pseudo = round_half_up(float(Decimal(repr(ratio)) * n_real))
    n_real_used = n_real if mode == "multiple" else n_real - n_pseudo
    return AugmentPlan(mode, float(ratio), int(n_real), int(n_real_used), int(n_pseudo))


def _hp_mismatch(a: HighPassConfig, b: HighPassConfig) -> bool:
    return a.to_dict() != b.to_dict()


def synthesize_pseudo(
    visible: DatasetManifest,
    model,
    schedule,
    out_dir,
    sampler_cfg: FastSamplerConfig | None = None,
    highpass: HighPassConfig | None = None,
    expected_highpass: HighPassConfig | None = None,
    seed: int = 0,
    batch_size: int = 16,
) -> DatasetManifest:
    """Fast-sample one pseudo thermal image per visible record.

    ``highpass`` is the preprocessing the model was trained with; when the
    caller also states ``expected_highpass`` (the preprocessing of the
    incoming data) the two must agree.  Boxes and labels are copied verbatim.
    """
    highpass = highpass or HighPassConfig()
    if expected_highpass is not None and _hp_mismatch(highpass, expected_highpass):
        raise ValueError(f"edge preprocessing mismatch: checkpoint {highpass} vs data {expected_highpass}")
    sampler_cfg = sampler_cfg or FastSamplerConfig()
    out = Path(out_dir)
    (out / "thermal").mkdir(parents=True, exist_ok=True)
    records = []
    recs = visible.records
    for start in range(0, len(recs), batch_size):
        chunk = recs[start : start + batch_size]
        images = torch.from_numpy(np.stack([load_image(visible.path_of(r), channels=3) for r in chunk]))
        cond = edge_condition(images, highpass)
        noise = torch.stack([
            torch.randn((1, *images.shape[-2:]), generator=torch.Generator().manual_seed(record_seed(seed, start + i)))
            for i in range(len(chunk))
        ])
        with torch.no_grad():
            pseudo = fast_sample(model, cond, schedule, sampler_cfg, x_T=noise)
        for rec, img in zip(chunk, pseudo):
            rid = f"pseudo_{rec.id}"
            save_image(img, out / "thermal" / f"{rid}.png")
            records.append(
                DetectionRecord(rid, f"thermal/{rid}.png", rec.width, rec.height,
                                [list(b) for b in rec.boxes], list(rec.labels), source="pseudo")
            )
    manifest = DatasetManifest(f"{visible.name}-pseudo", visible.split, "thermal", records, list(visible.categories), str(out))
    save_manifest(manifest, out / "manifest.json")
    return manifest


def merge_datasets(real: DatasetManifest, pseudo: DatasetManifest, plan: AugmentPlan, seed: int = 0) -> DatasetManifest:
    """Sample real and pseudo records without replacement per ``plan``.

    Real records keep their original order, pseudo records follow in sampled
    order.  The merged manifest is rooted where the real one is; pseudo image
    paths are rewritten relative to that root.
    """
    if plan.n_real_used > len(real):
        raise ValueError(f"plan needs {plan.n_real_used} real records, only {len(real)} available")
    if plan.n_pseudo > len(pseudo):
        raise ValueError(f"plan needs {plan.n_pseudo} pseudo records, only {len(pseudo)} available")
    rng = np.random.default_rng(seed)
    if plan.n_real_used == len(real):
        real_idx = list(range(len(real)))
    else:
        real_idx = sorted(rng.choice(len(real), size=plan.n_real_used, replace=False).tolist())
    pseudo_idx = rng.choice(len(pseudo), size=plan.n_pseudo, replace=False).tolist() if plan.n_pseudo else []

    def rebase(r: DetectionRecord) -> DetectionRecord:
        path = pseudo.path_of(r).resolve()
        image = os.path.relpath(path, Path(real.root).resolve()) if real.root else str(path)
        return dataclasses.replace(r, image=image, source="pseudo", boxes=[list(b) for b in r.boxes], labels=list(r.labels))

    records = [dataclasses.replace(real.records[i], source="real") for i in real_idx]
    records += [rebase(pseudo.records[i]) for i in pseudo_idx]
    return DatasetManifest(
        f"{real.name}+{pseudo.name}" if plan.n_pseudo else real.name,
        real.split,
        real.modality,
        records,
        list(real.categories),
        real.root,
    )


def materialize(manifest: DatasetManifest, out_dir) -> DatasetManifest:
    """Copy every referenced image under ``out_dir/images`` and write ``out_dir/manifest.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for r in manifest.records:
        src = manifest.path_of(r)
        dst = out / "images" / f"{r.id}{src.suffix}"
        if src.resolve() != dst.resolve():
            shutil.copyfile(src, dst)
        records.append(dataclasses.replace(r, image=os.path.join("images", dst.name)))
    merged = dataclasses.replace(manifest, records=records, root=str(out))
    save_manifest(merged, out / "manifest.json")
    return merged
