"""Image-quality and distribution metrics: FID, KID, PSNR, SSIM.

FID/KID operate on feature matrices (rows are samples).  At desk scale the
features come from :class:`FeatureExtractor`, a frozen random convolutional
projection whose weights are a pure function of its seed.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from numpy.lib.stride_tricks import sliding_window_view

from .data import IMAGE_SUFFIXES, load_image
from .edges import to_luminance

SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class SingularCovarianceWarning(RuntimeWarning):
    pass


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    """trace((a b)^{1/2}) for PSD a, b via the symmetric form a^{1/2} b a^{1/2}."""
    ra = _sqrtm_psd(a)
    w = np.linalg.eigvalsh(ra @ b @ ra)
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def _stats(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return feats.mean(axis=0), np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1])


def fid(feats_a, feats_b) -> float:
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature matrices must be 2-D with equal widths, got {a.shape} and {b.shape}")
    d = a.shape[1]
    if min(len(a), len(b)) < d + 1:
        raise ValueError(f"need at least {d + 1} samples per side for {d}-dim features, got {len(a)} and {len(b)}")
    mu_a, cov_a = _stats(a)
    mu_b, cov_b = _stats(b)
    tol = 1e-10 * max(1.0, float(np.abs(cov_a).max()), float(np.abs(cov_b).max()))
    if min(np.linalg.eigvalsh(cov_a).min(), np.linalg.eigvalsh(cov_b).min()) <= tol:
        warnings.warn("singular feature covariance; adding 1e-6 * I", SingularCovarianceWarning, stacklevel=2)
        cov_a = cov_a + 1e-6 * np.eye(d)
        cov_b = cov_b + 1e-6 * np.eye(d)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * _trace_sqrt_product(cov_a, cov_b))
    return max(value, 0.0)


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kid(feats_a, feats_b) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel.

    For equal sample counts the cross term also drops its diagonal (the
    paired U-statistic), so identical sets score exactly zero.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise ValueError(f"KID needs at least 2 samples per side, got {m} and {n}")
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature widths differ")
    kaa, kbb, kab = polynomial_kernel(a, a), polynomial_kernel(b, b), polynomial_kernel(a, b)
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    if m == n:
        cross = (kab.sum() - np.trace(kab)) / (m * (m - 1))
    else:
        cross = kab.mean()
    return float(term_a + term_b - 2.0 * cross)


def _to_unit(x) -> np.ndarray:
    a = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    return (a.astype(np.float64) + 1.0) / 2.0


def psnr(a, b) -> float:
    """PSNR in dB of [-1, 1] images after mapping to [0, 1]; ``inf`` when identical."""
    ua, ub = _to_unit(a), _to_unit(b)
    if ua.shape != ub.shape:
        raise ValueError(f"shape mismatch: {ua.shape} vs {ub.shape}")
    err = float(np.mean((ua - ub) ** 2))
    return math.inf if err == 0.0 else -10.0 * math.log10(err)


def psnr_from_mse(err: float) -> float:
    return math.inf if err == 0.0 else -10.0 * math.log10(err)


def _ssim_2d(x: np.ndarray, y: np.ndarray) -> float:
    wx = sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
    wy = sliding_window_view(y, (SSIM_WINDOW, SSIM_WINDOW))
    mx, my = wx.mean(axis=(-2, -1)), wy.mean(axis=(-2, -1))
    vx = wx.var(axis=(-2, -1))
    vy = wy.var(axis=(-2, -1))
    cxy = (wx * wy).mean(axis=(-2, -1)) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx**2 + my**2 + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Mean SSIM over 8x8 sliding windows on [0, 1]-mapped images (channels/batch averaged)."""
    ua, ub = _to_unit(a), _to_unit(b)
    if ua.shape != ub.shape:
        raise ValueError(f"shape mismatch: {ua.shape} vs {ub.shape}")
    if ua.shape[-1] < SSIM_WINDOW or ua.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    fa = ua.reshape(-1, *ua.shape[-2:])
    fb = ub.reshape(-1, *ub.shape[-2:])
    return float(np.mean([_ssim_2d(x, y) for x, y in zip(fa, fb)]))


@dataclass(frozen=True)
class FeatureExtractor:
    """Frozen random-weight conv embedding; features depend only on (seed, feature_dim)."""

    seed: int = 0
    feature_dim: int = 64
    kind: str = "random-projection-conv"
    widths: tuple[int, ...] = (16, 32, 32)

    def __post_init__(self):
        if self.kind != "random-projection-conv":
            raise ValueError(f"unsupported extractor kind {self.kind!r}; external extractors are not bundled")

    def _weights(self):
        g = torch.Generator().manual_seed(int(self.seed))
        convs, cin = [], 1
        for c in self.widths:
            w = torch.randn((c, cin, 3, 3), generator=g, dtype=torch.float64) / math.sqrt(9 * cin)
            convs.append(w)
            cin = c
        n_pooled = cin * 16 + sum(self.widths) * 2
        proj = torch.randn((n_pooled, self.feature_dim), generator=g, dtype=torch.float64) / math.sqrt(n_pooled)
        return convs, proj

    @torch.no_grad()
    def __call__(self, images) -> np.ndarray:
        x = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images)
        x = x.to(torch.float64)
        if x.ndim == 3:
            x = x[:, None]
        x = to_luminance(x)
        convs, proj = self._weights()
        pooled = []
        h = x
        for w in convs:
            h = torch.tanh(F.conv2d(h, w, padding=1))
            pooled += [h.mean(dim=(-2, -1)), h.abs().mean(dim=(-2, -1))]
            h = F.avg_pool2d(h, 2)
        pooled.append(F.adaptive_avg_pool2d(h, 4).flatten(1))
        feats = torch.cat(pooled, dim=1) @ proj
        return feats.numpy()


@dataclass
class MetricsReport:
    fid: float | None
    kid: float | None
    psnr_mean: float | None
    ssim_mean: float | None
    n_gen: int
    n_ref: int
    extractor_seed: int
    feature_dim: int
    n_paired: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        # JSON has no inf; identical images are reported as the string "inf"
        if d["psnr_mean"] is not None and math.isinf(d["psnr_mean"]):
            d["psnr_mean"] = "inf"
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        if d.get("psnr_mean") == "inf":
            d["psnr_mean"] = math.inf
        return cls(**d)


def _list_images(directory: Path) -> dict[str, Path]:
    return {p.name: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def evaluate_set(gen_dir, ref_dir, extractor: FeatureExtractor | None = None) -> MetricsReport:
    extractor = extractor or FeatureExtractor()
    gen_files, ref_files = _list_images(Path(gen_dir)), _list_images(Path(ref_dir))
    if not gen_files or not ref_files:
        raise ValueError(f"no images in {gen_dir if not gen_files else ref_dir}")
    gen = np.stack([load_image(p, channels=1) for p in gen_files.values()])
    ref = np.stack([load_image(p, channels=1) for p in ref_files.values()])
    notes: list[str] = []
    fa, fb = extractor(gen), extractor(ref)
    fid_value = kid_value = None
    if min(len(fa), len(fb)) >= extractor.feature_dim + 1:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            fid_value = fid(fa, fb)
        if caught:
            notes.append("fid_singular_covariance")
    else:
        notes.append("fid_skipped_too_few_samples")
    if min(len(fa), len(fb)) >= 2:
        kid_value = kid(fa, fb)
    paired = sorted(set(gen_files) & set(ref_files))
    psnr_mean = ssim_mean = None
    if paired:
        g = {n: i for i, n in enumerate(gen_files)}
        r = {n: i for i, n in enumerate(ref_files)}
        psnrs = [psnr(gen[g[n]], ref[r[n]]) for n in paired]
        psnr_mean = math.inf if all(math.isinf(p) for p in psnrs) else float(np.mean([p for p in psnrs if not math.isinf(p)]))
        ssim_mean = float(np.mean([ssim(gen[g[n]], ref[r[n]]) for n in paired]))
    else:
        notes.append("no_paired_filenames")
    return MetricsReport(fid_value, kid_value, psnr_mean, ssim_mean, len(gen), len(ref), extractor.seed, extractor.feature_dim, len(paired), notes)
