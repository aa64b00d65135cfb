"""Representative-image selection and augmentation for clip-free quantization.

A candidate representative image (RI) is judged by the response of the
no-clip FP32 model alone:

* an *outlier* is an output pixel with any channel ``> 255`` or ``< 0``;
* a *good* RI satisfies all four checks in :meth:`Thresholds.judge`;
* a *bad* RI is blurred three ways (global, local box, local point) and the
  candidate with the fewest outliers is kept.

HR outlier coordinates map to LR pixels by floor division by the model scale.
Blurs operate on the grayscale RI, i.e. the tensor that is actually fed to
calibration.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import zoo
from .engine import as_tensor, box_blur3
from .errors import ContractError, FormatError

NONE, GB, LIBB, LIPB = "none", "GB", "LIBB", "LIPB"
# tie-break order among candidates with equal outlier count and pixels modified
METHOD_ORDER = (LIPB, LIBB, GB)


@dataclass(frozen=True)
class Thresholds:
    minmax_diff_max: float = 5.0
    deviation_max: float = 5.0
    outlier_count_max: int = 25
    shift_max: float = 10.0
    iter_max: int = 10
    strict_zero: bool = False

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "strict_zero" and v < 0:
                raise ValueError(f"threshold {k} must be nonnegative, got {v}")

    @property
    def max_outliers(self) -> int:
        return 0 if self.strict_zero else self.outlier_count_max

    def checks(self, r: "RIReport") -> dict:
        return {
            "outliers": r.outlier_count <= self.max_outliers,
            "minmax": r.minmax_gap <= self.minmax_diff_max,
            "deviation": r.deviation <= self.deviation_max,
            "shift": r.shift <= self.shift_max,
        }

    def judge(self, r: "RIReport") -> str:
        return "good" if all(self.checks(r).values()) else "bad"

    @classmethod
    def from_json(cls, d: dict) -> "Thresholds":
        known = {k: d[k] for k in asdict(cls()) if k in d}
        if "libb_lipb_iter_max" in d:
            known["iter_max"] = d["libb_lipb_iter_max"]
        unknown = set(d) - set(asdict(cls())) - {"libb_lipb_iter_max", "schema_version"}
        if unknown:
            raise FormatError(f"unknown threshold keys: {sorted(unknown)}")
        return cls(**known)


@dataclass
class RIReport:
    """FP32 response statistics of one candidate RI.

    ``minmax_gap`` is ``max(|out_min - 0|, |out_max - 255|)``; ``deviation``
    is ``max(|out_min - in_min|, |out_max - in_max|)``; ``shift`` is the
    change of mean intensity ``|mean(out) - mean(in)|``.
    """

    outlier_count: int
    outlier_mask: np.ndarray
    out_min: float
    out_max: float
    in_min: float
    in_max: float
    minmax_gap: float
    deviation: float
    shift: float
    verdict: str = ""
    checks: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "outlier_mask"}
        d["outlier_pixels"] = [[int(r), int(c)] for r, c in np.argwhere(self.outlier_mask)]
        return d


@dataclass
class AugmentationResult:
    method: str
    image: np.ndarray
    outlier_count: int
    iterations_used: int
    pixels_modified: int
    original_outlier_count: int = 0
    candidates: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "method": self.method,
            "on_before": self.original_outlier_count,
            "on_after": self.outlier_count,
            "iterations_used": self.iterations_used,
            "pixels_modified": self.pixels_modified,
            "candidates": self.candidates,
        }


def _require_noclip(m: zoo.ModelGraph) -> None:
    if m.clipped:
        raise ContractError(
            f"model {m.name!r} is clipped: its output is always within [0, 255], so outlier "
            "statistics are vacuous; use the no-clip variant")


def outlier_mask(out: np.ndarray) -> np.ndarray:
    return np.any((out > 255) | (out < 0), axis=2)


def outlier_stats(m: zoo.ModelGraph, img, thr: Thresholds | None = None) -> RIReport:
    _require_noclip(m)
    thr = thr or Thresholds()
    img = as_tensor(img)
    out = zoo.forward(m, img).astype(np.float64)
    mask = outlier_mask(out)
    x = img.astype(np.float64)
    o_min, o_max, i_min, i_max = float(out.min()), float(out.max()), float(x.min()), float(x.max())
    rep = RIReport(
        outlier_count=int(mask.sum()),
        outlier_mask=mask,
        out_min=o_min, out_max=o_max, in_min=i_min, in_max=i_max,
        minmax_gap=max(abs(o_min), abs(o_max - 255.0)),
        deviation=max(abs(o_min - i_min), abs(o_max - i_max)),
        shift=abs(float(out.mean()) - float(x.mean())),
    )
    rep.checks = thr.checks(rep)
    rep.verdict = thr.judge(rep)
    return rep


def to_grayscale_ri(img) -> np.ndarray:
    """BT.601 luma replicated to three channels; exact on pixels with R == G == B."""
    img = as_tensor(img)
    x = img.astype(np.float64)
    y = 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]
    gray = (x[..., 0] == x[..., 1]) & (x[..., 1] == x[..., 2])
    y = np.where(gray, x[..., 0], y)
    return np.repeat(y[..., None], 3, axis=2).astype(img.dtype)


def global_blur(img) -> np.ndarray:
    """One pass of the 3x3 mean filter over the whole image (never iterated)."""
    return box_blur3(img)


def _lr_points(mask: np.ndarray, scale: int, lr_shape) -> np.ndarray:
    pts = np.unique(np.argwhere(mask) // scale, axis=0)
    keep = (pts[:, 0] < lr_shape[0]) & (pts[:, 1] < lr_shape[1])
    return pts[keep]


def _iterate(m, img, thr, region_fn, method) -> AugmentationResult:
    _require_noclip(m)
    img = as_tensor(img)
    x = img.copy()
    touched = np.zeros(img.shape[:2], dtype=bool)
    mask = outlier_mask(zoo.forward(m, x))
    on0 = int(mask.sum())
    it = 0
    while mask.any() and it < thr.iter_max:
        region = region_fn(mask, m.scale, x.shape[:2])
        blurred = box_blur3(x)
        x = np.where(region[..., None], blurred, x)
        touched |= region
        it += 1
        mask = outlier_mask(zoo.forward(m, x))
    return AugmentationResult(method, x, int(mask.sum()), it, int(touched.sum()), on0)


def _box_region(mask, scale, lr_shape) -> np.ndarray:
    rows, cols = np.nonzero(mask)
    r0, r1 = rows.min() // scale, min(rows.max() // scale, lr_shape[0] - 1)
    c0, c1 = cols.min() // scale, min(cols.max() // scale, lr_shape[1] - 1)
    region = np.zeros(lr_shape, dtype=bool)
    region[r0:r1 + 1, c0:c1 + 1] = True
    return region


def _point_region(mask, scale, lr_shape) -> np.ndarray:
    region = np.zeros(lr_shape, dtype=bool)
    pts = _lr_points(mask, scale, lr_shape)
    region[pts[:, 0], pts[:, 1]] = True
    return region


def local_iterative_box_blur(m: zoo.ModelGraph, img, thr: Thresholds | None = None) -> AugmentationResult:
    """Blur the LR bounding box of all outliers, recomputed every iteration.

    Stops when no outliers remain or after ``thr.iter_max`` iterations.
    ``pixels_modified`` counts distinct LR pixels inside any applied box.
    """
    return _iterate(m, img, thr or Thresholds(), _box_region, LIBB)


def local_iterative_point_blur(m: zoo.ModelGraph, img, thr: Thresholds | None = None) -> AugmentationResult:
    """Replace only the LR pixels under HR outliers with their 3x3 mean, iteratively."""
    return _iterate(m, img, thr or Thresholds(), _point_region, LIPB)


def global_blur_candidate(m: zoo.ModelGraph, img) -> AugmentationResult:
    _require_noclip(m)
    img = as_tensor(img)
    on0 = int(outlier_mask(zoo.forward(m, img)).sum())
    if on0 == 0:
        return AugmentationResult(GB, img.copy(), 0, 0, 0, 0)
    out = global_blur(img)
    on = int(outlier_mask(zoo.forward(m, out)).sum())
    return AugmentationResult(GB, out, on, 1, img.shape[0] * img.shape[1], on0)


def select_candidate(cands: list) -> AugmentationResult:
    """Fewest outliers, then fewest modified pixels, then LIPB < LIBB < GB."""
    return min(cands, key=lambda c: (c.outlier_count, c.pixels_modified, METHOD_ORDER.index(c.method)))


def cfqp(m: zoo.ModelGraph, img, thr: Thresholds | None = None) -> AugmentationResult:
    """Clip-free quantization pipeline for one candidate image.

    Converts to a grayscale RI, returns it untouched when it already passes
    the good-RI checks, and otherwise returns the least-outlier blur.
    """
    _require_noclip(m)
    thr = thr or Thresholds()
    ri = to_grayscale_ri(img)
    rep = outlier_stats(m, ri, thr)
    if rep.verdict == "good":
        return AugmentationResult(NONE, ri, rep.outlier_count, 0, 0, rep.outlier_count)
    cands = [global_blur_candidate(m, ri), local_iterative_box_blur(m, ri, thr),
             local_iterative_point_blur(m, ri, thr)]
    best = select_candidate(cands)
    best.original_outlier_count = rep.outlier_count
    best.candidates = {c.method: {"on": c.outlier_count, "iterations": c.iterations_used,
                                  "pixels_modified": c.pixels_modified} for c in cands}
    return best


def provenance_sidecar(res: AugmentationResult, thr: Thresholds, source: str = "") -> str:
    d = res.to_json()
    d["thresholds"] = asdict(thr)
    d["source"] = source
    return json.dumps(d, indent=2) + "\n"
