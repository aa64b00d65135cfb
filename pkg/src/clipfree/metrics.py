"""PSNR/SSIM on the luma channel and test-set evaluation.

Luma is full-range BT.601, ``Y = 0.299 R + 0.587 G + 0.114 B``.  PSNR of two
identical images is reported as :data:`PSNR_CAP` (99 dB) instead of infinity.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import bicubic_resize, modcrop, to_uint8
from .engine import as_tensor
from .errors import StructuralError

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 8
C1 = (0.01 * 255) ** 2
C2 = (0.03 * 255) ** 2


def luma(t) -> np.ndarray:
    t = as_tensor(t).astype(np.float64)
    if t.shape[2] == 1:
        return t[..., 0]
    if t.shape[2] != 3:
        raise StructuralError(f"luma needs 1 or 3 channels, got {t.shape[2]}")
    return t @ LUMA


def _pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise StructuralError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _shave(y: np.ndarray, shave: int) -> np.ndarray:
    if shave <= 0:
        return y
    if 2 * shave >= min(y.shape):
        raise StructuralError(f"shave {shave} leaves nothing of a {y.shape} image")
    return y[shave:-shave, shave:-shave]


def psnr_y(a, b, shave: int = 3) -> float:
    a, b = _pair(a, b)
    ya, yb = _shave(luma(a), shave), _shave(luma(b), shave)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / mse))


def ssim(a, b, shave: int = 0) -> float:
    """Mean SSIM over all 8x8 windows (stride 1, uniform weights) of the luma."""
    a, b = _pair(a, b)
    ya, yb = _shave(luma(a), shave), _shave(luma(b), shave)
    if min(ya.shape) < SSIM_WINDOW:
        raise StructuralError(f"image {ya.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    wa = sliding_window_view(ya, (SSIM_WINDOW, SSIM_WINDOW))
    wb = sliding_window_view(yb, (SSIM_WINDOW, SSIM_WINDOW))
    mu_a = wa.mean(axis=(2, 3))
    mu_b = wb.mean(axis=(2, 3))
    var_a = (wa * wa).mean(axis=(2, 3)) - mu_a ** 2
    var_b = (wb * wb).mean(axis=(2, 3)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(2, 3)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))


@dataclass
class EvalResult:
    testset: str
    model_id: str
    ri_id: str
    image_ids: list
    psnr: list
    ssim: list
    mean_psnr: float
    mean_ssim: float
    baseline: "EvalResult | None" = None
    schema_version: int = 1
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.baseline is not None:
            d["baseline"] = self.baseline.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate_outputs(outputs, references, ids=None, shave: int = 3, **labels) -> EvalResult:
    """Score already-computed SR outputs against HR references."""
    outputs, references = list(outputs), list(references)
    if not references:
        raise StructuralError("empty test set")
    if len(outputs) != len(references):
        raise StructuralError(f"{len(outputs)} outputs for {len(references)} references")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(references))]
    ps, ss = [], []
    for out, ref in zip(outputs, references):
        out = to_uint8(out).astype(np.float32)
        ps.append(psnr_y(out, ref, shave))
        ss.append(ssim(out, ref, shave))
    return EvalResult(testset=labels.get("testset", ""), model_id=labels.get("model_id", ""),
                      ri_id=labels.get("ri_id", ""), image_ids=ids, psnr=ps, ssim=ss,
                      mean_psnr=float(np.mean(ps)), mean_ssim=float(np.mean(ss)))


def lr_of(hr, scale: int = 3) -> np.ndarray:
    """Bicubic LR input for an HR image (cropped to a multiple of ``scale``)."""
    return bicubic_resize(modcrop(hr, scale), Fraction(1, scale))


def bicubic_upscaler(scale: int = 3):
    return lambda lr: bicubic_resize(lr, scale)


def eval_model(model, testset, baseline: bool = False, scale: int = 3, ri_id: str = "",
               model_id: str | None = None) -> EvalResult:
    """Evaluate a float model, a quantized model, or any ``lr -> sr`` callable.

    ``testset`` is a :class:`~clipfree.data.Corpus` of HR images; LR inputs
    are their bicubic downscales.  Outputs are rounded and clamped to 8 bits
    before scoring.
    """
    from .quant import QuantizedModel, int8_forward
    from .zoo import ModelGraph, forward

    if len(testset) == 0:
        raise StructuralError("empty test set")
    if isinstance(model, QuantizedModel):
        run, mid = (lambda lr: int8_forward(model, lr)), model.source.name + "-int8"
    elif isinstance(model, ModelGraph):
        run, mid = (lambda lr: forward(model, lr)), model.name
    else:
        run, mid = model, getattr(model, "__name__", "callable")
    refs = [modcrop(t, scale) for t in testset.tensors()]
    outs = [run(lr_of(hr, scale)) for hr in refs]
    res = evaluate_outputs(outs, refs, testset.ids(), shave=scale, testset=testset.name,
                           model_id=model_id or mid, ri_id=ri_id)
    if baseline:
        up = bicubic_upscaler(scale)
        res.baseline = evaluate_outputs([up(lr_of(hr, scale)) for hr in refs], refs,
                                        testset.ids(), shave=scale, testset=testset.name,
                                        model_id="bicubic")
    return res
