"""Image files, bicubic resampling and synthetic corpora.

Bicubic resampling
------------------
``bicubic_resize(t, factor)`` is separable and uses the Keys cubic with
``a = -0.5``::

    k(x) = 1.5|x|^3 - 2.5|x|^2 + 1            |x| <= 1
         = -0.5|x|^3 + 2.5|x|^2 - 4|x| + 2    1 < |x| < 2
         = 0                                  otherwise

Output sample ``u`` maps to input coordinate ``x = (u + 0.5) / factor - 0.5``.
When downscaling (``factor < 1``) the kernel is stretched to
``factor * k(factor * d)`` (antialiasing, as in MATLAB ``imresize``).  Taps are
every integer ``j`` with ``|x - j| < 2 / min(factor, 1)``, the weights are
normalised to sum to one, and out-of-range ``j`` are mirrored with
:func:`clipfree.engine.reflect_index`.  The output length is
``floor(n * factor)``.

Image files
-----------
Binary PGM (P5) and PPM (P6) with maxval <= 255.  A P5 file loads as three
identical channels.  ``save_image`` writes P5 for ``.pgm`` paths (the image
must be gray) and P6 otherwise, after rounding and clamping to ``[0, 255]``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .engine import as_tensor, reflect_index
from .errors import FormatError, StructuralError
from .zoo import atomic_write

A = -0.5


def cubic(x):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (A + 2) * x3 - (A + 3) * x2 + 1
    far = A * x3 - 5 * A * x2 + 8 * A * x - 4 * A
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _as_fraction(factor) -> Fraction:
    f = Fraction(factor).limit_denominator(10_000) if isinstance(factor, float) else Fraction(factor)
    if f <= 0:
        raise StructuralError(f"resize factor must be positive, got {factor}")
    return f


def resize_matrix(n_in: int, factor) -> np.ndarray:
    """``(n_out, n_in)`` interpolation matrix for one axis (cached, read-only)."""
    return _resize_matrix(n_in, _as_fraction(factor))


@lru_cache(maxsize=256)
def _resize_matrix(n_in: int, f: Fraction) -> np.ndarray:
    n_out = (n_in * f.numerator) // f.denominator
    if n_out < 1:
        raise StructuralError(f"resizing {n_in} pixels by {f} leaves less than one pixel")
    ff = float(f)
    shrink = min(ff, 1.0)
    support = 2.0 / shrink
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for u in range(n_out):
        x = (u + 0.5) / ff - 0.5
        taps = np.arange(int(np.floor(x - support)) + 1, int(np.ceil(x + support)))
        w = shrink * cubic(shrink * (x - taps))
        w /= w.sum()
        for j, wj in zip(taps, w):
            mat[u, reflect_index(int(j), n_in)] += wj
    mat.flags.writeable = False
    return mat


def bicubic_resize(t, factor) -> np.ndarray:
    t = as_tensor(t)
    mh = resize_matrix(t.shape[0], factor)
    mw = resize_matrix(t.shape[1], factor)
    x = t.astype(np.float64)
    out = np.einsum("oi,ijc->ojc", mh, x)
    out = np.einsum("pj,ojc->opc", mw, out)
    return out.astype(t.dtype)


def to_uint8(t) -> np.ndarray:
    return np.clip(np.round(np.asarray(t, dtype=np.float64)), 0, 255).astype(np.uint8)


def modcrop(t, scale: int) -> np.ndarray:
    h, w = t.shape[0] - t.shape[0] % scale, t.shape[1] - t.shape[1] % scale
    return t[:h, :w]


# -- PGM / PPM --------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_header(data: bytes):
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if not m:
            raise FormatError(f"truncated header at byte offset {pos}")
        fields.append((m.group(1), m.start(1)))
        pos = m.end(1)
    magic, off = fields[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r} at byte offset {off} (expected P5 or P6)")
    nums = []
    for tok, off in fields[1:]:
        if not tok.isdigit():
            raise FormatError(f"malformed header field {tok!r} at byte offset {off}")
        nums.append(int(tok))
    width, height, maxval = nums
    if width < 1 or height < 1:
        raise FormatError(f"bad image size {width}x{height} at byte offset {fields[1][1]}")
    if not 0 < maxval <= 255:
        raise FormatError(f"maxval {maxval} at byte offset {fields[3][1]} unsupported (8-bit only)")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"missing whitespace after header at byte offset {pos}")
    return magic, width, height, pos + 1


def decode_pnm(data: bytes) -> np.ndarray:
    magic, width, height, start = _parse_header(data)
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    have = len(data) - start
    if have < need:
        raise FormatError(
            f"truncated payload: expected {need} bytes from byte offset {start}, found {have}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=start)
    img = pixels.reshape(height, width, channels).astype(np.float32)
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def load_image(path) -> np.ndarray:
    path = Path(path)
    try:
        return decode_pnm(path.read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def encode_pnm(t, gray: bool = False) -> bytes:
    t = as_tensor(t)
    px = to_uint8(t)
    if gray:
        if not (np.array_equal(px[..., 0], px[..., 1]) and np.array_equal(px[..., 0], px[..., 2])):
            raise StructuralError("cannot write a colour image as P5; use a .ppm path")
        header = f"P5\n{t.shape[1]} {t.shape[0]}\n255\n".encode()
        return header + px[..., 0].tobytes()
    if px.shape[2] != 3:
        raise StructuralError(f"P6 needs 3 channels, got {px.shape[2]}")
    return f"P6\n{t.shape[1]} {t.shape[0]}\n255\n".encode() + px.tobytes()


def save_image(t, path) -> None:
    path = Path(path)
    atomic_write(path, encode_pnm(t, gray=path.suffix.lower() == ".pgm"))


# -- corpora ------------------------------------------------------------------

@dataclass
class Corpus:
    name: str
    images: list  # (id, tensor) pairs
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [i for i, _ in self.images]
        if len(set(ids)) != len(ids):
            raise StructuralError(f"corpus {self.name}: duplicate image ids")

    def __len__(self):
        return len(self.images)

    def ids(self) -> list[str]:
        return [i for i, _ in self.images]

    def tensors(self) -> list[np.ndarray]:
        return [t for _, t in self.images]


PATTERNS = ("gradient", "checker", "strokes", "noise")


def _unit(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def _pattern(kind: str, rng: np.random.Generator, size: int) -> np.ndarray:
    """Band-limited gray pattern in ``[0, 1]``; edges are softened by a small Gaussian."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    if kind == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        base = np.cos(theta) * xx + np.sin(theta) * yy
        fx, fy = rng.uniform(0.3, 1.5, size=2)
        wave = np.sin(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
        return _unit(base + rng.uniform(0.1, 0.4) * wave)
    if kind == "checker":
        period = int(rng.integers(6, 17))
        off = rng.integers(0, period, size=2)
        ii, jj = np.mgrid[0:size, 0:size]
        board = (((ii + off[0]) // period + (jj + off[1]) // period) % 2).astype(np.float64)
        board = gaussian_filter(board, rng.uniform(0.6, 1.2), mode="nearest")
        return _unit(board + rng.uniform(0, 0.3) * xx)
    if kind == "strokes":
        canvas = np.full((size, size), rng.uniform(0.0, 0.2))
        ink = rng.uniform(0.8, 1.0)
        for _ in range(int(rng.integers(4, 10))):
            r0, c0 = rng.integers(0, size, size=2)
            horizontal = rng.random() < 0.5
            length = int(rng.integers(size // 6, size // 2))
            width = int(rng.integers(2, 5))
            if horizontal:
                canvas[r0:r0 + width, c0:c0 + length] = ink
            else:
                canvas[r0:r0 + length, c0:c0 + width] = ink
        canvas = gaussian_filter(canvas, rng.uniform(0.6, 1.2), mode="nearest")
        return _unit(canvas if rng.random() < 0.5 else 1.0 - canvas)
    if kind == "noise":
        sigma = rng.uniform(1.5, 4.0)
        return _unit(gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap"))
    raise StructuralError(f"unknown pattern {kind!r}")


def synth_image(rng: np.random.Generator, size: int, kind: str | None = None) -> np.ndarray:
    """One 8-bit RGB image whose luma spans the full ``[0, 255]`` range.

    A gray pattern in ``[0, 1]`` (optionally blended with a smooth gradient)
    is coloured with a per-channel gamma, so black stays black and white stays
    white while mid-tones pick up a tint.
    """
    kind = kind or PATTERNS[int(rng.integers(len(PATTERNS)))]
    p = _pattern(kind, rng, size)
    if kind != "gradient" and rng.random() < 0.5:
        p = _unit(p + rng.uniform(0.2, 0.8) * _pattern("gradient", rng, size))
    gammas = rng.uniform(0.6, 1.6, size=3)
    rgb = 255.0 * np.stack([p ** g for g in gammas], axis=2)
    return np.round(rgb).astype(np.float32)


def synth_corpus(seed: int, n: int, size: int, name: str | None = None) -> Corpus:
    """``n`` images cycling through gradients, checkerboards, strokes and noise.

    Uses numpy's PCG64 generator seeded with ``seed``; identical seeds give
    bitwise-identical corpora.
    """
    if n < 1:
        raise StructuralError(f"corpus needs at least one image, got n={n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    images = []
    for i in range(n):
        kind = PATTERNS[i % len(PATTERNS)]
        images.append((f"synth{seed}_{i:03d}_{kind}", synth_image(rng, size, kind)))
    return Corpus(name or f"synth-{seed}", images,
                  {"provenance": "synthetic", "seed": seed, "n": n, "size": size})


IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm")


def write_corpus_manifest(corpus: Corpus, path, image_dir=None) -> None:
    """Write a corpus manifest; with ``image_dir`` the images are saved as files too."""
    path = Path(path)
    manifest = {"schema_version": 1, "name": corpus.name}
    if image_dir is None and corpus.provenance.get("provenance") == "synthetic":
        manifest.update(corpus.provenance)
    else:
        image_dir = Path(image_dir if image_dir is not None else path.parent / "images")
        entries = []
        for image_id, t in corpus.images:
            p = image_dir / f"{image_id}.ppm"
            save_image(t, p)
            entries.append({"id": image_id, "path": str(p.relative_to(path.parent)
                                                        if p.is_relative_to(path.parent) else p)})
        manifest.update({"provenance": "files", "images": entries})
    atomic_write(path, (json.dumps(manifest, indent=2) + "\n").encode())


def load_corpus(path) -> Corpus:
    """Load a corpus from a manifest JSON or a directory of PGM/PPM files."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus not found: {path}")
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise FormatError(f"{path}: no .pgm/.ppm images found")
        return Corpus(path.name, [(p.stem, load_image(p)) for p in files],
                      {"provenance": "files"})
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed corpus manifest: {exc}") from None
    kind = manifest.get("provenance")
    if kind == "synthetic":
        try:
            return synth_corpus(int(manifest["seed"]), int(manifest["n"]), int(manifest["size"]),
                                name=manifest.get("name"))
        except KeyError as exc:
            raise FormatError(f"{path}: synthetic corpus manifest missing {exc}") from None
    if kind == "files":
        images = []
        for entry in manifest.get("images", []):
            p = Path(entry["path"])
            if not p.is_absolute():
                p = path.parent / p
            images.append((entry["id"], load_image(p)))
        return Corpus(manifest.get("name", path.stem), images, {"provenance": "files"})
    raise FormatError(f"{path}: unknown corpus provenance {kind!r}")
