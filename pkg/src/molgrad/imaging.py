"""Degradation models, image metrics, synthetic data and PGM I/O."""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from pathlib import Path

import numpy as np

from .exceptions import DomainError, FormatError, ShapeError
from .pnp import LinearOperator

__all__ = [
    "Image",
    "BlurKernel",
    "convolution_matrix",
    "avg_pool_matrix",
    "build_blur_operator",
    "add_noise",
    "psnr",
    "PSNR_IDENTICAL",
    "edge_density",
    "synth_dataset",
    "pgm_read",
    "pgm_write",
    "load_kernel",
    "save_kernel",
    "read_manifest",
    "write_manifest",
]

# Returned by psnr() for identical images.
PSNR_IDENTICAL = math.inf


@dataclasses.dataclass(frozen=True, eq=False)
class Image:
    """Grayscale image; ``pixels`` has shape ``(height, width)``.

    Values are nominally in [0, 1] but are only clamped when written to disk.
    """

    pixels: np.ndarray

    def __post_init__(self):
        p = np.array(self.pixels, dtype=float)
        if p.ndim != 2:
            raise ShapeError(f"image pixels must be 2-D, got shape {p.shape}")
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def vector(self) -> np.ndarray:
        """Row-major flattening, the layout used by operators and networks."""
        return self.pixels.ravel()

    @classmethod
    def from_vector(cls, v, width: int, height: int) -> "Image":
        v = np.asarray(v, dtype=float)
        if v.size != width * height:
            raise ShapeError(f"vector of length {v.size} cannot be {height}x{width}")
        return cls(v.reshape(height, width))


@dataclasses.dataclass(frozen=True, eq=False)
class BlurKernel:
    taps: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        t = np.array(self.taps, dtype=float)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ShapeError(f"kernel must be square, got shape {t.shape}")
        if np.any(t < 0):
            raise DomainError("blur kernel taps must be nonnegative")
        if self.normalized:
            s = t.sum()
            if s <= 0:
                raise DomainError("cannot normalize an all-zero kernel")
            t = t / s
        t.setflags(write=False)
        object.__setattr__(self, "taps", t)

    @property
    def size(self) -> int:
        return self.taps.shape[0]

    @classmethod
    def box(cls, k: int = 3) -> "BlurKernel":
        return cls(np.ones((k, k)))

    @classmethod
    def motion(cls, k: int = 5) -> "BlurKernel":
        """Diagonal motion line."""
        return cls(np.eye(k))

    @classmethod
    def gaussian(cls, k: int = 5, std: float = 1.0) -> "BlurKernel":
        r = np.arange(k) - (k - 1) / 2
        g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * std**2))
        return cls(g)


def convolution_matrix(taps, height: int, width: int, boundary: str = "zero") -> np.ndarray:
    """Dense ``(h*w, h*w)`` matrix of the centred 2-D convolution with ``taps``.

    ``boundary`` is ``"zero"`` (zero padding) or ``"replicate"`` (edge pixels
    extended).
    """
    taps = np.asarray(taps, dtype=float)
    k = taps.shape[0]
    if k > height or k > width:
        raise ShapeError(f"{k}x{k} kernel larger than {height}x{width} image")
    if boundary not in ("zero", "replicate"):
        raise ValueError(f"unknown boundary {boundary!r}")
    c = (k - 1) // 2
    A = np.zeros((height * width, height * width))
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    out_idx = (rows * width + cols).ravel()
    for p in range(k):
        for q in range(k):
            if taps[p, q] == 0:
                continue
            r = rows - (p - c)
            s = cols - (q - c)
            if boundary == "zero":
                ok = ((r >= 0) & (r < height) & (s >= 0) & (s < width)).ravel()
                src = (np.clip(r, 0, height - 1) * width + np.clip(s, 0, width - 1)).ravel()
                np.add.at(A, (out_idx[ok], src[ok]), taps[p, q])
            else:
                src = (np.clip(r, 0, height - 1) * width + np.clip(s, 0, width - 1)).ravel()
                np.add.at(A, (out_idx, src), taps[p, q])
    return A


def avg_pool_matrix(height: int, width: int) -> np.ndarray:
    """Fixed 2x2 average pooling, ``(h/2 * w/2, h * w)``."""
    if height % 2 or width % 2:
        raise ShapeError("2x2 pooling needs even image dims")
    h2, w2 = height // 2, width // 2
    P = np.zeros((h2 * w2, height * width))
    for i in range(h2):
        for j in range(w2):
            for di in range(2):
                for dj in range(2):
                    P[i * w2 + j, (2 * i + di) * width + 2 * j + dj] = 0.25
    return P


def build_blur_operator(kernel: BlurKernel, width: int, height: int, boundary: str = "zero") -> LinearOperator:
    return LinearOperator(convolution_matrix(kernel.taps, height, width, boundary))


def add_noise(img: Image, sigma_eps: float, seed) -> Image:
    if sigma_eps < 0:
        raise DomainError("noise level must be nonnegative")
    if sigma_eps == 0:
        return img
    rng = np.random.default_rng(seed)
    return Image(img.pixels + sigma_eps * rng.standard_normal(img.pixels.shape))


def psnr(img, ref, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``PSNR_IDENTICAL`` (+inf) for equal inputs."""
    a = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=float)
    b = ref.pixels if isinstance(ref, Image) else np.asarray(ref, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_IDENTICAL
    return 10 * math.log10(peak**2 / mse)


def edge_density(img: Image, t_th: float = 0.05, support: str = "positive") -> float:
    """Thresholded count of horizontal and vertical forward-difference hits.

    Each direction counts pixels with ``|diff| > t_th``; the sum is divided
    by the number of strictly positive pixels (``support="positive"``) or by
    all pixels (``support="all"``).
    """
    if not t_th > 0:
        raise DomainError("threshold must be positive")
    x = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=float)
    if support == "positive":
        supp = int(np.count_nonzero(x > 0))
    elif support == "all":
        supp = x.size
    else:
        raise ValueError(f"unknown support mode {support!r}")
    if supp == 0:
        raise DomainError("edge density undefined for an image with empty support")
    dh = np.abs(np.diff(x, axis=1))
    dv = np.abs(np.diff(x, axis=0))
    hits = np.count_nonzero(dh - t_th > 0) + np.count_nonzero(dv - t_th > 0)
    return hits / supp


def synth_dataset(kind: str, count: int, size: int, seed, feature: int | None = None) -> list:
    """Reproducible synthetic grayscale images with intensities in [0.1, 0.9].

    ``blocks`` tiles the image with constant squares of side ``feature``
    (default ``size // 4``); ``stripes`` draws vertical or horizontal bands of
    width ``feature`` (default 2); ``blobs`` sums a few Gaussian bumps.
    Image ``i`` uses its own child seed, so images do not depend on ``count``.
    """
    if size < 4:
        raise DomainError("synthetic images need size >= 4")
    children = np.random.SeedSequence(seed).spawn(count) if count > 0 else []
    out = []
    for child in children:
        rng = np.random.default_rng(child)
        if kind == "blocks":
            f = feature or max(size // 4, 1)
            n = -(-size // f)
            tiles = rng.uniform(0.1, 0.9, size=(n, n))
            px = np.kron(tiles, np.ones((f, f)))[:size, :size]
        elif kind == "stripes":
            f = feature or 2
            n = -(-size // f)
            band = np.repeat(rng.uniform(0.1, 0.9, size=n), f)[:size]
            px = np.tile(band, (size, 1))
            if rng.random() < 0.5:
                px = px.T
        elif kind == "blobs":
            yy, xx = np.mgrid[0:size, 0:size]
            px = np.full((size, size), 0.1)
            for _ in range(rng.integers(2, 5)):
                cy, cx = rng.uniform(0, size, size=2)
                r = rng.uniform(size / 8, size / 3)
                px += rng.uniform(0.2, 0.6) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
            px = np.clip(px, 0.1, 0.9)
        else:
            raise ValueError(f"unknown dataset kind {kind!r}")
        out.append(Image(px))
    return out


# -- files -------------------------------------------------------------------


def _quantize(pixels) -> np.ndarray:
    # round half up
    return np.floor(np.clip(pixels, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)


def pgm_write(img: Image, path) -> None:
    """Binary 8-bit PGM (P5, maxval 255), written atomically."""
    path = os.fspath(path)
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header + _quantize(img.pixels).tobytes())
    os.replace(tmp, path)


def _pgm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the payload
    return tokens, pos + 1


def pgm_read(path) -> Image:
    data = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"bad PGM header: {exc}") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 256:
        raise FormatError(f"unsupported PGM geometry/maxval {width}x{height}/{maxval}")
    payload = data[offset : offset + width * height]
    if len(payload) != width * height:
        raise FormatError(f"truncated PGM payload: {len(payload)} of {width * height} bytes")
    px = np.frombuffer(payload, dtype=np.uint8).reshape(height, width) / maxval
    return Image(px)


def load_kernel(path, normalized: bool = True) -> BlurKernel:
    """Kernel from a whitespace-separated text grid."""
    try:
        taps = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"bad kernel file {path}: {exc}") from exc
    return BlurKernel(taps, normalized=normalized)


def save_kernel(kernel: BlurKernel, path) -> None:
    np.savetxt(path, kernel.taps, fmt="%.17g")


def read_manifest(path) -> list:
    """Image paths listed in a CSV manifest with a ``path`` column.

    Relative entries are resolved against the manifest's directory.
    """
    base = Path(path).parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "path" not in reader.fieldnames:
            raise FormatError(f"manifest {path} lacks a 'path' column")
        return [base / row["path"] for row in reader]


def write_manifest(paths, path) -> None:
    base = Path(path).parent
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path"])
        for p in paths:
            p = Path(p)
            w.writerow([p.relative_to(base) if p.is_relative_to(base) else p])
