"""Grayscale image planes, frame stacks, file I/O, AWGN and PSNR.

Images are plain ``numpy`` arrays of shape ``(height, width)`` holding
float64 samples in the nominal ``[0, 255]`` range. Values outside that range
are allowed while processing; clamping only happens when writing files.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

PEAK = 255.0


class ImageFormatError(ValueError):
    """Raised for unreadable, truncated or unsupported image files."""


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass
class FrameStack:
    """Ordered frames of identical size plus registration state.

    ``frames`` has shape ``(L, height, width)``. ``validity`` is an optional
    boolean array of the same shape marking samples that came from inside the
    source frame after warping.
    """

    frames: np.ndarray
    registered: bool = True
    ref_index: int = 0
    validity: np.ndarray | None = None
    sigma: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim == 2:
            frames = frames[None]
        if frames.ndim != 3 or frames.shape[0] < 1:
            raise ValueError(f"expected (L, H, W) frames, got shape {frames.shape}")
        self.frames = frames
        if not 0 <= self.ref_index < len(frames):
            raise ValueError(f"ref_index {self.ref_index} outside [0, {len(frames)})")
        if self.validity is not None:
            self.validity = np.asarray(self.validity, dtype=bool)
            if self.validity.shape != frames.shape:
                raise ValueError("validity mask shape must match frames")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def shape(self):
        return self.frames.shape[1:]

    @property
    def reference(self) -> np.ndarray:
        return self.frames[self.ref_index]


def as_frames(data) -> np.ndarray:
    """Return ``data`` as a float64 ``(L, H, W)`` array."""
    if isinstance(data, FrameStack):
        return data.frames
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected an image or a stack of images, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _read_pgm(raw: bytes) -> np.ndarray:
    if raw[:2] != b"P5":
        raise ImageFormatError("not a binary PGM (P5) file")
    # header: magic, width, height, maxval separated by whitespace, comments allowed
    fields = []
    pos = 2
    n = len(raw)
    while len(fields) < 3:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise ImageFormatError("truncated PGM header")
        if raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos:pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not token.isdigit():
            raise ImageFormatError(f"bad PGM header token {token!r}")
        fields.append(int(token))
    pos += 1  # single whitespace byte before the raster
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"invalid PGM geometry {width}x{height}, maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    body = raw[pos:pos + expected]
    if len(body) < expected:
        raise ImageFormatError(f"truncated PGM raster: {len(body)} of {expected} bytes")
    return np.frombuffer(body, dtype=dtype).reshape(height, width).astype(np.float64)


def _rgb_to_luma(arr: np.ndarray) -> np.ndarray:
    return arr[..., 0] * 0.299 + arr[..., 1] * 0.587 + arr[..., 2] * 0.114


def load_image(path, luma: bool = False) -> np.ndarray:
    """Read an 8/16-bit grayscale PGM or a grayscale PNG as float64.

    Sample values are not rescaled: an 8-bit value ``v`` becomes ``float(v)``.
    Color files are rejected unless ``luma=True``, in which case they are
    converted with Rec. 601 weights.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"P5":
        return _read_pgm(raw)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except Exception as exc:  # PIL raises a zoo of exception types
        raise ImageFormatError(f"cannot decode {path}: {exc}") from exc
    if mode in ("L", "I", "I;16", "I;16B", "I;16L", "F"):
        return arr.astype(np.float64)
    if mode in ("RGB", "RGBA", "P", "LA"):
        if mode == "LA":
            return arr[..., 0].astype(np.float64)
        if not luma:
            raise ImageFormatError(f"{path} is a color image ({mode}); pass luma=True to convert")
        if mode == "P":
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"))
        return _rgb_to_luma(arr.astype(np.float64))
    raise ImageFormatError(f"unsupported image mode {mode} in {path}")


def quantize(img) -> np.ndarray:
    """Clamp to [0, 255] and round half away from zero, as written to disk."""
    clipped = np.clip(np.asarray(img, dtype=np.float64), 0.0, PEAK)
    # all values are non-negative here, so half-away-from-zero is floor(x + 0.5)
    return np.floor(clipped + 0.5).astype(np.uint8)


def save_image(img, path) -> None:
    """Write ``img`` as 8-bit grayscale; PGM for ``.pgm`` suffixes, PNG otherwise."""
    path = Path(path)
    data = quantize(img)
    if data.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {data.shape}")
    try:
        if path.suffix.lower() == ".pgm":
            h, w = data.shape
            with open(path, "wb") as fh:
                fh.write(b"P5\n%d %d\n255\n" % (w, h))
                fh.write(data.tobytes())
        else:
            Image.fromarray(data, mode="L").save(path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Noise and metrics
# ---------------------------------------------------------------------------

def noise_generator(seed: int) -> np.random.Generator:
    # Philox is counter-based: one key yields one fixed stream on any platform
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


def add_awgn(img, spec: NoiseSpec) -> np.ndarray:
    """Add white Gaussian noise of standard deviation ``spec.sigma``.

    The result is not clamped. A fixed ``spec.seed`` always produces the same
    noise field for a given image shape.
    """
    img = np.asarray(img, dtype=np.float64)
    if spec.sigma == 0:
        return img.copy()
    noise = noise_generator(spec.seed).standard_normal(img.shape)
    return img + spec.sigma * noise


def mse(reference, test, border: int = 0) -> float:
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        raise ValueError(f"shape mismatch: {reference.shape} vs {test.shape}")
    if border < 0 or 2 * border >= min(reference.shape[-2:]):
        raise ValueError(f"border {border} too large for image of shape {reference.shape}")
    if border:
        reference = reference[..., border:-border, border:-border]
        test = test[..., border:-border, border:-border]
    return float(np.mean((reference - test) ** 2))


def psnr(reference, test, border: int = 0) -> float:
    """Peak signal-to-noise ratio in dB with a 255 peak.

    ``border`` pixels are excluded on all four sides. Identical images give
    ``math.inf``.
    """
    err = mse(reference, test, border)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / err)
