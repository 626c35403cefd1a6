"""Multi-frame extensions of the single-frame denoisers.

==== ===========================================================
AF   average the registered frames, then filter at ``sigma / sqrt(L)``
FA   filter every frame at ``sigma``, then average
SF   reference patches from one frame, groups from all frames
MF   reference patches from all frames, every frame denoised
MFO  MF with doubled maximum group sizes (BM3D only)
CF   combined 3-D patch filtering; a pluggable slot, no built-in
==== ===========================================================
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bm3d import Bm3dParams, bm3d_denoise
from .flow import FlowParams, register_stack
from .image import FrameStack
from .nlb import NlbParams, nlb_denoise

FILTERS = ("BM3D", "NLB")
EXTENSIONS = ("AF", "FA", "SF", "MF", "MFO", "CF")
_FILTER_ALIASES = {"BM": "BM3D", "BM3D": "BM3D", "NL": "NLB", "NLB": "NLB"}

# CF implementations can be plugged in per filter: fn(stack, params) -> image
COMBINED_FILTERS: dict[str, Callable] = {}


class UnsupportedMethodError(NotImplementedError):
    """Raised for methods that have no implementation in this package."""


@dataclass(frozen=True)
class MethodId:
    filter: str
    extension: str

    def __post_init__(self):
        if self.filter not in FILTERS:
            raise ValueError(f"unknown filter {self.filter!r}")
        if self.extension not in EXTENSIONS:
            raise ValueError(f"unknown extension {self.extension!r}")
        if self.extension == "MFO" and self.filter != "BM3D":
            raise ValueError("MFO is defined for BM3D only")

    @classmethod
    def parse(cls, text: str) -> "MethodId":
        """Parse ``"BM-AF"``, ``"bm3d-mf"``, ``"NL-SF"`` and similar."""
        parts = text.strip().upper().replace("_", "-").split("-")
        if len(parts) != 2 or parts[0] not in _FILTER_ALIASES:
            raise ValueError(f"cannot parse method id {text!r}")
        return cls(_FILTER_ALIASES[parts[0]], parts[1])

    @property
    def short(self) -> str:
        return ("BM" if self.filter == "BM3D" else "NL") + "-" + self.extension

    def __str__(self):
        return self.short


def default_params(filter_name: str, sigma: float):
    return Bm3dParams(sigma) if filter_name == "BM3D" else NlbParams(sigma)


def _denoise(filter_name, frames, params, mode, ref_index=0):
    fn = bm3d_denoise if filter_name == "BM3D" else nlb_denoise
    return fn(frames, params, mode=mode, ref_index=ref_index)


def _check_stack(stack) -> FrameStack:
    if not isinstance(stack, FrameStack):
        stack = FrameStack(stack)
    if not stack.registered:
        raise ValueError("this extension needs a registered stack; run register_stack first")
    return stack


def _sigma(stack, params):
    if params is not None:
        return float(params.sigma)
    if stack.sigma is None:
        raise ValueError("noise level unknown: set stack.sigma or pass filter params")
    return float(stack.sigma)


@dataclass
class TemporalAverage:
    """Validity-aware frame mean.

    ``sigma`` is the scalar ``sigma / sqrt(L)`` used to parameterise the
    filter; ``sigma_map`` holds the per-pixel value ``sigma / sqrt(count)``.
    ``uniform`` is False when some pixel had fewer than ``L`` valid frames,
    i.e. the scalar is an approximation there.
    """

    image: np.ndarray
    sigma: float | None
    sigma_map: np.ndarray | None
    count: np.ndarray
    filled: np.ndarray
    uniform: bool


def _masked_mean(frames, validity, ref_index):
    if validity is None:
        L = len(frames)
        return frames.sum(axis=0) / L, np.full(frames.shape[1:], L), np.zeros(frames.shape[1:], bool)
    count = validity.sum(axis=0)
    total = np.where(validity, frames, 0.0).sum(axis=0)
    empty = count == 0
    out = np.where(empty, frames[ref_index], total / np.maximum(count, 1))
    return out, count, empty


def temporal_average(stack, sigma: float | None = None) -> TemporalAverage:
    """Mean over frames, counting only valid samples per pixel.

    Pixels without any valid sample take the reference frame value and are
    flagged in ``filled``.
    """
    stack = _check_stack(stack)
    sigma = stack.sigma if sigma is None else sigma
    image, count, empty = _masked_mean(stack.frames, stack.validity, stack.ref_index)
    L = len(stack)
    if sigma is None:
        eff, smap = None, None
    else:
        eff = sigma / math.sqrt(L)
        smap = sigma / np.sqrt(np.maximum(count, 1))
    return TemporalAverage(image, eff, smap, count, empty, bool(np.all(count == L)))


def run_af(stack, filter_name: str, params=None, info: dict | None = None) -> np.ndarray:
    """Average, then filter the average with ``sigma / sqrt(L)``."""
    stack = _check_stack(stack)
    sigma = _sigma(stack, params)
    avg = temporal_average(stack, sigma)
    base = params if params is not None else default_params(filter_name, sigma)
    p = base.with_sigma(avg.sigma)
    if info is not None:
        info.update(filter_sigma=avg.sigma, uniform_count=avg.uniform, params=p)
    return _denoise(filter_name, avg.image, p, "single")


def run_fa(stack, filter_name: str, params=None, workers: int = 1,
           info: dict | None = None) -> np.ndarray:
    """Filter each frame at ``sigma``, then take the validity-aware mean."""
    stack = _check_stack(stack)
    sigma = _sigma(stack, params)
    p = params if params is not None else default_params(filter_name, sigma)

    def one(i):
        return _denoise(filter_name, stack.frames[i:i + 1], p, "single")

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            filtered = list(ex.map(one, range(len(stack))))
    else:
        filtered = [one(i) for i in range(len(stack))]
    out, _, _ = _masked_mean(np.stack(filtered), stack.validity, stack.ref_index)
    if info is not None:
        info.update(filter_sigma=sigma, params=p)
    return out


def run_sf(stack, filter_name: str, params=None, ref_index: int | None = None,
           info: dict | None = None) -> np.ndarray:
    stack = _check_stack(stack)
    sigma = _sigma(stack, params)
    p = params if params is not None else default_params(filter_name, sigma)
    r = stack.ref_index if ref_index is None else ref_index
    if info is not None:
        info.update(filter_sigma=sigma, params=p, ref_index=r)
    return _denoise(filter_name, stack.frames, p, "sf", r)


def run_mf(stack, filter_name: str, params=None, info: dict | None = None):
    """Denoise every frame jointly.

    Returns
    -------
    frames : ndarray, shape (L, H, W)
        Each frame aggregated from its own patches only.
    output : ndarray
        All estimates merged by position; the reported result.
    """
    stack = _check_stack(stack)
    sigma = _sigma(stack, params)
    p = params if params is not None else default_params(filter_name, sigma)
    if info is not None:
        info.update(filter_sigma=sigma, params=p)
    fn = bm3d_denoise if filter_name == "BM3D" else nlb_denoise
    return fn(stack.frames, p, mode="mf", return_frames=True)


def _combined(method: MethodId):
    plug = COMBINED_FILTERS.get(method.filter)
    if plug is None:
        raise UnsupportedMethodError(
            f"{method.short}: combined filtering is an interface slot without a built-in "
            f"implementation; register one in mfdenoise.multiframe.COMBINED_FILTERS[{method.filter!r}]")
    return plug


def run_method(stack, method: MethodId | str, params=None, info: dict | None = None) -> np.ndarray:
    """Apply one extension to a registered stack and return the output frame."""
    if isinstance(method, str):
        method = MethodId.parse(method)
    stack = _check_stack(stack)
    ext = method.extension
    if ext == "AF":
        return run_af(stack, method.filter, params, info=info)
    if ext == "FA":
        return run_fa(stack, method.filter, params, info=info)
    if ext == "SF":
        return run_sf(stack, method.filter, params, info=info)
    if ext in ("MF", "MFO"):
        if ext == "MFO":
            params = (params or default_params(method.filter, _sigma(stack, None))).doubled()
        return run_mf(stack, method.filter, params, info=info)[1]
    return _combined(method)(stack, params)


def run_pipeline(stack, method: MethodId | str, flow_params: FlowParams | None = None,
                 filter_params=None, info: dict | None = None) -> np.ndarray:
    """Register (when needed) and denoise.

    A stack flagged as registered skips the optical flow step.
    """
    if isinstance(method, str):
        method = MethodId.parse(method)
    if method.extension == "CF":
        _combined(method)  # fail before spending time on registration
    if not isinstance(stack, FrameStack):
        stack = FrameStack(stack)
    if not stack.registered:
        stack = register_stack(stack, stack.ref_index, flow_params)
        if info is not None:
            info["registered"] = True
    return run_method(stack, method, filter_params, info=info)
