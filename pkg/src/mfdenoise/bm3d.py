"""Two-step BM3D (hard thresholding, then Wiener) on one or many frames.

Modes
-----
``"single"``
    Classic single-frame filter on ``frames[ref_index]``.
``"mf"``
    Reference patches on every frame and groups searched across all frames.
    The first step aggregates every member onto its own frame, giving one
    pilot per frame. The second step merges all estimates by position into
    a single image.
``"sf"``
    Reference patches on ``ref_index`` only. Step 1 groups span all frames
    and are aggregated onto the reference frame; step 2 works on the
    reference frame alone because only that frame has a pilot estimate.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .collaborative import dispatch_modes, run_step
from .patches import MatchConfig
from .transforms import group_transform, inverse_group_transform

WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True)
class Bm3dParams:
    sigma: float
    k1: int = 8
    k2: int = 8
    n1: int = 16
    n2: int = 32
    step1: int = 3
    step2: int = 3
    radius1: int = 19
    radius2: int = 19
    lambda_hard: float = 2.7
    distance_threshold: float | None = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.lambda_hard <= 0:
            raise ValueError("lambda_hard must be > 0")
        for name in ("k1", "k2", "n1", "n2", "step1", "step2", "radius1", "radius2"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def with_sigma(self, sigma: float) -> "Bm3dParams":
        return replace(self, sigma=float(sigma))

    def doubled(self) -> "Bm3dParams":
        """Preset with twice the maximum group size in both steps."""
        return replace(self, n1=2 * self.n1, n2=2 * self.n2)

    def match_config(self, step: int) -> MatchConfig:
        if step == 1:
            return MatchConfig(self.k1, self.radius1, self.n1, self.step1,
                               self.distance_threshold, dyadic=True)
        return MatchConfig(self.k2, self.radius2, self.n2, self.step2,
                           self.distance_threshold, dyadic=True)


def hard_threshold_group(coeffs, sigma: float, lambda_hard: float):
    """Zero every 3-D coefficient with ``|c| <= lambda_hard * sigma``.

    The DC coefficient (first entry of the group's DC patch) is never
    touched. Works on one group ``(n, k, k)`` or a batch ``(G, n, k, k)``.

    Returns
    -------
    filtered : ndarray
    n_retained : int or ndarray
        Number of nonzero coefficients left per group.
    """
    c = np.asarray(coeffs, dtype=np.float64)
    single = c.ndim == 3
    if single:
        c = c[None]
    keep = np.abs(c) > lambda_hard * sigma
    keep[:, 0, 0, 0] = True
    out = np.where(keep, c, 0.0)
    n_ret = np.count_nonzero(out.reshape(len(out), -1), axis=1)
    if single:
        return out[0], int(n_ret[0])
    return out, n_ret


def hard_threshold_weight(n_retained, sigma: float):
    n = np.maximum(np.asarray(n_retained, dtype=np.float64), 1.0)
    return 1.0 / np.maximum(sigma * sigma * n, WEIGHT_FLOOR)


def wiener_group(noisy_coeffs, pilot_coeffs, sigma: float):
    """Empirical Wiener shrinkage of a group (or batch of groups).

    ``h = p**2 / (p**2 + sigma**2)`` per coefficient with ``p`` the pilot
    coefficient; ``h = 1`` when ``sigma == 0``. The aggregation weight is
    ``1 / (sigma**2 * sum(h**2))`` with both factors floored at 1e-12.
    """
    c = np.asarray(noisy_coeffs, dtype=np.float64)
    p = np.asarray(pilot_coeffs, dtype=np.float64)
    if c.shape != p.shape:
        raise ValueError(f"pilot shape {p.shape} differs from group shape {c.shape}")
    single = c.ndim == 3
    if single:
        c, p = c[None], p[None]
    s2 = sigma * sigma
    if s2 == 0:
        h = np.ones_like(c)
    else:
        p2 = p * p
        h = p2 / (p2 + s2)
    energy = np.maximum((h * h).reshape(len(h), -1).sum(axis=1), WEIGHT_FLOOR)
    weight = 1.0 / np.maximum(s2 * energy, WEIGHT_FLOOR)
    out = c * h
    if single:
        return out[0], float(weight[0])
    return out, weight


def _step1_filter(params):
    def fn(groups, _pilot):
        coeffs = group_transform(groups)
        filtered, n_ret = hard_threshold_group(coeffs, params.sigma, params.lambda_hard)
        return inverse_group_transform(filtered), hard_threshold_weight(n_ret, params.sigma)
    return fn


def _step2_filter(params):
    def fn(groups, pilot):
        filtered, w = wiener_group(group_transform(groups), group_transform(pilot), params.sigma)
        return inverse_group_transform(filtered), w
    return fn


def _two_step(frames, params, ref_frames, step1_cands, step2_cands, to_reference, record=None):
    L = len(frames)
    buf1 = run_step(frames, frames, params.match_config(1), ref_frames, step1_cands,
                    _step1_filter(params), to_reference=to_reference,
                    record=None if record is None else record.setdefault("step1", []))
    pilot = frames.copy()
    done = [f for f in range(L) if buf1.covered(f)]
    pilot[done] = buf1.result(done)
    buf2 = run_step(frames, pilot, params.match_config(2), ref_frames, step2_cands,
                    _step2_filter(params), pilot=pilot, to_reference=to_reference,
                    record=None if record is None else record.setdefault("step2", []))
    if record is not None:
        record["pilot"] = pilot
    return buf2


def bm3d_denoise(stack, params: Bm3dParams, mode: str = "single", ref_index: int | None = None,
                 record: dict | None = None, return_frames: bool = False):
    """Denoise with BM3D.

    Parameters
    ----------
    stack : array_like or FrameStack
        One image ``(H, W)`` or registered frames ``(L, H, W)``.
    params : Bm3dParams
    mode : {"single", "mf", "sf"}
    ref_index : int, optional
        Reference frame for ``"single"`` and ``"sf"``; defaults to the
        stack's own reference (or 0).
    record : dict, optional
        Filled with per-step :class:`~mfdenoise.collaborative.GroupEstimate`
        lists and the pilot frames; for inspection and tests.
    return_frames : bool
        ``"mf"`` only: also return every frame denoised from its own patches.

    Returns
    -------
    ndarray
        The ``(H, W)`` result. In ``"mf"`` mode this merges the estimates of
        all frames by position; with ``return_frames`` the pair
        ``(frames, merged)`` is returned.
    """
    return dispatch_modes(_two_step, stack, params, mode, ref_index, record, return_frames)
