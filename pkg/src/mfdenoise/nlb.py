"""Two-step Non-Local Bayes denoising on one or many frames.

Each group of similar patches is modelled as a Gaussian vector. Step 1
estimates the prior from the noisy group itself; step 2 takes the covariance
from the matching group of the step-1 estimate. Filtered patches are
aggregated with unit weights. Modes mirror :func:`mfdenoise.bm3d.bm3d_denoise`.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .collaborative import AggregationBuffers, dispatch_modes, run_step
from .patches import MatchConfig


@dataclass(frozen=True)
class NlbParams:
    """NLB settings. Fields left as ``None`` get noise-dependent defaults.

    Patch sizes default to 5 below ``sigma = 60`` and 7 otherwise, group
    sizes to ``3 * k**2``.
    """

    sigma: float
    k1: int | None = None
    k2: int | None = None
    n1: int | None = None
    n2: int | None = None
    step1: int = 3
    step2: int = 3
    radius1: int = 16
    radius2: int = 16
    beta1: float = 1.0
    beta2: float = 1.2
    flat_area_threshold: float = 1.0
    distance_threshold: float | None = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        for name in ("k1", "k2", "n1", "n2", "step1", "step2", "radius1", "radius2"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be positive")
        if self.beta1 <= 0 or self.beta2 <= 0 or self.flat_area_threshold < 0:
            raise ValueError("beta1, beta2 must be > 0 and flat_area_threshold >= 0")

    def resolved(self) -> "NlbParams":
        k = 5 if self.sigma < 60 else 7
        k1 = self.k1 or k
        k2 = self.k2 or k
        return replace(self, k1=k1, k2=k2, n1=self.n1 or 3 * k1 * k1, n2=self.n2 or 3 * k2 * k2)

    def with_sigma(self, sigma: float) -> "NlbParams":
        return replace(self, sigma=float(sigma))

    def match_config(self, step: int) -> MatchConfig:
        p = self.resolved()
        if step == 1:
            return MatchConfig(p.k1, p.radius1, p.n1, p.step1, p.distance_threshold)
        return MatchConfig(p.k2, p.radius2, p.n2, p.step2, p.distance_threshold)


@dataclass
class GaussianPatchModel:
    mean: np.ndarray
    covariance: np.ndarray


def _vectors(group):
    g = np.asarray(group, dtype=np.float64)
    # (n, k, k) patches or (n, d) vectors
    return g.reshape(len(g), -1) if g.ndim == 3 else g


def estimate_group_model(group) -> GaussianPatchModel:
    """Sample mean and unbiased sample covariance of a group.

    ``group`` is ``(n, k, k)`` patches or ``(n, d)`` vectors. A one-patch
    group has no covariance estimate; it gets the pixel variance of that
    patch times the identity.
    """
    x = _vectors(group)
    if x.ndim != 2 or len(x) < 1:
        raise ValueError("expected a non-empty (n, d) group")
    m = x.mean(axis=0)
    d = x.shape[1]
    if len(x) < 2:
        return GaussianPatchModel(m, np.var(x) * np.eye(d))
    xc = x - m
    return GaussianPatchModel(m, xc.T @ xc / (len(x) - 1))


def _batched_model(x):
    """Means ``(G, 1, d)`` and covariances ``(G, d, d)`` of ``(G, n, d)`` groups."""
    m = x.mean(axis=1, keepdims=True)
    xc = x - m
    n = x.shape[1]
    if n < 2:
        var = x.reshape(len(x), -1).var(axis=1)
        return m, var[:, None, None] * np.eye(x.shape[2])
    return m, np.einsum("gni,gnj->gij", xc, xc) / (n - 1)


def _gains_step1(evals, sigma, beta):
    d = evals.shape[-1]
    delta = 1e-6 * evals.sum(axis=-1, keepdims=True) / d
    num = np.maximum(evals - beta * sigma * sigma, 0.0)
    den = evals + delta
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(den > 0, num / den, 0.0)
    return np.clip(g, 0.0, 1.0)


def _gains_step2(evals, sigma, beta):
    ev = np.maximum(evals, 0.0)
    if sigma == 0:
        return np.ones_like(ev)
    return ev / (ev + beta * sigma * sigma)


def _apply(x, m, cov, gains_fn, sigma, beta):
    evals, evecs = np.linalg.eigh(cov)
    g = gains_fn(evals, sigma, beta)
    filt = np.einsum("gik,gk,gjk->gij", evecs, g, evecs)
    out = m + np.einsum("gij,gnj->gni", filt, x - m)
    if not np.all(np.isfinite(out)):
        # degenerate solves fall back to the group mean
        bad = ~np.all(np.isfinite(out), axis=(1, 2))
        out[bad] = np.broadcast_to(m[bad], out[bad].shape)
    return out


def bayes_filter_group(group, model: GaussianPatchModel, sigma: float, beta: float,
                       pilot_model: GaussianPatchModel | None = None):
    """Bayesian shrinkage of the patches of one group.

    Without ``pilot_model`` (first step) the filter is
    ``m + (C - beta sigma^2 I)_+ (C + delta I)^-1 (p - m)`` where ``_+``
    clips negative eigenvalues and ``delta = 1e-6 trace(C) / d``. With a
    pilot model (second step) it is ``m + Cp (Cp + beta sigma^2 I)^-1 (p - m)``
    and ``m`` is taken from ``model``.

    Returns filtered patches with the input shape.
    """
    g = np.asarray(group, dtype=np.float64)
    x = _vectors(g)
    d = x.shape[-1]
    if model.mean.shape != (d,):
        raise ValueError(f"model dimension {model.mean.shape} does not match patches of size {d}")
    m = model.mean[None, None]
    if pilot_model is None:
        out = _apply(x[None], m, model.covariance[None], _gains_step1, sigma, beta)
    else:
        out = _apply(x[None], m, pilot_model.covariance[None], _gains_step2, sigma, beta)
    return out[0].reshape(g.shape)


def _flat_mask(x, sigma, threshold):
    if threshold <= 0 or sigma == 0:
        return np.zeros(len(x), dtype=bool)
    flat = x.reshape(len(x), -1)
    return flat.var(axis=1, ddof=1) < threshold * sigma * sigma


def filter_groups_step1(groups, sigma: float, beta: float, flat_area_threshold: float = 0.0):
    """Step-1 filter for a batch ``(G, n, k, k)``; flat groups become their mean."""
    shape = groups.shape
    x = groups.reshape(shape[0], shape[1], -1)
    m, cov = _batched_model(x)
    out = _apply(x, m, cov, _gains_step1, sigma, beta)
    flat = _flat_mask(x, sigma, flat_area_threshold) if shape[1] > 1 else np.zeros(shape[0], bool)
    if np.any(flat):
        out[flat] = x[flat].mean(axis=(1, 2))[:, None, None]
    return out.reshape(shape)


def filter_groups_step2(groups, pilot_groups, sigma: float, beta: float):
    """Step-2 filter for a batch; covariance from the pilot, mean from the noisy group."""
    shape = groups.shape
    x = groups.reshape(shape[0], shape[1], -1)
    xp = pilot_groups.reshape(x.shape)
    m = x.mean(axis=1, keepdims=True)
    _, cov = _batched_model(xp)
    return _apply(x, m, cov, _gains_step2, sigma, beta).reshape(shape)


def nlb_aggregate(estimates, buffers: AggregationBuffers) -> np.ndarray:
    """Unit-weight aggregation of :class:`GroupEstimate` objects."""
    touched = set()
    for est in estimates:
        n = len(est.frames)
        buffers.add(est.target, est.ys, est.xs, est.patches, np.ones(n))
        touched.update(int(t) for t in np.atleast_1d(est.target))
    return buffers.result(sorted(touched))


def _two_step(frames, params, ref_frames, step1_cands, step2_cands, to_reference, record=None):
    p = params.resolved()

    def f1(groups, _pilot):
        est = filter_groups_step1(groups, p.sigma, p.beta1, p.flat_area_threshold)
        return est, np.ones(len(groups))

    def f2(groups, pilot):
        return filter_groups_step2(groups, pilot, p.sigma, p.beta2), np.ones(len(groups))

    buf1 = run_step(frames, frames, p.match_config(1), ref_frames, step1_cands, f1,
                    to_reference=to_reference,
                    record=None if record is None else record.setdefault("step1", []))
    pilot = frames.copy()
    done = [f for f in range(len(frames)) if buf1.covered(f)]
    pilot[done] = buf1.result(done)
    buf2 = run_step(frames, pilot, p.match_config(2), ref_frames, step2_cands, f2,
                    pilot=pilot, to_reference=to_reference,
                    record=None if record is None else record.setdefault("step2", []))
    if record is not None:
        record["pilot"] = pilot
    return buf2


def nlb_denoise(stack, params: NlbParams, mode: str = "single", ref_index: int | None = None,
                record: dict | None = None, return_frames: bool = False):
    """Denoise with NLB; same modes and return values as ``bm3d_denoise``."""
    return dispatch_modes(_two_step, stack, params, mode, ref_index, record, return_frames)
