"""Robust variational optical flow and frame registration.

The flow ``w = (u, v)`` between ``f1`` and ``f2`` minimises the discrete
energy

    E(w) = sum_x  Psi(|f2(x + w) - f1(x)|^2)
                + gamma * Psi(|grad f2(x + w) - grad f1(x)|^2)
                + alpha * Psi(Phi(grad f1) * (|grad u|^2 + |grad v|^2))

with ``Psi(s2) = sqrt(s2 + eps^2)``. It is solved coarse to fine. On every
level the data terms are linearised around the current warp, the ``Psi'``
weights are frozen (lagged nonlinearity) and the resulting linear system for
the flow increment is relaxed with red-black SOR. A backtracking safeguard
keeps the energy from increasing between warps.

Image gradients use central differences, flow gradients forward
differences; boundaries are reflecting.
"""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numba import njit
from PIL import Image
from scipy import ndimage

EPSILON = 0.001
FLO_MAGIC = 202021.25
UNKNOWN_FLOW = 1e9
VARIANTS = ("SOF1", "SOF2", "SOF3")


def psi(s2, eps: float = EPSILON):
    return np.sqrt(np.asarray(s2, dtype=np.float64) + eps * eps)


def psi_prime(s2, eps: float = EPSILON):
    return 0.5 / np.sqrt(np.asarray(s2, dtype=np.float64) + eps * eps)


def smoothness_weight(grad_f1, lam: float | None, variant: str = "SOF1",
                      phi_min: float = 0.05, quantile: float = 0.9):
    """Image-driven weight ``Phi`` of the smoothness term.

    Parameters
    ----------
    grad_f1 : array_like
        Gradient magnitudes ``|grad f1|``, any shape.
    lam : float or None
        Contrast parameter. Ignored by ``"SOF3"``, which sets it to the
        ``quantile`` of the magnitudes.
    variant : {"SOF1", "SOF2", "SOF3"}
        ``SOF1``: ``1 / sqrt(1 + |g|^2 / lam^2)``. ``SOF2``: the same, floored
        at ``phi_min``. ``SOF3``: ``SOF2`` with automatic ``lam``.
    """
    g = np.abs(np.asarray(grad_f1, dtype=np.float64))
    variant = variant.upper().replace("-", "")
    if variant not in VARIANTS:
        raise ValueError(f"unknown smoothness variant {variant!r}")
    if variant == "SOF3":
        lam = float(np.quantile(g, quantile)) if g.size else 1.0
    if lam is None or lam <= 0:
        if variant == "SOF3":
            # flat image: every gradient is zero and the weight is 1 anyway
            lam = 1.0
        else:
            raise ValueError("lambda must be > 0")
    phi = 1.0 / np.sqrt(1.0 + (g / lam) ** 2)
    if variant in ("SOF2", "SOF3"):
        phi = np.maximum(phi, phi_min)
    return phi


@dataclass(frozen=True)
class FlowParams:
    """Flow energy weights and solver settings.

    Frames are used on their gray-value scale, so ``lam`` is in gray levels
    (25.5 equals 0.1 on a unit intensity scale). With ``normalize`` set both
    frames are first rescaled jointly to ``[0, 1]``.
    ``smoothness_form="inner"`` is ``alpha * Psi(Phi * S)``; ``"outer"``
    switches to ``alpha * Phi * Psi(S)``.
    """

    alpha: float = 35.0
    gamma: float = 1.5
    lam: float = 25.5
    epsilon: float = EPSILON
    variant: str = "SOF2"
    phi_min: float = 0.05
    quantile: float = 0.9
    pyramid_scale: float = 0.5
    min_size: int = 16
    levels: int = 100
    outer_iters: int = 5
    inner_iters: int = 1
    solver_iters: int = 30
    omega: float = 1.95
    presmooth: float = 0.8
    normalize: bool = False
    smoothness_form: str = "inner"
    max_backtracks: int = 8

    def __post_init__(self):
        if self.alpha <= 0 or self.gamma < 0:
            raise ValueError("alpha must be > 0 and gamma >= 0")
        if not 0 < self.pyramid_scale < 1:
            raise ValueError("pyramid_scale must be in (0, 1)")
        if not 0 < self.omega < 2:
            raise ValueError("omega must be in (0, 2)")
        if self.variant.upper().replace("-", "") not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.smoothness_form not in ("inner", "outer"):
            raise ValueError("smoothness_form must be 'inner' or 'outer'")
        if min(self.levels, self.outer_iters, self.inner_iters, self.solver_iters) < 1:
            raise ValueError("iteration counts and levels must be >= 1")


@dataclass
class FlowField:
    """Per-pixel displacement; ``f2(x + u, y + v)`` matches ``f1(x, y)``."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError("u and v must be 2-D arrays of equal shape")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("flow contains non-finite values")

    @property
    def height(self):
        return self.u.shape[0]

    @property
    def width(self):
        return self.u.shape[1]

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))


def endpoint_error(est: FlowField, truth: FlowField, border: int = 0) -> float:
    """Mean Euclidean distance between two flows, skipping unknown truth vectors."""
    if (est.u.shape != truth.u.shape):
        raise ValueError("flow shapes differ")
    err = np.hypot(est.u - truth.u, est.v - truth.v)
    ok = (np.abs(truth.u) < UNKNOWN_FLOW) & (np.abs(truth.v) < UNKNOWN_FLOW)
    if border:
        inner = np.zeros_like(ok)
        inner[border:-border, border:-border] = True
        ok &= inner
    if not ok.any():
        raise ValueError("no valid flow vectors to compare")
    return float(err[ok].mean())


# ---------------------------------------------------------------------------
# Derivatives, warping, energy
# ---------------------------------------------------------------------------

_CENTRAL = np.array([-0.5, 0.0, 0.5])


def _dx(img):
    return ndimage.correlate1d(img, _CENTRAL, axis=1, mode="reflect")


def _dy(img):
    return ndimage.correlate1d(img, _CENTRAL, axis=0, mode="reflect")


def _forward_sq(u):
    """``|grad u|^2`` with forward differences, zero across the far borders."""
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1] = u[1:] - u[:-1]
    return gx * gx + gy * gy


def warp(frame, flow: FlowField, return_mask: bool = False):
    """Sample ``frame`` at ``x + w`` with bilinear interpolation.

    Positions outside the frame take the nearest border value and are
    flagged invalid in the optional mask.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != flow.u.shape:
        raise ValueError(f"frame {frame.shape} and flow {flow.u.shape} differ in size")
    H, W = frame.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    ys = yy + flow.v
    xs = xx + flow.u
    out = ndimage.map_coordinates(frame, [ys, xs], order=1, mode="nearest")
    if not return_mask:
        return out
    tol = 1e-9
    valid = (xs >= -tol) & (xs <= W - 1 + tol) & (ys >= -tol) & (ys <= H - 1 + tol)
    return out, valid


class _Level:
    """Images and derived quantities of one pyramid level."""

    def __init__(self, f1, f2, params: FlowParams):
        self.f1, self.f2 = f1, f2
        self.f1x, self.f1y = _dx(f1), _dy(f1)
        self.f2x, self.f2y = _dx(f2), _dy(f2)
        self.f2xx, self.f2xy, self.f2yy = _dx(self.f2x), _dy(self.f2x), _dy(self.f2y)
        self.phi = smoothness_weight(np.hypot(self.f1x, self.f1y), params.lam, params.variant,
                                     params.phi_min, params.quantile)
        self.params = params

    def warped(self, u, v):
        fl = FlowField(u, v)
        return [warp(a, fl) for a in (self.f2, self.f2x, self.f2y, self.f2xx, self.f2xy, self.f2yy)]

    def energy(self, u, v):
        p = self.params
        w2, w2x, w2y = self.warped(u, v)[:3]
        data = psi((w2 - self.f1) ** 2, p.epsilon)
        grad = psi((w2x - self.f1x) ** 2 + (w2y - self.f1y) ** 2, p.epsilon)
        s = _forward_sq(u) + _forward_sq(v)
        if p.smoothness_form == "inner":
            smooth = psi(self.phi * s, p.epsilon)
        else:
            smooth = self.phi * psi(s, p.epsilon)
        return float(np.sum(data + p.gamma * grad + p.alpha * smooth))


def flow_energy(f1, f2, flow: FlowField, params: FlowParams) -> float:
    """Discrete energy of ``flow`` on the finest level (after normalisation)."""
    a, b = _prepare(f1, f2, params)
    return _Level(a, b, params).energy(flow.u, flow.v)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _sor(du, dv, u, v, a11, a12, a22, b1, b2, wx, wy, omega, iters):
    H, W = du.shape
    for _ in range(iters):
        for color in range(2):
            for i in range(H):
                for j in range((i + color) % 2, W, 2):
                    s = 0.0
                    nu = 0.0
                    nv = 0.0
                    if j > 0:
                        a = wx[i, j - 1]
                        s += a
                        nu += a * (u[i, j - 1] + du[i, j - 1] - u[i, j])
                        nv += a * (v[i, j - 1] + dv[i, j - 1] - v[i, j])
                    if j < W - 1:
                        a = wx[i, j]
                        s += a
                        nu += a * (u[i, j + 1] + du[i, j + 1] - u[i, j])
                        nv += a * (v[i, j + 1] + dv[i, j + 1] - v[i, j])
                    if i > 0:
                        a = wy[i - 1, j]
                        s += a
                        nu += a * (u[i - 1, j] + du[i - 1, j] - u[i, j])
                        nv += a * (v[i - 1, j] + dv[i - 1, j] - v[i, j])
                    if i < H - 1:
                        a = wy[i, j]
                        s += a
                        nu += a * (u[i + 1, j] + du[i + 1, j] - u[i, j])
                        nv += a * (v[i + 1, j] + dv[i + 1, j] - v[i, j])
                    d = a11[i, j] + s
                    if d > 0:
                        du[i, j] = (1 - omega) * du[i, j] + omega * (b1[i, j] - a12[i, j] * dv[i, j] + nu) / d
                    d = a22[i, j] + s
                    if d > 0:
                        dv[i, j] = (1 - omega) * dv[i, j] + omega * (b2[i, j] - a12[i, j] * du[i, j] + nv) / d


def _increment(level: _Level, u, v):
    """Flow increment from one warp: lagged-nonlinearity loop around SOR."""
    p = level.params
    w2, w2x, w2y, wxx, wxy, wyy = level.warped(u, v)
    iz = w2 - level.f1
    ixz = w2x - level.f1x
    iyz = w2y - level.f1y
    ix, iy = w2x, w2y
    du = np.zeros_like(u)
    dv = np.zeros_like(v)
    for _ in range(p.inner_iters):
        pd = psi_prime((iz + ix * du + iy * dv) ** 2, p.epsilon)
        rx = ixz + wxx * du + wxy * dv
        ry = iyz + wxy * du + wyy * dv
        pg = p.gamma * psi_prime(rx * rx + ry * ry, p.epsilon)
        s = _forward_sq(u + du) + _forward_sq(v + dv)
        if p.smoothness_form == "inner":
            g = level.phi * psi_prime(level.phi * s, p.epsilon)
        else:
            g = level.phi * psi_prime(s, p.epsilon)
        g = p.alpha * g
        a11 = pd * ix * ix + pg * (wxx * wxx + wxy * wxy)
        a12 = pd * ix * iy + pg * (wxx * wxy + wxy * wyy)
        a22 = pd * iy * iy + pg * (wxy * wxy + wyy * wyy)
        b1 = -pd * iz * ix - pg * (ixz * wxx + iyz * wxy)
        b2 = -pd * iz * iy - pg * (ixz * wxy + iyz * wyy)
        wx = np.ascontiguousarray(g[:, :-1])
        wy = np.ascontiguousarray(g[:-1, :])
        _sor(du, dv, u, v, a11, a12, a22, b1, b2, wx, wy, p.omega, p.solver_iters)
    return du, dv


def _prepare(f1, f2, params: FlowParams):
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape or f1.ndim != 2:
        raise ValueError(f"frames must be 2-D and equal in size, got {f1.shape} and {f2.shape}")
    if not (np.all(np.isfinite(f1)) and np.all(np.isfinite(f2))):
        raise ValueError("frames contain non-finite values")
    if params.normalize:
        lo = min(f1.min(), f2.min())
        hi = max(f1.max(), f2.max())
        if hi > lo:
            f1 = (f1 - lo) / (hi - lo)
            f2 = (f2 - lo) / (hi - lo)
    if params.presmooth > 0:
        f1 = ndimage.gaussian_filter(f1, params.presmooth, mode="reflect")
        f2 = ndimage.gaussian_filter(f2, params.presmooth, mode="reflect")
    return f1, f2


def _pyramid(img, params: FlowParams):
    levels = [img]
    s = params.pyramid_scale
    while len(levels) < params.levels:
        h, w = levels[-1].shape
        nh, nw = int(round(h * s)), int(round(w * s))
        if min(nh, nw) < params.min_size:
            break
        blurred = ndimage.gaussian_filter(levels[-1], 0.6 * math.sqrt(1.0 / (s * s) - 1.0), mode="reflect")
        levels.append(ndimage.zoom(blurred, (nh / h, nw / w), order=1, mode="nearest", grid_mode=True))
    return levels


def _upsample(u, v, shape):
    h, w = u.shape
    H, W = shape
    zu = ndimage.zoom(u, (H / h, W / w), order=1, mode="nearest", grid_mode=True)
    zv = ndimage.zoom(v, (H / h, W / w), order=1, mode="nearest", grid_mode=True)
    return zu * (W / w), zv * (H / h)


def solve_flow(f1, f2, params: FlowParams | None = None, init: FlowField | None = None,
               history: list | None = None) -> FlowField:
    """Estimate the flow from ``f1`` to ``f2``.

    Parameters
    ----------
    f1, f2 : ndarray
        Equal-size grayscale frames.
    params : FlowParams, optional
    init : FlowField, optional
        Starting flow at full resolution; zero by default.
    history : list, optional
        Receives ``(level, outer_iteration, energy)`` tuples, level 0 being the
        finest. Entry ``outer_iteration = 0`` is the energy before any warp.
    """
    params = params or FlowParams()
    a, b = _prepare(f1, f2, params)
    pa, pb = _pyramid(a, params), _pyramid(b, params)
    n = len(pa)
    u = v = None
    for lev in range(n - 1, -1, -1):
        shape = pa[lev].shape
        if u is None:
            if init is None:
                u, v = np.zeros(shape), np.zeros(shape)
            else:
                fh, fw = init.u.shape
                u = ndimage.zoom(init.u, (shape[0] / fh, shape[1] / fw), order=1, grid_mode=True,
                                 mode="nearest") * (shape[1] / fw)
                v = ndimage.zoom(init.v, (shape[0] / fh, shape[1] / fw), order=1, grid_mode=True,
                                 mode="nearest") * (shape[0] / fh)
        else:
            u, v = _upsample(u, v, shape)
        level = _Level(pa[lev], pb[lev], params)
        e = level.energy(u, v)
        if history is not None:
            history.append((lev, 0, e))
        for it in range(1, params.outer_iters + 1):
            du, dv = _increment(level, u, v)
            # backtrack so that the true (non-linearised) energy never rises
            t = 1.0
            accepted = False
            for _ in range(params.max_backtracks + 1):
                nu, nv = u + t * du, v + t * dv
                ne = level.energy(nu, nv)
                if ne <= e:
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                u, v, e = nu, nv, ne
            if history is not None:
                history.append((lev, it, e))
            if not accepted:
                break
    return FlowField(u, v)


# ---------------------------------------------------------------------------
# Registration and parameter search
# ---------------------------------------------------------------------------

def register_stack(stack, ref_index: int | None = None, params: FlowParams | None = None,
                   flows: list | None = None):
    """Warp every frame onto the reference frame.

    Returns a registered :class:`~mfdenoise.image.FrameStack` whose
    ``validity`` marks samples that came from inside the source frame. The
    estimated flows are appended to ``flows`` when given (``None`` for the
    reference).
    """
    from .image import FrameStack, as_frames

    frames = as_frames(stack)
    if ref_index is None:
        ref_index = getattr(stack, "ref_index", 0)
    params = params or FlowParams()
    ref = frames[ref_index]
    out = frames.copy()
    valid = np.ones(frames.shape, dtype=bool)
    for i in range(len(frames)):
        if i == ref_index:
            if flows is not None:
                flows.append(None)
            continue
        fl = solve_flow(ref, frames[i], params)
        out[i], valid[i] = warp(frames[i], fl, return_mask=True)
        if flows is not None:
            flows.append(fl)
    meta = dict(getattr(stack, "meta", {}) or {})
    return FrameStack(out, registered=True, ref_index=ref_index, validity=valid,
                      sigma=getattr(stack, "sigma", None), meta=meta)


def flow_grid(base: FlowParams | None = None, **axes) -> list:
    """Cartesian product of parameter values, e.g. ``alpha=[15, 35], variant=["SOF2"]``."""
    base = base or FlowParams()
    keys = list(axes)
    return [replace(base, **dict(zip(keys, vals))) for vals in itertools.product(*(axes[k] for k in keys))]


def tune_flow_params(grid, score, maximize: bool = False):
    """Exhaustive search over ``grid``.

    Parameters
    ----------
    grid : iterable of FlowParams
    score : callable
        ``score(params) -> float``; e.g. :func:`epe_objective` or
        :func:`psnr_objective`.
    maximize : bool
        Maximise instead of minimise (PSNR criteria).

    Returns
    -------
    best : FlowParams
        Ties go to the larger ``alpha``.
    scores : list of (FlowParams, float)
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty parameter grid")
    scores = [(p, float(score(p))) for p in grid]
    sign = -1.0 if maximize else 1.0
    best = min(scores, key=lambda ps: (sign * ps[1], -ps[0].alpha))[0]
    return best, scores


def epe_objective(f1, f2, truth: FlowField, border: int = 0):
    def score(p):
        return endpoint_error(solve_flow(f1, f2, p), truth, border)
    return score


def psnr_objective(stack, clean, denoise, border: int = 50, ref_index: int | None = None):
    """Score = PSNR of ``denoise(registered_stack)`` against ``clean``."""
    from .image import psnr

    def score(p):
        reg = register_stack(stack, ref_index, p)
        return psnr(clean, denoise(reg), border)
    return score


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def read_flo(path) -> FlowField:
    """Read a Middlebury ``.flo`` file."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated .flo header")
    magic, = struct.unpack("<f", raw[:4])
    if magic != np.float32(FLO_MAGIC):
        raise ValueError(f"{path}: bad .flo magic {magic}")
    w, h = struct.unpack("<ii", raw[4:12])
    if w < 1 or h < 1:
        raise ValueError(f"{path}: invalid size {w}x{h}")
    need = 8 * w * h
    body = raw[12:12 + need]
    if len(body) < need:
        raise ValueError(f"{path}: truncated .flo data")
    data = np.frombuffer(body, dtype="<f4").reshape(h, w, 2).astype(np.float64)
    return FlowField(data[..., 0], data[..., 1])


def write_flo(flow: FlowField, path) -> None:
    h, w = flow.u.shape
    data = np.stack([flow.u, flow.v], axis=-1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(data.tobytes())


def _color_wheel():
    bands = [(15, (255, 0, 0), (255, 255, 0)), (6, (255, 255, 0), (0, 255, 0)),
             (4, (0, 255, 0), (0, 255, 255)), (11, (0, 255, 255), (0, 0, 255)),
             (13, (0, 0, 255), (255, 0, 255)), (6, (255, 0, 255), (255, 0, 0))]
    rows = []
    for n, a, b in bands:
        t = np.arange(n)[:, None] / n
        rows.append((1 - t) * np.array(a) + t * np.array(b))
    return np.concatenate(rows)


def flow_to_color(flow: FlowField, max_mag: float | None = None) -> np.ndarray:
    """RGB ``uint8`` rendering: hue encodes direction, saturation magnitude."""
    wheel = _color_wheel()
    ncols = len(wheel)
    u, v = flow.u, flow.v
    ok = (np.abs(u) < UNKNOWN_FLOW) & (np.abs(v) < UNKNOWN_FLOW)
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(mag[ok].max()) if ok.any() else 0.0
    scale = max_mag if max_mag > 0 else 1.0
    un, vn = u / scale, v / scale
    rad = np.minimum(np.hypot(un, vn), 1.0)
    ang = np.arctan2(-vn, -un) / np.pi
    fk = (ang + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int) % ncols
    k1 = (k0 + 1) % ncols
    f = (fk - np.floor(fk))[..., None]
    col = ((1 - f) * wheel[k0] + f * wheel[k1]) / 255.0
    col = 1 - rad[..., None] * (1 - col)
    col[~ok] = 0.0
    return np.floor(255 * col + 0.5).astype(np.uint8)


def save_flow_png(flow: FlowField, path, max_mag: float | None = None) -> None:
    Image.fromarray(flow_to_color(flow, max_mag), mode="RGB").save(path)
