"""Patch extraction, reference lattices and L2 block matching.

Candidates are ranked by the sum of squared differences (SSD) to the
reference patch. Ties are broken by ``(frame, y, x)`` in lexicographic order,
and the reference patch itself always leads its group.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numba import njit

from .image import as_frames


class PatchRef(NamedTuple):
    frame: int
    y: int
    x: int
    size: int


@dataclass
class PatchGroup:
    reference: PatchRef
    members: list
    distances: np.ndarray

    def __len__(self):
        return len(self.members)


@dataclass(frozen=True)
class MatchConfig:
    """Block matching settings.

    ``distance_threshold`` is compared to the per-pixel mean squared
    difference (SSD / k**2); ``None`` disables it. With ``dyadic=True`` group
    sizes are truncated to the largest power of two not exceeding the number
    of accepted candidates.
    """

    patch_size: int
    search_radius: int
    n_max: int
    step: int = 1
    distance_threshold: float | None = None
    dyadic: bool = False

    def __post_init__(self):
        if self.patch_size < 1 or self.n_max < 1 or self.step < 1:
            raise ValueError("patch_size, n_max and step must be >= 1")
        if self.search_radius < 0:
            raise ValueError("search_radius must be >= 0")


def _check_ref(frames: np.ndarray, ref: PatchRef):
    L, H, W = frames.shape
    k = ref.size
    if not (0 <= ref.frame < L and 0 <= ref.y <= H - k and 0 <= ref.x <= W - k and k >= 1):
        raise IndexError(f"patch {ref} lies outside a {L}x{H}x{W} stack")


def extract(stack, ref: PatchRef) -> np.ndarray:
    """Copy of the ``k x k`` block at ``ref``."""
    frames = as_frames(stack)
    _check_ref(frames, ref)
    k = ref.size
    return frames[ref.frame, ref.y:ref.y + k, ref.x:ref.x + k].copy()


def write_back(stack, ref: PatchRef, patch) -> None:
    """Overwrite the block at ``ref`` in place (``stack`` must be an ndarray)."""
    frames = stack.frames if hasattr(stack, "frames") else stack
    if frames.ndim == 2:
        frames = frames[None]
    _check_ref(frames, ref)
    k = ref.size
    frames[ref.frame, ref.y:ref.y + k, ref.x:ref.x + k] = patch


def lattice_axis(length: int, k: int, step: int) -> np.ndarray:
    last = length - k
    if last < 0:
        raise ValueError(f"patch size {k} exceeds image dimension {length}")
    if not 1 <= step <= k:
        # a larger stride would leave gaps between patches
        raise ValueError(f"lattice step must be in [1, {k}], got {step}")
    pos = np.arange(0, last + 1, step)
    if pos[-1] != last:
        pos = np.append(pos, last)
    return pos


def reference_lattice(width: int, height: int, k: int, step: int) -> list:
    """Top-left corners ``(y, x)`` of reference patches.

    Positions advance by ``step`` and always include the last valid offset in
    each direction, so every pixel is covered by at least one patch.
    """
    ys = lattice_axis(height, k, step)
    xs = lattice_axis(width, k, step)
    return [(int(y), int(x)) for y in ys for x in xs]


def _pow2_floor(n):
    n = np.asarray(n)
    out = np.zeros_like(n)
    pos = n > 0
    out[pos] = 2 ** np.floor(np.log2(n[pos])).astype(n.dtype)
    return out


def block_match(stack, reference: PatchRef, cfg: MatchConfig, match_source=None,
                frames=None, center_offsets=None) -> PatchGroup:
    """Find the patches most similar to ``reference``.

    Parameters
    ----------
    stack : array_like or FrameStack
        ``(L, H, W)`` frames (a single image is treated as ``L = 1``).
    reference : PatchRef
    cfg : MatchConfig
    match_source : array_like, optional
        Frames on which distances are measured; defaults to ``stack``.
    frames : sequence of int, optional
        Frames searched; all frames by default.
    center_offsets : dict, optional
        Maps frame index to an integer ``(dy, dx)`` displacement of the search
        center, e.g. rounded optical flow. Frames not listed use zero.

    Returns
    -------
    PatchGroup
        Members sorted by ascending SSD. The reference comes first.
    """
    data = as_frames(stack)
    src = data if match_source is None else as_frames(match_source)
    if src.shape != data.shape:
        raise ValueError("match_source must have the same shape as the stack")
    _check_ref(data, reference)
    if reference.size != cfg.patch_size:
        raise ValueError("reference size differs from cfg.patch_size")
    L, H, W = src.shape
    k, R = cfg.patch_size, cfg.search_radius
    frame_list = range(L) if frames is None else sorted(set(frames))
    ref_patch = src[reference.frame, reference.y:reference.y + k, reference.x:reference.x + k]

    keys = []
    for f in frame_list:
        dy0, dx0 = (center_offsets or {}).get(f, (0, 0))
        cy, cx = reference.y + int(dy0), reference.x + int(dx0)
        y_lo, y_hi = max(cy - R, 0), min(cy + R, H - k)
        x_lo, x_hi = max(cx - R, 0), min(cx + R, W - k)
        if y_lo > y_hi or x_lo > x_hi:
            continue
        region = src[f, y_lo:y_hi + k, x_lo:x_hi + k]
        windows = np.lib.stride_tricks.sliding_window_view(region, (k, k))
        ssd = ((windows - ref_patch) ** 2).sum(axis=(-2, -1))
        yy, xx = np.meshgrid(np.arange(y_lo, y_hi + 1), np.arange(x_lo, x_hi + 1), indexing="ij")
        for d, y, x in zip(ssd.ravel(), yy.ravel(), xx.ravel()):
            if f == reference.frame and y == reference.y and x == reference.x:
                continue
            keys.append((float(d), f, int(y), int(x)))
    keys.sort()
    if cfg.distance_threshold is not None:
        limit = cfg.distance_threshold * k * k
        keys = [kk for kk in keys if kk[0] <= limit]
    self_dist = float(((src[reference.frame, reference.y:reference.y + k,
                            reference.x:reference.x + k] - ref_patch) ** 2).sum())
    chosen = [(self_dist, reference.frame, reference.y, reference.x)] + keys[:cfg.n_max - 1]
    if cfg.dyadic:
        chosen = chosen[:int(_pow2_floor(np.array([len(chosen)]))[0])]
    members = [PatchRef(f, y, x, k) for _, f, y, x in chosen]
    return PatchGroup(reference, members, np.array([c[0] for c in chosen]))


# ---------------------------------------------------------------------------
# Batched matching over a lattice of references
# ---------------------------------------------------------------------------

@dataclass
class MatchResult:
    """Groups for a block of reference patches.

    ``frame``, ``y``, ``x`` and ``dist`` have shape ``(n_refs, n_max)``;
    entries past ``count[i]`` are padding and must be ignored.
    """

    ref_y: np.ndarray
    ref_x: np.ndarray
    frame: np.ndarray
    y: np.ndarray
    x: np.ndarray
    dist: np.ndarray
    count: np.ndarray


@njit(cache=True, nogil=True)
def _ssd_block(ref_src, cand, ys, xs, k, R, out):
    """SSD of every reference at ``(ys x xs)`` to every offset in the window.

    ``out`` has shape ``(len(ys), len(xs), 2R+1, 2R+1)``; candidates outside
    the frame get ``inf``.
    """
    H, W = cand.shape
    colsum = np.empty(W)
    for a in range(len(ys)):
        y = ys[a]
        for dy in range(-R, R + 1):
            yc = y + dy
            if yc < 0 or yc > H - k:
                for b in range(len(xs)):
                    for dx in range(2 * R + 1):
                        out[a, b, dy + R, dx] = np.inf
                continue
            for dx in range(-R, R + 1):
                lo = max(0, -dx)
                hi = min(W, W - dx)
                cs = colsum[lo:hi]
                cs[:] = 0.0
                # zero-based indices over slices let the loop vectorize
                for i in range(k):
                    rr = ref_src[y + i, lo:hi]
                    cr = cand[yc + i, lo + dx:hi + dx]
                    for t in range(hi - lo):
                        d = rr[t] - cr[t]
                        cs[t] += d * d
                for b in range(len(xs)):
                    x = xs[b]
                    xc = x + dx
                    if xc < 0 or xc > W - k:
                        out[a, b, dy + R, dx + R] = np.inf
                        continue
                    s = 0.0
                    for j in range(k):
                        s += colsum[x + j]
                    out[a, b, dy + R, dx + R] = s


@njit(cache=True, nogil=True)
def _merge_best(dist, base_id, self_col, best_d, best_i, filled):
    """Fold one frame's candidate distances into the running top lists.

    Candidate ids grow with column order and across frames, so a strict
    comparison keeps the smallest id among equal distances. ``self_col``
    (or -1) marks the reference itself, which is ranked first.
    """
    nref, m = dist.shape
    n = best_d.shape[1]
    for r in range(nref):
        c = filled[r]
        for j in range(m):
            d = dist[r, j]
            if j == self_col:
                d = -1.0
            if c == n and not d < best_d[r, n - 1]:
                continue
            pos = c if c < n else n - 1
            while pos > 0 and d < best_d[r, pos - 1]:
                if pos < n:
                    best_d[r, pos] = best_d[r, pos - 1]
                    best_i[r, pos] = best_i[r, pos - 1]
                pos -= 1
            best_d[r, pos] = d
            best_i[r, pos] = base_id + j
            if c < n:
                c += 1
        filled[r] = c


def match_references(match_src, ref_frame: int, ys, xs, cfg: MatchConfig,
                     cand_frames=None) -> MatchResult:
    """Block-match every reference at ``ys x xs`` on ``ref_frame``.

    Produces the same groups as calling :func:`block_match` per reference in
    registered mode.
    """
    src = as_frames(match_src)
    L, H, W = src.shape
    k, R, n = cfg.patch_size, cfg.search_radius, cfg.n_max
    ys = np.ascontiguousarray(ys, dtype=np.int64)
    xs = np.ascontiguousarray(xs, dtype=np.int64)
    cand_frames = list(range(L)) if cand_frames is None else sorted(set(cand_frames))
    side = 2 * R + 1
    n_off = side * side
    nref = len(ys) * len(xs)
    ref_src = np.ascontiguousarray(src[ref_frame])

    best_d = np.full((nref, n), np.inf)
    best_i = np.zeros((nref, n), dtype=np.int64)
    filled = np.zeros(nref, dtype=np.int64)
    dist = np.empty((len(ys), len(xs), side, side))
    for fi, f in enumerate(cand_frames):
        _ssd_block(ref_src, np.ascontiguousarray(src[f]), ys, xs, k, R, dist)
        self_col = R * side + R if f == ref_frame else -1
        _merge_best(dist.reshape(nref, n_off), fi * n_off, self_col, best_d, best_i, filled)

    ok = np.isfinite(best_d)
    if cfg.distance_threshold is not None:
        ok &= best_d <= cfg.distance_threshold * k * k
    # rows are sorted, so accepted entries form a prefix
    count = ok.sum(axis=1)
    if cfg.dyadic:
        count = _pow2_floor(count)
    best_d = np.where(best_d < 0, 0.0, best_d)

    fidx = best_i // n_off
    off = best_i % n_off
    frame = np.asarray(cand_frames)[fidx]
    ry = np.repeat(ys, len(xs))
    rx = np.tile(xs, len(ys))
    y = ry[:, None] + off // side - R
    x = rx[:, None] + off % side - R
    pad = np.arange(n)[None, :] >= count[:, None]
    y[pad] = np.broadcast_to(ry[:, None], y.shape)[pad]
    x[pad] = np.broadcast_to(rx[:, None], x.shape)[pad]
    frame[pad] = ref_frame
    return MatchResult(ry, rx, frame, y, x, best_d, count)
