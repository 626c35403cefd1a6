"""Grouping / filtering / aggregation loop shared by BM3D and NLB.

A step visits reference patches on a lattice of one or more frames, groups
similar patches from a set of candidate frames, filters each group with a
callback and accumulates the estimates into per-frame buffers.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .patches import MatchConfig, lattice_axis, match_references

# Lattice rows per work unit. Fixed so that the summation order in the
# buffers, and therefore every output bit, never depends on the caller.
CHUNK_ROWS = 16

_workers = max(1, int(os.environ.get("MFDENOISE_THREADS", "1")))


def set_workers(n: int) -> int:
    """Threads used per filtering step; returns the previous value.

    Results do not depend on this number: work units are fixed and their
    contributions are merged in a fixed order.
    """
    global _workers
    old = _workers
    _workers = max(1, int(n))
    return old


def get_workers() -> int:
    return _workers


@dataclass
class GroupEstimate:
    """Filtered patches of one group, ready for aggregation."""

    frames: np.ndarray
    ys: np.ndarray
    xs: np.ndarray
    patches: np.ndarray
    weight: float
    target: np.ndarray

    @property
    def patch_size(self):
        return self.patches.shape[-1]


@dataclass
class AggregationBuffers:
    numerator: np.ndarray
    denominator: np.ndarray

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))

    def add(self, frames, ys, xs, patches, weights):
        """Accumulate ``weights * patches`` at the given top-left corners."""
        L, H, W = self.numerator.shape
        patches = np.asarray(patches, dtype=np.float64)
        k = patches.shape[-1]
        r = np.arange(k)
        flat = ((np.asarray(frames)[:, None, None] * H
                 + np.asarray(ys)[:, None, None] + r[None, :, None]) * W
                + np.asarray(xs)[:, None, None] + r[None, None, :])
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64)[:, None, None], patches.shape)
        size = L * H * W
        self.numerator += np.bincount(flat.ravel(), (w * patches).ravel(), minlength=size).reshape(L, H, W)
        self.denominator += np.bincount(flat.ravel(), w.ravel(), minlength=size).reshape(L, H, W)

    def covered(self, frame):
        return bool(np.all(self.denominator[frame] > 0))

    def result(self, frames=None) -> np.ndarray:
        """Weighted average ``numerator / denominator`` for ``frames``."""
        idx = range(self.numerator.shape[0]) if frames is None else frames
        idx = list(idx)
        den = self.denominator[idx]
        if np.any(den <= 0):
            raise RuntimeError("aggregation left pixels without any estimate")
        return self.numerator[idx] / den

    def fused(self) -> np.ndarray:
        """All frames merged into one image by 2-D position.

        On registered frames this puts every estimate, whatever frame its
        patch came from, into a single weighted average.
        """
        den = self.denominator.sum(axis=0)
        if np.any(den <= 0):
            raise RuntimeError("aggregation left pixels without any estimate")
        return self.numerator.sum(axis=0) / den


def aggregate(estimates, buffers: AggregationBuffers) -> np.ndarray:
    """Add group estimates to ``buffers`` and return the covered frames."""
    touched = set()
    for est in estimates:
        n = len(est.frames)
        buffers.add(est.target, est.ys, est.xs, est.patches, np.full(n, est.weight))
        touched.update(int(t) for t in np.atleast_1d(est.target))
    return buffers.result(sorted(touched))


def run_step(noisy, match_src, cfg: MatchConfig, ref_frames, cand_frames, filter_fn,
             pilot=None, to_reference=False, record=None) -> AggregationBuffers:
    """One grouping/filtering/aggregation pass.

    Parameters
    ----------
    noisy : ndarray, shape (L, H, W)
        Frames whose patches are filtered.
    match_src : ndarray, shape (L, H, W)
        Frames on which block matching distances are measured.
    cfg : MatchConfig
    ref_frames, cand_frames : sequence of int
        Frames carrying reference patches, and frames searched for matches.
    filter_fn : callable
        ``filter_fn(groups, pilot_groups) -> (estimates, weights)`` with
        ``groups`` of shape ``(G, n, k, k)`` and one weight per group.
    pilot : ndarray, optional
        Frames providing pilot patches at the same positions as ``noisy``.
    to_reference : bool
        Aggregate every member onto its reference frame instead of its own
        frame. Only meaningful for registered frames.
    record : list, optional
        Receives a :class:`GroupEstimate` per group when given.
    """
    L, H, W = noisy.shape
    k = cfg.patch_size
    ys_all = lattice_axis(H, k, cfg.step)
    xs = lattice_axis(W, k, cfg.step)
    buffers = AggregationBuffers.zeros(noisy.shape)
    views = np.lib.stride_tricks.sliding_window_view(noisy, (k, k), axis=(1, 2))
    pviews = None if pilot is None else np.lib.stride_tricks.sliding_window_view(pilot, (k, k), axis=(1, 2))

    def unit(job):
        r, c0 = job
        m = match_references(match_src, r, ys_all[c0:c0 + CHUNK_ROWS], xs, cfg, cand_frames)
        parts = []
        groups_out = []
        for cnt in np.unique(m.count):
            sel = np.nonzero(m.count == cnt)[0]
            fr, yy, xx = m.frame[sel, :cnt], m.y[sel, :cnt], m.x[sel, :cnt]
            groups = views[fr, yy, xx]
            pgroups = None if pviews is None else pviews[fr, yy, xx]
            est, w = filter_fn(groups, pgroups)
            tgt = np.full_like(fr, r) if to_reference else fr
            parts.append((tgt.ravel(), yy.ravel(), xx.ravel(), est.reshape(-1, k, k),
                          np.repeat(w, cnt)))
            if record is not None:
                for g in range(len(sel)):
                    groups_out.append(GroupEstimate(fr[g].copy(), yy[g].copy(), xx[g].copy(),
                                                    est[g].copy(), float(w[g]), tgt[g].copy()))
        return [np.concatenate(p) for p in zip(*parts)], groups_out

    jobs = [(r, c0) for r in ref_frames for c0 in range(0, len(ys_all), CHUNK_ROWS)]
    workers = min(get_workers(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = ex.map(unit, jobs)  # yields in job order
            for contrib, groups_out in results:
                buffers.add(*contrib)
                if record is not None:
                    record.extend(groups_out)
    else:
        for job in jobs:
            contrib, groups_out = unit(job)
            buffers.add(*contrib)
            if record is not None:
                record.extend(groups_out)
    return buffers


def dispatch_modes(two_step, stack, params, mode, ref_index, record, return_frames):
    """Shared mode handling of the two-step filters.

    ``two_step(frames, params, ref_frames, step1_cands, step2_cands,
    to_reference, record)`` must return the step-2 buffers.
    """
    from .image import as_frames

    frames = as_frames(stack)
    if len(frames) == 0:
        raise ValueError("empty stack")
    if ref_index is None:
        ref_index = getattr(stack, "ref_index", 0)
    if not 0 <= ref_index < len(frames):
        raise IndexError(f"ref_index {ref_index} outside the stack")
    L = len(frames)
    if mode == "single":
        sub = frames[ref_index:ref_index + 1]
        return two_step(sub, params, [0], [0], [0], False, record).result([0])[0]
    if mode == "mf":
        every = list(range(L))
        buf = two_step(frames, params, every, every, every, False, record)
        fused = buf.fused()
        return (buf.result(), fused) if return_frames else fused
    if mode == "sf":
        buf = two_step(frames, params, [ref_index], list(range(L)), [ref_index], True, record)
        return buf.result([ref_index])[0]
    raise ValueError(f"unknown mode {mode!r}")
