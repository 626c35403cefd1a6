"""Experiment grids: dataset construction, PSNR records, tables and comparisons.

Benchmark images are not bundled. Point ``data_dir`` (or the
``MFDENOISE_DATA`` environment variable) at a directory laid out as::

    bridge.png  peppers.png  house.png          # .pgm / .tif also accepted
    grove2/frame07.png ... grove2/frame14.png   # Middlebury naming
    grove2/flow10.flo                           # ground truth 10 -> 11
    shoe/*.png  birdhouse/*.png                 # frames in sorted order

The published PSNR values live in ``data/reference_psnr.tsv`` with keys
``(dataset, sigma, frames, method)``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, is_dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .collaborative import set_workers
from .flow import FlowParams, read_flo, register_stack
from .image import FrameStack, load_image, noise_generator, psnr
from .multiframe import MethodId, default_params, run_method, run_sf

REGISTERED = ("bridge", "peppers", "house")
NON_REGISTERED = ("grove2", "shoe", "birdhouse")
IMAGE_SUFFIXES = (".png", ".pgm", ".tif", ".tiff")
DATA_ENV = "MFDENOISE_DATA"

# (1-based frame numbers, reference frame number) for each (dataset, L)
FRAME_SETS = {
    ("grove2", 4): (range(9, 13), 10),
    ("grove2", 8): (range(7, 15), 10),
    ("shoe", 5): (range(3, 8), 5),
    ("shoe", 10): (range(1, 11), 5),
    ("birdhouse", 5): (range(3, 8), 5),
    ("birdhouse", 10): (range(1, 11), 5),
}
GOLDEN = 0x9E3779B97F4A7C15
RECORD_FIELDS = ("dataset", "sigma", "frames", "method", "psnr", "seconds", "spec_hash", "params")


class DatasetMissing(FileNotFoundError):
    """Benchmark files are absent; ``expected`` lists the paths looked for."""

    def __init__(self, dataset, expected):
        self.dataset = dataset
        self.expected = [str(p) for p in expected]
        super().__init__(f"dataset {dataset!r} not found; expected one of: " + ", ".join(self.expected))


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def frame_seed(seed: int, index: int) -> int:
    """Noise seed of frame ``index``: ``seed XOR (index * 0x9E3779B97F4A7C15) mod 2**64``."""
    return (int(seed) ^ (int(index) * GOLDEN)) & (2**64 - 1)


def make_registered_dataset(clean, sigma: float, frames: int, seed: int = 0) -> FrameStack:
    """``frames`` independent AWGN realisations of ``clean``."""
    if sigma < 0 or frames < 1:
        raise ValueError("need sigma >= 0 and at least one frame")
    clean = np.asarray(clean, dtype=np.float64)
    out = np.empty((frames,) + clean.shape)
    for i in range(frames):
        if sigma == 0:
            out[i] = clean
        else:
            out[i] = clean + sigma * noise_generator(frame_seed(seed, i)).standard_normal(clean.shape)
    return FrameStack(out, registered=True, ref_index=0, sigma=float(sigma),
                      meta={"seed": int(seed)})


def data_dir(path=None) -> Path:
    if path is None:
        path = os.environ.get(DATA_ENV)
    if not path:
        raise DatasetMissing("<data directory>", [f"${DATA_ENV}", "--data-dir"])
    return Path(path)


def _find_image(base: Path, stem: str) -> Path:
    cands = [base / (stem + s) for s in IMAGE_SUFFIXES]
    for c in cands:
        if c.exists():
            return c
    raise DatasetMissing(stem, cands)


def load_clean_image(dataset: str, directory=None) -> np.ndarray:
    """Clean image of a registered-data benchmark, or any image path."""
    p = Path(dataset)
    if p.suffix.lower() in IMAGE_SUFFIXES:
        if not p.exists():
            raise DatasetMissing(dataset, [p])
        return load_image(p, luma=True)
    return load_image(_find_image(data_dir(directory), dataset), luma=True)


def sequence_files(dataset: str, frames: int, directory=None):
    """Frame files of a non-registered sequence and the reference position."""
    base = data_dir(directory) / dataset
    if (dataset, frames) not in FRAME_SETS:
        raise ValueError(f"no frame set defined for {dataset} with {frames} frames")
    numbers, ref = FRAME_SETS[(dataset, frames)]
    if dataset == "grove2":
        files = [base / f"frame{n:02d}.png" for n in numbers]
    else:
        found = sorted(p for p in base.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES) if base.is_dir() else []
        if len(found) < max(numbers):
            raise DatasetMissing(dataset, [base / f"<at least {max(numbers)} frames>"])
        files = [found[n - 1] for n in numbers]
    missing = [f for f in files if not f.exists()]
    if missing:
        raise DatasetMissing(dataset, missing)
    return files, list(numbers).index(ref)


def load_sequence(dataset: str, frames: int, sigma: float, seed: int = 0, directory=None):
    """Noisy non-registered stack plus the clean reference frame."""
    files, ref = sequence_files(dataset, frames, directory)
    clean = np.stack([load_image(f, luma=True) for f in files])
    noisy = make_registered_dataset(np.zeros_like(clean[0]), sigma, frames, seed).frames + clean
    return FrameStack(noisy, registered=False, ref_index=ref, sigma=float(sigma)), clean[ref]


def ground_truth_flow(directory=None):
    path = data_dir(directory) / "grove2" / "flow10.flo"
    if not path.exists():
        raise DatasetMissing("grove2 flow", [path])
    return read_flo(path)


def _data_file(name):
    return resources.files("mfdenoise").joinpath("data", name)


def _read_tsv(name_or_path):
    if isinstance(name_or_path, (str, Path)) and Path(name_or_path).exists():
        text = Path(name_or_path).read_text()
    else:
        text = _data_file(name_or_path).read_text()
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    return list(csv.DictReader(lines, delimiter="\t"))


def reference_table(path=None) -> dict:
    """Published PSNR values keyed by ``(dataset, sigma, frames, method)``."""
    rows = _read_tsv(path or "reference_psnr.tsv")
    try:
        return {(r["dataset"], int(r["sigma"]), int(r["frames"]), r["method"]): float(r["psnr"])
                for r in rows}
    except (KeyError, ValueError) as exc:
        raise ValueError(f"malformed reference table: {exc}") from exc


def table_flow_params(dataset: str, sigma: float, base: FlowParams | None = None) -> FlowParams:
    """Published flow settings for a dataset; unit-scale lambda mapped to gray levels."""
    base = base or FlowParams()
    for r in _read_tsv("flow_params.tsv"):
        if r["dataset"] == dataset and int(r["sigma"]) == int(sigma):
            lam = base.lam if r["lambda"] == "-" else 255.0 * float(r["lambda"])
            return FlowParams(**{**_as_dict(base), "alpha": float(r["alpha"]),
                                 "gamma": float(r["gamma"]), "lam": lam, "variant": r["variant"]})
    return base


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------

def _as_dict(obj):
    return asdict(obj) if is_dataclass(obj) else dict(obj)


@dataclass
class ExperimentSpec:
    """One experiment grid.

    ``flow`` is ``"table"`` (published settings), ``"default"`` or
    ``"explicit"`` (use ``flow_params``). ``border=None`` means 0 for
    registered data and 50 otherwise. ``crop`` keeps the central
    ``crop x crop`` region of registered images for quick runs.
    ``sweep_reference`` reports SF at the best reference frame instead of
    frame 0 (registered data only; L times the cost). ``workers`` runs
    ``(sigma, L)`` groups in separate processes and ``threads`` sets the
    filter threads; neither changes any result.
    """

    dataset: str
    sigmas: list
    frame_counts: list
    methods: list
    seed: int = 0
    border: int | None = None
    flow: str = "table"
    flow_params: FlowParams | None = None
    data_dir: str | None = None
    crop: int | None = None
    workers: int = 1
    threads: int = 1
    filter_overrides: dict = field(default_factory=dict)
    sweep_reference: bool = False

    def __post_init__(self):
        if not self.sigmas or not self.frame_counts or not self.methods:
            raise ValueError("sigmas, frame_counts and methods must be non-empty")
        if self.border is not None and self.border < 0:
            raise ValueError("border must be >= 0")
        self.methods = [str(MethodId.parse(m)) if isinstance(m, str) else str(m) for m in self.methods]
        if self.flow not in ("table", "default", "explicit"):
            raise ValueError("flow must be 'table', 'default' or 'explicit'")

    @property
    def registered(self):
        return self.dataset not in NON_REGISTERED

    @property
    def effective_border(self):
        if self.border is not None:
            return self.border
        return 0 if self.registered else 50

    def key(self) -> str:
        d = _as_dict(self)
        d.pop("workers")
        d.pop("threads")
        d["flow_params"] = None if self.flow_params is None else _as_dict(self.flow_params)
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:12]


@dataclass
class ExperimentRecord:
    dataset: str
    sigma: float
    frames: int
    method: str
    psnr: float
    seconds: float
    spec_hash: str
    params: str

    def cell(self):
        return (self.dataset, int(self.sigma), int(self.frames), self.method)


def _center_crop(img, size):
    if size is None:
        return img
    h, w = img.shape
    size = min(size, h, w)
    y, x = (h - size) // 2, (w - size) // 2
    return img[y:y + size, x:x + size]


def _filter_params(method: MethodId, sigma, overrides):
    p = default_params(method.filter, sigma)
    extra = overrides.get(method.filter, {})
    if extra:
        from dataclasses import replace
        p = replace(p, **extra)
    return p


def _run_cell_group(spec: ExperimentSpec, sigma, frames):
    """All methods for one (sigma, L); shares dataset and registration."""
    old = set_workers(spec.threads)
    try:
        return _cell_group(spec, sigma, frames)
    finally:
        set_workers(old)


def _cell_group(spec, sigma, frames):
    h = spec.key()
    if spec.registered:
        clean = _center_crop(load_clean_image(spec.dataset, spec.data_dir), spec.crop)
        stack = make_registered_dataset(clean, sigma, frames, spec.seed)
        flow_desc = None
    else:
        noisy, clean = load_sequence(spec.dataset, frames, sigma, spec.seed, spec.data_dir)
        if spec.flow == "explicit" and spec.flow_params is not None:
            fp = spec.flow_params
        elif spec.flow == "table":
            fp = table_flow_params(spec.dataset, sigma)
        else:
            fp = FlowParams()
        stack = register_stack(noisy, noisy.ref_index, fp)
        flow_desc = _as_dict(fp)
    out = []
    for name in spec.methods:
        m = MethodId.parse(name)
        params = _filter_params(m, sigma, spec.filter_overrides)
        t0 = time.perf_counter()
        if m.extension == "SF" and spec.sweep_reference and spec.registered:
            value = max(psnr(clean, run_sf(stack, m.filter, params, ref_index=i), spec.effective_border)
                        for i in range(len(stack)))
        else:
            value = psnr(clean, run_method(stack, m, params), spec.effective_border)
        dt = time.perf_counter() - t0
        snap = {"filter": _as_dict(params)}
        if flow_desc is not None:
            snap["flow"] = flow_desc
        out.append(ExperimentRecord(spec.dataset, float(sigma), int(frames), str(m),
                                    value, dt, h,
                                    json.dumps(snap, sort_keys=True)))
    return out


def _method_rank(spec):
    return {m: i for i, m in enumerate(spec.methods)}


def run_grid(spec: ExperimentSpec):
    """Run every (sigma, L, method) cell of ``spec``.

    Returns
    -------
    records : list of ExperimentRecord
        Sorted by ``(sigma, frames, method order)`` whatever the worker count.
    table : str
        Aligned text table, one row per ``(sigma, L)``.
    """
    groups = [(s, L) for s in spec.sigmas for L in spec.frame_counts]
    if spec.workers > 1 and len(groups) > 1:
        with ProcessPoolExecutor(spec.workers) as ex:
            parts = list(ex.map(_run_cell_group, [spec] * len(groups), *zip(*groups)))
    else:
        parts = [_run_cell_group(spec, s, L) for s, L in groups]
    rank = _method_rank(spec)
    records = sorted((r for p in parts for r in p), key=lambda r: (r.sigma, r.frames, rank[r.method]))
    return records, format_table(records, spec.methods)


_PREFIX = {"bridge": "B", "peppers": "P", "house": "H", "grove2": "G", "shoe": "S", "birdhouse": "BH"}


def format_table(records, methods=None) -> str:
    """Aligned text table in the published layout (rows like ``H80 / L=5``)."""
    if not records:
        return ""
    methods = methods or list(dict.fromkeys(r.method for r in records))
    rows = {}
    for r in records:
        label = f"{_PREFIX.get(r.dataset, Path(r.dataset).stem + '@')}{int(r.sigma)}"
        rows.setdefault((r.frames, r.sigma, r.dataset, label), {})[r.method] = r.psnr
    head = ["Data", "L"] + list(methods)
    lines = [head]
    for (L, _, _, label), cells in sorted(rows.items()):
        lines.append([label, str(L)] + [f"{cells[m]:.2f}" if m in cells else "-" for m in methods])
    widths = [max(len(row[i]) for row in lines) for i in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in lines)


def records_to_tsv(records) -> str:
    """Machine-readable rows; header ``dataset sigma frames method psnr seconds spec_hash params``."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in records:
        w.writerow([r.dataset, r.sigma, r.frames, r.method, repr(r.psnr), f"{r.seconds:.3f}",
                    r.spec_hash, r.params])
    return buf.getvalue()


def records_from_tsv(text: str):
    rows = csv.DictReader(io.StringIO(text), delimiter="\t")
    return [ExperimentRecord(r["dataset"], float(r["sigma"]), int(r["frames"]), r["method"],
                             float(r["psnr"]), float(r["seconds"]), r["spec_hash"], r["params"])
            for r in rows]


# ---------------------------------------------------------------------------
# Comparison with published values
# ---------------------------------------------------------------------------

@dataclass
class CellComparison:
    cell: tuple
    ours: float
    reference: float
    delta: float
    within: bool


@dataclass
class RowOrdering:
    row: tuple
    methods: list
    ours: list
    reference: list
    pair_agreement: float
    same_ranking: bool


@dataclass
class ComparisonReport:
    cells: list
    rows: list
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(c.within for c in self.cells)

    def text(self) -> str:
        out = [f"{'cell':<32} {'ours':>7} {'ref':>7} {'delta':>7}  within {self.tolerance:g} dB"]
        for c in self.cells:
            key = "/".join(str(x) for x in c.cell)
            out.append(f"{key:<32} {c.ours:7.2f} {c.reference:7.2f} {c.delta:+7.2f}  {'yes' if c.within else 'NO'}")
        for r in self.rows:
            key = "/".join(str(x) for x in r.row)
            out.append(f"ranking {key}: pairwise agreement {r.pair_agreement:.2f}, "
                       f"ours {' > '.join(r.ours)} | ref {' > '.join(r.reference)}")
        out.append("PASS" if self.passed else "FAIL")
        return "\n".join(out)


def compare_to_reference(records, reference=None, tolerance: float = 1.0) -> ComparisonReport:
    """Per-cell deltas and per-row method rankings against published values.

    ``reference`` is a mapping from cell key to PSNR or a TSV path; the
    shipped table is used by default. Cells missing from it raise KeyError.
    """
    ref = reference if isinstance(reference, dict) else reference_table(reference)
    cells = []
    for r in records:
        key = r.cell()
        if key not in ref:
            raise KeyError(f"no published value for cell {key}")
        d = r.psnr - ref[key]
        cells.append(CellComparison(key, r.psnr, ref[key], d, bool(abs(d) <= tolerance)))
    by_row = {}
    for c in cells:
        by_row.setdefault(c.cell[:3], []).append(c)
    rows = []
    for row, cs in sorted(by_row.items()):
        if len(cs) < 2:
            continue
        ours = [c.cell[3] for c in sorted(cs, key=lambda c: -c.ours)]
        theirs = [c.cell[3] for c in sorted(cs, key=lambda c: -c.reference)]
        agree = total = 0
        for i in range(len(cs)):
            for j in range(i + 1, len(cs)):
                total += 1
                agree += (cs[i].ours - cs[j].ours) * (cs[i].reference - cs[j].reference) > 0
        rows.append(RowOrdering(row, [c.cell[3] for c in cs], ours, theirs, agree / total, ours == theirs))
    return ComparisonReport(cells, rows, tolerance)


def ordering_violations(records, pairs=(("AF", "FA"), ("MF", "SF"))):
    """Cells where ``PSNR(a) > PSNR(b)`` fails for a filter, per ``(a, b)`` pair."""
    table = {r.cell(): r.psnr for r in records}
    bad = []
    for (ds, s, L, m), v in table.items():
        mid = MethodId.parse(m)
        for a, b in pairs:
            if mid.extension != a:
                continue
            other = (ds, s, L, MethodId(mid.filter, b).short)
            if other in table and not v > table[other]:
                bad.append((ds, s, L, mid.filter, a, b, v, table[other]))
    return bad

