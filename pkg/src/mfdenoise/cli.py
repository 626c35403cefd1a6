"""Command line interface: ``mfdenoise <command> [options]``.

Commands
--------
corrupt   add seeded AWGN to an image (one or more realisations)
flow      estimate optical flow between two frames
register  warp frames onto a reference frame
denoise   run one method on a stack of frames
bench     run an experiment grid and print the table
compare   compare benchmark records with the published values

Every option can also come from ``--config FILE`` holding ``key = value``
lines (keys are option names without dashes, ``-`` or ``_`` both work).
Command line values take precedence. Errors exit with status 1 and print
one ``error<TAB>Type<TAB>message`` line on stderr.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import flow as flowmod
from .harness import (ExperimentSpec, compare_to_reference, make_registered_dataset,
                      records_from_tsv, records_to_tsv, run_grid)
from .image import FrameStack, load_image, psnr, save_image
from .multiframe import MethodId, default_params, run_pipeline


def _floats(text):
    return [float(x) for x in str(text).split(",") if x.strip()]


def _ints(text):
    return [int(x) for x in str(text).split(",") if x.strip()]


def read_config(path) -> dict:
    """Parse flat ``key = value`` text; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _load_stack(paths):
    """Frames from image files or a single ``.npy`` array ``(L, H, W)``."""
    if len(paths) == 1 and str(paths[0]).endswith(".npy"):
        return np.load(paths[0])
    return np.stack([load_image(p, luma=True) for p in paths])


def _save_stack(frames, out):
    out = Path(out)
    if out.suffix == ".npy":
        np.save(out, frames)
        return [out]
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames):
        p = out / f"frame{i:02d}.png"
        save_image(f, p)
        paths.append(p)
    return paths


def _flow_params(a) -> flowmod.FlowParams:
    return flowmod.FlowParams(alpha=a.alpha, gamma=a.gamma, lam=a.lam, variant=a.variant,
                              outer_iters=a.outer_iters, solver_iters=a.solver_iters)


def _add_flow_options(p):
    d = flowmod.FlowParams()
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--gamma", type=float, default=d.gamma)
    p.add_argument("--lam", type=float, default=d.lam, help="contrast parameter in gray levels")
    p.add_argument("--variant", default=d.variant, choices=flowmod.VARIANTS)
    p.add_argument("--outer-iters", type=int, default=d.outer_iters)
    p.add_argument("--solver-iters", type=int, default=d.solver_iters)


def cmd_corrupt(a):
    clean = load_image(a.input, luma=True)
    stack = make_registered_dataset(clean, a.sigma, a.frames, a.seed)
    for p in _save_stack(stack.frames, a.output):
        print(p)


def cmd_flow(a):
    f1 = load_image(a.f1, luma=True)
    f2 = load_image(a.f2, luma=True)
    fl = flowmod.solve_flow(f1, f2, _flow_params(a))
    flowmod.write_flo(fl, a.output)
    if a.png:
        flowmod.save_flow_png(fl, a.png)
    if a.truth:
        print(f"epe\t{flowmod.endpoint_error(fl, flowmod.read_flo(a.truth)):.4f}")
    print(a.output)


def cmd_register(a):
    frames = _load_stack(a.frames)
    reg = flowmod.register_stack(FrameStack(frames, registered=False, ref_index=a.ref), a.ref, _flow_params(a))
    for p in _save_stack(reg.frames, a.output):
        print(p)
    if a.mask:
        np.save(a.mask, reg.validity)


def cmd_denoise(a):
    frames = _load_stack(a.frames)
    method = MethodId.parse(a.method)
    stack = FrameStack(frames, registered=not a.unregistered, ref_index=a.ref, sigma=a.sigma)
    params = default_params(method.filter, a.sigma)
    out = run_pipeline(stack, method, _flow_params(a), params)
    if str(a.output).endswith(".npy"):
        np.save(a.output, out)
    else:
        save_image(out, a.output)
    if a.clean:
        print(f"psnr\t{psnr(load_image(a.clean, luma=True), out, a.border):.4f}")
    print(a.output)


def cmd_bench(a):
    spec = ExperimentSpec(dataset=a.dataset, sigmas=_floats(a.sigmas), frame_counts=_ints(a.frames),
                          methods=[m for m in a.methods.split(",") if m], seed=a.seed,
                          border=a.border, flow=a.flow, data_dir=a.data_dir, crop=a.crop,
                          workers=a.workers, threads=a.threads, sweep_reference=a.sweep_reference)
    records, table = run_grid(spec)
    print(table)
    if a.output:
        Path(a.output).write_text(records_to_tsv(records))
    if a.compare:
        print(compare_to_reference(records, tolerance=a.tolerance).text())


def cmd_compare(a):
    records = records_from_tsv(Path(a.records).read_text())
    report = compare_to_reference(records, a.reference, a.tolerance)
    print(report.text())
    return 0 if report.passed or not a.strict else 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfdenoise", description="Multi-frame patch-based denoising")
    ap.add_argument("--config", help="flat 'key = value' file with option defaults")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corrupt", help="add seeded AWGN")
    p.add_argument("--input", required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--output", required=True, help="directory for PNG frames, or a .npy file")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("flow", help="optical flow from f1 to f2")
    p.add_argument("--f1", required=True)
    p.add_argument("--f2", required=True)
    p.add_argument("--output", required=True, help=".flo file")
    p.add_argument("--png", help="color-coded flow image")
    p.add_argument("--truth", help="ground-truth .flo; prints the endpoint error")
    _add_flow_options(p)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("register", help="warp frames onto a reference")
    p.add_argument("frames", nargs="+")
    p.add_argument("--ref", type=int, default=0)
    p.add_argument("--output", required=True)
    p.add_argument("--mask", help="save validity masks to this .npy file")
    _add_flow_options(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("denoise", help="denoise a stack with one method")
    p.add_argument("frames", nargs="+")
    p.add_argument("--method", required=True, help="e.g. BM-AF, NL-MF, BM-MFO")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--ref", type=int, default=0)
    p.add_argument("--unregistered", action="store_true", help="register with optical flow first")
    p.add_argument("--output", required=True)
    p.add_argument("--clean", help="clean reference; prints PSNR")
    p.add_argument("--border", type=int, default=0)
    _add_flow_options(p)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("bench", help="run an experiment grid")
    p.add_argument("--dataset", required=True, help="bridge|peppers|house|grove2|shoe|birdhouse or an image path")
    p.add_argument("--sigmas", default="10,20,40,60,80,100,120")
    p.add_argument("--frames", default="5,10")
    p.add_argument("--methods", default="NL-AF,NL-FA,NL-SF,NL-MF,BM-AF,BM-FA,BM-SF,BM-MF")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--border", type=int, default=None)
    p.add_argument("--flow", default="table", choices=("table", "default"))
    p.add_argument("--data-dir", default=None)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--workers", type=int, default=1, help="processes over (sigma, L) groups")
    p.add_argument("--threads", type=int, default=1, help="filter threads")
    p.add_argument("--sweep-reference", action="store_true")
    p.add_argument("--output", help="write records as TSV")
    p.add_argument("--compare", action="store_true", help="also compare with published values")
    p.add_argument("--tolerance", type=float, default=1.0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("compare", help="compare records with published values")
    p.add_argument("--records", required=True)
    p.add_argument("--reference", default=None, help="alternative reference TSV")
    p.add_argument("--tolerance", type=float, default=1.0)
    p.add_argument("--strict", action="store_true", help="exit with status 2 when a cell is out of band")
    p.set_defaults(func=cmd_compare)
    return ap


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    conf = read_config(known.config)
    # defaults go on the subparsers, so explicit flags still win
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            dests = {a.dest: a for a in sp._actions}
            vals = {}
            for k, v in conf.items():
                if k in dests:
                    act = dests[k]
                    if act.nargs == 0:
                        vals[k] = v.lower() in ("1", "true", "yes", "on")
                    else:
                        vals[k] = act.type(v) if act.type else v
                    act.required = False
            sp.set_defaults(**vals)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        rc = args.func(args)
        return int(rc or 0)
    except SystemExit:
        raise
    except Exception as exc:  # report every failure in one parseable line
        print(f"error\t{type(exc).__name__}\t{exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
