"""Command-line front end: ``stitch``, ``adapt`` and ``bench``.

Exit codes: 0 success, 2 usage, 3 I/O or malformed input, 4 degenerate
geometry, 5 no overlap, 6 benchmark gate failure.
"""

import argparse
import configparser
import json
import sys
import time
import warnings
from dataclasses import dataclass, fields, replace

import numpy as np

from ._io import write_text
from .composition import CompositionWeights, SeamConfig, blend, optimize_seam, warp_to_canvas
from .errors import (DegenerateGeometryError, EmptyRegionError, MeshFormatError,
                     NoOverlapError, StitchError)
from .geometry import ControlMesh, Homography
from .imagecore import load_image, psnr, save_image
from .synth_bench import STRATA, SuiteConfig, run_suite
from .warp_energy import loss_history_csv
from .warp_optimizer import OptimizerConfig, WarpResult, adapt, optimize_homography, optimize_tps

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DEGENERATE = 4
EXIT_NO_OVERLAP = 5
EXIT_GATE = 6

MAX_CANVAS_FACTOR = 16


@dataclass(frozen=True)
class RunConfig:
    grid: str = "13x13"
    omega: float = 10.0
    lam: float = 3.0
    alpha: float = 10000.0
    beta: float = 1000.0
    levels: int = 4
    iters: int = 50
    tau: float = 1e-4
    seed: int = 0
    workers: int = 1
    min_psnr: float = float("-inf")
    min_ssim: float = float("-inf")
    max_warp_error: float = float("inf")

    def grid_shape(self):
        try:
            r, c = (int(v) for v in self.grid.lower().split("x"))
        except ValueError:
            raise ValueError(f"grid must look like RxC, got {self.grid!r}") from None
        return r, c

    def optimizer(self):
        rows, cols = self.grid_shape()
        return OptimizerConfig(max_iters=self.iters, tol=self.tau, pyramid_levels=self.levels,
                               grid_rows=rows, grid_cols=cols, omega=self.omega, lam=self.lam)

    def composition(self):
        return CompositionWeights(self.alpha, self.beta)


# config-file / flag name -> RunConfig field
_KEYS = {f.name: f.name for f in fields(RunConfig)}
_KEYS["lambda"] = "lam"


def read_config(path):
    """``key = value`` pairs, optionally under section headers."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    cp = configparser.ConfigParser()
    cp.read_string("[__top__]\n" + text)
    out = {}
    for sec in cp.sections():
        for k, v in cp.items(sec):
            key = _KEYS.get(k.replace("-", "_"))
            if key is None:
                raise ValueError(f"unknown config key {k!r}")
            out[key] = v
    return out


def build_config(args):
    base = RunConfig()
    values = read_config(args.config) if getattr(args, "config", None) else {}
    for name in _KEYS.values():
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    kw = {}
    for f in fields(RunConfig):
        if f.name in values:
            kw[f.name] = type(getattr(base, f.name))(values[f.name])
    cfg = replace(base, **kw)
    cfg.optimizer()
    return cfg


def _mesh_payload(result):
    d = result.mesh.to_dict()
    d["homography"] = result.homography.h.tolist()
    return d


def _load_warm(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise MeshFormatError(f"cannot read mesh file: {exc}") from exc
    mesh = ControlMesh.from_json(text)
    h = json.loads(text).get("homography")
    try:
        hom = Homography(np.asarray(h, dtype=np.float64)) if h is not None else Homography.identity()
    except (ValueError, TypeError) as exc:
        raise MeshFormatError(f"malformed homography in mesh file: {exc}") from exc
    return WarpResult(hom, mesh)


def cmd_stitch(args, cfg):
    ref = load_image(args.ref)
    tgt = load_image(args.tgt)
    ocfg = cfg.optimizer()
    timings = {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        t0 = time.perf_counter()
        h, h_hist = optimize_homography(ref, tgt, ocfg)
        timings["homography"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        res = optimize_tps(ref, tgt, h, ocfg)
        timings["tps"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        outline = res.mesh.boundary("warped")
        area = (np.ptp(outline[:, 0]) + ref.shape[1]) * (np.ptp(outline[:, 1]) + ref.shape[0])
        if area > MAX_CANVAS_FACTOR * 4 * ref.shape[0] * ref.shape[1]:
            raise DegenerateGeometryError("warped target would need an unbounded canvas")
        inputs, canvas, fld = warp_to_canvas(ref, tgt, res.mesh)
        overlap = inputs.overlap
        if not np.any(overlap > 0.5):
            raise NoOverlapError("warped images do not overlap")
        seam = optimize_seam(inputs, cfg.composition(), SeamConfig())
        timings["composition"] = time.perf_counter() - t0
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)

    pano = blend(inputs.i_wr, inputs.i_wt, seam.m_cr, seam.m_ct)
    save_image(args.out, pano)
    if args.dump_mesh:
        write_text(args.dump_mesh, json.dumps(_mesh_payload(res)))
    if args.dump_masks:
        seam.save_masks(args.dump_masks)
        seam.save_seam(f"{args.dump_masks}_seam.json", overlap)
    if args.dump_loss_csv:
        write_text(args.dump_loss_csv, loss_history_csv(res.loss_history))
    if args.dump_field:
        fld.dump(args.dump_field)
    score = psnr(inputs.i_wr, inputs.i_wt, overlap)
    h_loss = h_hist[-1].total if h_hist else float("nan")
    print(f"stitch: canvas={canvas.width}x{canvas.height} h_loss={h_loss:.6f} "
          f"tps_loss={res.final_loss:.6f} seam_energy={seam.energy:.6f} "
          f"overlap_psnr={score:.2f}dB folds={res.folds} "
          + " ".join(f"t_{k}={v:.2f}s" for k, v in timings.items()))
    return EXIT_OK


def cmd_adapt(args, cfg):
    ref = load_image(args.ref)
    tgt = load_image(args.tgt)
    warm = _load_warm(args.mesh)
    res = adapt(ref, tgt, warm, cfg.optimizer())
    for row in res.loss_history:
        print(f"iter {row.iter}: loss={row.align:.6f}")
    print(f"adapt: iterations={res.iterations_used} converged={res.converged} "
          f"final_loss={res.final_loss:.6f}")
    out = args.out or args.mesh
    write_text(out, json.dumps(_mesh_payload(res)))
    if args.dump_loss_csv:
        write_text(args.dump_loss_csv, loss_history_csv(res.loss_history))
    return EXIT_OK


def _gate(report, cfg, run_tps):
    failures = []
    key = "tps_psnr" if run_tps else "h_psnr"
    skey = "tps_ssim" if run_tps else "h_ssim"
    for row in report.strata:
        name = row["stratum"]
        if row["ok"] < row["n"]:
            failures.append(f"{name}: {row['n'] - row['ok']} pair(s) failed")
        if not row[key] >= cfg.min_psnr:
            failures.append(f"{name}: psnr {row[key]:.3f} < {cfg.min_psnr}")
        if not row[skey] >= cfg.min_ssim:
            failures.append(f"{name}: ssim {row[skey]:.4f} < {cfg.min_ssim}")
        if not row["warp_error"] <= cfg.max_warp_error:
            failures.append(f"{name}: warp error {row['warp_error']:.3f} > {cfg.max_warp_error}")
    return failures


def cmd_bench(args, cfg):
    ocfg = cfg.optimizer()
    strata = tuple((k, v) for k, v in STRATA.items() if not args.strata or k in args.strata)
    suite = SuiteConfig(n_per_stratum=args.pairs, strata=strata, kind=args.kind, size=args.size,
                        overlap=args.overlap, seed=cfg.seed, workers=cfg.workers,
                        run_tps=not args.no_tps, run_composition=args.composition,
                        optimizer=ocfg)
    report = run_suite(suite)
    text = report.to_csv()
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    if args.json:
        write_text(args.json, report.to_json())
    if args.pairs_csv:
        write_text(args.pairs_csv, report.pairs_csv())
    failures = _gate(report, cfg, suite.run_tps)
    for f in failures:
        print(f"gate: {f}", file=sys.stderr)
    return EXIT_GATE if failures else EXIT_OK


def _common(p):
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--grid", metavar="RxC")
    p.add_argument("--omega", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--levels", type=int)
    p.add_argument("--iters", type=int, help="adaption iteration cap T")
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--dump-loss-csv", metavar="PATH")


def make_parser():
    ap = argparse.ArgumentParser(prog="tpsstitch", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("stitch", help="stitch a reference/target pair")
    s.add_argument("ref")
    s.add_argument("tgt")
    s.add_argument("out")
    _common(s)
    s.add_argument("--dump-mesh", metavar="PATH")
    s.add_argument("--dump-masks", metavar="PREFIX")
    s.add_argument("--dump-field", metavar="PATH")
    s.set_defaults(func=cmd_stitch)

    a = sub.add_parser("adapt", help="refine a warm-start mesh on one pair")
    a.add_argument("ref")
    a.add_argument("tgt")
    a.add_argument("mesh")
    a.add_argument("-o", "--out", metavar="PATH", help="refined mesh (default: overwrite MESH)")
    _common(a)
    a.set_defaults(func=cmd_adapt)

    b = sub.add_parser("bench", help="stratified synthetic benchmark")
    _common(b)
    b.add_argument("--pairs", type=int, default=1, help="pairs per stratum")
    b.add_argument("--size", type=int, default=256)
    b.add_argument("--kind", choices=("homography", "tps", "two_plane"), default="homography")
    b.add_argument("--overlap", type=float, default=0.6)
    b.add_argument("--strata", nargs="*", choices=tuple(STRATA))
    b.add_argument("--no-tps", action="store_true")
    b.add_argument("--composition", action="store_true")
    b.add_argument("--min-psnr", dest="min_psnr", type=float)
    b.add_argument("--min-ssim", dest="min_ssim", type=float)
    b.add_argument("--max-warp-error", dest="max_warp_error", type=float)
    b.add_argument("--out", metavar="CSV")
    b.add_argument("--json", metavar="PATH")
    b.add_argument("--pairs-csv", metavar="PATH")
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv=None):
    ap = make_parser()
    args = ap.parse_args(argv)
    try:
        cfg = build_config(args)
    except (ValueError, configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        return args.func(args, cfg)
    except (OSError, MeshFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NoOverlapError, EmptyRegionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_OVERLAP
    except DegenerateGeometryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except StitchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
