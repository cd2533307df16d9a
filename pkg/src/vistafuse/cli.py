"""Command-line entry point: ``vistafuse <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .bench import BENCH_FIELDS, benchmark
from .config import ConfigError, RunConfig, dump_config, load_config, shape_summary
from .export import attention_heatmap, write_attention_csv, write_map_csv, write_pgm, write_trace_csv
from .gradsuite import default_suite, run_suite
from .harness.io import FormatError, read_scene, read_scene_dir, write_scene
from .harness.scenes import generate_scenes
from .harness.training import TrainingDiverged, evaluate_concentration, train_smoke
from .model import VistaNet
from .ndcore import ContractError, DimensionError
from .voxelizer import bin_points, voxelize

logger = logging.getLogger("vistafuse")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2
EVAL_SEED = 12345
EVAL_SCENES = 20


class NumericalFailure(RuntimeError):
    pass


def _shared(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("shared options")
    g.add_argument("--config", help="run configuration file (or a bundled name: desk.cfg, nuscenes.cfg, waymo.cfg)")
    g.add_argument("--mode", choices=("conv", "linear", "gap"))
    g.add_argument("--decouple", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--var-target", choices=("sem", "geo", "both"))
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output directory")
    g.add_argument("--steps", type=int)
    g.add_argument("--repeats", type=int, default=5)
    g.add_argument("-v", "--verbose", action="store_true")


def effective_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    model, train = cfg.model, cfg.train
    if args.mode is not None:
        model = replace(model, mode=args.mode)
    if args.decouple is not None:
        model = replace(model, decouple=args.decouple)
    if args.var_target is not None:
        train = replace(train, var_target=args.var_target)
    if args.steps is not None:
        if args.steps < 1:
            raise ConfigError("--steps must be >= 1")
        train = replace(train, steps=args.steps)
    if getattr(args, "var_constraint", None) is False:
        train = replace(train, lambda_var=0.0)
    cfg = replace(cfg, model=model, train=train)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output=args.out)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(cfg: RunConfig, weights: Optional[str]) -> VistaNet:
    net = VistaNet.init(cfg.model, cfg.voxel, cfg.seed)
    if weights:
        with np.load(weights) as data:
            try:
                net.load_state_dict(dict(data))
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"{weights}: {exc}") from None
    return net


def _export_attention(net: VistaNet, out_bundle, boxes, out: Path) -> None:
    src = _source_extent(net)
    for name in ("sem", "geo"):
        a = getattr(out_bundle, f"A_{name}")
        write_attention_csv(out / f"attention_{name}.csv", a)
        write_pgm(out / f"heatmap_{name}.pgm", attention_heatmap(a, boxes, net.query_centers(), src))


def _source_extent(net: VistaNet):
    shape = shape_summary(RunConfig(voxel=net.voxel, model=net.config))
    return shape["rv_pooled"]


# ---------------------------------------------------------------------------


def cmd_voxelize(args) -> int:
    cfg = effective_config(args)
    scene = read_scene(args.cloud)
    sparse = bin_points(scene.cloud, cfg.voxel)
    nx, ny, nz = cfg.voxel.grid_shape
    print(f"grid {nx}x{ny}x{nz}")
    print(f"{sparse.n_points} in-range points")
    print(f"{len(sparse.indices)} occupied voxels")
    if args.out:
        out = _out_dir(cfg)
        with open(out / "voxels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("i", "j", "k", "count", "dx", "dy", "dz", "intensity"))
            for (i, j, k), c, f in zip(sparse.indices.tolist(), sparse.counts.tolist(), sparse.means.tolist()):
                w.writerow((i, j, k, int(c), *(repr(v) for v in f)))
    return EXIT_OK


def cmd_forward(args) -> int:
    cfg = effective_config(args)
    scene = read_scene(args.scene)
    net = _load_model(cfg, args.weights)
    result = net.forward(voxelize(scene.cloud, cfg.voxel))
    out = _out_dir(cfg)
    write_map_csv(out / "fused_sem.csv", result.fused_sem.features)
    write_map_csv(out / "fused_geo.csv", result.fused_geo.features)
    _export_attention(net, result.bundle, scene.boxes, out)
    n, m = result.bundle.A_sem.shape
    print(f"attention {n}x{m}, heatmap {'x'.join(map(str, _source_extent(net)))}, written to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = effective_config(args)
    if args.scenes:
        scenes = read_scene_dir(args.scenes)
    else:
        scenes = generate_scenes(cfg.seed, cfg.n_scenes, cfg.voxel, cfg.n_objects)
    result = train_smoke(cfg.train_config(), scenes, cfg.model, cfg.voxel)
    out = _out_dir(cfg)
    write_trace_csv(out / "trace.csv", result.trace)
    np.savez(out / "weights.npz", **result.model.state_dict())
    (out / "effective.cfg").write_text(dump_config(cfg))

    eval_scenes = generate_scenes(EVAL_SEED, EVAL_SCENES, cfg.voxel, cfg.n_objects)
    report = evaluate_concentration(result.model, eval_scenes)
    report.update(mode=cfg.model.mode, decouple=cfg.model.decouple, lambda_var=cfg.train.lambda_var,
                  steps=cfg.train.steps, seed=cfg.seed,
                  L_total_initial=result.trace[0].L_total, L_total_final=result.trace[-1].L_total)
    (out / "concentration.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    probe = eval_scenes[0]
    _export_attention(result.model, result.model.forward(voxelize(probe.cloud, cfg.voxel)).bundle, probe.boxes, out)
    print(f"steps {len(result.trace)}  L_total {result.trace[0].L_total:.4f} -> {result.trace[-1].L_total:.4f}")
    print(f"in_box_mass {report['in_box_mass']:.4f}  mean_row_max {report['mean_row_max']:.4f}  "
          f"(uniform {report['uniform_row_max']:.4f})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = effective_config(args)
    strict = 1e-7 <= args.eps <= 1e-3
    if not strict:
        logger.warning("eps=%g is outside [1e-7, 1e-3]; truncation error will dominate", args.eps)
    cases = default_suite(cfg.seed, include_network=not args.quick)
    results = run_suite(cases, eps=args.eps, strict=strict)
    width = max(len(r.name) for r in results)
    print(f"{'check':<{width}}  max_rel_error  tolerance  status")
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {r.report.max_rel_error:13.3e}  {r.tolerance:9.0e}  {status}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} passed at eps={args.eps:g}")
    if failed:
        raise NumericalFailure(f"{failed} gradient checks failed")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = effective_config(args)
    if args.repeats < 1:
        raise ConfigError("--repeats must be >= 1")
    rows = benchmark(cfg.voxel, cfg.model, args.repeats, cfg.seed)
    lines = [",".join(BENCH_FIELDS)]
    lines += [f"{r.stage},{r.n},{r.m},{r.repeats},{r.median_ms:.4f}" for r in rows]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        (_out_dir(cfg) / "bench.csv").write_text(text)
    return EXIT_OK


def cmd_scenes(args) -> int:
    cfg = effective_config(args)
    count = args.count if args.count is not None else cfg.n_scenes
    out = _out_dir(cfg)
    for i, s in enumerate(generate_scenes(cfg.seed, count, cfg.voxel, cfg.n_objects)):
        write_scene(out, f"scene_{i:04d}", s)
    print(f"{count} scenes written to {out}")
    return EXIT_OK


def cmd_shapes(args) -> int:
    cfg = effective_config(args)
    for key, val in shape_summary(cfg).items():
        print(f"{key} {'x'.join(map(str, val))}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vistafuse", description="Cross-view attention fusion toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize", help="bin a point file and print the grid summary")
    p.add_argument("cloud", help="x,y,z,intensity text file")
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("forward", help="run one scene and export fused maps and attention heatmaps")
    p.add_argument("scene", help="point file; a .boxes sidecar next to it is picked up")
    p.add_argument("--weights", help="weights.npz written by `train` (default: seeded initialization)")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("train", help="smoke-train and write trace, weights and concentration report")
    p.add_argument("--scenes", help="directory of .pts/.boxes scenes (default: generate from --seed)")
    p.add_argument("--var-constraint", dest="var_constraint", action=argparse.BooleanOptionalAction, default=None,
                   help="keep (default) or zero the attention variance loss weight")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--quick", action="store_true", help="skip the end-to-end network checks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="per-stage median latency as CSV")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("scenes", help="write synthetic scenes as .pts/.boxes files")
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_scenes)

    p = sub.add_parser("shapes", help="print grid, view and attention shapes without allocating")
    p.set_defaults(func=cmd_shapes)

    for action in sub.choices.values():
        _shared(action)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, DimensionError, ContractError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDiverged, NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
