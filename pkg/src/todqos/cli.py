"""Command-line entry point: ``todqos <command> [options]``."""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path

from todqos import pipeline, rforest
from todqos.errors import TodQosError
from todqos.featureset import FeatureConfig, metrics
from todqos.inference import InferenceEngine, PredictionRequest
from todqos.simkit.geometry import build_topology
from todqos.simkit.trace import TraceLog
from todqos.sustain.core import SubscriptionRegistry, SustainService
from todqos.sustain.server import SustainServer, TraceReplay

log = logging.getLogger("todqos")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", type=Path, default=d(None), help="pipeline configuration JSON")
    p.add_argument("--seed", type=int, default=d(None), help="master seed (scenarios, split, forest)")
    p.add_argument("--out", type=Path, default=d(Path("out")), help="output directory (default: out)")
    p.add_argument("--force", action="store_true", default=d(False), help="redo stages whose outputs exist")
    p.add_argument("-v", "--verbose", action="count", default=d(0))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="todqos", description="Uplink QoS prediction for tele-operated driving.")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="simulate every (load level, seed) of the plan")
    p.add_argument("--levels", type=int, nargs="+", help="override the NToD load levels")
    p.add_argument("--seeds-per-level", type=int)
    p.add_argument("--duration", type=float, help="seconds per run")

    sub.add_parser("build-dataset", parents=[common], help="turn traces into the labeled dataset")

    p = sub.add_parser("train", parents=[common], help="fit one forest on the training share")
    p.add_argument("--features", default="T1", help="preset T1..T6 or a JSON mask of 22 flags")
    p.add_argument("--exclude-levels", type=int, nargs="*", default=[])
    p.add_argument("--model-out", type=Path)
    p.add_argument("--trees", type=int)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("evaluate", parents=[common], help="accuracy table for every feature config")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--trees", type=int)
    p.add_argument("--check", action="store_true", help="exit 3 unless the accuracy ordering holds")

    p = sub.add_parser("infer", parents=[common], help="rolling horizon predictions, known vs unknown scenario")
    p.add_argument("--features", default="T1")
    p.add_argument("--level", type=int, help="load level of the evaluated trace (default: first holdout level)")
    p.add_argument("--seed-index", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("serve", parents=[common], help="host the sustainability service over TCP")
    p.add_argument("--trace", type=Path, required=True, help="trace CSV replayed as the live flow")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7878)
    p.add_argument("--mode", choices=("perfect", "arima", "persistence"), default="arima")
    p.add_argument("--period", type=float, default=1.0, help="evaluation period in service seconds")
    p.add_argument("--speed", type=float, default=1.0, help="replay speed relative to wall clock")
    p.add_argument("--start", type=float, default=30.0)

    p = sub.add_parser("demo", parents=[common], help="scripted load surge through service and application")
    p.add_argument("--model-name", default="T1")

    p = sub.add_parser("run-all", parents=[common], help="simulate, build, evaluate, infer and demo")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--check", action="store_true")
    return parser


def load_config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig.load(args.config) if args.config else pipeline.PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "trees", None):
        cfg.forest = rforest.ForestHyperparams(**{**cfg.forest.__dict__, "n_trees": args.trees})
    return cfg


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_simulate(args, cfg, layout):
    plan = cfg.plan
    if args.levels:
        plan.load_levels = list(args.levels)
        plan.holdout_levels = [v for v in plan.holdout_levels if v in plan.load_levels]
    if args.seeds_per_level:
        plan.seeds_per_level = args.seeds_per_level
    if args.duration:
        plan.duration = args.duration
    res = pipeline.simulate(cfg, layout, force=args.force)
    print(f"{res['simulated']} new simulation(s), {len(res['traces'])} trace file(s)")
    for row in res["levels"]:
        print(f"  n_ntod={row[0]:>3}  median goodput {float(row[1]) / 1e6:6.2f} Mbps")
    return EXIT_OK


def cmd_build(args, cfg, layout):
    path = pipeline.build(cfg, layout, force=args.force)
    print(f"dataset: {path}")
    return EXIT_OK


def cmd_train(args, cfg, layout):
    fc = FeatureConfig.parse(args.features)
    ds = pipeline.load_dataset(layout)
    forest, te = pipeline.train(cfg, ds, fc, exclude=args.exclude_levels, n_jobs=args.jobs)
    out = args.model_out or layout.model(fc.id if not args.exclude_levels else
                                         f"{fc.id}-without" + "-".join(f"{v:03d}" for v in args.exclude_levels))
    layout.ensure(out.parent)
    forest.save(out)
    rep = metrics(te.y, forest.predict(te.X))
    print(f"saved {out}; held-out share: MAE {rep.mae / 1e6:.3f} Mbps, MAPE {rep.mape:.4f}")
    return EXIT_OK


def cmd_evaluate(args, cfg, layout):
    rows = pipeline.evaluate(cfg, layout, n_jobs=args.jobs, force=args.force)
    print(pipeline.format_table(rows), end="")
    if args.check:
        fails = pipeline.check_table({r[0]: float(r[4]) for r in rows})
        for f in fails:
            print(f"CHECK FAILED: {f}", file=sys.stderr)
        if fails:
            return EXIT_CHECK
    return EXIT_OK


def cmd_infer(args, cfg, layout):
    _print(pipeline.infer(cfg, layout, feature=args.features, level=args.level,
                          seed_index=args.seed_index, n_jobs=args.jobs, force=args.force))
    return EXIT_OK


def cmd_demo(args, cfg, layout):
    _print(pipeline.demo(cfg, layout, model=args.model_name))
    return EXIT_OK


def cmd_serve(args, cfg, layout):
    forest = rforest.Forest.load(args.model)
    trace = TraceLog.from_csv(args.trace)
    base = cfg.base_scenario()
    engine = InferenceEngine(forest, build_topology(base), base.sample_window, cfg.order,
                             cfg.history_len, args.model.stem)
    req = PredictionRequest(forest.feature_config, horizon=cfg.horizon, step=cfg.step, input_mode=args.mode)
    replay = TraceReplay(trace, engine, req)
    server = SustainServer(SustainService(replay, SubscriptionRegistry()), host=args.host, port=args.port,
                           period=args.period, t_start=args.start, t_end=replay.last_time, speed=args.speed)

    async def main():
        host, port = await server.start()
        print(f"listening on {host}:{port}", flush=True)
        try:
            await server.run()
        finally:
            await server.close()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_run_all(args, cfg, layout):
    pipeline.simulate(cfg, layout, force=args.force)
    pipeline.build(cfg, layout, force=args.force)
    rows = pipeline.evaluate(cfg, layout, n_jobs=args.jobs, force=args.force)
    print(pipeline.format_table(rows), end="")
    pipeline.infer(cfg, layout, n_jobs=args.jobs, force=args.force)
    pipeline.demo(cfg, layout)
    print(f"manifest: {pipeline.write_manifest(cfg, layout)}")
    if args.check and pipeline.check_table({r[0]: float(r[4]) for r in rows}):
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "build-dataset": cmd_build, "train": cmd_train,
            "evaluate": cmd_evaluate, "infer": cmd_infer, "serve": cmd_serve, "demo": cmd_demo,
            "run-all": cmd_run_all}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg, pipeline.Layout(args.out))
    except TodQosError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
