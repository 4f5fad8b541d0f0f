"""``uniabg`` command line: synth | apv | stage1 | associate | stage2 | eval | pipeline | sweep.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from . import pipeline
from .config import PipelineConfig, load_config, validate
from .errors import ConfigError, UniABGError
from .hgfc import CLUSTER, INSTANCE

log = logging.getLogger("uniabg")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory (default: paths.out_dir)")
    common.add_argument("--k", type=int, help="override hgfc.k")
    common.add_argument("--lambda", dest="lam", type=float, help="override the adversarial weight")
    common.add_argument("--vote-mode", choices=(INSTANCE, CLUSTER), help="override hgfc.vote_mode")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="uniabg", description="Dual-stage unsupervised cross-view geo-localization toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset (into --out or paths.data_dir)")
    a = sub.add_parser("apv", parents=[common], help="recolour drone images into the pseudo view")
    a.add_argument("--manifest", metavar="PATH", help="manifest (default: <paths.data_dir>/manifest.json)")
    sub.add_parser("stage1", parents=[common], help="train stage 1, write stage1.uck")
    s = sub.add_parser("associate", parents=[common], help="cluster and associate with the stage-1 encoder")
    s.add_argument("--greedy", action="store_true", help="nearest-satellite baseline instead of the graph filter")
    sub.add_parser("stage2", parents=[common], help="train stage 2 on association.json, write stage2.uck")
    sub.add_parser("eval", parents=[common], help="retrieval metrics of the newest checkpoint")
    pp = sub.add_parser("pipeline", parents=[common], help="end-to-end run, write report.json")
    pp.add_argument("--ablation", action="store_true", help="also report the B and B+HGFC rows")
    sw = sub.add_parser("sweep", parents=[common], help="k (1..4) or lambda (0.1..1.0) sweep")
    sw.add_argument("parameter", choices=("k", "lambda"))
    return p


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config)
    cfg = pipeline.with_overrides(
        cfg, seed=args.seed, lam=args.lam, **{"hgfc.k": args.k, "hgfc.vote_mode": args.vote_mode},
    )
    return validate(cfg)


def _run(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    out = args.out or cfg.paths.out_dir
    cmd = args.command
    if cmd == "synth":
        paths = pipeline.cmd_synth(cfg, args.out or cfg.paths.data_dir)
        print(json.dumps(paths, sort_keys=True, indent=2))
        return EXIT_OK
    if cmd == "apv":
        manifest = args.manifest or f"{cfg.paths.data_dir}/manifest.json"
        summary = pipeline.cmd_apv(manifest, out)
        print(f"wrote {len(summary.written)} pseudo-view image(s) to {out}")
        for key, msg in sorted(summary.failures.items()):
            print(f"failed {key}: {msg}", file=sys.stderr)
        if summary.failures:
            print(f"{len(summary.failures)} image(s) failed", file=sys.stderr)
            return EXIT_RUNTIME
        return EXIT_OK
    if cmd == "stage1":
        s1 = pipeline.cmd_stage1(cfg, out)
        print(f"stage1: {s1.drone_memory.size} drone / {s1.satellite_memory.size} satellite clusters")
        return EXIT_OK
    if cmd == "associate":
        ar = pipeline.cmd_associate(cfg, out, pipeline.GREEDY if args.greedy else pipeline.HGFC)
        print(f"associated {len(ar.assoc.pairs)} drone(s), {len(ar.assoc.unassociated)} unassociated")
        return EXIT_OK
    if cmd == "stage2":
        model = pipeline.cmd_stage2(cfg, out)
        print(f"stage2: {len(model.loss_trace)} step(s), {model.num_classes} classes")
        return EXIT_OK
    if cmd == "eval":
        report = pipeline.cmd_eval(cfg, out)
        print(json.dumps(report["retrieval"], sort_keys=True, indent=2))
        return EXIT_OK
    if cmd == "pipeline":
        report = pipeline.cmd_pipeline(cfg, out, ablation=args.ablation)
        rows = report.get("ablation", [{"name": "result", **report["result"]}])
        for row in rows:
            r = row["retrieval"]
            print(f"{row['name']:<12} D->S R@1 {r[pipeline.DRONE_TO_SAT]['R@1']:.4f} "
                  f"AP {r[pipeline.DRONE_TO_SAT]['AP']:.4f} | "
                  f"S->D R@1 {r[pipeline.SAT_TO_DRONE]['R@1']:.4f} AP {r[pipeline.SAT_TO_DRONE]['AP']:.4f}")
        return EXIT_OK
    if cmd == "sweep":
        table = pipeline.cmd_sweep(cfg, args.parameter, out)
        print(pipeline.sweep_csv(table["rows"]), end="")
        print(f"D->S R@1 spread: {table['d2s_R@1_spread']:.4f}")
        return EXIT_OK
    raise ConfigError(f"unknown command {cmd!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"uniabg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _run(args, cfg)
    except ConfigError as exc:
        print(f"uniabg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UniABGError, OSError, ValueError) as exc:
        print(f"uniabg: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
