"""
Command-line entry point.

    python -m app.cli gen --workdir run
    python -m app.cli pretrain --workdir run
    python -m app.cli train1 --workdir run
    python -m app.cli train2 --workdir run
    python -m app.cli sweep --workdir run
"""

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

from app.config import RunConfig, apply_overrides, load_config
from app.errors import ModalPatchError
from app.pipeline import Policy, parse_policy
from app.services import gradcheck, reports, trainer
from app.services.checkpoint import checkpoint_paths, load_checkpoint, save_checkpoint
from app.services.manifest import hash_paths, write_manifest
from app.services.streams import build_corpus, load_streams, save_streams

logger = logging.getLogger(__name__)


class Run:
    """Resolved paths and config for one command invocation."""

    def __init__(self, args: argparse.Namespace, config: RunConfig):
        self.args = args
        self.config = config
        self.workdir = os.path.abspath(args.workdir)
        self.progress = not args.no_progress

    def path(self, *parts: str) -> str:
        return os.path.join(self.workdir, *parts)

    @property
    def streams_dir(self) -> str:
        return self.path(self.config.paths.streams)

    @property
    def checkpoint_dir(self) -> str:
        return self.path(self.config.paths.checkpoints)

    @property
    def reports_dir(self) -> str:
        return self.path(self.config.paths.reports)

    def checkpoint(self, stage: str) -> str:
        return os.path.join(self.checkpoint_dir, stage)

    def split(self, name: str):
        return load_streams(os.path.join(self.streams_dir, name))

    def manifest(self, command: str, inputs: Sequence[str], outputs: Sequence[str], **extra) -> None:
        payload = {
            "config": self.config.to_text(),
            "seeds": {
                "streams": self.config.streams.seed,
                "train": self.config.train.seed,
                "schedule": self.config.eval.schedule_seed,
            },
            "inputs": hash_paths([p for p in inputs if os.path.exists(p)], self.workdir),
            "outputs": hash_paths([p for p in outputs if os.path.exists(p)], self.workdir),
        }
        payload.update(extra)
        write_manifest(self.workdir, command, payload)


def _stage_meta(run: Run, result: trainer.StageResult) -> Dict[str, object]:
    return {
        "stage": result.stage,
        "seed": run.config.train.seed,
        "epoch_losses": result.epoch_losses,
        "metrics": result.metrics,
        "config": run.config.to_flat(),
    }


def _save_stage(run: Run, command: str, result: trainer.StageResult, inputs: List[str]) -> None:
    stem = run.checkpoint(result.stage)
    sha = save_checkpoint(stem, result.params, _stage_meta(run, result))
    run.manifest(command, inputs, list(checkpoint_paths(stem)), checkpoint=os.path.relpath(stem, run.workdir),
                 checkpoint_sha256=sha, epoch_losses=result.epoch_losses, metrics=result.metrics)
    print(f"{command}: wrote {stem}.bin ({', '.join(f'{k}={v:.4g}' for k, v in sorted(result.metrics.items()))})")


def cmd_gen(run: Run) -> int:
    cfg = run.config
    outputs = []
    for split in ("train", "val"):
        streams = build_corpus(cfg.streams, split)
        schedules = None
        if split == "val":
            schedules = {s.stream_id: reports.paired_schedule(cfg, s, cfg.eval.rate, cfg.eval.rate) for s in streams}
        root = os.path.join(run.streams_dir, split)
        save_streams(root, streams, schedules)
        outputs.append(root)
    run.manifest("gen", [], outputs)
    print(f"gen: wrote {cfg.streams.n_train} train and {cfg.streams.n_val} val streams to {run.streams_dir}")
    return 0


def cmd_pretrain(run: Run) -> int:
    train, val = run.split("train"), run.split("val")
    result = trainer.pretrain_detector(run.config, train, val, progress=run.progress)
    _save_stage(run, "pretrain", result, [run.streams_dir])
    return 0


def cmd_train1(run: Run) -> int:
    det = load_checkpoint(run.checkpoint("det"))
    train, val = run.split("train"), run.split("val")
    result = trainer.train_stage1(run.config, train, val, det, progress=run.progress)
    _save_stage(run, "train1", result, [run.streams_dir, *checkpoint_paths(run.checkpoint("det"))])
    return 0


def cmd_train2(run: Run) -> int:
    stage1 = load_checkpoint(run.checkpoint("hfp"))
    train, val = run.split("train"), run.split("val")
    result = trainer.train_stage2(run.config, train, val, stage1, progress=run.progress)
    _save_stage(run, "train2", result, [run.streams_dir, *checkpoint_paths(run.checkpoint("hfp"))])
    return 0


def cmd_eval(run: Run) -> int:
    cfg = run.config
    policy = parse_policy(cfg.eval.policy)
    rate = cfg.eval.rate
    stem = os.path.join(run.checkpoint_dir, policy.checkpoint)
    val = run.split("val")
    heatmaps = os.path.join(run.reports_dir, "heatmaps")
    row = reports.evaluate(cfg, val, policy, rate, run.checkpoint_dir, heatmap_dir=heatmaps)
    report = reports.SweepReport([row], cfg.to_flat())
    paths = reports.write_report(report, run.reports_dir, stem=f"eval_{policy.slug}_{rate:g}")
    run.manifest("eval", [run.streams_dir, *checkpoint_paths(stem)], [paths["csv"], paths["json"]],
                 policy=policy.value, rate=rate)
    both = "n/a" if row.f1_bothdrop is None else f"{row.f1_bothdrop:.4f}"
    print(f"eval: {policy.value} @ {rate:g}: f1={row.f1:.4f} f1_bothdrop={both} "
          f"mse_img={row.mse_img:.5f} mse_pts={row.mse_pts:.5f}")
    return 0


def cmd_sweep(run: Run) -> int:
    cfg = run.config
    policies = [parse_policy(p) for p in cfg.eval.policy_list]
    stems = sorted({os.path.join(run.checkpoint_dir, p.checkpoint) for p in policies})
    val = run.split("val")
    heatmaps = os.path.join(run.reports_dir, "heatmaps")
    report = reports.sweep(cfg, val, run.checkpoint_dir, heatmap_dir=heatmaps, progress=run.progress)
    paths = reports.write_report(report, run.reports_dir)
    outputs = [paths["csv"], paths["json"], heatmaps]
    if run.args.single_modality:
        single = reports.sweep_single_modality(cfg, val, run.checkpoint_dir, progress=run.progress)
        extra = reports.write_report(single, run.reports_dir, stem="report_single",
                                     columns=reports.SINGLE_CSV_COLUMNS)
        outputs += [extra["csv"], extra["json"]]
    inputs = [run.streams_dir] + [p for s in stems for p in checkpoint_paths(s)]
    run.manifest("sweep", inputs, outputs)
    print(report.frame().to_string(index=False))
    return 0


def cmd_gradcheck(run: Run) -> int:
    results = gradcheck.run_suite(seed=run.config.train.seed)
    worst = 0.0
    for name, error in results:
        status = "ok" if error < gradcheck.TOLERANCE else "FAIL"
        print(f"{name:<28} {error:.3e} {status}")
        worst = max(worst, error)
    run.manifest("gradcheck", [], [], errors={n: e for n, e in results})
    return 0 if worst < gradcheck.TOLERANCE else 1


HANDLERS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "train1": cmd_train1,
    "train2": cmd_train2,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="all paths are relative to this directory")
    common.add_argument("--config", help="flat 'section.key = value' file")
    common.add_argument("--preset", help="named preset from app/presets.json (desk, full, smoke)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--verbose", "-v", action="store_true")
    common.add_argument("--no-progress", action="store_true", help="disable progress bars")

    parser = argparse.ArgumentParser(prog="modalpatch", description="Modality-drop compensation on synthetic streams.")
    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen", parents=[common], help="generate train/val streams and schedules")
    gen.add_argument("--seed", type=int, help="shortcut for --set streams.seed=N")
    for name, text in (("pretrain", "train the detector on ground-truth features"),
                       ("train1", "train history-based prediction (stage 1)"),
                       ("train2", "train uncertainty and fusion (stage 2)")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--seed", type=int, help="shortcut for --set train.seed=N")
    ev = sub.add_parser("eval", parents=[common], help="one (policy, rate) run over the validation streams")
    ev.add_argument("--policy", help=f"one of {', '.join(p.value for p in Policy)}")
    ev.add_argument("--rate", type=float, help="drop rate for both modalities")
    sw = sub.add_parser("sweep", parents=[common], help="every policy at every configured rate")
    sw.add_argument("--single-modality", action="store_true",
                    help="also sweep with one modality permanently absent")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every block")
    return parser


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(name)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        config = load_config(args.config, args.overrides, args.preset)
        seed = getattr(args, "seed", None)
        if seed is not None:
            key = "streams.seed" if args.command == "gen" else "train.seed"
            config = apply_overrides(config, {key: seed})
        if getattr(args, "rate", None) is not None:
            config = apply_overrides(config, {"eval.rate": args.rate})
        if getattr(args, "policy", None):
            config = apply_overrides(config, {"eval.policy": args.policy})
        return HANDLERS[args.command](Run(args, config))
    except ModalPatchError as exc:
        print(f"modalpatch {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


def run(argv: Optional[Sequence[str]] = None) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
