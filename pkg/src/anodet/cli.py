"""Command-line driver.

Wires the pipeline into reproducible runs: synth/preprocess build patch
datasets, split-domains assigns the two training domains, train fits the
translator, score writes anomaly scores for test patches, and evaluate
turns a score file into a report. Exit codes: 0 success, 1 runtime
failure, 2 usage or precondition error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from anodet import configio, evaluation, pipeline, scoring, synthetic, training
from anodet.errors import InsufficientDataError
from anodet.pipeline import ExtractConfig, FilterParams, ThresholdConfig
from anodet.synthetic import SynthConfig
from anodet.training import LossWeights, TrainConfig
from anodet.translator import ModelConfig, load_checkpoint


class UsageError(Exception):
    """Bad invocation or unmet precondition; maps to exit code 2."""


def _merged_config(args) -> dict:
    values = configio.read_config(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    if args.jobs is not None:
        values["jobs"] = args.jobs
    return values


def _flag(values: dict, key: str, flag_value, default):
    """Effective setting: explicit flag beats config file beats default."""
    if flag_value is not None:
        return flag_value
    if key in values:
        return configio.coerce(values[key], type(default))
    return default


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required for this command")
    return Path(args.out)


def cmd_synth(args) -> int:
    out = _require_out(args)
    values = _merged_config(args)
    cfg = configio.build_dataclass(SynthConfig, values)
    manifest = synthetic.build_dataset(cfg, out)
    configio.write_resolved(out, configio.scalar_dict(cfg))
    print(f"wrote {len(manifest.records)} synthetic patches to {out}")
    return 0


def cmd_preprocess(args) -> int:
    out = _require_out(args)
    if not args.input or not Path(args.input).is_dir():
        raise UsageError(f"input directory not readable: {args.input}")
    values = _merged_config(args)
    filt = configio.build_dataclass(FilterParams, values)
    thresholds = configio.build_dataclass(ThresholdConfig, values)
    extract = ExtractConfig(
        patch_size=_flag(values, "patch_size", args.patch_size, 512),
        keep_ambiguous=_flag(values, "keep_ambiguous", args.keep_ambiguous, False),
        thresholds=thresholds,
        split=_flag(values, "split", args.split, "train"),
    )
    seed = _flag(values, "seed", None, 0)
    jobs = _flag(values, "jobs", None, 1)
    try:
        manifest = pipeline.preprocess_directory(
            args.input, out, masks_dir=args.masks, filter_params=filt,
            extract_cfg=extract, seed=seed, sample_count=args.sample, jobs=jobs)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    resolved = {**configio.scalar_dict(filt), **configio.scalar_dict(thresholds),
                "patch_size": extract.patch_size,
                "keep_ambiguous": extract.keep_ambiguous, "split": extract.split,
                "seed": seed, "jobs": jobs}
    if args.sample is not None:
        resolved["sample"] = args.sample
    configio.write_resolved(out, resolved)
    by_label = {}
    for r in manifest.records:
        by_label[r.label] = by_label.get(r.label, 0) + 1
    print(f"extracted {len(manifest.records)} patches "
          f"({', '.join(f'{k}: {v}' for k, v in sorted(by_label.items()))})")
    return 0


def cmd_split_domains(args) -> int:
    values = _merged_config(args)
    seed = _flag(values, "seed", None, 0)
    manifest = pipeline.read_manifest(args.data)
    manifest = pipeline.split_domains(manifest, seed)
    out = Path(args.out) if args.out else Path(args.data)
    pipeline.write_manifest(manifest, out)
    n_x = len(manifest.subset(domain="X"))
    n_y = len(manifest.subset(domain="Y"))
    print(f"assigned domains: {n_x} X, {n_y} Y")
    return 0


def _train_config(values: dict, args) -> TrainConfig:
    model = configio.build_dataclass(ModelConfig, values)
    weights = configio.build_dataclass(LossWeights, values, prefix="w_")
    base = configio.build_dataclass(TrainConfig, values)
    return TrainConfig(
        steps=_flag(values, "steps", args.steps, base.steps),
        batch_size=_flag(values, "batch_size", args.batch_size, base.batch_size),
        lr=base.lr, beta1=base.beta1, beta2=base.beta2,
        lr_decay_every=base.lr_decay_every, lr_decay=base.lr_decay,
        checkpoint_every=base.checkpoint_every,
        seed=_flag(values, "seed", None, 0),
        model=model, weights=weights,
    )


def cmd_train(args) -> int:
    out = _require_out(args)
    values = _merged_config(args)
    cfg = _train_config(values, args)
    manifest = pipeline.read_manifest(args.data)
    if not manifest.subset(domain="X") or not manifest.subset(domain="Y"):
        raise UsageError("manifest has no domain assignments; "
                         "run `anodet split-domains` first")
    log_every = int(values.get("log_every", 100))

    def progress(step, metrics):
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1}/{cfg.steps} "
                  f"g_total {metrics['g_total']:.4f} d_adv {metrics['d_adv']:.4f} "
                  f"img_recon {metrics['img_recon']:.4f}", flush=True)

    resolved = {**configio.scalar_dict(cfg), **configio.scalar_dict(cfg.model),
                **configio.scalar_dict(cfg.weights, prefix="w_"),
                "resume": bool(args.resume), "log_every": log_every}
    configio.write_resolved(out, resolved)
    training.train(manifest, args.data, out, cfg,
                   resume=bool(args.resume), progress=progress)
    print(f"trained to step {cfg.steps}; checkpoint at "
          f"{out / training.CHECKPOINT_NAME}")
    return 0


def cmd_score(args) -> int:
    out = _require_out(args)
    values = _merged_config(args)
    manifest = pipeline.read_manifest(args.data)
    model, _ = load_checkpoint(args.checkpoint)
    jobs = _flag(values, "jobs", None, 1)
    source = values.get("source_domain", "X")
    target = values.get("target_domain", "Y")
    records, errors = scoring.score_manifest(
        manifest, args.data, model, metric=args.metric, jobs=jobs,
        dump_dir=args.dump_reconstructions, source=source, target=target)
    path = scoring.write_scores(out / scoring.SCORES_NAME, records)
    configio.write_resolved(out, {"metric": args.metric, "jobs": jobs,
                                  "checkpoint": str(args.checkpoint),
                                  "source_domain": source,
                                  "target_domain": target})
    print(f"scored {len(records)} patches -> {path}")
    if errors:
        for patch_id, message in errors:
            print(f"error: {patch_id}: {message}", file=sys.stderr)
        return 1
    return 0


def cmd_evaluate(args) -> int:
    out = _require_out(args)
    if not Path(args.scores).is_file():
        raise UsageError(f"score file not found: {args.scores}")
    report = evaluation.render_report(args.scores, out, plots=not args.no_plots)
    configio.write_resolved(out, {"scores": str(args.scores),
                                  "plots": not args.no_plots})
    print(f"auc={report.auc:.4f} ap={report.ap:.4f} "
          f"youden_threshold={report.youden_threshold:.6g} "
          f"f1={report.f1:.4f} ca={report.ca:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key-value config file")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, help="worker count for parallel stages")

    parser = argparse.ArgumentParser(
        prog="anodet",
        description="Unsupervised anomaly detection for image patches "
                    "via content-style translation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate the synthetic two-domain benchmark")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common],
                       help="extract labeled patches from slide images")
    p.add_argument("--input", required=True, help="directory of slide images")
    p.add_argument("--masks", help="directory of lesion masks (<slide>.png)")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--split", choices=["train", "test"])
    p.add_argument("--keep-ambiguous", action="store_true", default=None)
    p.add_argument("--sample", type=int,
                   help="subsample the healthy training pool to this many patches")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split-domains", parents=[common],
                       help="assign healthy training patches to domains X/Y")
    p.add_argument("--data", required=True, help="manifest directory")
    p.set_defaults(func=cmd_split_domains)

    p = sub.add_parser("train", parents=[common], help="train the translator")
    p.add_argument("--data", required=True, help="manifest directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--resume", action="store_true", default=None,
                   help="continue from the checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", parents=[common], help="score test patches")
    p.add_argument("--data", required=True, help="manifest directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metric", choices=[scoring.METRIC_SSIM, scoring.METRIC_PERCEPTUAL],
                   default=scoring.METRIC_SSIM)
    p.add_argument("--dump-reconstructions", metavar="DIR",
                   help="write query/reconstruction pairs here")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", parents=[common],
                       help="render a report from a score file")
    p.add_argument("--scores", required=True, help="score CSV file")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, InsufficientDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
