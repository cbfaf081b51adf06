"""Command-line interface: synth / train / eval / infer.

Exit codes: 0 success, 2 config error, 3 data error, 4 stage-ordering error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ExperimentConfig, SynthConfig
from .data import export_risk_csv, load_dataset, save_dataset, split_dataset
from .errors import (EXIT_CONFIG, EXIT_DATA, EXIT_ORDERING, ConfigError,
                     DataError, OrderingError, RegsurvError)
from .model import ReportSurvivalModel
from .nlgmetrics import bleu_n, evaluate_report_corpus, rouge_l
from .survival import RiskBatch, concordance_index
from .synthetic import generate_synthetic_cohort
from .textgen import split_text
from .training import (build_cache, build_vocabulary, run_inference,
                       train_completer_stage, train_stage1, train_stage2,
                       train_stage3)


def _load_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def cmd_synth(args) -> int:
    config = SynthConfig(censoring_fraction=args.censoring)
    samples = generate_synthetic_cohort(args.n, args.seed, config)
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = ExperimentConfig.load(args.config)
    samples = load_dataset(args.data, image_size=config.model.input_size,
                           covariate_count=config.synth.covariate_count)
    if not samples:
        raise DataError(f"dataset {args.data} is empty")
    train_split, _, _ = split_dataset(samples, config.split_ratios, config.seed)

    out = Path(args.out)
    if (out / "manifest.json").exists():
        bundle = ckpt.load_bundle(out)
        if bundle.config.content_hash() != config.content_hash():
            raise ConfigError("checkpoint at --out was trained with a different config")
        model, flags, scaler = bundle.model, bundle.stage_flags, bundle.scaler
    else:
        model = ReportSurvivalModel(config, build_vocabulary())
        flags, scaler = {}, None

    from .data import ClinicalScaler

    scaler = scaler if scaler is not None and scaler.mean is not None \
        else ClinicalScaler().fit(train_split)

    cache = build_cache(model, train_split)
    histories = {}
    stages = ["completer", "stage1", "stage2", "stage3"] if args.stage == "all" \
        else [{"1": "stage1", "2": "stage2", "3": "stage3",
               "completer": "completer"}[args.stage]]
    for stage in stages:
        if stage == "completer":
            train_completer_stage(model, train_split, flags, histories)
        elif stage == "stage1":
            train_stage1(model, cache, flags, histories)
        elif stage == "stage2":
            if not flags.get("completer"):
                train_completer_stage(model, train_split, flags, histories)
            train_stage2(model, cache, flags, histories)
        elif stage == "stage3":
            train_stage3(model, cache, flags, histories, scaler)
        print(f"{stage}: done" + (
            f" (final loss {histories[stage][-1]:.4f})" if histories.get(stage) else ""
        ))
    ckpt.save_bundle(out, model, flags, scaler)
    print(f"checkpoint saved to {out}")
    return 0


def cmd_eval(args) -> int:
    bundle = ckpt.load_bundle(args.checkpoint)
    config = bundle.config
    samples = load_dataset(args.data, image_size=config.model.input_size,
                           covariate_count=config.synth.covariate_count)
    if not samples:
        raise DataError(f"dataset {args.data} is empty")

    results = []
    for sample in samples:
        results.append(run_inference(
            bundle.model, bundle.scaler, bundle.stage_flags,
            sample.image, sample.survival.clinical, truth_regions=sample.regions,
        ))

    generated = [r.report for r in results]
    references = [s.report for s in samples]
    metrics = evaluate_report_corpus(generated, references)
    risks = np.array([r.risk for r in results])
    times = np.array([s.survival.time_days for s in samples])
    events = np.array([s.survival.event for s in samples], dtype=bool)
    c_index = concordance_index(RiskBatch(risks, times, events))

    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"n": len(samples), "c_index": c_index, "metrics": metrics.to_dict()}
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True))

    with (out / "per_sample.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "bleu_4", "rouge_l", "risk", "time_days", "event"])
        for sample, result in zip(samples, results):
            cand = split_text(result.report.joined())
            ref = split_text(sample.report.joined())
            writer.writerow([
                sample.sample_id, f"{bleu_n(cand, ref, 4):.6f}",
                f"{rouge_l(cand, ref):.6f}", f"{result.risk:.6f}",
                f"{sample.survival.time_days:.3f}", int(sample.survival.event),
            ])

    with (out / "region_scores.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "region", "score"])
        for sample, result in zip(samples, results):
            for j, score in enumerate(result.region_scores.scores, start=1):
                writer.writerow([sample.sample_id, j, f"{score:.8g}"])

    export_risk_csv(
        ((s.sample_id, r.risk, s.survival.time_days, s.survival.event)
         for s, r in zip(samples, results)),
        out / "risks.csv",
    )
    if args.charts:
        _write_charts(out, metrics, results)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _write_charts(out: Path, metrics, results):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(12, 4))
    names = list(metrics.to_dict())
    axes[0].bar(range(len(names)), [metrics.to_dict()[k] for k in names])
    axes[0].set_xticks(range(len(names)))
    axes[0].set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    axes[0].set_title("report metrics")
    mean_scores = np.mean([r.region_scores.scores for r in results], axis=0)
    axes[1].bar(range(1, 30), mean_scores)
    axes[1].set_title("mean regional risk attention")
    axes[1].set_xlabel("region")
    fig.tight_layout()
    fig.savefig(out / "charts.png", dpi=120)
    plt.close(fig)


def cmd_infer(args) -> int:
    bundle = ckpt.load_bundle(args.checkpoint)
    if args.detector:
        bundle.config.plugins.detector = args.detector
    image = _load_image(Path(args.image))
    clinical = np.asarray(json.loads(Path(args.clinical).read_text()), dtype=np.float64)
    result = run_inference(bundle.model, bundle.scaler, bundle.stage_flags,
                           image, clinical)
    payload = {
        "boxes": [[round(float(v), 6) for v in row] for row in result.regions.coords],
        "report": result.report.sentences,
        "risk": result.risk,
        "region_scores": [float(v) for v in result.region_scores.scores],
    }
    print(json.dumps(payload, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regsurv",
        description="Region-grounded report generation and survival prediction.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--censoring", type=float, default=0.3)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one or all training stages")
    p.add_argument("--stage", choices=["completer", "1", "2", "3", "all"], default="all")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--charts", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="full inference on one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--clinical", required=True)
    p.add_argument("--detector", default="canonical")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OrderingError as exc:
        print(f"ordering error: {exc}", file=sys.stderr)
        return EXIT_ORDERING
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RegsurvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
