"""Operator surface: seeded subcommands chaining the full experiment.

Every subcommand is a pure function of (config, input files, seed): reruns
produce byte-identical artifacts. Exit codes are stable for scripting:
0 success, 2 config/schema error, 3 generation stall, 4 missing artifact,
5 empty evaluation set.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import diffusion, pipeline
from .codec import encode, read_latents, write_latents
from .config import ConfigError, RunConfig
from .geometry import MalformedRecord, SamplingStall, record_from_sequence, sequence_from_record
from .metrics import MmdConfig, SourceTag, pca_2d
from .nets import (
    LinearRegressor,
    TrainConfig,
    load_model,
    save_model,
    train_classifier,
    train_denoiser,
    train_regressor,
)
from .pipeline import (
    STREAM_EVAL_GT,
    STREAM_TRAIN_GT,
    STREAM_TRAINING,
    GroundTruthCondition,
    MissingModel,
    NoPairs,
    RejectionStall,
    TrainedModels,
    VariantId,
    derived_seed,
    seed_stream,
)

logger = logging.getLogger("cadrepair")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STALL = 3
EXIT_MISSING = 4
EXIT_EMPTY = 5

MODEL_FILES = {
    "denoiser": "denoiser.json",
    "classifier": "classifier.json",
    "ssl_regressor": "ssl_regressor.json",
    "gt_regressor": "gt_regressor.json",
}

_VARIANT_ORDER = [
    VariantId.BASELINE,
    VariantId.VAR1,
    VariantId.VAR2,
    VariantId.VAR3,
    VariantId.VAR4,
    VariantId.VAR5,
    VariantId.FULL,
]


class MissingArtifact(Exception):
    pass


class EmptyEvaluation(Exception):
    pass


def _fmt(value) -> str:
    return repr(float(value))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _schedule(cfg: RunConfig) -> diffusion.DiffusionSchedule:
    return diffusion.build_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)


def _guidance(cfg: RunConfig) -> diffusion.GuidanceConfig:
    return diffusion.GuidanceConfig(
        use_classifier=cfg.use_classifier_guidance,
        use_regressor=cfg.use_regressor_guidance,
        classifier_scale=cfg.classifier_scale,
        regressor_scale=cfg.regressor_scale,
        stop_gradient_y=cfg.stop_gradient_y,
    )


def _mmd_config(cfg: RunConfig) -> MmdConfig:
    return MmdConfig(sigma=cfg.fixed_sigma, cloud_size=cfg.cloud_size)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    return out


def _require_file(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} is missing; {hint}")
    return path


def _load_mlp(path: Path):
    model = load_model(path)
    if isinstance(model, LinearRegressor):
        raise MalformedRecord(f"{path}: expected an MLP model file")
    return model


def _load_regressor(path: Path) -> LinearRegressor:
    model = load_model(path)
    if not isinstance(model, LinearRegressor):
        raise MalformedRecord(f"{path}: expected a linear regressor model file")
    return model


def _load_conditions(out: Path) -> list[GroundTruthCondition]:
    path = out / "conditions.jsonl"
    conditions = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                seq = sequence_from_record(obj["sequence"])
                conditions.append(
                    GroundTruthCondition(
                        np.asarray(obj["condition"], dtype=float), seq, encode(seq)
                    )
                )
            except (KeyError, TypeError, MalformedRecord) as exc:
                raise MalformedRecord(f"{path}:{lineno}: {exc}") from exc
    return conditions


def _train_gt_conditions(cfg: RunConfig, out: Path) -> list[GroundTruthCondition]:
    if (out / "conditions.jsonl").exists():
        return _load_conditions(out)
    return pipeline.gen_ground_truth(
        cfg.n_conditions, seed_stream(cfg.master_seed, STREAM_TRAIN_GT)
    )


def _update_metrics_csv(out: Path, model_name: str, values: dict[str, float]) -> None:
    path = out / "metrics.csv"
    rows: dict[tuple[str, str], str] = {}
    if path.exists():
        with open(path) as fh:
            reader = csv.reader(fh)
            next(reader, None)
            for model, metric, value in reader:
                rows[(model, metric)] = value
    for metric, value in values.items():
        rows[(model_name, metric)] = _fmt(value)
    ordered = sorted(rows.items())
    _write_csv(path, ["model", "metric", "value"], [[m, k, v] for (m, k), v in ordered])


def cmd_gen_dataset(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    denoiser = _load_mlp(
        _require_file(out / MODEL_FILES["denoiser"], "run `train --which denoiser` first")
    )
    schedule = _schedule(cfg)
    records = pipeline.gen_dataset(
        cfg.n_conditions,
        cfg.generations_per_condition,
        denoiser,
        diffusion.UNGUIDED,
        schedule,
        cfg.master_seed,
    )
    generated = pipeline.stack_generated_latents(records)
    gt_latents = pipeline.stack_ground_truth_latents(records)
    labels = pipeline.generation_labels(records)
    write_latents(out / "latents.bin", np.vstack([generated, gt_latents]))

    with open(out / "conditions.jsonl", "w") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "condition_id": r.condition_id,
                        "condition": [float(v) for v in r.condition],
                        "sequence": record_from_sequence(r.sequence),
                    },
                    allow_nan=False,
                    separators=(",", ":"),
                )
                + "\n"
            )

    label_rows = []
    for r in records:
        for g in r.generations:
            reasons = "|".join(reason.name for reason in g.report.reasons)
            label_rows.append([r.condition_id, g.index, int(g.report.valid), reasons])
    _write_csv(out / "labels.csv", ["condition_id", "seed", "valid", "reasons"], label_rows)

    try:
        ssl_pairs = pipeline.build_ssl_pairs(records)
    except NoPairs:
        logger.warning("no invalid/valid sibling pairs exist; pairs_ssl.csv is empty")
        ssl_pairs = np.zeros((0, 2), dtype=int)
    _write_csv(out / "pairs_ssl.csv", ["invalid_row", "valid_row"], ssl_pairs.tolist())
    gt_pairs = pipeline.build_gt_pairs(records)
    _write_csv(out / "pairs_gt.csv", ["gen_row", "gt_row"], gt_pairs.tolist())

    n_total = len(labels)
    n_valid = int(labels.sum())
    n_invalid = n_total - n_valid
    invalid_fraction = n_invalid / n_total
    summary = {
        "conditions": len(records),
        "generations_per_condition": cfg.generations_per_condition,
        "generated_latents": n_total,
        "valid_latents": n_valid,
        "invalid_latents": n_invalid,
        "invalid_fraction": invalid_fraction,
        "ground_truth_latents": len(records),
        "ssl_pairs": int(len(ssl_pairs)),
        "gt_pairs": int(len(gt_pairs)),
    }
    (out / "dataset_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"conditions              {summary['conditions']}")
    print(f"valid latents w/ labels {n_valid}")
    print(f"invalid latents w/ labels {n_invalid}")
    print(f"ground-truth latents    {summary['ground_truth_latents']}")
    print(f"invalid fraction        {invalid_fraction:.4f}")
    if not 0.02 <= invalid_fraction <= 0.35:
        logger.warning(
            "invalid fraction %.4f outside [0.02, 0.35]; retune denoiser epochs "
            "(fewer epochs raise infeasibility)",
            invalid_fraction,
        )
    return EXIT_OK


def _train_one(cfg: RunConfig, out: Path, which: str) -> None:
    schedule = _schedule(cfg)
    if which == "denoiser":
        conditions = _train_gt_conditions(cfg, out)
        result = train_denoiser(
            np.array([c.condition for c in conditions]),
            np.array([c.latent for c in conditions]),
            schedule,
            TrainConfig(
                epochs=cfg.denoiser.epochs,
                batch_size=cfg.denoiser.batch_size,
                learning_rate=cfg.denoiser.learning_rate,
                seed=derived_seed(cfg.master_seed, STREAM_TRAINING, 0),
                split=cfg.split,
            ),
        )
        save_model(out / MODEL_FILES["denoiser"], result.model)
        _update_metrics_csv(
            out,
            "denoiser",
            {
                "first_epoch_loss": result.epoch_losses[0],
                "final_loss": result.epoch_losses[-1],
                "n_conditions": len(conditions),
            },
        )
        print(
            f"denoiser: loss {result.epoch_losses[0]:.4f} -> {result.epoch_losses[-1]:.4f} "
            f"over {cfg.denoiser.epochs} epochs"
        )
        return

    latents_path = _require_file(out / "latents.bin", "run gen-dataset first")
    latents = read_latents(latents_path)
    n_generated = cfg.n_conditions * cfg.generations_per_condition

    if which == "classifier":
        labels_path = _require_file(out / "labels.csv", "run gen-dataset first")
        with open(labels_path) as fh:
            reader = csv.reader(fh)
            next(reader)
            labels = np.array([int(row[2]) for row in reader], dtype=bool)
        result = train_classifier(
            latents[:n_generated],
            labels,
            TrainConfig(
                epochs=cfg.classifier.epochs,
                batch_size=cfg.classifier.batch_size,
                learning_rate=cfg.classifier.learning_rate,
                seed=derived_seed(cfg.master_seed, STREAM_TRAINING, 1),
                split=cfg.split,
            ),
        )
        save_model(out / MODEL_FILES["classifier"], result.model)
        m = result.metrics
        _update_metrics_csv(
            out,
            "classifier",
            {
                "accuracy": m.accuracy,
                "balanced_accuracy": m.balanced_accuracy,
                "precision_valid": m.precision[1],
                "recall_valid": m.recall[1],
                "f1_valid": m.f1[1],
                "precision_invalid": m.precision[0],
                "recall_invalid": m.recall[0],
                "f1_invalid": m.f1[0],
                "confusion_tn": m.confusion[0, 0],
                "confusion_fp": m.confusion[0, 1],
                "confusion_fn": m.confusion[1, 0],
                "confusion_tp": m.confusion[1, 1],
                "n_train": result.n_train,
                "n_test": result.n_test,
            },
        )
        print("classifier (held out, class 1 = valid):")
        print(f"  precision {m.precision[1]:.3f}  recall {m.recall[1]:.3f}  f1 {m.f1[1]:.3f}")
        print(f"  accuracy {m.accuracy:.3f}  balanced {m.balanced_accuracy:.3f}")
        print(f"  confusion {m.confusion.tolist()}")
        return

    if which in ("ssl_regressor", "gt_regressor"):
        pair_file = "pairs_ssl.csv" if which == "ssl_regressor" else "pairs_gt.csv"
        pairs_path = _require_file(out / pair_file, "run gen-dataset first")
        with open(pairs_path) as fh:
            reader = csv.reader(fh)
            next(reader)
            pairs = np.array([[int(a), int(b)] for a, b in reader], dtype=int).reshape(-1, 2)
        min_rows = latents.shape[1] + 1
        if len(pairs) < min_rows:
            raise MissingArtifact(
                f"{pairs_path} holds {len(pairs)} pairs; need >= {min_rows} to fit"
            )
        if which == "ssl_regressor":
            inputs = latents[pairs[:, 0]]
            targets = latents[pairs[:, 1]]
            seed_index = 2
        else:
            inputs = latents[pairs[:, 0]]
            targets = latents[n_generated + pairs[:, 1]]
            seed_index = 3
        result = train_regressor(
            inputs,
            targets,
            TrainConfig(
                epochs=1,
                batch_size=1,
                learning_rate=1.0,
                seed=derived_seed(cfg.master_seed, STREAM_TRAINING, seed_index),
                split=cfg.split,
            ),
            ridge=cfg.ridge,
        )
        save_model(out / MODEL_FILES[which], result.model)
        _update_metrics_csv(
            out,
            which,
            {
                "train_r2": result.train_r2,
                "train_mse": result.train_mse,
                "test_r2": result.test_r2,
                "test_mse": result.test_mse,
                "n_pairs": len(pairs),
            },
        )
        print(
            f"{which}: train R2 {result.train_r2:.4f} MSE {result.train_mse:.4f} | "
            f"test R2 {result.test_r2:.4f} MSE {result.test_mse:.4f} ({len(pairs)} pairs)"
        )
        return

    raise ConfigError(f"unknown training target {which!r}")


def cmd_train(cfg: RunConfig, which: str) -> int:
    out = _out_dir(cfg)
    targets = (
        ["denoiser", "classifier", "ssl_regressor", "gt_regressor"] if which == "all" else [which]
    )
    for target in targets:
        _train_one(cfg, out, target)
    return EXIT_OK


def _parse_variants(raw: str) -> list[VariantId]:
    if raw == "all":
        return list(_VARIANT_ORDER)
    chosen = set()
    for token in raw.split(","):
        token = token.strip().lower()
        if not token:
            continue
        try:
            chosen.add(VariantId(token))
        except ValueError as exc:
            names = ", ".join(v.value for v in _VARIANT_ORDER)
            raise ConfigError(f"unknown variant {token!r}; expected one of {names}") from exc
    if not chosen:
        raise ConfigError("no variants requested")
    return [v for v in _VARIANT_ORDER if v in chosen]


def cmd_eval(cfg: RunConfig, variants_raw: str, threads: int) -> int:
    out = _out_dir(cfg)
    variants = _parse_variants(variants_raw)
    if cfg.n_eval_conditions < 1:
        raise EmptyEvaluation("n_eval_conditions is 0")
    needed = sorted({name for v in variants for name in pipeline._required_models(v)})
    models = TrainedModels()
    for name in needed:
        path = _require_file(out / MODEL_FILES[name], f"run `train --which {name}` first")
        if name in ("denoiser", "classifier"):
            setattr(models, name, _load_mlp(path))
        else:
            setattr(models, name, _load_regressor(path))
    eval_conditions = pipeline.gen_ground_truth(
        cfg.n_eval_conditions, seed_stream(cfg.master_seed, STREAM_EVAL_GT)
    )
    report, outcome_map = pipeline.run_variants(
        variants,
        eval_conditions,
        models,
        _schedule(cfg),
        cfg.master_seed,
        guidance=_guidance(cfg),
        mmd_config=_mmd_config(cfg),
        threads=threads,
    )

    _write_csv(
        out / "report.csv",
        [
            "variant",
            "n",
            "n_valid",
            "feasibility",
            "mean_mmd",
            "median_mmd",
            "repaired_count",
            "repair_failed_count",
        ],
        [
            [
                row.variant,
                row.n,
                row.n_valid,
                _fmt(row.feasibility),
                _fmt(row.mean_mmd),
                _fmt(row.median_mmd),
                row.repaired_count,
                row.repair_failed_count,
            ]
            for row in report.rows
        ],
    )
    score_rows = []
    hist_rows = []
    for variant in variants:
        for outcome in outcome_map[variant]:
            if outcome.mmd_score is not None:
                score_rows.append([outcome.condition_id, variant.value, _fmt(outcome.mmd_score)])
        row = next(r for r in report.rows if r.variant == variant.value)
        for lo, hi, count in zip(
            row.histogram.edges[:-1], row.histogram.edges[1:], row.histogram.counts
        ):
            hist_rows.append([variant.value, _fmt(lo), _fmt(hi), int(count)])
    _write_csv(out / "mmd_scores.csv", ["condition_id", "variant", "mmd"], score_rows)
    _write_csv(out / "mmd_hist.csv", ["variant", "bin_lo", "bin_hi", "count"], hist_rows)

    write_latents(
        out / "eval_latents_gt.bin", np.array([c.latent for c in eval_conditions])
    )
    for variant, filename in (
        (VariantId.BASELINE, "eval_latents_baseline.bin"),
        (VariantId.FULL, "eval_latents_full.bin"),
    ):
        if variant in outcome_map:
            write_latents(
                out / filename, np.array([o.final_latent for o in outcome_map[variant]])
            )

    print(f"{'variant':<10} {'n':>5} {'valid':>5} {'feas':>7} {'meanMMD':>8} {'repaired':>8}")
    for row in report.rows:
        mean_str = f"{row.mean_mmd:.4f}" if row.mmd_scores else "-"
        print(
            f"{row.variant:<10} {row.n:>5} {row.n_valid:>5} {row.feasibility:>7.4f} "
            f"{mean_str:>8} {row.repaired_count:>8}"
        )
    return EXIT_OK


def cmd_pca(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    sources = [
        ("eval_latents_baseline.bin", SourceTag.BASELINE),
        ("eval_latents_full.bin", SourceTag.SELF_REPAIRING),
        ("eval_latents_gt.bin", SourceTag.GROUND_TRUTH),
    ]
    blocks = []
    tags: list[SourceTag] = []
    for filename, tag in sources:
        path = _require_file(out / filename, "run `eval` with baseline and full variants first")
        block = read_latents(path)
        blocks.append(block)
        tags.extend([tag] * len(block))
    stacked = np.vstack(blocks)
    projection = pca_2d(stacked, tags)
    _write_csv(
        out / "pca.csv",
        ["pc1", "pc2", "tag"],
        [
            [_fmt(x), _fmt(y), tag.value]
            for (x, y), tag in zip(projection.coords, projection.tags)
        ],
    )
    coords = projection.coords
    tag_arr = np.array([t.value for t in projection.tags])
    base_centroid = coords[tag_arr == SourceTag.BASELINE.value].mean(axis=0)
    full_centroid = coords[tag_arr == SourceTag.SELF_REPAIRING.value].mean(axis=0)
    centroid_distance = float(np.linalg.norm(base_centroid - full_centroid))
    print(
        "explained variance: "
        f"{projection.explained_variance[0]:.4f}, {projection.explained_variance[1]:.4f}"
    )
    print(f"baseline vs self-repairing centroid distance: {centroid_distance:.6f}")
    return EXIT_OK


def cmd_repair(latents_path: str, regressor_path: str, out_dir: str | None) -> int:
    latents_file = _require_file(Path(latents_path), "point --latents at a latent matrix file")
    regressor_file = _require_file(Path(regressor_path), "point --regressor at a model file")
    latents = read_latents(latents_file)
    regressor = _load_regressor(regressor_file)
    destination = Path(out_dir) if out_dir else latents_file.parent
    destination.mkdir(parents=True, exist_ok=True)
    outcomes = [pipeline.self_repair(row, regressor) for row in latents]
    write_latents(destination / "repaired.bin", np.array([o.final_latent for o in outcomes]))
    _write_csv(
        destination / "repair_outcomes.csv",
        ["row", "stage", "valid"],
        [[i, o.stage.value, int(o.report.valid)] for i, o in enumerate(outcomes)],
    )
    stages = [o.stage for o in outcomes]
    print(f"rows                {len(outcomes)}")
    print(f"valid direct        {sum(s is pipeline.RepairStage.VALID_DIRECT for s in stages)}")
    print(f"repaired valid      {sum(s is pipeline.RepairStage.REPAIRED_VALID for s in stages)}")
    print(f"repaired invalid    {sum(s is pipeline.RepairStage.REPAIRED_INVALID for s in stages)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cadrepair",
        description="Feasibility-guided latent diffusion over a miniature CAD language",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", "-c", help="run config JSON (defaults apply if omitted)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="override the output directory")

    p_gen = sub.add_parser("gen-dataset", help="generate the labeled latent dataset")
    add_common(p_gen)

    p_train = sub.add_parser("train", help="train one model or all of them")
    add_common(p_train)
    p_train.add_argument(
        "--which",
        default="all",
        choices=["denoiser", "classifier", "ssl_regressor", "gt_regressor", "all"],
    )

    p_eval = sub.add_parser("eval", help="run the variant benchmark on held-out conditions")
    add_common(p_eval)
    p_eval.add_argument("--variants", default="all", help="comma list or 'all'")
    p_eval.add_argument(
        "--threads",
        type=int,
        default=os.cpu_count() or 1,
        help="worker processes for per-condition evaluation",
    )

    p_pca = sub.add_parser("pca", help="project evaluation latents to 2D")
    add_common(p_pca)

    p_repair = sub.add_parser("repair", help="apply self-repair to a latent matrix file")
    p_repair.add_argument("--latents", required=True)
    p_repair.add_argument("--regressor", required=True)
    p_repair.add_argument("--out", help="output directory (default: beside the latents file)")

    return parser


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.master_seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "repair":
            return cmd_repair(args.latents, args.regressor, args.out)
        cfg = _load_config(args)
        if args.command == "gen-dataset":
            return cmd_gen_dataset(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.which)
        if args.command == "eval":
            return cmd_eval(cfg, args.variants, max(1, args.threads))
        if args.command == "pca":
            return cmd_pca(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, MalformedRecord) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except (RejectionStall, SamplingStall) as exc:
        logger.error("%s", exc)
        return EXIT_STALL
    except (MissingArtifact, MissingModel) as exc:
        logger.error("%s", exc)
        return EXIT_MISSING
    except EmptyEvaluation as exc:
        logger.error("%s", exc)
        return EXIT_EMPTY


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
