"""End-to-end orchestration: dataset generation, pairing, repair, variant runs.

Every stochastic stage derives its generator from the master seed through
labeled SeedSequence streams, so regeneration is bitwise stable and every
variant of the evaluation matrix shares per-condition starting noise
(paired-seed discipline).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import diffusion
from .codec import condition_descriptor, decode, encode
from .geometry import (
    CommandSequence,
    EdgeKind,
    SketchEdge,
    ValidityReport,
    canonicalize_sequence,
    kernel_check,
    sample_point_cloud,
)
from .metrics import EvalReport, Histogram, MmdConfig, VariantRow, mmd, mmd_histogram
from .nets import LinearRegressor, Mlp, regressor_predict

logger = logging.getLogger(__name__)

# SeedSequence stream labels; streams are (master_seed, label, *indices).
STREAM_TRAIN_GT = 0
STREAM_DATASET_GEN = 1
STREAM_EVAL_GT = 2
STREAM_EVAL_SAMPLE = 3
STREAM_CLOUD_GT = 4
STREAM_CLOUD_GEN = 5
STREAM_TRAINING = 6

_REJECTION_MIN_DRAWS = 1_000_000
_REJECTION_MIN_RATE = 1e-3

# Ground-truth generator ranges: margins inside the kernel bounds so that a
# well-trained sampler lands mostly on feasible shapes.
_TARGET_RANGE = 0.8
_BULGE_RANGE = 0.8
_DEPTH_RANGE = (0.1, 0.9)
_ARC_PROBABILITY = 0.3
_EDGE_COUNTS = (3, 5)


class PipelineError(Exception):
    pass


class RejectionStall(PipelineError):
    pass


class NoPairs(PipelineError):
    pass


class MissingModel(PipelineError):
    pass


def seed_stream(master_seed: int, label: int, *indices: int) -> np.random.SeedSequence:
    """Deterministic named child stream of the master seed."""
    return np.random.SeedSequence([int(master_seed), int(label), *[int(i) for i in indices]])


def derived_seed(master_seed: int, label: int, *indices: int) -> int:
    """Single-integer seed derived from a labeled stream (for TrainConfig)."""
    return int(seed_stream(master_seed, label, *indices).generate_state(1)[0])


@dataclass(frozen=True)
class GroundTruthCondition:
    condition: np.ndarray
    sequence: CommandSequence
    latent: np.ndarray


@dataclass(frozen=True)
class Generation:
    index: int
    latent: np.ndarray
    sequence: CommandSequence
    report: ValidityReport


@dataclass(frozen=True)
class DatasetRecord:
    condition_id: int
    condition: np.ndarray
    sequence: CommandSequence
    latent: np.ndarray
    generations: tuple[Generation, ...]


def _random_sequence(rng: np.random.Generator) -> CommandSequence:
    count = int(rng.integers(_EDGE_COUNTS[0], _EDGE_COUNTS[1] + 1))
    edges = []
    for _ in range(count):
        is_arc = rng.random() < _ARC_PROBABILITY
        x, y = rng.uniform(-_TARGET_RANGE, _TARGET_RANGE, 2)
        bulge = float(rng.uniform(-_BULGE_RANGE, _BULGE_RANGE)) if is_arc else 0.0
        edges.append(
            SketchEdge(EdgeKind.ARC if is_arc else EdgeKind.LINE, (float(x), float(y)), bulge)
        )
    return CommandSequence(tuple(edges), float(rng.uniform(*_DEPTH_RANGE)))


def gen_ground_truth(n_conditions: int, seed) -> list[GroundTruthCondition]:
    """Rejection-sample kernel-valid sequences with their descriptors and latents."""
    if n_conditions < 1:
        raise ValueError("n_conditions must be >= 1")
    rng = np.random.default_rng(seed)
    out: list[GroundTruthCondition] = []
    draws = 0
    while len(out) < n_conditions:
        seq = _random_sequence(rng)
        draws += 1
        if kernel_check(seq).valid:
            # one representative per cyclic/orientation class, so the
            # condition -> latent map stays (near-)unimodal
            seq = canonicalize_sequence(seq)
            out.append(GroundTruthCondition(condition_descriptor(seq), seq, encode(seq)))
        elif draws >= _REJECTION_MIN_DRAWS and len(out) / draws < _REJECTION_MIN_RATE:
            raise RejectionStall(f"acceptance {len(out) / draws:.2e} after {draws} draws")
    logger.info("ground-truth acceptance rate %.3f (%d/%d)", len(out) / draws, len(out), draws)
    return out


def gen_dataset(
    n_conditions: int,
    generations_per_condition: int,
    denoiser: Mlp,
    guidance: diffusion.GuidanceConfig,
    schedule: diffusion.DiffusionSchedule,
    seed: int,
) -> list[DatasetRecord]:
    """Generate the labeled dataset: per condition, several sampled latents
    decoded and kernel-checked, alongside the ground truth."""
    ground_truth = gen_ground_truth(n_conditions, seed_stream(seed, STREAM_TRAIN_GT))
    records = []
    for cid, gt in enumerate(ground_truth):
        generations = []
        for g in range(generations_per_condition):
            latent = diffusion.sample(
                gt.condition,
                denoiser,
                guidance,
                schedule,
                seed_stream(seed, STREAM_DATASET_GEN, cid, g),
            )
            sequence = decode(latent)
            generations.append(Generation(g, latent, sequence, kernel_check(sequence)))
        records.append(
            DatasetRecord(cid, gt.condition, gt.sequence, gt.latent, tuple(generations))
        )
    return records


def stack_generated_latents(records) -> np.ndarray:
    """Generated latents in row order condition-major, generation-minor."""
    return np.array([g.latent for r in records for g in r.generations], dtype=float)


def stack_ground_truth_latents(records) -> np.ndarray:
    return np.array([r.latent for r in records], dtype=float)


def generation_labels(records) -> np.ndarray:
    return np.array([g.report.valid for r in records for g in r.generations], dtype=bool)


def build_ssl_pairs(records) -> np.ndarray:
    """Pair each invalid generation with its nearest valid sibling.

    Returns (k, 2) rows of (invalid_row, valid_row) indices into the stacked
    generated-latent matrix; conditions without a valid sibling contribute
    nothing.
    """
    pairs = []
    per_condition = len(records[0].generations) if records else 0
    for r in records:
        valid = [(i, g.latent) for i, g in enumerate(r.generations) if g.report.valid]
        if not valid:
            continue
        valid_latents = np.array([v for _, v in valid])
        for i, g in enumerate(r.generations):
            if g.report.valid:
                continue
            dists = np.linalg.norm(valid_latents - g.latent, axis=1)
            j = valid[int(np.argmin(dists))][0]
            pairs.append((r.condition_id * per_condition + i, r.condition_id * per_condition + j))
    if not pairs:
        raise NoPairs("no invalid generation has a valid sibling")
    return np.array(pairs, dtype=int)


def build_gt_pairs(records) -> np.ndarray:
    """(generated_row, ground_truth_row) for every generation, valid or not."""
    per_condition = len(records[0].generations) if records else 0
    pairs = [
        (r.condition_id * per_condition + i, r.condition_id)
        for r in records
        for i in range(len(r.generations))
    ]
    return np.array(pairs, dtype=int).reshape(-1, 2)


class RepairStage(Enum):
    VALID_DIRECT = "ValidDirect"
    REPAIRED_VALID = "RepairedValid"
    REPAIRED_INVALID = "RepairedInvalid"


@dataclass(frozen=True)
class RepairOutcome:
    stage: RepairStage
    pre_repair: np.ndarray
    post_repair: np.ndarray | None
    sequence: CommandSequence
    report: ValidityReport

    @property
    def final_latent(self) -> np.ndarray:
        return self.pre_repair if self.post_repair is None else self.post_repair


def self_repair(latent, regressor: LinearRegressor, max_iters: int = 1) -> RepairOutcome:
    """Kernel-gated repair: already-valid latents pass through untouched,
    invalid ones are re-mapped through the regressor up to max_iters times."""
    z = np.asarray(latent, dtype=float)
    sequence = decode(z)
    report = kernel_check(sequence)
    if report.valid:
        return RepairOutcome(RepairStage.VALID_DIRECT, z, None, sequence, report)
    current = z
    for _ in range(max_iters):
        current = regressor_predict(regressor, current)
        sequence = decode(current)
        report = kernel_check(sequence)
        if report.valid:
            return RepairOutcome(RepairStage.REPAIRED_VALID, z, current, sequence, report)
    return RepairOutcome(RepairStage.REPAIRED_INVALID, z, current, sequence, report)


class VariantId(Enum):
    BASELINE = "baseline"
    VAR1 = "var1"
    VAR2 = "var2"
    VAR3 = "var3"
    VAR4 = "var4"
    VAR5 = "var5"
    FULL = "full"


@dataclass
class TrainedModels:
    denoiser: Mlp | None = None
    classifier: Mlp | None = None
    ssl_regressor: LinearRegressor | None = None
    gt_regressor: LinearRegressor | None = None


@dataclass(frozen=True)
class _VariantPlan:
    use_classifier: bool
    use_regressor: bool
    repair_model: str | None  # TrainedModels attribute name


_VARIANT_PLANS: dict[VariantId, _VariantPlan] = {
    VariantId.BASELINE: _VariantPlan(False, False, None),
    VariantId.VAR1: _VariantPlan(False, False, "ssl_regressor"),
    VariantId.VAR2: _VariantPlan(False, False, "gt_regressor"),
    VariantId.VAR3: _VariantPlan(True, False, None),
    VariantId.VAR4: _VariantPlan(False, True, None),
    VariantId.VAR5: _VariantPlan(True, True, None),
    VariantId.FULL: _VariantPlan(True, True, "ssl_regressor"),
}


def _required_models(variant: VariantId) -> list[str]:
    plan = _VARIANT_PLANS[variant]
    needed = ["denoiser"]
    if plan.use_classifier:
        needed.append("classifier")
    if plan.use_regressor:
        needed.append("ssl_regressor")
    if plan.repair_model:
        needed.append(plan.repair_model)
    return needed


@dataclass(frozen=True)
class ConditionOutcome:
    condition_id: int
    valid: bool
    stage: RepairStage | None
    final_latent: np.ndarray
    start_latent: np.ndarray
    mmd_score: float | None


def evaluate_condition(
    variant: VariantId,
    condition_id: int,
    condition: GroundTruthCondition,
    gt_cloud_points: np.ndarray,
    models: TrainedModels,
    schedule: diffusion.DiffusionSchedule,
    seed: int,
    guidance: diffusion.GuidanceConfig,
    mmd_config: MmdConfig,
) -> ConditionOutcome:
    """Sample, optionally repair, kernel-check, and MMD-score one condition."""
    plan = _VARIANT_PLANS[variant]
    variant_guidance = diffusion.GuidanceConfig(
        use_classifier=plan.use_classifier,
        use_regressor=plan.use_regressor,
        classifier_scale=guidance.classifier_scale,
        regressor_scale=guidance.regressor_scale,
        stop_gradient_y=guidance.stop_gradient_y,
    )
    sample_seed = seed_stream(seed, STREAM_EVAL_SAMPLE, condition_id)
    latent_dim = models.denoiser.weights[-1].shape[0]
    start = diffusion.initial_latent(sample_seed, latent_dim)
    z0 = diffusion.sample(
        condition.condition,
        models.denoiser,
        variant_guidance,
        schedule,
        sample_seed,
        classifier=models.classifier if plan.use_classifier else None,
        regressor=models.ssl_regressor if plan.use_regressor else None,
    )
    if plan.repair_model is not None:
        outcome = self_repair(z0, getattr(models, plan.repair_model))
        stage = outcome.stage
        final_latent = outcome.final_latent
        sequence, report = outcome.sequence, outcome.report
    else:
        stage = None
        final_latent = z0
        sequence = decode(z0)
        report = kernel_check(sequence)
    score = None
    if report.valid:
        cloud = sample_point_cloud(
            sequence, mmd_config.cloud_size, seed_stream(seed, STREAM_CLOUD_GEN, condition_id)
        )
        score = mmd(cloud.points, gt_cloud_points, mmd_config)
    return ConditionOutcome(condition_id, report.valid, stage, final_latent, start, score)


def ground_truth_cloud(
    condition: GroundTruthCondition, condition_id: int, seed: int, mmd_config: MmdConfig
):
    return sample_point_cloud(
        condition.sequence, mmd_config.cloud_size, seed_stream(seed, STREAM_CLOUD_GT, condition_id)
    )


def _start_hash(outcomes) -> str:
    digest = hashlib.sha256()
    for outcome in outcomes:
        digest.update(np.ascontiguousarray(outcome.start_latent, dtype="<f8").tobytes())
    return digest.hexdigest()


def summarize_outcomes(variant: VariantId, outcomes) -> VariantRow:
    n = len(outcomes)
    n_valid = sum(1 for o in outcomes if o.valid)
    scores = tuple(o.mmd_score for o in outcomes if o.mmd_score is not None)
    if scores:
        histogram = mmd_histogram(scores)
    else:
        histogram = Histogram(np.zeros(16, dtype=int), np.linspace(0.0, 1.0, 17))
    return VariantRow(
        variant=variant.value,
        n=n,
        n_valid=n_valid,
        feasibility=n_valid / n if n else float("nan"),
        mmd_scores=scores,
        mean_mmd=float(np.mean(scores)) if scores else float("nan"),
        median_mmd=float(np.median(scores)) if scores else float("nan"),
        histogram=histogram,
        repaired_count=sum(1 for o in outcomes if o.stage is RepairStage.REPAIRED_VALID),
        repair_failed_count=sum(1 for o in outcomes if o.stage is RepairStage.REPAIRED_INVALID),
        start_hash=_start_hash(outcomes),
    )


def run_variant(
    variant: VariantId,
    eval_conditions,
    models: TrainedModels,
    schedule: diffusion.DiffusionSchedule,
    seed: int,
    guidance: diffusion.GuidanceConfig = diffusion.GuidanceConfig(),
    mmd_config: MmdConfig = MmdConfig(),
    gt_clouds=None,
    return_outcomes: bool = False,
):
    """Evaluate one variant over the condition set with paired per-condition seeds."""
    for name in _required_models(variant):
        if getattr(models, name) is None:
            raise MissingModel(f"variant {variant.value} needs model {name!r}")
    if gt_clouds is None:
        gt_clouds = [
            ground_truth_cloud(c, i, seed, mmd_config) for i, c in enumerate(eval_conditions)
        ]
    outcomes = [
        evaluate_condition(
            variant, i, cond, gt_clouds[i].points, models, schedule, seed, guidance, mmd_config
        )
        for i, cond in enumerate(eval_conditions)
    ]
    row = summarize_outcomes(variant, outcomes)
    return (row, outcomes) if return_outcomes else row


_WORKER_CONTEXT: dict = {}


def _init_eval_worker(payload) -> None:
    _WORKER_CONTEXT.update(payload)


def _eval_task(task):
    variant_value, index = task
    ctx = _WORKER_CONTEXT
    return evaluate_condition(
        VariantId(variant_value),
        index,
        ctx["conditions"][index],
        ctx["gt_points"][index],
        ctx["models"],
        ctx["schedule"],
        ctx["seed"],
        ctx["guidance"],
        ctx["mmd_config"],
    )


def run_variants(
    variants,
    eval_conditions,
    models: TrainedModels,
    schedule: diffusion.DiffusionSchedule,
    seed: int,
    guidance: diffusion.GuidanceConfig = diffusion.GuidanceConfig(),
    mmd_config: MmdConfig = MmdConfig(),
    threads: int = 1,
) -> tuple[EvalReport, dict[VariantId, list[ConditionOutcome]]]:
    """Run several variants against shared ground-truth clouds and paired seeds.

    Conditions are independent, so threads > 1 fans the per-condition work out
    to a process pool; results are reduced in condition order either way.
    """
    variants = list(variants)
    for variant in variants:
        for name in _required_models(variant):
            if getattr(models, name) is None:
                raise MissingModel(f"variant {variant.value} needs model {name!r}")
    gt_clouds = [
        ground_truth_cloud(c, i, seed, mmd_config) for i, c in enumerate(eval_conditions)
    ]
    n = len(eval_conditions)
    tasks = [(v.value, i) for v in variants for i in range(n)]
    if threads > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        payload = {
            "conditions": list(eval_conditions),
            "gt_points": [c.points for c in gt_clouds],
            "models": models,
            "schedule": schedule,
            "seed": seed,
            "guidance": guidance,
            "mmd_config": mmd_config,
        }
        chunksize = max(1, len(tasks) // (threads * 8))
        with ProcessPoolExecutor(
            max_workers=threads, initializer=_init_eval_worker, initargs=(payload,)
        ) as pool:
            flat = list(pool.map(_eval_task, tasks, chunksize=chunksize))
    else:
        _init_eval_worker(
            {
                "conditions": list(eval_conditions),
                "gt_points": [c.points for c in gt_clouds],
                "models": models,
                "schedule": schedule,
                "seed": seed,
                "guidance": guidance,
                "mmd_config": mmd_config,
            }
        )
        flat = [_eval_task(task) for task in tasks]
    rows = []
    outcome_map = {}
    for k, variant in enumerate(variants):
        outcomes = flat[k * n : (k + 1) * n]
        rows.append(summarize_outcomes(variant, outcomes))
        outcome_map[variant] = outcomes
    return EvalReport(tuple(rows)), outcome_map
