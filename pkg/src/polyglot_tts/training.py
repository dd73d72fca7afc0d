"""Seed training, per-speaker fine-tuning and extended training."""

from __future__ import annotations

import copy
import csv
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from scipy import stats

from .checkpoint import Checkpoint, save_checkpoint
from .corpus import Batch, Example, TrainingSubset, make_batches
from .model import AcousticModel, ModelVariantConfig, build_model, compute_losses
from .speakers import SpeakerGaussian, draw_training_embedding, inference_embedding

METRIC_FIELDS = ("step", "lr", "l1_decoder", "l2_postnet", "kld", "total")
STAGES = ("seed", "finetune", "extend")


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, step: int, last_good: Path | None):
        where = f"; last good checkpoint: {last_good}" if last_good else ""
        super().__init__(f"non-finite loss at step {step}{where}")
        self.step = step
        self.last_good = last_good


class SubsetMismatchError(TrainingError):
    pass


class UnknownSpeakerError(TrainingError):
    pass


class WrongVariantError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainingSchedule:
    peak_lr: float = 1e-3
    warmup_steps: int = 4000
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    seed_steps: int = 2_500_000
    finetune_steps: int = 500_000
    extended_steps: int = 4_500_000
    desk_divisor: int = 500
    grad_clip: float = 1.0
    kld_weight: float = 1.0
    kld_ramp_fraction: float = 0.05
    checkpoint_every: int = 500

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("kld_weight", "kld_ramp_fraction"):
                if getattr(self, f.name) < 0:
                    raise ValueError(f"{f.name} must be non-negative")
            elif getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.kld_ramp_fraction > 1.0:
            raise ValueError("kld_ramp_fraction must lie in [0, 1]")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.extended_steps <= self.seed_steps:
            raise ValueError("extended_steps is a total and must exceed seed_steps")
        if self.seed_budget < 1 or self.finetune_budget < 1:
            raise ValueError("desk_divisor leaves an empty step budget")

    @property
    def seed_budget(self) -> int:
        return self.seed_steps // self.desk_divisor

    @property
    def finetune_budget(self) -> int:
        return self.finetune_steps // self.desk_divisor

    @property
    def extended_budget(self) -> int:
        return self.extended_steps // self.desk_divisor

    def kld_beta(self, step: int) -> float:
        ramp = self.kld_ramp_fraction * self.seed_budget
        if ramp <= 0:
            return self.kld_weight
        return self.kld_weight * min(1.0, step / ramp)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainingSchedule":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown schedule keys: {sorted(unknown)}")
        return cls(**data)


def noam_lr(step: int, schedule: TrainingSchedule = TrainingSchedule()) -> float:
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    w = schedule.warmup_steps
    return schedule.peak_lr * min(step / w, math.sqrt(w / step))


@dataclass
class TrainingData:
    """Featurized examples plus everything needed to condition on speaker and locale."""

    examples: Sequence[Example]
    subset: TrainingSubset
    vocab: Sequence[str]
    locales: Sequence[str]
    speakers: Mapping[str, SpeakerGaussian] = field(default_factory=dict)

    def restricted_to(self, utt_ids) -> "TrainingData":
        keep = set(utt_ids)
        return TrainingData([e for e in self.examples if e.utt_id in keep], self.subset,
                            self.vocab, self.locales, self.speakers)


# -- seeding -----------------------------------------------------------------


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0] >> 1)


# -- batches to tensors ------------------------------------------------------


def batch_tensors(batch: Batch, locales: Sequence[str], model: AcousticModel,
                  speakers: Mapping[str, SpeakerGaussian],
                  rng: np.random.Generator | None) -> dict:
    """Model inputs for one batch. ``rng=None`` uses each speaker's mean embedding."""
    index = {loc: i for i, loc in enumerate(locales)}
    out = {
        "phone_ids": torch.from_numpy(batch.phone_ids),
        "phone_lengths": torch.from_numpy(batch.phone_lengths),
        "frames": torch.from_numpy(batch.frames),
        "frame_mask": torch.from_numpy(batch.frame_mask),
        "locale_ids": torch.tensor([index[loc] for loc in batch.locales]),
    }
    if model.config.use_se_le:
        missing = sorted(set(batch.speakers) - set(speakers))
        if missing:
            raise UnknownSpeakerError(f"no speaker Gaussian for {missing}")
        rows = [draw_training_embedding(speakers[s], rng) if rng is not None
                else inference_embedding(speakers[s]) for s in batch.speakers]
        out["speaker_embedding"] = torch.from_numpy(np.stack(rows)).float()
    return out


def _everywhere(inputs: dict) -> torch.Tensor:
    return torch.ones_like(inputs["frame_mask"])


# -- the loop ----------------------------------------------------------------


def _make_optimizer(model: AcousticModel, schedule: TrainingSchedule) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=schedule.peak_lr,
                            betas=(schedule.beta1, schedule.beta2))


def _restore_optimizer(opt: torch.optim.Adam, state: dict) -> None:
    # load_state_dict aliases same-device tensors; copy so the checkpoint is not mutated
    groups = [dict(g, betas=tuple(g["betas"])) for g in state["param_groups"]]
    opt.load_state_dict({"state": copy.deepcopy(state["state"]), "param_groups": groups})


def model_from_checkpoint(ckpt: Checkpoint) -> AcousticModel:
    model = build_model(ckpt.config, len(ckpt.vocab), len(ckpt.locales), rng_seed=0)
    model.load_state_dict(ckpt.parameters)
    return model


def _snapshot(model, optimizer, schedule, step, stage, data, rng_seed, metadata) -> Checkpoint:
    return Checkpoint(
        config=model.config,
        schedule=schedule.to_dict(),
        step=step,
        stage=stage,
        parameters={k: v.detach().clone() for k, v in model.state_dict().items()},
        vocab=list(data.vocab),
        locales=list(data.locales),
        speakers=dict(data.speakers),
        optimizer=copy.deepcopy(optimizer.state_dict()),
        subset=data.subset,
        rng={"seed": int(rng_seed)},
        metadata=dict(metadata),
    )


def _run(
    model: AcousticModel,
    optimizer: torch.optim.Adam,
    data: TrainingData,
    schedule: TrainingSchedule,
    rng_seed: int,
    stage: str,
    start_step: int,
    end_step: int,
    *,
    checkpoint_dir: str | Path | None = None,
    metrics_path: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
    metadata: Mapping | None = None,
) -> Checkpoint:
    if not data.examples:
        raise TrainingError("no training examples")
    stage_code = STAGES.index(stage)
    metadata = dict(metadata or {})
    n_batches = math.ceil(len(data.examples) / schedule.batch_size)
    params = [p for p in model.parameters() if p.requires_grad]
    last_good = None
    ckpt_path = Path(checkpoint_dir) / "last.ckpt" if checkpoint_dir else None
    if ckpt_path is not None and ckpt_path.exists():
        ckpt_path.unlink()

    log_fh = open(metrics_path, "w", newline="", encoding="utf-8") if metrics_path else None
    writer = csv.writer(log_fh) if log_fh else None
    if writer:
        writer.writerow(METRIC_FIELDS)
    epoch_batches: list[Batch] = []
    epoch = -1
    model.train()
    try:
        # each step reseeds from (seed, stage, step): runs and resumptions are reproducible
        # without touching the caller's global generators
        with torch.random.fork_rng():
            for step in range(start_step + 1, end_step + 1):
                k = step - start_step - 1
                if k // n_batches != epoch:
                    epoch = k // n_batches
                    epoch_batches = list(make_batches(
                        data.examples, schedule.batch_size,
                        seed=derive_seed(rng_seed, stage_code, epoch) % 2**32,
                        reduction=model.config.reduction_factor,
                    ))
                batch = epoch_batches[k % n_batches]
                torch.manual_seed(derive_seed(rng_seed, stage_code, step, 1))
                rng = np.random.default_rng([rng_seed, stage_code, step, 2])

                lr = noam_lr(step, schedule)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                inputs = batch_tensors(batch, data.locales, model, data.speakers, rng)
                out = model(**inputs)
                beta = schedule.kld_beta(step)
                losses = compute_losses(out, inputs["frames"], inputs["frame_mask"],
                                        out.posterior, beta, endpoint_mask=_everywhere(inputs))
                if not torch.isfinite(losses.total):
                    raise DivergenceError(step, last_good)
                optimizer.zero_grad(set_to_none=True)
                losses.total.backward()
                norm = torch.nn.utils.clip_grad_norm_(params, schedule.grad_clip)
                if not torch.isfinite(norm):
                    raise DivergenceError(step, last_good)
                optimizer.step()

                row = {"step": step, "lr": lr, **losses.as_floats()}
                row.pop("beta", None)
                if writer:
                    writer.writerow([row[f] if f == "step" else repr(float(row[f]))
                                     for f in METRIC_FIELDS])
                if on_step:
                    on_step(row)
                if ckpt_path is not None and (step % schedule.checkpoint_every == 0
                                              or step == end_step):
                    save_checkpoint(_snapshot(model, optimizer, schedule, step, stage, data,
                                              rng_seed, metadata), ckpt_path)
                    last_good = ckpt_path
    finally:
        if log_fh:
            log_fh.close()
    return _snapshot(model, optimizer, schedule, end_step, stage, data, rng_seed, metadata)


def train_seed(
    model: AcousticModel,
    data: TrainingData,
    schedule: TrainingSchedule,
    rng_seed: int,
    **kwargs,
) -> Checkpoint:
    """Train from scratch on the multi-speaker pool for the seed budget."""
    speakers = {e.speaker for e in data.examples}
    missing = speakers - set(data.subset.ids_by_speaker)
    if missing:
        raise SubsetMismatchError(f"examples from speakers outside the subset: {sorted(missing)}")
    if set(e.utt_id for e in data.examples) != set(data.subset.all_ids):
        raise SubsetMismatchError("examples do not match the training subset")
    optimizer = _make_optimizer(model, schedule)
    return _run(model, optimizer, data, schedule, rng_seed, "seed", 0, schedule.seed_budget,
                **kwargs)


def _check_vocab(seed_ckpt: Checkpoint, data: TrainingData) -> None:
    if list(data.vocab) != list(seed_ckpt.vocab):
        raise TrainingError("phone vocabulary differs from the one the checkpoint was trained with")


def check_finetune_subset(seed_ckpt: Checkpoint, speaker: str,
                          persisted: TrainingSubset | None) -> tuple[str, ...]:
    """The speaker's seed-training ids, after checking them against the persisted subset."""
    if seed_ckpt.subset is None:
        raise SubsetMismatchError("checkpoint carries no training subset")
    if speaker not in seed_ckpt.subset.ids_by_speaker:
        raise UnknownSpeakerError(f"speaker {speaker!r} not in the seed subset")
    ids = seed_ckpt.subset.ids_for(speaker)
    if persisted is not None:
        other = persisted.ids_by_speaker.get(speaker, ())
        if set(other) != set(ids):
            raise SubsetMismatchError(
                f"subset file disagrees with the seed checkpoint for {speaker!r}: "
                f"{len(set(ids) - set(other))} missing, {len(set(other) - set(ids))} extra"
            )
    return ids


def finetune(
    seed_ckpt: Checkpoint,
    speaker: str,
    data: TrainingData,
    schedule: TrainingSchedule,
    rng_seed: int,
    persisted_subset: TrainingSubset | None = None,
    **kwargs,
) -> Checkpoint:
    """Update every parameter on exactly the speaker's seed-training utterances.

    The optimizer starts fresh; the step counter and learning-rate schedule
    continue from the seed checkpoint.
    """
    if seed_ckpt.stage != "seed":
        raise TrainingError(f"fine-tuning starts from a seed checkpoint, got {seed_ckpt.stage!r}")
    ids = check_finetune_subset(seed_ckpt, speaker, persisted_subset)
    _check_vocab(seed_ckpt, data)
    local = data.restricted_to(ids)
    have = {e.utt_id for e in local.examples}
    if have != set(ids):
        raise SubsetMismatchError(f"missing features for {sorted(set(ids) - have)[:5]}")
    local = TrainingData(local.examples, seed_ckpt.subset, seed_ckpt.vocab, seed_ckpt.locales,
                         seed_ckpt.speakers)
    model = model_from_checkpoint(seed_ckpt)
    optimizer = _make_optimizer(model, schedule)
    start = seed_ckpt.step
    return _run(model, optimizer, local, schedule, rng_seed, "finetune", start,
                start + schedule.finetune_budget,
                metadata={**seed_ckpt.metadata, "speaker": speaker, "seed_step": start}, **kwargs)


def extend_training(
    seed_ckpt: Checkpoint,
    data: TrainingData,
    schedule: TrainingSchedule,
    rng_seed: int,
    **kwargs,
) -> Checkpoint:
    """Continue seed training of a resVAE+SE+LE model up to the extended budget."""
    if seed_ckpt.variant != "resvae_se_le":
        raise WrongVariantError(
            f"extended training applies to the resvae_se_le variant, not {seed_ckpt.variant!r}"
        )
    if seed_ckpt.stage == "finetune":
        raise TrainingError("extended training continues a seed checkpoint, not a fine-tuned one")
    _check_vocab(seed_ckpt, data)
    end = schedule.extended_budget
    if seed_ckpt.step >= end:
        raise TrainingError(f"checkpoint step {seed_ckpt.step} already at or past {end}")
    pool = data.restricted_to(seed_ckpt.subset.all_ids if seed_ckpt.subset else
                              [e.utt_id for e in data.examples])
    pool = TrainingData(pool.examples, seed_ckpt.subset, seed_ckpt.vocab, seed_ckpt.locales,
                        seed_ckpt.speakers)
    model = model_from_checkpoint(seed_ckpt)
    optimizer = _make_optimizer(model, schedule)
    if seed_ckpt.optimizer is not None:
        _restore_optimizer(optimizer, seed_ckpt.optimizer)
    return _run(model, optimizer, pool, schedule, rng_seed, "extend", seed_ckpt.step, end,
                metadata=seed_ckpt.metadata, **kwargs)


# -- evaluation --------------------------------------------------------------


@torch.no_grad()
def evaluate_loss(model: AcousticModel, examples: Sequence[Example], locales: Sequence[str],
                  speakers: Mapping[str, SpeakerGaussian], batch_size: int = 16,
                  seed: int = 0) -> dict[str, float]:
    """Teacher-forced losses in eval mode, averaged over utterances.

    Conditioning is deterministic: SE is the speaker mean, the residual
    latent is its posterior mean and attention noise is off.
    """
    was_training = model.training
    model.eval()
    totals = dict.fromkeys(("l1_decoder", "l2_postnet", "kld", "total"), 0.0)
    n = 0
    try:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            for batch in make_batches(examples, batch_size, seed,
                                      reduction=model.config.reduction_factor):
                inputs = batch_tensors(batch, locales, model, speakers, rng=None)
                eps = None
                if model.config.use_resvae:
                    eps = torch.zeros(len(batch), model.config.resvae_latent_dim)
                out = model(**inputs, eps=eps, attention_noise=0.0)
                losses = compute_losses(out, inputs["frames"], inputs["frame_mask"],
                                        out.posterior, 1.0,
                                        endpoint_mask=_everywhere(inputs)).as_floats()
                for k in totals:
                    totals[k] += losses[k] * len(batch)
                n += len(batch)
    finally:
        model.train(was_training)
    return {k: v / n for k, v in totals.items()}


@torch.no_grad()
def teacher_forced_alignment(model: AcousticModel, example: Example, locales: Sequence[str],
                             speakers: Mapping[str, SpeakerGaussian], seed: int = 0) -> np.ndarray:
    """Attention weights (steps, tokens) of a deterministic teacher-forced pass."""
    was_training = model.training
    model.eval()
    try:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            batch = next(make_batches([example], 1, seed, model.config.reduction_factor))
            inputs = batch_tensors(batch, locales, model, speakers, rng=None)
            eps = torch.zeros(1, model.config.resvae_latent_dim) if model.config.use_resvae else None
            out = model(**inputs, eps=eps, attention_noise=0.0)
    finally:
        model.train(was_training)
    steps = int(batch.step_lengths[0])
    return out.alignments[0, :steps].numpy()


def alignment_spearman(alignment: np.ndarray) -> float:
    """Rank correlation between decoder step and expected encoder position."""
    position = alignment @ np.arange(alignment.shape[1])
    if np.ptp(position) == 0:
        return 0.0
    return float(stats.spearmanr(np.arange(len(position)), position).statistic)


def read_metrics(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]
