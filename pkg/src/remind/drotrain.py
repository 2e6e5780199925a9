"""Group-DRO training with exponentiated group weights and a staged schedule.

Stage 0 (warmup) trains encoders jointly with the fusion block under frozen
uniform group weights; encoders are then frozen. Stage 1 trains the shared
routing path with the exponentiated-weights robust objective. Stage 2 turns
on uncertainty gating and makes the per-group residual routing matrices
trainable. Ablation modes switch the robust weighting and/or the residual
stage off.
"""

from __future__ import annotations

import csv
import math
import warnings as _warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import AdamW, GradientDescent, Node, Parameter, Tape
from .moefusion import PHASE_GATED, PHASE_SHARED, FusionOutput, RemindModel
from .synthdata import Sample, SyntheticDataset

MODES = (
    "remind",                  # DRO + gated residual routing
    "shared-moe-ablation",     # plain ERM on the shared soft-MoE (no DRO, no residuals)
    "dro-only-ablation",       # DRO, shared routing only
    "residual-only-ablation",  # ERM with gated residual routing
)

HISTORY_COLUMNS = ("step", "group_id", "loss", "lambda", "stage", "gate_rate")


def mode_uses_dro(mode: str) -> bool:
    return mode in ("remind", "dro-only-ablation")


def mode_uses_residual(mode: str) -> bool:
    return mode in ("remind", "residual-only-ablation")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "remind"
    gamma: float = 0.02            # DRO sharpness
    lr: float = 0.05               # eta
    optimizer: str = "sgd"         # sgd | adamw
    weight_decay: float = 0.0
    refresh_period: int = 1        # steps between lambda updates
    warmup_steps: int = 0
    stage2_start: int = 0
    batch_size: int = 32
    max_steps: int = 100
    loss: str = "focal"            # cross-entropy | focal
    focal_gamma: float = 2.0
    sampler: str = "balanced"      # balanced | empirical
    lr_decay_every: int = 0        # 0 disables step decay
    lr_decay_factor: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.gamma <= 0.0:
            raise ValueError("gamma must be positive")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be >= 0")
        if self.refresh_period < 1:
            raise ValueError("refresh_period must be >= 1")
        if self.warmup_steps < 0 or self.max_steps < 0:
            raise ValueError("step counts must be >= 0")
        if self.stage2_start < self.warmup_steps:
            raise ValueError("stage2_start must be >= warmup_steps")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in ("cross-entropy", "focal"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.focal_gamma < 0.0:
            raise ValueError("focal_gamma must be >= 0")
        if self.sampler not in ("balanced", "empirical"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.lr_decay_every < 0:
            raise ValueError("lr_decay_every must be >= 0")
        if not (0.0 < self.lr_decay_factor <= 1.0):
            raise ValueError("lr_decay_factor must be in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "gamma": self.gamma, "lr": self.lr,
            "optimizer": self.optimizer, "weight_decay": self.weight_decay,
            "refresh_period": self.refresh_period,
            "warmup_steps": self.warmup_steps, "stage2_start": self.stage2_start,
            "batch_size": self.batch_size, "max_steps": self.max_steps,
            "loss": self.loss, "focal_gamma": self.focal_gamma,
            "sampler": self.sampler, "lr_decay_every": self.lr_decay_every,
            "lr_decay_factor": self.lr_decay_factor, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# losses


def focal_loss(tape: Tape, probs: Node, label: int, focal_gamma: float) -> Node:
    """-(1 - p_label)^gamma * ln(p_label), epsilon-guarded so the loss is >= 0.

    focal_gamma = 0 reduces exactly to cross-entropy.
    """
    classes = probs.value.shape[1]
    if not (0 <= label < classes):
        raise ValueError(f"label {label} out of range for {classes} classes")
    if focal_gamma < 0.0:
        raise ValueError("focal_gamma must be >= 0")
    onehot = np.zeros((classes, 1))
    onehot[label, 0] = 1.0
    p = tape.matmul(probs, tape.constant(onehot))          # 1x1
    eps = 1e-8
    # p*(1-eps) + eps keeps the argument in (0, 1]; loss is exactly 0 at p=1
    inner = tape.add(tape.scalar_mul(p, 1.0 - eps), tape.constant([[eps]]))
    logp = tape.log(inner)
    if focal_gamma == 0.0:
        return tape.scalar_mul(logp, -1.0)
    one_minus = tape.add(tape.scalar_mul(p, -1.0), tape.constant([[1.0]]))
    factor = tape.pow_const(one_minus, focal_gamma)
    return tape.scalar_mul(tape.mul(factor, logp), -1.0)


def sample_loss(tape: Tape, probs: Node, label: int, config: TrainConfig) -> Node:
    if config.loss == "cross-entropy":
        return focal_loss(tape, probs, label, 0.0)
    return focal_loss(tape, probs, label, config.focal_gamma)


def _mean_node(tape: Tape, nodes: Sequence[Node]) -> Node:
    total = nodes[0]
    for nd in nodes[1:]:
        total = tape.add(total, nd)
    return tape.scalar_mul(total, 1.0 / len(nodes)) if len(nodes) > 1 else total


def group_losses(tape: Tape, model: RemindModel, batch: Sequence[Sample],
                 config: TrainConfig, phase: str,
                 ) -> tuple[dict[int, Node], dict[int, list[FusionOutput]]]:
    """Per-group mean loss nodes for the groups present in the batch."""
    if not batch:
        raise ValueError("batch must be non-empty")
    per_group: dict[int, list[Node]] = {}
    outputs: dict[int, list[FusionOutput]] = {}
    for s in batch:
        probs, out = model.forward(tape, s, phase)
        per_group.setdefault(s.group_id, []).append(
            sample_loss(tape, probs, s.label, config)
        )
        outputs.setdefault(s.group_id, []).append(out)
    means = {gid: _mean_node(tape, nodes) for gid, nodes in per_group.items()}
    return means, outputs


# ---------------------------------------------------------------------------
# group weights


class GroupWeights:
    """Simplex weights over modality-combination groups."""

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=np.float64)
        self.check()

    @classmethod
    def uniform(cls, n_groups: int) -> "GroupWeights":
        return cls(np.full(n_groups, 1.0 / n_groups))

    def check(self) -> None:
        if (self.values < 0.0).any():
            raise ValueError("group weights must be non-negative")
        if abs(self.values.sum() - 1.0) > 1e-12:
            raise ValueError(f"group weights sum to {self.values.sum()!r}, not 1")

    def renormalized_over(self, present: Sequence[int]) -> dict[int, float]:
        total = sum(self.values[g] for g in present)
        if total <= 0.0:
            return {g: 1.0 / len(present) for g in present}
        return {g: float(self.values[g] / total) for g in present}


def update_lambda(lam: np.ndarray, losses: dict[int, float] | np.ndarray,
                  gamma: float) -> np.ndarray:
    """Exponentiated update: lam_k * exp(gamma * R_k), renormalized.

    Groups without a loss estimate keep factor exp(0), i.e. no update.
    """
    if gamma <= 0.0:
        raise ValueError("gamma must be positive")
    lam = np.asarray(lam, dtype=np.float64)
    if isinstance(losses, dict):
        r = np.zeros_like(lam)
        for gid, val in losses.items():
            r[gid] = val
    else:
        r = np.asarray(losses, dtype=np.float64)
        if r.shape != lam.shape:
            raise ValueError("losses must align with lambda")
    if not np.isfinite(r).all():
        raise ValueError("losses must be finite")
    z = gamma * r
    z -= z.max()  # common shift cancels in the normalization; guards overflow
    new = lam * np.exp(z)
    return new / new.sum()


def dro_step(model: RemindModel, lam: GroupWeights, batch: Sequence[Sample],
             config: TrainConfig, optimizer=None, phase: str = PHASE_SHARED,
             trainable: Sequence[Parameter] | None = None,
             ) -> tuple[dict[int, float], dict[int, list[FusionOutput]], bool]:
    """One robust parameter update: theta <- theta - eta * sum_k lam_k grad R_k.

    Lambda is renormalized over the groups present in the batch. Returns the
    measured per-group losses, the fusion outputs, and whether the step was
    applied (a non-finite gradient aborts the update).
    """
    if optimizer is None:
        optimizer = GradientDescent(config.lr)
    tape = Tape()
    means, outputs = group_losses(tape, model, batch, config, phase)
    weights = lam.renormalized_over(sorted(means))
    total = None
    for gid in sorted(means):
        term = tape.scalar_mul(means[gid], weights[gid])
        total = term if total is None else tape.add(total, term)
    params = list(trainable) if trainable is not None else model.parameters()
    for p in params:
        p.zero_grad()
    tape.backward(total)
    measured = {gid: float(means[gid].value[0, 0]) for gid in means}
    if not all(np.isfinite(p.grad).all() for p in params):
        _warnings.warn("non-finite gradient; step aborted", RuntimeWarning)
        return measured, outputs, False
    optimizer.step(params)
    return measured, outputs, True


# ---------------------------------------------------------------------------
# history


class TrainHistory:
    """Per-step, per-group training records with a CSV round trip.

    Rows are kept as already-formatted strings so that a resumed run emits
    byte-identical output.
    """

    def __init__(self, rows: list[list[str]] | None = None):
        self.rows: list[list[str]] = rows or []

    def record(self, step: int, group_id: int, loss: float | None,
               lam: float, stage: int, gate_rate: float | None) -> None:
        self.rows.append([
            str(step), str(group_id),
            "" if loss is None else repr(float(loss)),
            repr(float(lam)), str(stage),
            "" if gate_rate is None else repr(float(gate_rate)),
        ])

    def truncate_after(self, step: int) -> None:
        self.rows = [r for r in self.rows if int(r[0]) <= step]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(HISTORY_COLUMNS)
            w.writerows(self.rows)

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if tuple(header) != HISTORY_COLUMNS:
                raise ValueError(f"unexpected history header {header}")
            return cls([row for row in reader])

    def lambda_snapshots(self) -> dict[int, dict[int, float]]:
        out: dict[int, dict[int, float]] = {}
        for r in self.rows:
            out.setdefault(int(r[0]), {})[int(r[1])] = float(r[3])
        return out

    def losses(self) -> dict[int, dict[int, float]]:
        out: dict[int, dict[int, float]] = {}
        for r in self.rows:
            if r[2]:
                out.setdefault(int(r[0]), {})[int(r[1])] = float(r[2])
        return out


# ---------------------------------------------------------------------------
# samplers


class _BalancedSampler:
    """Round-robin over groups with support; uniform within a group."""

    def __init__(self, dataset: SyntheticDataset):
        self.group_indices = {g: np.array(ix) for g, ix in dataset.group_indices().items()}
        self.groups = sorted(self.group_indices)

    def draw(self, rng: np.random.Generator, batch_size: int, step: int) -> list[int]:
        start = step % len(self.groups)
        picks = []
        for i in range(batch_size):
            g = self.groups[(start + i) % len(self.groups)]
            ix = self.group_indices[g]
            picks.append(int(ix[rng.integers(0, len(ix))]))
        return picks


class _EmpiricalSampler:
    def __init__(self, dataset: SyntheticDataset):
        self.n = len(dataset.samples)

    def draw(self, rng: np.random.Generator, batch_size: int, step: int) -> list[int]:
        return [int(i) for i in rng.integers(0, self.n, size=batch_size)]


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainResult:
    model: RemindModel
    history: TrainHistory
    lam: GroupWeights
    final_step: int
    stage: int
    diagnostics: list[str] = field(default_factory=list)


def _stage_of(step: int, config: TrainConfig) -> int:
    if step < config.warmup_steps:
        return 0
    if mode_uses_residual(config.mode) and step >= config.stage2_start:
        return 2
    return 1


def _trainable(model: RemindModel, stage: int) -> list[Parameter]:
    named = model.named_parameters()
    chosen = []
    for name, p in named.items():
        if name.startswith("router/res/"):
            if stage == 2:
                chosen.append(p)
        elif name.startswith("enc/"):
            if stage == 0:
                chosen.append(p)
        else:
            chosen.append(p)
    return chosen


def _make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return GradientDescent(config.lr)
    return AdamW(config.lr, weight_decay=config.weight_decay)


def _lr_at(step: int, config: TrainConfig) -> float:
    if config.lr_decay_every <= 0:
        return config.lr
    return config.lr * config.lr_decay_factor ** (step // config.lr_decay_every)


def train(dataset: SyntheticDataset, model: RemindModel, config: TrainConfig,
          on_checkpoint: Callable[[int, int, dict], None] | None = None,
          checkpoint_every: int | None = None,
          stop_after_step: int | None = None,
          resume_state: dict | None = None) -> TrainResult:
    """Run the staged training loop; deterministic under config.seed.

    ``on_checkpoint(completed_steps, stage, train_state)`` fires after step 0
    (initial state), every ``checkpoint_every`` completed steps, and at the
    end. ``resume_state`` restores a run from a checkpoint's train state and
    continues to an identical final state.
    """
    config.validate()
    if dataset.spec.embed_dim != model.config.embed_dim:
        raise ValueError("dataset and model embed dims differ")
    n_groups = dataset.spec.n_groups
    sampler = (_BalancedSampler(dataset) if config.sampler == "balanced"
               else _EmpiricalSampler(dataset))
    rng = np.random.default_rng(config.seed)
    optimizer = _make_optimizer(config)
    lam = GroupWeights.uniform(n_groups)
    history = TrainHistory()
    diagnostics: list[str] = []
    start_step = 0

    if resume_state is not None:
        start_step = int(resume_state["step"])
        lam = GroupWeights(np.array(resume_state["lambda"]))
        optimizer.load_state_dict(resume_state["optimizer"])
        rng.bit_generator.state = resume_state["rng"]
        history = TrainHistory([list(r) for r in resume_state["history"]])
        history.truncate_after(start_step)

    def state_dict(step: int) -> dict:
        return {
            "step": step,
            "stage": _stage_of(step, config),
            "mode": config.mode,
            "lambda": [float(v) for v in lam.values],
            "optimizer": optimizer.state_dict(),
            "rng": rng.bit_generator.state,
            "history": [list(r) for r in history.rows],
            "train_config": config.to_dict(),
        }

    def checkpoint(step: int) -> None:
        if on_checkpoint is not None:
            on_checkpoint(step, _stage_of(step, config), state_dict(step))

    every = checkpoint_every if checkpoint_every else max(1, config.max_steps // 10)
    if start_step == 0:
        checkpoint(0)

    uses_dro = mode_uses_dro(config.mode)
    for step in range(start_step, config.max_steps):
        stage = _stage_of(step, config)
        phase = PHASE_GATED if stage == 2 else PHASE_SHARED
        optimizer.lr = _lr_at(step, config)

        batch = [dataset.samples[i]
                 for i in sampler.draw(rng, config.batch_size, step)]
        tape = Tape()
        means, outputs = group_losses(tape, model, batch, config, phase)
        present = sorted(means)

        if uses_dro:
            weights = lam.renormalized_over(present)
            total = None
            for gid in present:
                term = tape.scalar_mul(means[gid], weights[gid])
                total = term if total is None else tape.add(total, term)
        else:  # plain ERM: batch-mean loss, every sample weighted equally
            counts = {gid: len(outs) for gid, outs in outputs.items()}
            n = sum(counts.values())
            total = None
            for gid in present:
                term = tape.scalar_mul(means[gid], counts[gid] / n)
                total = term if total is None else tape.add(total, term)

        trainable = _trainable(model, stage)
        for p in trainable:
            p.zero_grad()
        tape.backward(total)

        measured = {gid: float(means[gid].value[0, 0]) for gid in present}
        finite = (all(np.isfinite(v) for v in measured.values())
                  and all(np.isfinite(p.grad).all() for p in trainable))
        if finite:
            optimizer.step(trainable)
        else:
            diagnostics.append(f"step {step}: non-finite loss/gradient, step aborted")

        # history uses the lambda that weighted this step
        for gid in range(n_groups):
            if gid in present:
                fired = [o.gate_fired for o in outputs[gid]]
                rate = sum(fired) / len(fired)
                history.record(step, gid, measured[gid], lam.values[gid], stage, rate)
            else:
                history.record(step, gid, None, lam.values[gid], stage, None)

        if uses_dro and finite and stage >= 1:
            if (step - config.warmup_steps) % config.refresh_period == 0:
                lam = GroupWeights(update_lambda(lam.values, measured, config.gamma))

        done = step + 1
        if done % every == 0 or done == config.max_steps:
            checkpoint(done)
        if stop_after_step is not None and done >= stop_after_step:
            return TrainResult(model, history, lam, done, stage, diagnostics)

    return TrainResult(model, history, lam, config.max_steps,
                       _stage_of(config.max_steps, config), diagnostics)
