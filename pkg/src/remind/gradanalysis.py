"""Gradient-consistency analysis via the empirical neural tangent kernel.

Per-example loss gradients over the fusion-block parameters form a Jacobian
J; the kernel J J^T's top eigenvector defines the dominant gradient
direction, and a group's consistency score is the cosine between its
dominant direction and the whole dataset's.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tape
from .drotrain import TrainConfig, sample_loss
from .moefusion import FUSION_PREFIXES, PHASE_SHARED, RemindModel
from .synthdata import Sample, SyntheticDataset

CONSISTENCY_COLUMNS = ("step", "group_bitmask", "gc", "n_used", "flags")


@dataclass
class JacobianBlock:
    matrix: np.ndarray              # n_samples x p
    param_names: tuple[str, ...]    # the flattened parameter subset, in order

    @property
    def n_samples(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_params(self) -> int:
        return self.matrix.shape[1]


@dataclass
class ConsistencyRecord:
    step: int
    group_id: int | None            # None = the whole dataset ("ALL")
    gc: float
    n_used: int
    flags: list[str] = field(default_factory=list)


def per_example_grads(model: RemindModel, samples: Sequence[Sample],
                      param_subset: Sequence[str] = FUSION_PREFIXES,
                      phase: str = PHASE_SHARED,
                      loss: str = "focal", focal_gamma: float = 2.0) -> JacobianBlock:
    """One loss backward pass per sample; row order matches sample order."""
    if not list(param_subset):
        raise ValueError("param_subset must name at least one parameter group")
    if not samples:
        raise ValueError("samples must be non-empty")
    params = model.parameter_subset(param_subset)
    cfg = TrainConfig(loss=loss, focal_gamma=focal_gamma)
    rows = []
    for s in samples:
        for p in params:
            p.zero_grad()
        tape = Tape()
        probs, _ = model.forward(tape, s, phase)
        tape.backward(sample_loss(tape, probs, s.label, cfg))
        rows.append(np.concatenate([p.grad.ravel() for p in params]))
    matrix = np.stack(rows)
    if not np.isfinite(matrix).all():
        raise ValueError("non-finite entries in per-example gradients")
    return JacobianBlock(matrix, tuple(p.name for p in params))


def ntk(j: np.ndarray | JacobianBlock) -> np.ndarray:
    """The kernel J J^T: symmetric positive semi-definite Gram matrix."""
    m = j.matrix if isinstance(j, JacobianBlock) else np.asarray(j, dtype=np.float64)
    if not np.isfinite(m).all():
        raise ValueError("Jacobian has non-finite entries")
    return m @ m.T


def _canonical_sign(u: np.ndarray) -> np.ndarray:
    """Fix the eigenvector sign: sum of entries >= 0, tie-broken by the
    first nonzero entry being positive."""
    s = u.sum()
    if s < 0.0:
        return -u
    if s == 0.0:
        nz = np.nonzero(u)[0]
        if len(nz) and u[nz[0]] < 0.0:
            return -u
    return u


@dataclass
class EigResult:
    value: float
    vector: np.ndarray
    flags: list[str] = field(default_factory=list)


def _power_iterate(theta: np.ndarray, x: np.ndarray, tol: float,
                   max_iter: int) -> tuple[float, np.ndarray]:
    for _ in range(max_iter):
        y = theta @ x
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0, x
        x_new = y / norm
        if np.linalg.norm(x_new - x) < tol:
            x = x_new
            break
        x = x_new
    return float(x @ theta @ x), x


def top_eigvec(theta: np.ndarray, tol: float = 1e-10, max_iter: int = 10000,
               seed: int = 0) -> EigResult:
    """Dominant eigenpair by power iteration from a fixed seeded start.

    The eigenvector sign is canonicalized; a near-degenerate top eigenvalue
    (relative gap to the deflated second eigenvalue below 1e-6) is flagged.
    """
    theta = np.asarray(theta, dtype=np.float64)
    n = theta.shape[0]
    if theta.shape != (n, n):
        raise ValueError(f"theta must be square, got {theta.shape}")
    if not theta.any():
        e1 = np.zeros(n)
        if n:
            e1[0] = 1.0
        return EigResult(0.0, e1, ["undefined-direction"])
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    x /= np.linalg.norm(x)
    value, vector = _power_iterate(theta, x, tol, max_iter)
    vector = _canonical_sign(vector)
    flags = []
    deflated = theta - value * np.outer(vector, vector)
    second, _ = _power_iterate(deflated, x, tol, max_iter)
    if abs(value - second) < 1e-6 * max(abs(value), 1e-300):
        flags.append("non-unique-direction")
    return EigResult(value, vector, flags)


def dominant_direction(j: np.ndarray | JacobianBlock, u_max: np.ndarray) -> np.ndarray:
    """Aggregate parameter gradient: the Jacobian projected onto u_max."""
    m = j.matrix if isinstance(j, JacobianBlock) else np.asarray(j, dtype=np.float64)
    return u_max @ m


def consistency(g_all: np.ndarray, g_group: np.ndarray) -> float:
    """Cosine similarity of two dominant directions; NaN when undefined.

    Identical vectors short-circuit to exactly 1.0, so GC(X, X) == 1 holds
    without floating-point slop.
    """
    g_all = np.asarray(g_all, dtype=np.float64)
    g_group = np.asarray(g_group, dtype=np.float64)
    na, ng = np.linalg.norm(g_all), np.linalg.norm(g_group)
    if na == 0.0 or ng == 0.0:
        return float("nan")
    if g_all.shape == g_group.shape and np.array_equal(g_all, g_group):
        return 1.0
    return float(np.dot(g_all, g_group) / (na * ng))


def group_direction(j: np.ndarray | JacobianBlock, tol: float = 1e-10,
                    max_iter: int = 10000, seed: int = 0,
                    ) -> tuple[np.ndarray, list[str]]:
    """Dominant direction of one Jacobian block, with eigen-analysis flags."""
    theta = ntk(j)
    eig = top_eigvec(theta, tol=tol, max_iter=max_iter, seed=seed)
    return dominant_direction(j, eig.vector), list(eig.flags)


def track(checkpoints: Sequence[tuple[int, RemindModel, str]],
          dataset: SyntheticDataset, samples_per_group: int = 32, seed: int = 0,
          param_subset: Sequence[str] = FUSION_PREFIXES,
          whole_direction: str = "union",
          loss: str = "focal", focal_gamma: float = 2.0) -> list[ConsistencyRecord]:
    """Per-checkpoint, per-group gradient-consistency scores.

    Each checkpoint is a (step, model, phase) triple. Every group with
    support contributes an equal-size draw (with replacement, flagged, when
    the group is smaller than samples_per_group). The whole-dataset direction
    uses the union of those draws by default, or an equally sized empirical
    draw when ``whole_direction="empirical"``.
    """
    if whole_direction not in ("union", "empirical"):
        raise ValueError(f"unknown whole_direction {whole_direction!r}")
    group_indices = {g: np.array(ix) for g, ix in dataset.group_indices().items()}
    groups = sorted(group_indices)
    records: list[ConsistencyRecord] = []

    for step, model, phase in checkpoints:
        rng = np.random.default_rng([seed, step])
        draw_flags: dict[int, list[str]] = {}
        draws: dict[int, np.ndarray] = {}
        for g in groups:
            ix = group_indices[g]
            if len(ix) >= samples_per_group:
                draws[g] = rng.choice(ix, size=samples_per_group, replace=False)
                draw_flags[g] = []
            else:
                draws[g] = rng.choice(ix, size=samples_per_group, replace=True)
                draw_flags[g] = ["subsampled-with-replacement"]

        union = np.concatenate([draws[g] for g in groups])
        union_samples = [dataset.samples[i] for i in union]
        j_union = per_example_grads(model, union_samples, param_subset, phase,
                                    loss, focal_gamma)

        if whole_direction == "union":
            g_all, all_flags = group_direction(j_union, seed=seed)
        else:
            whole_ix = rng.integers(0, len(dataset.samples), size=len(union))
            j_whole = per_example_grads(
                model, [dataset.samples[i] for i in whole_ix],
                param_subset, phase, loss, focal_gamma)
            g_all, all_flags = group_direction(j_whole, seed=seed)

        records.append(ConsistencyRecord(step, None, consistency(g_all, g_all),
                                         len(union), all_flags))
        offset = 0
        for g in groups:
            block = j_union.matrix[offset:offset + samples_per_group]
            offset += samples_per_group
            g_dir, gflags = group_direction(block, seed=seed)
            gc = consistency(g_all, g_dir)
            flags = draw_flags[g] + gflags
            if np.isnan(gc):
                flags.append("undefined-direction")
            records.append(ConsistencyRecord(step, g, gc, samples_per_group, flags))
    return records


def write_consistency_csv(records: Sequence[ConsistencyRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CONSISTENCY_COLUMNS)
        for r in records:
            bitmask = "ALL" if r.group_id is None else str(r.group_id + 1)
            w.writerow([r.step, bitmask, repr(float(r.gc)), r.n_used,
                        ";".join(r.flags)])


def read_consistency_csv(path) -> list[ConsistencyRecord]:
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != CONSISTENCY_COLUMNS:
            raise ValueError(f"unexpected consistency header {header}")
        for row in reader:
            gid = None if row[1] == "ALL" else int(row[1]) - 1
            flags = row[4].split(";") if row[4] else []
            out.append(ConsistencyRecord(int(row[0]), gid, float(row[2]),
                                         int(row[3]), flags))
    return out
