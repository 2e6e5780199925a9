"""Per-group evaluation, expert-specialization statistics, and protocols.

The two protocols mirror the stress tests the fusion method is built for:
extreme single-modality missingness (retrain after removing one modality
from a fraction of samples) and adaptation to a modality combination held
out of training (nested fine-tuning scopes with strict freeze contracts).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import GradientDescent, Tape
from .drotrain import TrainConfig, _mean_node, sample_loss, train
from .moefusion import PHASE_GATED, PHASE_SHARED, RemindModel
from .synthdata import ModalityMask, Sample, SyntheticDataset

FINETUNE_SCOPES = ("nothing", "head", "head+router", "head+router+experts")


# ---------------------------------------------------------------------------
# metrics


@dataclass
class GroupStats:
    group_id: int
    accuracy: float
    macro_f1: float
    support: int
    tail: bool


@dataclass
class GroupMetrics:
    overall_accuracy: float
    overall_macro_f1: float
    total: int
    groups: dict[int, GroupStats]
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "overall": {
                "accuracy": self.overall_accuracy,
                "macro_f1": self.overall_macro_f1,
                "support": self.total,
            },
            "groups": [
                {
                    "group_id": g.group_id,
                    "bitmask": g.group_id + 1,
                    "accuracy": g.accuracy,
                    "macro_f1": g.macro_f1,
                    "support": g.support,
                    "tail": g.tail,
                }
                for g in self.groups.values()
            ],
            "flags": self.flags,
        }


def _macro_f1(preds: np.ndarray, labels: np.ndarray, classes: int,
              flags: list[str], where: str) -> float:
    f1s = []
    for c in range(classes):
        tp = int(((preds == c) & (labels == c)).sum())
        fp = int(((preds == c) & (labels != c)).sum())
        fn = int(((preds != c) & (labels == c)).sum())
        if 2 * tp + fp + fn == 0:
            flags.append(f"f1-undefined:class{c}:{where}")
            f1s.append(0.0)
        else:
            f1s.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(f1s))


def compute_metrics(preds: Sequence[int], labels: Sequence[int],
                    group_ids: Sequence[int], classes: int,
                    tail_threshold: float = 0.15) -> GroupMetrics:
    """Pure accuracy / macro-F1 per group and overall.

    Tail groups are those whose empirical frequency in the evaluated data is
    below the threshold. Groups with zero support are simply absent.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    group_ids = np.asarray(group_ids)
    n = len(preds)
    if n == 0:
        raise ValueError("nothing to evaluate")
    flags: list[str] = []
    overall_acc = float((preds == labels).mean())
    overall_f1 = _macro_f1(preds, labels, classes, flags, "overall")
    groups: dict[int, GroupStats] = {}
    for g in sorted(set(int(g) for g in group_ids)):
        sel = group_ids == g
        support = int(sel.sum())
        acc = float((preds[sel] == labels[sel]).mean())
        f1 = _macro_f1(preds[sel], labels[sel], classes, flags, f"group{g}")
        groups[g] = GroupStats(g, acc, f1, support, support / n < tail_threshold)
    return GroupMetrics(overall_acc, overall_f1, n, groups, flags)


def infer_phase(model: RemindModel) -> str:
    """Gated inference once any group residual exists, shared before that."""
    return PHASE_GATED if model.block.matrices.residuals else PHASE_SHARED


def evaluate(model: RemindModel, dataset: SyntheticDataset,
             phase: str | None = None) -> GroupMetrics:
    if phase is None:
        phase = infer_phase(model)
    preds, labels, gids = [], [], []
    for s in dataset.samples:
        pred, _, _ = model.predict(s, phase)
        preds.append(pred)
        labels.append(s.label)
        gids.append(s.group_id)
    return compute_metrics(preds, labels, gids, model.classes,
                           dataset.spec.tail_threshold)


# ---------------------------------------------------------------------------
# expert specialization


@dataclass
class SpecializationMatrix:
    matrix: np.ndarray            # groups x experts, top-k frequencies
    group_ids: list[int]
    k: int


def specialization(model: RemindModel, dataset: SyntheticDataset, k: int,
                   phase: str | None = None) -> SpecializationMatrix:
    """Frequency with which each expert ranks in a sample's top-k.

    Experts are ranked by mean combine weight over the sample's tokens and
    slots; ties break toward the lower expert index.
    """
    n, p = model.config.n_experts, model.config.slots_per_expert
    if not (1 <= k <= n):
        raise ValueError(f"k={k} outside [1, {n}]")
    if phase is None:
        phase = infer_phase(model)
    counts: dict[int, np.ndarray] = {}
    supports: dict[int, int] = {}
    for s in dataset.samples:
        _, _, out = model.predict(s, phase)
        per_expert = out.combine.reshape(-1, n, p).mean(axis=(0, 2))
        order = np.argsort(-per_expert, kind="stable")  # ties -> lower index
        top = order[:k]
        acc = counts.setdefault(s.group_id, np.zeros(n))
        acc[top] += 1.0
        supports[s.group_id] = supports.get(s.group_id, 0) + 1
    gids = sorted(counts)
    matrix = np.stack([counts[g] / supports[g] for g in gids])
    return SpecializationMatrix(matrix, gids, k)


def write_specialization_csv(spec_matrix: SpecializationMatrix, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        n = spec_matrix.matrix.shape[1]
        w.writerow(["group_id", "bitmask"] + [f"expert_{j}" for j in range(n)])
        for row, gid in enumerate(spec_matrix.group_ids):
            w.writerow([gid, gid + 1] +
                       [repr(float(v)) for v in spec_matrix.matrix[row]])


def write_specialization_grid(spec_matrix: SpecializationMatrix, path) -> None:
    """Plain-text grid, stable for diffing."""
    n = spec_matrix.matrix.shape[1]
    with open(path, "w") as f:
        f.write("group/expert " + " ".join(f"e{j:02d}" for j in range(n)) + "\n")
        for row, gid in enumerate(spec_matrix.group_ids):
            cells = " ".join(f"{v:.3f}" for v in spec_matrix.matrix[row])
            f.write(f"mc{gid + 1:<10d} {cells}\n")


# ---------------------------------------------------------------------------
# extreme-missingness protocol


def _drop_modality(sample: Sample, modality_index: int) -> Sample:
    bits = list(sample.mask.bits)
    bits[modality_index] = False
    mask = ModalityMask(tuple(bits))
    raw = {i: v for i, v in sample.raw.items() if i != modality_index}
    return Sample(raw=raw, mask=mask, label=sample.label,
                  group_id=mask.bitmask - 1)


def _with_removal(dataset: SyntheticDataset, modality_index: int,
                  removed_rows: np.ndarray) -> SyntheticDataset:
    removed = set(int(i) for i in removed_rows)
    samples = [
        _drop_modality(s, modality_index) if i in removed else s
        for i, s in enumerate(dataset.samples)
    ]
    hist = np.zeros(dataset.spec.n_groups, dtype=np.int64)
    for s in samples:
        hist[s.group_id] += 1
    # product-model probabilities no longer describe this data; use frequencies
    probs = hist / max(1, len(samples))
    return SyntheticDataset(dataset.spec, samples, probs, hist, list(dataset.warnings))


def _removal_rows(n: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(n)[: int(round(rate * n))]


def extreme_missingness(model_factory: Callable[[], RemindModel],
                        dataset_full: SyntheticDataset, modality_index: int,
                        rate: float, train_config: TrainConfig, seed: int = 0,
                        eval_full: SyntheticDataset | None = None) -> dict:
    """Remove one modality from a seeded fraction of samples and retrain.

    Reports metrics overall, on the kept ("available") fraction and on the
    stripped ("absent") fraction, mirroring the three-column protocol table.
    A zero rate is allowed as a degenerate case: the available group is the
    whole set and absent metrics are flagged undefined.
    """
    spec = dataset_full.spec
    if not (0 <= modality_index < spec.m):
        raise ValueError(f"modality index {modality_index} out of range")
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"rate {rate} outside [0, 1)")
    full_gid = 2 ** spec.m - 2
    if any(s.group_id != full_gid for s in dataset_full.samples):
        raise ValueError("extreme-missingness needs an all-modalities dataset")
    n = len(dataset_full.samples)
    if rate > 0.0 and rate * n < 1.0:
        raise ValueError(f"rate {rate} removes no sample out of {n}")

    rng = np.random.default_rng([seed, modality_index])
    removed = _removal_rows(n, rate, rng)
    train_set = _with_removal(dataset_full, modality_index, removed)
    model = model_factory()
    result = train(train_set, model, train_config)
    phase = PHASE_GATED if result.stage == 2 else PHASE_SHARED

    if eval_full is None:
        eval_full = dataset_full
        eval_removed = removed
        eval_flag = ["evaluated-on-training-data"]
    else:
        if any(s.group_id != full_gid for s in eval_full.samples):
            raise ValueError("eval_full must be an all-modalities dataset")
        eval_rng = np.random.default_rng([seed, modality_index, 1])
        eval_removed = _removal_rows(len(eval_full.samples), rate, eval_rng)
        eval_flag = []
    eval_set = _with_removal(eval_full, modality_index, eval_removed)

    preds, labels, gids = [], [], []
    for s in eval_set.samples:
        pred, _, _ = model.predict(s, phase)
        preds.append(pred)
        labels.append(s.label)
        gids.append(s.group_id)
    preds_a = np.asarray(preds)
    labels_a = np.asarray(labels)
    gids_a = np.asarray(gids)
    removed_set = np.zeros(len(eval_set.samples), dtype=bool)
    removed_set[eval_removed] = True

    classes = spec.classes
    overall = compute_metrics(preds_a, labels_a, gids_a, classes,
                              spec.tail_threshold)
    available = compute_metrics(preds_a[~removed_set], labels_a[~removed_set],
                                gids_a[~removed_set], classes, spec.tail_threshold)
    if removed_set.any():
        absent = compute_metrics(preds_a[removed_set], labels_a[removed_set],
                                 gids_a[removed_set], classes, spec.tail_threshold)
        absent_dict = absent.to_dict()
    else:
        absent_dict = {"flags": ["undefined: nothing removed"]}

    return {
        "protocol": "extreme-missingness",
        "modality_index": modality_index,
        "rate": rate,
        "mode": train_config.mode,
        "seed": seed,
        "partition": {
            "train_removed": sorted(int(i) for i in removed),
            "eval_removed": sorted(int(i) for i in eval_removed),
        },
        "overall": overall.to_dict(),
        "available": available.to_dict(),
        "absent": absent_dict,
        "flags": eval_flag,
    }


# ---------------------------------------------------------------------------
# unseen modality-combination protocol


def clone_model(model: RemindModel) -> RemindModel:
    out = RemindModel(model.m, model.tokens_per_modality, model.raw_dims,
                      model.classes, model.config, seed=0)
    for gid in sorted(model.block.matrices.residuals):
        out.block.matrices.residual(gid)
    src = model.named_parameters()
    dst = out.named_parameters()
    for name, p in src.items():
        dst[name].value[...] = p.value
    return out


def parse_scope(scope: str) -> tuple[str, float]:
    """'head+router+experts:0.5' -> ('head+router+experts', 0.5)."""
    if ":" in scope:
        base, frac = scope.split(":", 1)
        fraction = float(frac)
    else:
        base, fraction = scope, 0.0
    if base not in FINETUNE_SCOPES:
        raise ValueError(f"unknown finetune scope {scope!r}")
    if base == "head+router+experts" and not (0.0 < fraction <= 1.0):
        raise ValueError(f"experts scope needs a fraction in (0, 1], got {fraction}")
    return base, fraction


def _scope_params(model: RemindModel, base: str, fraction: float,
                  heldout_gid: int) -> list:
    if base == "nothing":
        return []
    params = [model.head_w, model.head_b]
    if base in ("head+router", "head+router+experts"):
        params.append(model.block.matrices.shared)
        params.append(model.block.matrices.residual(heldout_gid))
    if base == "head+router+experts":
        n_unfrozen = math.ceil(fraction * model.config.n_experts)
        for e in model.block.experts[:n_unfrozen]:
            params.extend(e.parameters())
    return params


def unseen_mc_protocol(model: RemindModel, dataset: SyntheticDataset,
                       heldout_mask: ModalityMask | int,
                       finetune_scopes: Sequence[str], train_config: TrainConfig,
                       adapt_steps: int = 50, adapt_lr: float | None = None,
                       seed: int = 0) -> dict:
    """Hold one group out of training, then fine-tune nested scopes on it.

    The held-out group's samples are split 50/50 (seeded) into an adaptation
    split and a test split. Each scope starts from the same base model,
    unfreezes exactly the named parameters (router scope adds a fresh zero
    residual for the held-out group), runs full-batch gradient steps on the
    adaptation split, and is scored on the test split. Parameters outside
    the scope must come back bit-identical; that is asserted here.
    """
    if isinstance(heldout_mask, int):
        heldout_mask = ModalityMask.from_bitmask(heldout_mask, dataset.spec.m)
    heldout_gid = heldout_mask.bitmask - 1
    heldout_rows = [i for i, s in enumerate(dataset.samples)
                    if s.group_id == heldout_gid]
    if not heldout_rows:
        raise ValueError(f"held-out group {heldout_mask} absent from dataset")
    if len(heldout_rows) < 2:
        raise ValueError(f"held-out group {heldout_mask} too small to split")

    keep = [s for s in dataset.samples if s.group_id != heldout_gid]
    hist = np.zeros(dataset.spec.n_groups, dtype=np.int64)
    for s in keep:
        hist[s.group_id] += 1
    base_set = SyntheticDataset(dataset.spec, keep, hist / max(1, len(keep)),
                                hist, list(dataset.warnings))

    result = train(base_set, model, train_config)
    phase = PHASE_GATED if result.stage == 2 else PHASE_SHARED
    # the fresh zero residual exists up front so evaluation never mutates
    model.block.matrices.residual(heldout_gid)

    rng = np.random.default_rng([seed, heldout_gid])
    order = rng.permutation(len(heldout_rows))
    half = len(heldout_rows) // 2
    adapt = [dataset.samples[heldout_rows[i]] for i in order[:half]]
    test = [dataset.samples[heldout_rows[i]] for i in order[half:]]

    lr = adapt_lr if adapt_lr is not None else train_config.lr

    def adapt_loss(m: RemindModel) -> float:
        tape = Tape()
        losses = [
            sample_loss(tape, m.forward(tape, s, phase)[0], s.label, train_config)
            for s in adapt
        ]
        return float(_mean_node(tape, losses).value[0, 0])

    scope_results = []
    for scope in finetune_scopes:
        base, fraction = parse_scope(scope)
        tuned = clone_model(model)
        params = _scope_params(tuned, base, fraction, heldout_gid)
        scope_names = {p.name for p in params}
        before = {name: p.value.copy()
                  for name, p in tuned.named_parameters().items()}

        optimizer = GradientDescent(lr)
        for _ in range(adapt_steps if base != "nothing" else 0):
            tape = Tape()
            losses = [
                sample_loss(tape, tuned.forward(tape, s, phase)[0], s.label,
                            train_config)
                for s in adapt
            ]
            total = _mean_node(tape, losses)
            for p in params:
                p.zero_grad()
            tape.backward(total)
            optimizer.step(params)

        changed = []
        for name, p in tuned.named_parameters().items():
            if np.array_equal(before[name], p.value):
                continue
            if name not in scope_names:
                raise AssertionError(f"freeze contract violated for {name}")
            changed.append(name)

        preds = [tuned.predict(s, phase)[0] for s in test]
        metrics = compute_metrics(preds, [s.label for s in test],
                                  [s.group_id for s in test],
                                  tuned.classes, dataset.spec.tail_threshold)
        scope_results.append({
            "scope": scope,
            "unfrozen": sorted(scope_names),
            "changed_params": sorted(changed),
            "final_adapt_loss": adapt_loss(tuned),
            "test_metrics": metrics.to_dict(),
        })

    return {
        "protocol": "unseen-mc",
        "heldout_bitmask": heldout_mask.bitmask,
        "mode": train_config.mode,
        "seed": seed,
        "adapt_size": len(adapt),
        "test_size": len(test),
        "scopes": scope_results,
    }


def write_metrics_json(doc: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)


def write_metrics_csv(metrics: GroupMetrics, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["group_id", "bitmask", "accuracy", "macro_f1", "support", "tail"])
        for g in metrics.groups.values():
            w.writerow([g.group_id, g.group_id + 1, repr(g.accuracy),
                        repr(g.macro_f1), g.support, int(g.tail)])
        w.writerow(["overall", "", repr(metrics.overall_accuracy),
                    repr(metrics.overall_macro_f1), metrics.total, ""])
