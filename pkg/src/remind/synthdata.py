"""Synthetic long-tailed multimodal datasets with per-group concept shift.

A sample's modality-combination group is drawn from the product missingness
model (conditioned on at least one modality being present), raw features are
standard normal, and the label rule is a group-specific random linear
functional of the present modalities' features -- so the input-to-label
mapping genuinely differs across groups.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .autodiff import Parameter, ShapeError, Tape

DATASET_MAGIC = "# remind-dataset v1"


# ---------------------------------------------------------------------------
# masks and group enumeration


@dataclass(frozen=True)
class ModalityMask:
    """Which of the m modalities a sample carries; bit i = modality i present."""

    bits: tuple[bool, ...]

    def __post_init__(self):
        if not any(self.bits):
            raise ValueError("empty modality combination is excluded")

    @classmethod
    def from_bitmask(cls, bitmask: int, m: int) -> "ModalityMask":
        if not (1 <= bitmask < 2 ** m):
            raise ValueError(f"bitmask {bitmask} out of range for m={m}")
        return cls(tuple(bool(bitmask >> i & 1) for i in range(m)))

    @property
    def m(self) -> int:
        return len(self.bits)

    @property
    def bitmask(self) -> int:
        return sum(1 << i for i, b in enumerate(self.bits) if b)

    @property
    def present(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if b)

    @property
    def missing(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if not b)

    def __str__(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)


def enumerate_groups(m: int) -> list[ModalityMask]:
    """All 2^m - 1 non-empty masks in ascending bitmask order.

    The position in this list is the canonical group id (group_id = bitmask-1).
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    return [ModalityMask.from_bitmask(k, m) for k in range(1, 2 ** m)]


def group_probability(mask: ModalityMask, p: Sequence[float]) -> float:
    """Unnormalized probability of observing exactly this combination."""
    p = tuple(float(x) for x in p)
    if len(p) != mask.m:
        raise ValueError(f"{len(p)} probabilities for m={mask.m} modalities")
    for i, pi in enumerate(p):
        if not (0.0 <= pi < 1.0):
            raise ValueError(f"p[{i}]={pi} outside [0, 1)")
    prob = 1.0
    for i, b in enumerate(mask.bits):
        prob *= (1.0 - p[i]) if b else p[i]
    return prob


def renormalized_probabilities(m: int, p: Sequence[float]) -> np.ndarray:
    """Group probabilities conditioned on the combination being non-empty."""
    raw = np.array([group_probability(g, p) for g in enumerate_groups(m)])
    total = raw.sum()
    if total <= 0.0:
        raise ValueError("all non-empty combinations have zero probability")
    return raw / total


# ---------------------------------------------------------------------------
# dataset specification


@dataclass(frozen=True)
class ConceptShift:
    """How the label rule varies across groups.

    kind "linear": label = argmax_c of a group-specific random functional of
    the present modalities' features. kind "synergy": groups containing both
    modalities of ``synergy_pair`` instead use a random bilinear form of the
    pair (label depends on a feature product available only when both are
    present); other groups fall back to the linear rule.
    """

    kind: str = "linear"
    label_noise: float = 0.0
    synergy_pair: tuple[int, int] = (0, 1)

    def validate(self, m: int) -> None:
        if self.kind not in ("linear", "synergy"):
            raise ValueError(f"unknown concept shift kind {self.kind!r}")
        if not (0.0 <= self.label_noise < 1.0):
            raise ValueError("label_noise must be in [0, 1)")
        a, b = self.synergy_pair
        if self.kind == "synergy" and not (0 <= a < m and 0 <= b < m and a != b):
            raise ValueError(f"synergy pair {self.synergy_pair} invalid for m={m}")


@dataclass(frozen=True)
class DatasetSpec:
    m: int
    missing_prob: tuple[float, ...]
    tokens_per_modality: int
    embed_dim: int
    raw_dims: tuple[int, ...]
    classes: int
    n_samples: int
    concept_shift: ConceptShift = field(default_factory=ConceptShift)
    seed: int = 0
    concept_seed: int = 0          # label rules are shared by all sampling seeds
    missing_correlation: float = 0.0
    tail_threshold: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "missing_prob", tuple(float(x) for x in self.missing_prob))
        object.__setattr__(self, "raw_dims", tuple(int(x) for x in self.raw_dims))

    def validate(self) -> None:
        if not (2 <= self.m <= 8):
            raise ValueError(f"m={self.m} outside the supported range [2, 8]")
        if len(self.missing_prob) != self.m:
            raise ValueError("missing_prob length must equal m")
        for i, pi in enumerate(self.missing_prob):
            if not (0.0 <= pi < 1.0):
                raise ValueError(f"missing_prob[{i}]={pi} outside [0, 1)")
        if self.tokens_per_modality < 1:
            raise ValueError("tokens_per_modality must be >= 1")
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if len(self.raw_dims) != self.m or any(r < 1 for r in self.raw_dims):
            raise ValueError("raw_dims must hold one positive width per modality")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not (0.0 <= self.missing_correlation < 1.0):
            raise ValueError("missing_correlation must be in [0, 1)")
        if not (0.0 < self.tail_threshold <= 1.0):
            raise ValueError("tail_threshold must be in (0, 1]")
        self.concept_shift.validate(self.m)

    @property
    def n_groups(self) -> int:
        return 2 ** self.m - 1

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "missing_prob": list(self.missing_prob),
            "tokens_per_modality": self.tokens_per_modality,
            "embed_dim": self.embed_dim,
            "raw_dims": list(self.raw_dims),
            "classes": self.classes,
            "n_samples": self.n_samples,
            "concept_shift": {
                "kind": self.concept_shift.kind,
                "label_noise": self.concept_shift.label_noise,
                "synergy_pair": list(self.concept_shift.synergy_pair),
            },
            "seed": self.seed,
            "concept_seed": self.concept_seed,
            "missing_correlation": self.missing_correlation,
            "tail_threshold": self.tail_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        cs = d.get("concept_shift", {})
        spec = cls(
            m=d["m"],
            missing_prob=tuple(d["missing_prob"]),
            tokens_per_modality=d["tokens_per_modality"],
            embed_dim=d["embed_dim"],
            raw_dims=tuple(d["raw_dims"]),
            classes=d["classes"],
            n_samples=d["n_samples"],
            concept_shift=ConceptShift(
                kind=cs.get("kind", "linear"),
                label_noise=cs.get("label_noise", 0.0),
                synergy_pair=tuple(cs.get("synergy_pair", (0, 1))),
            ),
            seed=d.get("seed", 0),
            concept_seed=d.get("concept_seed", 0),
            missing_correlation=d.get("missing_correlation", 0.0),
            tail_threshold=d.get("tail_threshold", 0.15),
        )
        spec.validate()
        return spec


@dataclass
class Sample:
    raw: dict[int, np.ndarray]    # modality index -> (l x raw_dim_i), present only
    mask: ModalityMask
    label: int
    group_id: int

    def validate(self, spec: DatasetSpec) -> None:
        if self.group_id != self.mask.bitmask - 1:
            raise ValueError("group_id inconsistent with mask")
        if set(self.raw) != set(self.mask.present):
            raise ValueError("raw blocks do not match the mask")
        for i, block in self.raw.items():
            want = (spec.tokens_per_modality, spec.raw_dims[i])
            if block.shape != want:
                raise ValueError(f"modality {i} block {block.shape} != {want}")


@dataclass
class SyntheticDataset:
    spec: DatasetSpec
    samples: list[Sample]
    probabilities: np.ndarray      # renormalized Pr(g_k), length 2^m - 1
    histogram: np.ndarray          # empirical counts per group
    warnings: list[str]

    def group_indices(self) -> dict[int, list[int]]:
        idx: dict[int, list[int]] = {}
        for i, s in enumerate(self.samples):
            idx.setdefault(s.group_id, []).append(i)
        return idx

    def frequencies(self) -> np.ndarray:
        total = max(1, len(self.samples))
        return self.histogram / total

    def tail_flags(self) -> np.ndarray:
        """Tail = renormalized group probability below the configured threshold."""
        return self.probabilities < self.spec.tail_threshold


# ---------------------------------------------------------------------------
# label rules


class _LabelRules:
    """Per-group random label functionals, derived from the concept seed only.

    Rules act on each modality's token-mean features, so they are symmetric
    over a modality's token rows (the fusion model has no positional signal
    within a modality) while still being linear in the raw features.
    """

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        self._linear: dict[int, np.ndarray] = {}
        self._bilinear: dict[int, np.ndarray] = {}

    def _group_rng(self, group_id: int) -> np.random.Generator:
        return np.random.default_rng([self.spec.concept_seed, group_id, 0x5eed])

    def _feat_dim(self, mask: ModalityMask) -> int:
        return sum(self.spec.raw_dims[i] for i in mask.present)

    def _uses_synergy(self, mask: ModalityMask) -> bool:
        cs = self.spec.concept_shift
        if cs.kind != "synergy":
            return False
        a, b = cs.synergy_pair
        return mask.bits[a] and mask.bits[b]

    def labels_for(self, mask: ModalityMask, feats: dict[int, np.ndarray]) -> np.ndarray:
        """Labels for a batch of samples from one group.

        ``feats[i]`` has shape (count, l, raw_dim_i) for each present modality.
        """
        group_id = mask.bitmask - 1
        spec = self.spec
        if self._uses_synergy(mask):
            A = self._bilinear.get(group_id)
            a, b = spec.concept_shift.synergy_pair
            fa = feats[a].mean(axis=1)
            fb = feats[b].mean(axis=1)
            if A is None:
                rng = self._group_rng(group_id)
                A = rng.normal(size=(spec.classes, fa.shape[1], fb.shape[1]))
                self._bilinear[group_id] = A
            scores = np.einsum("na,cab,nb->nc", fa, A, fb)
        else:
            W = self._linear.get(group_id)
            flat = np.concatenate(
                [feats[i].mean(axis=1) for i in mask.present], axis=1
            )
            if W is None:
                rng = self._group_rng(group_id)
                W = rng.normal(size=(spec.classes, self._feat_dim(mask)))
                self._linear[group_id] = W
            scores = flat @ W.T
        return scores.argmax(axis=1)


# ---------------------------------------------------------------------------
# sampling


def _draw_group_ids(spec: DatasetSpec, probs: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    if spec.missing_correlation == 0.0:
        return rng.choice(len(probs), size=spec.n_samples, p=probs)
    # one-factor Gaussian copula; condition on non-empty masks by rejection
    rho = spec.missing_correlation
    thresholds = norm.ppf(np.array(spec.missing_prob))
    out = np.empty(spec.n_samples, dtype=np.int64)
    filled = 0
    while filled < spec.n_samples:
        chunk = max(64, 2 * (spec.n_samples - filled))
        z0 = rng.normal(size=(chunk, 1))
        zi = rng.normal(size=(chunk, spec.m))
        latent = np.sqrt(rho) * z0 + np.sqrt(1.0 - rho) * zi
        missing = latent < thresholds
        bitmasks = ((~missing) << np.arange(spec.m)).sum(axis=1)
        keep = bitmasks[bitmasks > 0]
        take = min(len(keep), spec.n_samples - filled)
        out[filled:filled + take] = keep[:take] - 1
        filled += take
    return out


def sample_dataset(spec: DatasetSpec) -> SyntheticDataset:
    """Draw a dataset; deterministic given the spec (including its seed)."""
    spec.validate()
    probs = renormalized_probabilities(spec.m, spec.missing_prob)
    groups = enumerate_groups(spec.m)
    rng = np.random.default_rng(spec.seed)
    rules = _LabelRules(spec)

    warnings = [
        f"group {k} ({groups[k]}) has zero renormalized probability"
        for k in range(len(probs)) if probs[k] == 0.0
    ]

    group_ids = _draw_group_ids(spec, probs, rng)
    samples: list[Sample] = [None] * spec.n_samples  # type: ignore[list-item]
    l = spec.tokens_per_modality
    for gid in range(len(groups)):
        idx = np.nonzero(group_ids == gid)[0]
        if len(idx) == 0:
            continue
        mask = groups[gid]
        feats = {
            i: rng.normal(size=(len(idx), l, spec.raw_dims[i]))
            for i in mask.present
        }
        labels = rules.labels_for(mask, feats)
        if spec.concept_shift.label_noise > 0.0:
            flip = rng.random(len(idx)) < spec.concept_shift.label_noise
            noise = rng.integers(0, spec.classes, size=len(idx))
            labels = np.where(flip, noise, labels)
        for j, si in enumerate(idx):
            samples[si] = Sample(
                raw={i: feats[i][j] for i in mask.present},
                mask=mask,
                label=int(labels[j]),
                group_id=gid,
            )

    histogram = np.bincount(group_ids, minlength=len(groups)).astype(np.int64)
    return SyntheticDataset(spec, samples, probs, histogram, warnings)


# ---------------------------------------------------------------------------
# embedding bank and token-grid assembly


class EmbeddingBank:
    """One trainable vector per modality-combination group.

    A missing modality's l x d token block is filled by broadcasting the
    owning group's vector; all vectors start from a small random init.
    """

    def __init__(self, m: int, embed_dim: int, rng: np.random.Generator,
                 init_scale: float = 0.1):
        self.m = m
        self.embed_dim = embed_dim
        # bank vectors are keyed by the group's bitmask (group_id k <-> mask k+1)
        self.vectors = [
            Parameter(f"bank/mc{k + 1}", init_scale * rng.normal(size=(1, embed_dim)))
            for k in range(2 ** m - 1)
        ]

    def __len__(self) -> int:
        return len(self.vectors)

    def parameters(self) -> list[Parameter]:
        return list(self.vectors)


def apply_missing(tape: Tape, sample: Sample, bank: EmbeddingBank, encoders,
                  tokens_per_modality: int, embed_dim: int):
    """Assemble the full (l*m) x d token grid for one sample.

    Present modalities are encoded with their per-modality encoder; each
    missing modality contributes l identical rows of the group's bank vector.
    """
    if len(bank) != 2 ** sample.mask.m - 1:
        raise ValueError(
            f"bank holds {len(bank)} vectors, expected {2 ** sample.mask.m - 1}"
        )
    l = tokens_per_modality
    blocks = []
    ones = None
    for i in range(sample.mask.m):
        if sample.mask.bits[i]:
            encoded = encoders[i].encode(tape, tape.constant(sample.raw[i]))
            if encoded.value.shape != (l, embed_dim):
                raise ShapeError(
                    f"encoder {i} produced {encoded.value.shape}, "
                    f"expected ({l}, {embed_dim})"
                )
            blocks.append(encoded)
        else:
            if ones is None:
                ones = tape.constant(np.ones((l, 1)))
            blocks.append(tape.matmul(ones, tape.leaf(bank.vectors[sample.group_id])))
    return tape.concat_rows(blocks)


# ---------------------------------------------------------------------------
# serialization (bit-exact round trip)


def save_dataset(ds: SyntheticDataset, path) -> None:
    """Line-oriented text format: magic, JSON header, one record per sample.

    Record: group_id, label, then the flattened raw blocks of the present
    modalities in modality order. Floats are written with repr, which Python
    round-trips bit-exactly.
    """
    with open(path, "w") as f:
        f.write(DATASET_MAGIC + "\n")
        header = {
            "spec": ds.spec.to_dict(),
            "probabilities": [repr(float(p)) for p in ds.probabilities],
            "warnings": ds.warnings,
        }
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for s in ds.samples:
            values = []
            for i in s.mask.present:
                values.extend(repr(float(v)) for v in s.raw[i].ravel())
            f.write(f"{s.group_id} {s.label} " + " ".join(values) + "\n")


def load_dataset(path) -> SyntheticDataset:
    with open(path) as f:
        magic = f.readline().rstrip("\n")
        if magic != DATASET_MAGIC:
            raise ValueError(f"not a dataset file (bad magic {magic!r})")
        header = json.loads(f.readline())
        spec = DatasetSpec.from_dict(header["spec"])
        probs = np.array([float(p) for p in header["probabilities"]])
        groups = enumerate_groups(spec.m)
        l = spec.tokens_per_modality
        samples = []
        for line in f:
            parts = line.split()
            gid, label = int(parts[0]), int(parts[1])
            mask = groups[gid]
            values = np.array([float(v) for v in parts[2:]])
            raw, off = {}, 0
            for i in mask.present:
                n = l * spec.raw_dims[i]
                raw[i] = values[off:off + n].reshape(l, spec.raw_dims[i])
                off += n
            if off != len(values):
                raise ValueError(f"record for group {gid} has {len(values)} values, expected {off}")
            samples.append(Sample(raw=raw, mask=mask, label=label, group_id=gid))
    histogram = np.zeros(len(groups), dtype=np.int64)
    for s in samples:
        histogram[s.group_id] += 1
    return SyntheticDataset(spec, samples, probs, histogram, header["warnings"])


def save_histogram_csv(ds: SyntheticDataset, path) -> None:
    groups = enumerate_groups(ds.spec.m)
    tails = ds.tail_flags()
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["group_id", "bitmask", "mask", "probability", "count", "tail"])
        for k, g in enumerate(groups):
            w.writerow([k, g.bitmask, str(g), repr(float(ds.probabilities[k])),
                        int(ds.histogram[k]), int(tails[k])])


# ---------------------------------------------------------------------------
# linear probes (used to assert that the concept shift is real)


def probe_features(samples: Sequence[Sample], spec: DatasetSpec) -> np.ndarray:
    """Zero-filled concatenation of all modality blocks, one row per sample."""
    l = spec.tokens_per_modality
    width = sum(l * r for r in spec.raw_dims)
    X = np.zeros((len(samples), width))
    offsets = np.cumsum([0] + [l * r for r in spec.raw_dims])
    for row, s in enumerate(samples):
        for i in s.mask.present:
            X[row, offsets[i]:offsets[i + 1]] = s.raw[i].ravel()
    return X


def fit_linear_probe(samples: Sequence[Sample], spec: DatasetSpec,
                     ridge: float = 1e-3) -> np.ndarray:
    """One-vs-all ridge regression onto one-hot labels; returns the weights."""
    X = probe_features(samples, spec)
    Xb = np.concatenate([X, np.ones((len(samples), 1))], axis=1)
    Y = np.zeros((len(samples), spec.classes))
    for row, s in enumerate(samples):
        Y[row, s.label] = 1.0
    A = Xb.T @ Xb + ridge * np.eye(Xb.shape[1])
    return np.linalg.solve(A, Xb.T @ Y)


def probe_accuracy(weights: np.ndarray, samples: Sequence[Sample],
                   spec: DatasetSpec) -> float:
    X = probe_features(samples, spec)
    Xb = np.concatenate([X, np.ones((len(samples), 1))], axis=1)
    pred = (Xb @ weights).argmax(axis=1)
    labels = np.array([s.label for s in samples])
    return float((pred == labels).mean())
