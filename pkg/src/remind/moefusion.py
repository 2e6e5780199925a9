"""Soft mixture-of-experts fusion with group-residual routing and uncertainty gating.

The block applies a single-head self-attention pre-mixer, routes every token
softly to every expert slot (dispatch = softmax over tokens per slot, combine
= softmax over slots per token), and optionally adds a zero-initialized
per-group residual to the shared routing matrix when routing looks uncertain.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Node, Parameter, ShapeError, Tape
from .synthdata import DatasetSpec, EmbeddingBank, Sample, apply_missing

PHASE_SHARED = "stage1-shared-only"
PHASE_GATED = "stage2-gated"

CHECKPOINT_MAGIC = "remind-checkpoint v1"

_ENTROPY_EPS = 1e-8

# parameter-name prefixes that make up the fusion block proper
FUSION_PREFIXES = ("attn/", "router/shared", "experts/", "scale")


@dataclass(frozen=True)
class RouterConfig:
    embed_dim: int
    n_experts: int
    slots_per_expert: int = 1
    scale_init: float = 1.0
    gating_metric: str = "entropy"            # entropy | kl-vs-uniform
    threshold: float | None = None            # None -> 0.8*ln(n) / 0.1 default
    expert_hidden: int = 16
    dispatch_axis: str = "tokens"             # tokens (col-softmax) | experts
    entropy_granularity: str = "per-token"    # per-token | global
    expert_activation: str = "gelu"           # gelu | relu

    def validate(self) -> None:
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.n_experts < 2:
            raise ValueError("n_experts must be >= 2")
        if self.slots_per_expert < 1:
            raise ValueError("slots_per_expert must be >= 1")
        if self.scale_init <= 0.0:
            raise ValueError("scale_init must be positive")
        if self.expert_hidden < 1:
            raise ValueError("expert_hidden must be >= 1")
        if self.gating_metric not in ("entropy", "kl-vs-uniform"):
            raise ValueError(f"unknown gating metric {self.gating_metric!r}")
        if self.dispatch_axis not in ("tokens", "experts"):
            raise ValueError(f"unknown dispatch axis {self.dispatch_axis!r}")
        if self.entropy_granularity not in ("per-token", "global"):
            raise ValueError(
                f"unknown entropy granularity {self.entropy_granularity!r}"
            )
        if self.expert_activation not in ("gelu", "relu"):
            raise ValueError(f"unknown expert activation {self.expert_activation!r}")
        if self.threshold is not None:
            if self.gating_metric == "entropy":
                if self.entropy_granularity == "per-token" and not (
                    0.0 < self.threshold <= math.log(self.n_experts)
                ):
                    raise ValueError(
                        f"entropy threshold {self.threshold} outside "
                        f"(0, ln {self.n_experts}]"
                    )
                if self.entropy_granularity == "global" and self.threshold <= 0.0:
                    raise ValueError("entropy threshold must be positive")
            elif self.threshold < 0.0:
                raise ValueError("KL threshold must be >= 0")

    @property
    def n_slots(self) -> int:
        return self.n_experts * self.slots_per_expert

    def resolved_threshold(self, n_outcomes: int) -> float:
        """The gate threshold, defaulting to 0.8 * max entropy (or 0.1 for KL)."""
        if self.threshold is not None:
            return self.threshold
        if self.gating_metric == "entropy":
            return 0.8 * math.log(n_outcomes)
        return 0.1

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "n_experts": self.n_experts,
            "slots_per_expert": self.slots_per_expert,
            "scale_init": self.scale_init,
            "gating_metric": self.gating_metric,
            "threshold": self.threshold,
            "expert_hidden": self.expert_hidden,
            "dispatch_axis": self.dispatch_axis,
            "entropy_granularity": self.entropy_granularity,
            "expert_activation": self.expert_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RouterConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


class RoutingMatrices:
    """Shared routing matrix plus zero-initialized per-group residuals."""

    def __init__(self, embed_dim: int, n_slots: int, rng: np.random.Generator):
        self.embed_dim = embed_dim
        self.n_slots = n_slots
        self.shared = Parameter(
            "router/shared", rng.normal(size=(embed_dim, n_slots)) / math.sqrt(embed_dim)
        )
        self.residuals: dict[int, Parameter] = {}

    def has_residual(self, group_id: int) -> bool:
        return group_id in self.residuals

    def residual(self, group_id: int) -> Parameter:
        """The group's residual matrix, created as exact zeros on first use."""
        p = self.residuals.get(group_id)
        if p is None:
            p = Parameter(
                f"router/res/mc{group_id + 1}",
                np.zeros((self.embed_dim, self.n_slots)),
            )
            self.residuals[group_id] = p
        return p

    def parameters(self) -> list[Parameter]:
        return [self.shared] + [self.residuals[k] for k in sorted(self.residuals)]


# ---------------------------------------------------------------------------
# uncertainty metrics


@dataclass
class UncertaintyReport:
    """Routing-uncertainty metrics, one row per token and one column per slot."""

    n_experts: int
    entropy_nats: np.ndarray
    entropy_bits: np.ndarray
    normalized_certainty: np.ndarray
    max_prob: np.ndarray
    margin: np.ndarray
    gini: np.ndarray
    variance: np.ndarray
    kl_vs_uniform: np.ndarray
    means: dict[str, float] = field(default_factory=dict)


_REPORT_FIELDS = (
    "entropy_nats", "entropy_bits", "normalized_certainty", "max_prob",
    "margin", "gini", "variance", "kl_vs_uniform",
)


def uncertainty_metrics(prob: np.ndarray) -> UncertaintyReport:
    """All eight uncertainty metrics for router distributions over experts.

    ``prob`` is either (rows, n) with each row a simplex over n experts, or
    (M, n, P) giving one distribution per token and slot. Entropy uses the
    epsilon-inside-log guard and is clamped at zero.
    """
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim == 2:
        stacked = prob[:, :, None]           # (M, n, 1)
    elif prob.ndim == 3:
        stacked = prob
    else:
        raise ValueError(f"prob must be 2-D or 3-D, got ndim {prob.ndim}")
    n = stacked.shape[1]
    sums = stacked.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        worst = float(np.abs(sums - 1.0).max())
        raise ValueError(f"non-simplex input: row sum off by {worst:.3g}")
    if stacked.min() < -1e-12:
        raise ValueError("non-simplex input: negative probability")

    logp = np.log(stacked + _ENTROPY_EPS)
    plogp = (stacked * logp).sum(axis=1)                 # (M, P)
    entropy = np.clip(-plogp, 0.0, None)
    kl = plogp + math.log(n) * sums
    srt = np.sort(stacked, axis=1)
    report = UncertaintyReport(
        n_experts=n,
        entropy_nats=entropy,
        entropy_bits=entropy / math.log(2.0),
        normalized_certainty=1.0 - entropy / math.log(n),
        max_prob=stacked.max(axis=1),
        margin=srt[:, -1, :] - srt[:, -2, :],
        gini=1.0 - (stacked * stacked).sum(axis=1),
        variance=((stacked - 1.0 / n) ** 2).sum(axis=1),
        kl_vs_uniform=kl,
    )
    report.means = {
        name: float(getattr(report, name).mean()) for name in _REPORT_FIELDS
    }
    return report


def gate(report: UncertaintyReport, config: RouterConfig) -> bool:
    """Decide whether group-specific residual routing should activate.

    Entropy mode fires on high mean entropy (uncertain routing); KL mode
    fires on low mean divergence from uniform (also uncertain routing).
    """
    threshold = config.resolved_threshold(report.n_experts)
    if config.gating_metric == "entropy":
        return report.means["entropy_nats"] >= threshold
    return report.means["kl_vs_uniform"] <= threshold


# ---------------------------------------------------------------------------
# graph-building pieces


def _normalize_phi(tape: Tape, phi: Node, scale: Node | float):
    flags = []
    pt = tape.unit_row_normalize(tape.transpose(phi))
    if pt.flag:
        flags.append("zero-column-in-router")
    phin = tape.transpose(pt)
    if isinstance(scale, Node):
        phin = tape.mul(phin, scale)
    elif scale != 1.0:
        phin = tape.scalar_mul(phin, float(scale))
    return phin, flags


def normalize_for_routing(tape: Tape, z: Node, phi: Node, scale: Node | float):
    """Unit-L2 rows of Z, unit-L2 columns of Phi scaled by s.

    Returns (z_norm, phi_norm, flags); zero rows/columns are replaced by a
    uniform unit vector and reported in flags.
    """
    zn = tape.unit_row_normalize(z)
    flags = ["zero-row-in-tokens"] if zn.flag else []
    phin, pflags = _normalize_phi(tape, phi, scale)
    return zn, phin, flags + pflags


def routing_logits(tape: Tape, z_norm: Node, phi_effective: Node) -> Node:
    zc, pc = z_norm.value.shape[1], phi_effective.value.shape[0]
    if zc != pc:
        raise ShapeError(f"routing_logits: embed dims differ ({zc} vs {pc})")
    return tape.matmul(z_norm, phi_effective)


def dispatch_weights(tape: Tape, logits: Node, config: RouterConfig | None = None) -> Node:
    """Dispatch simplex; default normalizes over tokens per expert-slot column."""
    if config is None or config.dispatch_axis == "tokens":
        return tape.col_softmax(logits)
    return _expert_axis_softmax(tape, logits, config)


def _expert_axis_softmax(tape: Tape, logits: Node, config: RouterConfig) -> Node:
    # variant: normalize over the expert axis per (token, slot)
    n, p = config.n_experts, config.slots_per_expert
    if p == 1:
        return tape.row_softmax(logits)
    out = None
    for slot in range(p):
        sel = np.zeros((n * p, n))
        sel[np.arange(n) * p + slot, np.arange(n)] = 1.0
        sub = tape.matmul(logits, tape.constant(sel))
        soft = tape.row_softmax(sub)
        back = tape.matmul(soft, tape.constant(sel.T))
        out = back if out is None else tape.add(out, back)
    return out


def combine_weights(tape: Tape, logits: Node) -> Node:
    """Combine simplex: softmax over expert-slots per token row."""
    return tape.row_softmax(logits)


def apply_experts(tape: Tape, z_norm: Node, d: Node, c: Node,
                  experts: Sequence, slots_per_expert: int = 1) -> Node:
    """Slot inputs Z~ = D^T Z, per-expert transform, then combine Y = C Y~."""
    ztil = tape.matmul(tape.transpose(d), z_norm)
    embed_dim = z_norm.value.shape[1]
    outs = []
    for j, expert in enumerate(experts):
        rows = tape.slice_rows(ztil, j * slots_per_expert, (j + 1) * slots_per_expert)
        y = expert.apply(tape, rows)
        if y.value.shape != (slots_per_expert, embed_dim):
            raise ShapeError(
                f"expert {j} produced {y.value.shape}, "
                f"expected ({slots_per_expert}, {embed_dim})"
            )
        outs.append(y)
    return tape.matmul(c, tape.concat_rows(outs))


class MlpExpert:
    """Two-layer MLP d -> hidden -> d."""

    def __init__(self, index: int, embed_dim: int, hidden: int,
                 rng: np.random.Generator, activation: str = "gelu"):
        self.activation = activation
        self.w1 = Parameter(f"experts/{index}/w1",
                            rng.normal(size=(embed_dim, hidden)) / math.sqrt(embed_dim))
        self.b1 = Parameter(f"experts/{index}/b1", np.zeros((1, hidden)))
        self.w2 = Parameter(f"experts/{index}/w2",
                            rng.normal(size=(hidden, embed_dim)) / math.sqrt(hidden))
        self.b2 = Parameter(f"experts/{index}/b2", np.zeros((1, embed_dim)))

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def apply(self, tape: Tape, x: Node) -> Node:
        h = tape.add(tape.matmul(x, tape.leaf(self.w1)), tape.leaf(self.b1))
        h = tape.gelu(h) if self.activation == "gelu" else tape.relu(h)
        return tape.add(tape.matmul(h, tape.leaf(self.w2)), tape.leaf(self.b2))


class IdentityExpert:
    """Pass-through expert, handy for hand-checkable tests."""

    def parameters(self) -> list[Parameter]:
        return []

    def apply(self, tape: Tape, x: Node) -> Node:
        return tape.scalar_mul(x, 1.0)


class LinearEncoder:
    """Per-modality token encoder: raw (l x raw_dim) -> (l x d)."""

    def __init__(self, index: int, raw_dim: int, embed_dim: int,
                 rng: np.random.Generator):
        self.w = Parameter(f"enc/{index}/w",
                           rng.normal(size=(raw_dim, embed_dim)) / math.sqrt(raw_dim))
        self.b = Parameter(f"enc/{index}/b", np.zeros((1, embed_dim)))

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]

    def encode(self, tape: Tape, raw: Node) -> Node:
        return tape.add(tape.matmul(raw, tape.leaf(self.w)), tape.leaf(self.b))


@dataclass
class FusionOutput:
    y: Node                      # fused tokens, M x d (graph node)
    dispatch: np.ndarray         # M x (n*P)
    combine: np.ndarray          # M x (n*P)
    report: UncertaintyReport
    gate_fired: bool
    flags: list[str]


class FusionBlock:
    """Attention pre-mixer + soft-MoE routing with gated group residuals."""

    def __init__(self, config: RouterConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        d = config.embed_dim
        s = 1.0 / math.sqrt(d)
        self.wq = Parameter("attn/wq", rng.normal(size=(d, d)) * s)
        self.wk = Parameter("attn/wk", rng.normal(size=(d, d)) * s)
        self.wv = Parameter("attn/wv", rng.normal(size=(d, d)) * s)
        self.wo = Parameter("attn/wo", rng.normal(size=(d, d)) * s)
        self.scale = Parameter("scale", np.array([[config.scale_init]]))
        self.matrices = RoutingMatrices(d, config.n_slots, rng)
        self.experts = [
            MlpExpert(j, d, config.expert_hidden, rng, config.expert_activation)
            for j in range(config.n_experts)
        ]

    def parameters(self) -> list[Parameter]:
        ps = [self.wq, self.wk, self.wv, self.wo, self.scale]
        ps.extend(self.matrices.parameters())
        for e in self.experts:
            ps.extend(e.parameters())
        return ps

    def _attend(self, tape: Tape, z: Node) -> Node:
        q = tape.matmul(z, tape.leaf(self.wq))
        k = tape.matmul(z, tape.leaf(self.wk))
        v = tape.matmul(z, tape.leaf(self.wv))
        att = tape.row_softmax(
            tape.scalar_mul(tape.matmul(q, tape.transpose(k)),
                            1.0 / math.sqrt(self.config.embed_dim))
        )
        return tape.add(z, tape.matmul(tape.matmul(att, v), tape.leaf(self.wo)))

    def _metric_prob(self, logits_value: np.ndarray) -> np.ndarray:
        cfg = self.config
        if cfg.entropy_granularity == "global":
            flat = logits_value.reshape(1, -1)
            shifted = flat - flat.max()
            e = np.exp(shifted)
            return e / e.sum()
        m = logits_value.shape[0]
        cube = logits_value.reshape(m, cfg.n_experts, cfg.slots_per_expert)
        shifted = cube - cube.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def forward(self, tape: Tape, z_tokens: Node, group_id: int,
                phase: str) -> tuple[Node, FusionOutput]:
        """Run the block for one sample's token grid; returns (Y, FusionOutput)."""
        if phase not in (PHASE_SHARED, PHASE_GATED):
            raise ValueError(f"unknown phase {phase!r}")
        cfg = self.config
        flags: list[str] = []

        z = self._attend(tape, z_tokens)
        scale_node = tape.leaf(self.scale)
        shared = tape.leaf(self.matrices.shared)
        zn, phin_shared, nflags = normalize_for_routing(tape, z, shared, scale_node)
        flags.extend(nflags)
        logits = routing_logits(tape, zn, phin_shared)

        report = uncertainty_metrics(self._metric_prob(logits.value))
        fired = False
        if phase == PHASE_GATED:
            fired = gate(report, cfg)
            if fired:
                if not self.matrices.has_residual(group_id):
                    flags.append(f"auto-created-residual:{group_id}")
                residual = tape.leaf(self.matrices.residual(group_id))
                phi_eff = tape.add(shared, residual)
                phin_eff, gflags = _normalize_phi(tape, phi_eff, scale_node)
                flags.extend(gflags)
                logits = routing_logits(tape, zn, phin_eff)

        d = dispatch_weights(tape, logits, cfg)
        c = combine_weights(tape, logits)
        y = apply_experts(tape, zn, d, c, self.experts, cfg.slots_per_expert)
        out = FusionOutput(
            y=y,
            dispatch=d.value.copy(),
            combine=c.value.copy(),
            report=report,
            gate_fired=fired,
            flags=flags,
        )
        return y, out


def fused_forward(block: FusionBlock, tape: Tape, token_grids: Sequence[Node],
                  group_ids: Sequence[int], phase: str) -> list[FusionOutput]:
    """Batch convenience wrapper over FusionBlock.forward."""
    outs = []
    for z, gid in zip(token_grids, group_ids):
        _, out = block.forward(tape, z, gid, phase)
        outs.append(out)
    return outs


# ---------------------------------------------------------------------------
# the full model


class RemindModel:
    """Encoders + embedding bank + fusion block + classification head."""

    def __init__(self, m: int, tokens_per_modality: int, raw_dims: Sequence[int],
                 classes: int, config: RouterConfig, seed: int = 0):
        config.validate()
        if len(raw_dims) != m:
            raise ValueError("raw_dims must hold one width per modality")
        self.m = m
        self.tokens_per_modality = tokens_per_modality
        self.raw_dims = tuple(int(r) for r in raw_dims)
        self.classes = classes
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        d = config.embed_dim
        self.encoders = [
            LinearEncoder(i, self.raw_dims[i], d, rng) for i in range(m)
        ]
        self.bank = EmbeddingBank(m, d, rng)
        self.block = FusionBlock(config, rng)
        self.head_w = Parameter("head/w", rng.normal(size=(d, classes)) / math.sqrt(d))
        self.head_b = Parameter("head/b", np.zeros((1, classes)))

    @classmethod
    def for_dataset(cls, spec: DatasetSpec, config: RouterConfig,
                    seed: int = 0) -> "RemindModel":
        if spec.embed_dim != config.embed_dim:
            raise ValueError(
                f"dataset embed_dim {spec.embed_dim} != router embed_dim "
                f"{config.embed_dim}"
            )
        return cls(spec.m, spec.tokens_per_modality, spec.raw_dims, spec.classes,
                   config, seed)

    # -- parameters ------------------------------------------------------

    def named_parameters(self) -> dict[str, Parameter]:
        ps: list[Parameter] = []
        for e in self.encoders:
            ps.extend(e.parameters())
        ps.extend(self.bank.parameters())
        ps.extend(self.block.parameters())
        ps.extend([self.head_w, self.head_b])
        return {p.name: p for p in ps}

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def parameter_subset(self, prefixes: Sequence[str]) -> list[Parameter]:
        named = self.named_parameters()
        chosen = [p for name, p in named.items()
                  if any(name.startswith(pre) for pre in prefixes)]
        if not chosen:
            raise ValueError(f"no parameters match prefixes {tuple(prefixes)}")
        return chosen

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- forward ---------------------------------------------------------

    def forward(self, tape: Tape, sample: Sample, phase: str) -> tuple[Node, FusionOutput]:
        """Class probabilities (1 x classes node) and the fusion diagnostics."""
        if not (0 <= sample.group_id < 2 ** self.m - 1):
            raise ValueError(
                f"group id {sample.group_id} out of range for m={self.m}"
            )
        grid = apply_missing(tape, sample, self.bank, self.encoders,
                             self.tokens_per_modality, self.config.embed_dim)
        y, out = self.block.forward(tape, grid, sample.group_id, phase)
        m_tokens = y.value.shape[0]
        pool = tape.constant(np.full((1, m_tokens), 1.0 / m_tokens))
        pooled = tape.matmul(pool, y)
        logits = tape.add(tape.matmul(pooled, tape.leaf(self.head_w)),
                          tape.leaf(self.head_b))
        probs = tape.row_softmax(logits)
        return probs, out

    def predict(self, sample: Sample, phase: str) -> tuple[int, np.ndarray, FusionOutput]:
        tape = Tape()
        probs, out = self.forward(tape, sample, phase)
        p = probs.value[0]
        return int(p.argmax()), p.copy(), out


# ---------------------------------------------------------------------------
# checkpoint io (bit-exact round trip)


def _encode_array(a: np.ndarray) -> dict:
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode(),
    }


def _decode_array(d: dict) -> np.ndarray:
    a = np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").copy()
    return a.reshape(d["shape"])


def encode_tree(obj):
    """JSON-safe deep copy of nested dicts/lists; ndarrays become base64 blobs."""
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": _encode_array(obj)}
    if isinstance(obj, dict):
        return {k: encode_tree(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [encode_tree(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def decode_tree(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj and len(obj) == 1:
            return _decode_array(obj["__ndarray__"])
        return {k: decode_tree(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [decode_tree(v) for v in obj]
    return obj


def save_checkpoint(model: RemindModel, path, extra: dict | None = None) -> None:
    """JSON checkpoint: config, dims, and every parameter as base64 float64.

    Residual routing matrices and bank vectors carry their group bitmask in
    the parameter name (``router/res/mc<bitmask>``, ``bank/mc<bitmask>``).
    """
    doc = {
        "format": CHECKPOINT_MAGIC,
        "dims": {
            "m": model.m,
            "tokens_per_modality": model.tokens_per_modality,
            "raw_dims": list(model.raw_dims),
            "classes": model.classes,
        },
        "router_config": model.config.to_dict(),
        "params": {name: _encode_array(p.value)
                   for name, p in sorted(model.named_parameters().items())},
        "extra": extra or {},
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)


def load_checkpoint(path) -> tuple[RemindModel, dict]:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    dims = doc["dims"]
    config = RouterConfig.from_dict(doc["router_config"])
    model = RemindModel(dims["m"], dims["tokens_per_modality"], dims["raw_dims"],
                        dims["classes"], config, seed=0)
    named = model.named_parameters()
    for name, enc in doc["params"].items():
        if name.startswith("router/res/mc"):
            gid = int(name.removeprefix("router/res/mc")) - 1
            param = model.block.matrices.residual(gid)
        else:
            if name not in named:
                raise ValueError(f"checkpoint parameter {name!r} has no home")
            param = named[name]
        value = _decode_array(enc)
        if value.shape != param.value.shape:
            raise ValueError(
                f"checkpoint parameter {name!r} has shape {value.shape}, "
                f"expected {param.value.shape}"
            )
        param.value[...] = value
    return model, doc["extra"]
