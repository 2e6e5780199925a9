"""Experiment runner: generate / train / analyze / protocol / sweep.

Configs are YAML with strict validation: unknown keys are errors, every
section is checked against its module's invariants before anything is
written, and reruns with the same config and seed reproduce byte-identical
outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import drotrain, evalharness, gradanalysis, synthdata
from .drotrain import TrainConfig
from .moefusion import (PHASE_GATED, PHASE_SHARED, RemindModel, RouterConfig,
                        decode_tree, encode_tree, load_checkpoint,
                        save_checkpoint)
from .synthdata import ConceptShift, DatasetSpec

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


# ---------------------------------------------------------------------------
# config schema


_DATASET_KEYS = {
    "m", "missing_prob", "tokens_per_modality", "embed_dim", "raw_dims",
    "classes", "n_samples", "concept_shift", "seed", "concept_seed",
    "missing_correlation", "tail_threshold", "eval_samples", "eval_seed",
}
_CONCEPT_KEYS = {"kind", "label_noise", "synergy_pair"}
_ROUTER_KEYS = {
    "embed_dim", "n_experts", "slots_per_expert", "scale_init",
    "gating_metric", "threshold", "expert_hidden", "dispatch_axis",
    "entropy_granularity", "expert_activation",
}
_TRAIN_KEYS = {
    "mode", "gamma", "lr", "optimizer", "weight_decay", "refresh_period",
    "warmup_steps", "stage2_start", "batch_size", "max_steps", "loss",
    "focal_gamma", "sampler", "lr_decay_every", "lr_decay_factor", "seed",
    "model_seed", "checkpoint_every",
}
_ANALYSIS_KEYS = {"samples_per_group", "top_k", "whole_direction", "seed"}
_PROTOCOL_KEYS = {
    "name", "modality_index", "rate", "heldout_bitmask", "scopes",
    "adapt_steps", "adapt_lr", "seed", "n_samples",
}
_TOP_KEYS = {"dataset", "router", "train", "analysis", "protocol",
             "output_dir", "seeds", "sweep_modes", "sweep_analyze"}


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


@dataclass
class AnalysisConfig:
    samples_per_group: int = 32
    top_k: int = 3
    whole_direction: str = "union"
    seed: int = 0

    def validate(self) -> None:
        if self.samples_per_group < 1:
            raise ConfigError("analysis.samples_per_group must be >= 1")
        if self.top_k < 1:
            raise ConfigError("analysis.top_k must be >= 1")
        if self.whole_direction not in ("union", "empirical"):
            raise ConfigError(
                f"analysis.whole_direction must be union|empirical, "
                f"got {self.whole_direction!r}"
            )


@dataclass
class ProtocolConfig:
    name: str = "extreme-missingness"
    modality_index: int = 0
    rate: float = 0.8
    heldout_bitmask: int | None = None
    scopes: tuple[str, ...] = ("nothing", "head", "head+router")
    adapt_steps: int = 50
    adapt_lr: float | None = None
    seed: int = 0
    n_samples: int | None = None

    def validate(self, m: int) -> None:
        if self.name not in ("extreme-missingness", "unseen-mc"):
            raise ConfigError(f"unknown protocol {self.name!r}")
        if self.name == "extreme-missingness":
            if not (0 <= self.modality_index < m):
                raise ConfigError(
                    f"protocol.modality_index {self.modality_index} out of range"
                )
            if not (0.0 <= self.rate < 1.0):
                raise ConfigError(f"protocol.rate {self.rate} outside [0, 1)")
        else:
            if self.heldout_bitmask is None:
                raise ConfigError("unseen-mc protocol needs heldout_bitmask")
            if not (1 <= self.heldout_bitmask < 2 ** m):
                raise ConfigError(
                    f"protocol.heldout_bitmask {self.heldout_bitmask} out of range"
                )
            for s in self.scopes:
                evalharness.parse_scope(s)
        if self.adapt_steps < 0:
            raise ConfigError("protocol.adapt_steps must be >= 0")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec
    router: RouterConfig
    train: TrainConfig
    analysis: AnalysisConfig
    protocol: ProtocolConfig
    output_dir: str
    seeds: tuple[int, ...]
    sweep_modes: tuple[str, ...]
    sweep_analyze: bool
    eval_samples: int
    eval_seed: int
    model_seed: int
    checkpoint_every: int | None

    def eval_spec(self, n_samples: int | None = None) -> DatasetSpec:
        return dataclasses.replace(
            self.dataset, seed=self.eval_seed,
            n_samples=n_samples or self.eval_samples,
        )


def _build_config(doc: dict, seed_override: int | None,
                  out_override: str | None) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys(doc, _TOP_KEYS, "config")
    if "dataset" not in doc:
        raise ConfigError("config needs a dataset section")
    ds = dict(doc["dataset"])
    _check_keys(ds, _DATASET_KEYS, "dataset")
    cs_raw = dict(ds.pop("concept_shift", {}))
    _check_keys(cs_raw, _CONCEPT_KEYS, "dataset.concept_shift")
    eval_samples = ds.pop("eval_samples", None)
    eval_seed = ds.pop("eval_seed", None)
    if seed_override is not None:
        ds["seed"] = seed_override
    try:
        cs = ConceptShift(
            kind=cs_raw.get("kind", "linear"),
            label_noise=float(cs_raw.get("label_noise", 0.0)),
            synergy_pair=tuple(cs_raw.get("synergy_pair", (0, 1))),
        )
        spec = DatasetSpec(concept_shift=cs, **ds)
        spec.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"dataset: {e}") from None

    rt = dict(doc.get("router", {}))
    _check_keys(rt, _ROUTER_KEYS, "router")
    rt.setdefault("embed_dim", spec.embed_dim)
    try:
        router = RouterConfig(**rt)
        router.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"router: {e}") from None
    if router.embed_dim != spec.embed_dim:
        raise ConfigError(
            f"router.embed_dim {router.embed_dim} != dataset.embed_dim "
            f"{spec.embed_dim}"
        )

    tr = dict(doc.get("train", {}))
    _check_keys(tr, _TRAIN_KEYS, "train")
    model_seed = tr.pop("model_seed", None)
    checkpoint_every = tr.pop("checkpoint_every", None)
    if seed_override is not None:
        tr["seed"] = seed_override
    try:
        train_cfg = TrainConfig(**tr)
        train_cfg.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train: {e}") from None
    if checkpoint_every is not None and checkpoint_every < 1:
        raise ConfigError("train.checkpoint_every must be >= 1")

    an = dict(doc.get("analysis", {}))
    _check_keys(an, _ANALYSIS_KEYS, "analysis")
    if seed_override is not None:
        an["seed"] = seed_override
    try:
        analysis = AnalysisConfig(**an)
        analysis.validate()
    except TypeError as e:
        raise ConfigError(f"analysis: {e}") from None

    pr = dict(doc.get("protocol", {}))
    _check_keys(pr, _PROTOCOL_KEYS, "protocol")
    if "scopes" in pr:
        pr["scopes"] = tuple(pr["scopes"])
    if seed_override is not None:
        pr["seed"] = seed_override
    try:
        protocol = ProtocolConfig(**pr)
        protocol.validate(spec.m)
    except TypeError as e:
        raise ConfigError(f"protocol: {e}") from None

    seeds = doc.get("seeds", [0, 1, 2])
    if not isinstance(seeds, (list, tuple)) or not seeds or not all(
        isinstance(s, int) for s in seeds
    ):
        raise ConfigError("seeds must be a non-empty list of integers")
    sweep_modes = doc.get("sweep_modes", [train_cfg.mode])
    for mode in sweep_modes:
        if mode not in drotrain.MODES:
            raise ConfigError(f"sweep_modes: unknown mode {mode!r}")

    out = out_override or doc.get("output_dir")
    if not out:
        raise ConfigError("output_dir missing (set it in the config or pass --out)")

    return ExperimentConfig(
        dataset=spec,
        router=router,
        train=train_cfg,
        analysis=analysis,
        protocol=protocol,
        output_dir=str(out),
        seeds=tuple(seeds),
        sweep_modes=tuple(sweep_modes),
        sweep_analyze=bool(doc.get("sweep_analyze", True)),
        eval_samples=int(eval_samples if eval_samples is not None
                         else max(200, spec.n_samples // 4)),
        eval_seed=int(eval_seed if eval_seed is not None else spec.seed + 7919),
        model_seed=int(model_seed if model_seed is not None
                       else train_cfg.seed + 10000),
        checkpoint_every=checkpoint_every,
    )


def load_config(path, seed_override: int | None = None,
                out_override: str | None = None) -> ExperimentConfig:
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from None
    return _build_config(doc or {}, seed_override, out_override)


# ---------------------------------------------------------------------------
# subcommands


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(cfg: ExperimentConfig) -> int:
    ds = synthdata.sample_dataset(cfg.dataset)
    out = _out_dir(cfg)
    synthdata.save_dataset(ds, out / "dataset.txt")
    synthdata.save_histogram_csv(ds, out / "histogram.csv")
    for w in ds.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {out / 'dataset.txt'} ({len(ds.samples)} samples, "
          f"{ds.spec.n_groups} groups)")
    return EXIT_OK


def _load_dataset_checked(cfg: ExperimentConfig, out: Path) -> synthdata.SyntheticDataset:
    path = out / "dataset.txt"
    if not path.exists():
        raise ConfigError(f"dataset file missing: {path} (run generate first)")
    ds = synthdata.load_dataset(path)
    if ds.spec.to_dict() != cfg.dataset.to_dict():
        raise ConfigError(
            "dataset on disk was generated from a different dataset section; "
            "regenerate or fix the config"
        )
    return ds


def _checkpoint_path(out: Path, step: int) -> Path:
    return out / "checkpoints" / f"step_{step:06d}.json"


def _list_checkpoints(out: Path) -> list[tuple[int, Path]]:
    cdir = out / "checkpoints"
    if not cdir.is_dir():
        return []
    found = []
    for p in sorted(cdir.glob("step_*.json")):
        found.append((int(p.stem.removeprefix("step_")), p))
    return sorted(found)


def cmd_train(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    ds = _load_dataset_checked(cfg, out)
    (out / "checkpoints").mkdir(exist_ok=True)

    resume_state = None
    model = None
    existing = _list_checkpoints(out)
    if existing:
        step, path = existing[-1]
        model, extra = load_checkpoint(path)
        state = decode_tree(extra["train_state"])
        if state["train_config"] != cfg.train.to_dict():
            raise ConfigError(
                "existing checkpoints were trained with a different train "
                "section; use a fresh output dir"
            )
        resume_state = state
        print(f"resuming from checkpoint at step {step}")
    else:
        model = RemindModel.for_dataset(ds.spec, cfg.router, seed=cfg.model_seed)

    def on_checkpoint(step: int, stage: int, train_state: dict) -> None:
        save_checkpoint(model, _checkpoint_path(out, step),
                        extra={"train_state": encode_tree(train_state)})

    result = drotrain.train(
        ds, model, cfg.train,
        on_checkpoint=on_checkpoint,
        checkpoint_every=cfg.checkpoint_every,
        resume_state=resume_state,
    )
    result.history.to_csv(out / "history.csv")
    for d in result.diagnostics:
        print(f"diagnostic: {d}", file=sys.stderr)

    eval_ds = synthdata.sample_dataset(cfg.eval_spec())
    phase = PHASE_GATED if result.stage == 2 else PHASE_SHARED
    metrics = evalharness.evaluate(result.model, eval_ds, phase)
    evalharness.write_metrics_json(
        {"mode": cfg.train.mode, "seed": cfg.train.seed,
         "steps": result.final_step, "stage": result.stage,
         "metrics": metrics.to_dict()},
        out / "final_metrics.json")
    evalharness.write_metrics_csv(metrics, out / "final_metrics.csv")
    print(f"trained {result.final_step} steps (stage {result.stage}); "
          f"eval accuracy {metrics.overall_accuracy:.4f}")
    return EXIT_OK


def _checkpoints_for_analysis(out: Path) -> list[tuple[int, RemindModel, str]]:
    entries = _list_checkpoints(out)
    if not entries:
        raise ConfigError(f"no checkpoints under {out / 'checkpoints'}")
    loaded = []
    for step, path in entries:
        model, extra = load_checkpoint(path)
        state = decode_tree(extra["train_state"])
        phase = PHASE_GATED if state.get("stage", 1) == 2 else PHASE_SHARED
        loaded.append((step, model, phase))
    return loaded


def cmd_analyze(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    ds = _load_dataset_checked(cfg, out)
    checkpoints = _checkpoints_for_analysis(out)
    records = gradanalysis.track(
        checkpoints, ds,
        samples_per_group=cfg.analysis.samples_per_group,
        seed=cfg.analysis.seed,
        whole_direction=cfg.analysis.whole_direction,
        loss=cfg.train.loss, focal_gamma=cfg.train.focal_gamma,
    )
    gradanalysis.write_consistency_csv(records, out / "consistency.csv")

    step, model, phase = checkpoints[-1]
    spec_matrix = evalharness.specialization(model, ds, cfg.analysis.top_k, phase)
    evalharness.write_specialization_csv(spec_matrix, out / "specialization.csv")
    evalharness.write_specialization_grid(spec_matrix, out / "specialization.txt")
    print(f"analyzed {len(checkpoints)} checkpoints "
          f"({len(records)} consistency records)")
    return EXIT_OK


def cmd_protocol(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    name = cfg.protocol.name
    if name == "extreme-missingness":
        n = cfg.protocol.n_samples or cfg.dataset.n_samples
        full_spec = dataclasses.replace(
            cfg.dataset, missing_prob=(0.0,) * cfg.dataset.m, n_samples=n)
        eval_spec = dataclasses.replace(
            full_spec, seed=cfg.eval_seed, n_samples=cfg.eval_samples)
        doc = evalharness.extreme_missingness(
            model_factory=lambda: RemindModel.for_dataset(
                full_spec, cfg.router, seed=cfg.model_seed),
            dataset_full=synthdata.sample_dataset(full_spec),
            modality_index=cfg.protocol.modality_index,
            rate=cfg.protocol.rate,
            train_config=cfg.train,
            seed=cfg.protocol.seed,
            eval_full=synthdata.sample_dataset(eval_spec),
        )
    else:
        ds = _load_dataset_checked(cfg, out)
        model = RemindModel.for_dataset(ds.spec, cfg.router, seed=cfg.model_seed)
        doc = evalharness.unseen_mc_protocol(
            model, ds, cfg.protocol.heldout_bitmask,
            cfg.protocol.scopes, cfg.train,
            adapt_steps=cfg.protocol.adapt_steps,
            adapt_lr=cfg.protocol.adapt_lr,
            seed=cfg.protocol.seed,
        )
    evalharness.write_metrics_json(doc, out / f"protocol_{name}.json")
    _protocol_csv(doc, out / f"protocol_{name}.csv")
    print(f"wrote {out / f'protocol_{name}.json'}")
    return EXIT_OK


def _protocol_csv(doc: dict, path) -> None:
    import csv as _csv
    with open(path, "w", newline="") as f:
        w = _csv.writer(f)
        if doc["protocol"] == "extreme-missingness":
            w.writerow(["block", "accuracy", "macro_f1", "support"])
            for block in ("overall", "available", "absent"):
                d = doc[block]
                if "overall" in d:
                    w.writerow([block, repr(d["overall"]["accuracy"]),
                                repr(d["overall"]["macro_f1"]),
                                d["overall"]["support"]])
                else:
                    w.writerow([block, "", "", ""])
        else:
            w.writerow(["scope", "final_adapt_loss", "test_accuracy",
                        "test_macro_f1", "test_support"])
            for s in doc["scopes"]:
                m = s["test_metrics"]["overall"]
                w.writerow([s["scope"], repr(s["final_adapt_loss"]),
                            repr(m["accuracy"]), repr(m["macro_f1"]),
                            m["support"]])


def _run_for_sweep(cfg: ExperimentConfig, mode: str, seed: int,
                   run_dir: Path) -> None:
    run_cfg = dataclasses.replace(
        cfg,
        dataset=dataclasses.replace(cfg.dataset, seed=cfg.dataset.seed + seed),
        train=dataclasses.replace(cfg.train, mode=mode, seed=cfg.train.seed + seed),
        model_seed=cfg.model_seed + seed,
        eval_seed=cfg.eval_seed + seed,
        output_dir=str(run_dir),
    )
    dataset_file = run_dir / "dataset.txt"
    if not dataset_file.exists():
        cmd_generate(run_cfg)
    cmd_train(run_cfg)
    if cfg.sweep_analyze:
        cmd_analyze(run_cfg)


def cmd_sweep(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    runs: dict[tuple[str, int], Path] = {}
    for seed in cfg.seeds:
        for mode in cfg.sweep_modes:
            run_dir = out / f"seed_{seed}" / mode
            run_dir.mkdir(parents=True, exist_ok=True)
            shared_dataset = out / f"seed_{seed}" / "dataset.txt"
            # one dataset per seed, shared across modes for a fair comparison
            if not (run_dir / "dataset.txt").exists():
                if not shared_dataset.exists():
                    gen_cfg = dataclasses.replace(
                        cfg,
                        dataset=dataclasses.replace(
                            cfg.dataset, seed=cfg.dataset.seed + seed),
                        output_dir=str(out / f"seed_{seed}"),
                    )
                    cmd_generate(gen_cfg)
                (run_dir / "dataset.txt").write_bytes(shared_dataset.read_bytes())
            _run_for_sweep(cfg, mode, seed, run_dir)
            runs[(mode, seed)] = run_dir
    _emit_sweep_tables(cfg, runs, out)
    print(f"sweep finished: {len(runs)} runs")
    return EXIT_OK


def _emit_sweep_tables(cfg: ExperimentConfig, runs: dict[tuple[str, int], Path],
                       out: Path) -> None:
    """Mean/std per-group metric tables: rows = groups + overall, cols = modes."""
    import csv as _csv
    per_run: dict[tuple[str, int], dict] = {}
    for key, run_dir in runs.items():
        with open(run_dir / "final_metrics.json") as f:
            per_run[key] = json.load(f)["metrics"]

    n_groups = cfg.dataset.n_groups
    tables_dir = out / "tables"
    tables_dir.mkdir(exist_ok=True)
    for metric in ("accuracy", "macro_f1"):
        stats: dict[str, dict[str, tuple[float, float] | None]] = {}
        for mode in cfg.sweep_modes:
            col: dict[str, tuple[float, float] | None] = {}
            for gid in range(n_groups):
                vals = []
                for seed in cfg.seeds:
                    groups = per_run[(mode, seed)]["groups"]
                    hit = [g for g in groups if g["group_id"] == gid]
                    if hit:
                        vals.append(hit[0][metric])
                col[f"mc{gid + 1}"] = (
                    (float(np.mean(vals)), float(np.std(vals))) if vals else None
                )
            overall = [per_run[(mode, seed)]["overall"][metric]
                       for seed in cfg.seeds]
            col["overall"] = (float(np.mean(overall)), float(np.std(overall)))
            stats[mode] = col
        short = "acc" if metric == "accuracy" else "f1"
        for agg, pick in (("mean", 0), ("std", 1)):
            with open(tables_dir / f"{short}_{agg}.csv", "w", newline="") as f:
                w = _csv.writer(f)
                w.writerow(["group"] + list(cfg.sweep_modes))
                for gid in range(n_groups):
                    row = [f"mc{gid + 1}"]
                    for mode in cfg.sweep_modes:
                        cell = stats[mode][f"mc{gid + 1}"]
                        row.append("" if cell is None else f"{cell[pick]:.4f}")
                    w.writerow(row)
                w.writerow(["overall"] + [
                    f"{stats[mode]['overall'][pick]:.4f}"
                    for mode in cfg.sweep_modes
                ])


# ---------------------------------------------------------------------------
# entry point


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "analyze": cmd_analyze,
    "protocol": cmd_protocol,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="remind",
        description="Long-tailed missing-modality fusion lab: data generation, "
                    "robust MoE training, gradient-consistency analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None,
                       help="override every seed in the config")
        p.add_argument("--out", default=None, help="override output_dir")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, args.seed, args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return _COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
