import json
from pathlib import Path

import pytest
import yaml

import remind.drotrain
from remind.cli import EXIT_OK, EXIT_VALIDATION, load_config, main


def base_config(**top_overrides) -> dict:
    doc = {
        "dataset": {
            "m": 2,
            "missing_prob": [0.3, 0.6],
            "tokens_per_modality": 1,
            "embed_dim": 6,
            "raw_dims": [3, 3],
            "classes": 2,
            "n_samples": 150,
            "seed": 0,
            "eval_samples": 60,
        },
        "router": {"n_experts": 3, "expert_hidden": 4},
        "train": {
            "mode": "remind",
            "gamma": 0.5,
            "lr": 0.05,
            "warmup_steps": 4,
            "stage2_start": 10,
            "batch_size": 8,
            "max_steps": 20,
            "checkpoint_every": 5,
            "seed": 0,
        },
        "analysis": {"samples_per_group": 6, "top_k": 2},
        "protocol": {"name": "extreme-missingness", "modality_index": 1,
                     "rate": 0.8, "n_samples": 80},
        "output_dir": "out",
        "seeds": [0, 1],
    }
    doc.update(top_overrides)
    return doc


def write_config(tmp_path: Path, doc: dict, name="config.yaml") -> Path:
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return path


def run(cmd, cfg_path, out, seed=None):
    argv = [cmd, "--config", str(cfg_path), "--out", str(out)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    return main(argv)


# ---------------------------------------------------------------------------
# config validation


def test_unknown_top_level_key_rejected(tmp_path):
    cfg = write_config(tmp_path, base_config(extra_section={"a": 1}))
    assert run("generate", cfg, tmp_path / "out") == EXIT_VALIDATION


def test_unknown_nested_key_rejected(tmp_path):
    doc = base_config()
    doc["train"]["learning_rate"] = 0.1  # typo for lr
    cfg = write_config(tmp_path, doc)
    assert run("train", cfg, tmp_path / "out") == EXIT_VALIDATION


def test_invalid_dataset_rejected_before_any_output(tmp_path):
    doc = base_config()
    doc["dataset"]["m"] = 0
    doc["dataset"]["missing_prob"] = []
    doc["dataset"]["raw_dims"] = []
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "out"
    assert run("generate", cfg, out) == EXIT_VALIDATION
    assert not out.exists()


def test_router_dim_mismatch_rejected(tmp_path):
    doc = base_config()
    doc["router"]["embed_dim"] = 12
    cfg = write_config(tmp_path, doc)
    assert run("train", cfg, tmp_path / "out") == EXIT_VALIDATION


def test_entropy_threshold_out_of_range_rejected(tmp_path):
    doc = base_config()
    doc["router"]["threshold"] = 99.0
    cfg = write_config(tmp_path, doc)
    assert run("generate", cfg, tmp_path / "out") == EXIT_VALIDATION


def test_missing_config_file(tmp_path):
    assert run("generate", tmp_path / "nope.yaml", tmp_path / "out") == \
        EXIT_VALIDATION


def test_seed_override_propagates(tmp_path):
    cfg_path = write_config(tmp_path, base_config())
    cfg = load_config(cfg_path, seed_override=42)
    assert cfg.dataset.seed == 42
    assert cfg.train.seed == 42
    assert cfg.protocol.seed == 42


# ---------------------------------------------------------------------------
# generate


def test_generate_outputs_and_determinism(tmp_path):
    cfg = write_config(tmp_path, base_config())
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert run("generate", cfg, out1) == EXIT_OK
    assert run("generate", cfg, out2) == EXIT_OK
    assert (out1 / "dataset.txt").exists()
    hist = (out1 / "histogram.csv").read_text().strip().splitlines()
    assert len(hist) == 1 + 3  # header + 2^2 - 1 groups
    assert (out1 / "dataset.txt").read_bytes() == (out2 / "dataset.txt").read_bytes()
    assert (out1 / "histogram.csv").read_bytes() == (out2 / "histogram.csv").read_bytes()


def test_generate_rerun_same_dir_identical(tmp_path):
    cfg = write_config(tmp_path, base_config())
    out = tmp_path / "out"
    run("generate", cfg, out)
    first = (out / "dataset.txt").read_bytes()
    run("generate", cfg, out)
    assert (out / "dataset.txt").read_bytes() == first


# ---------------------------------------------------------------------------
# train


def test_train_requires_dataset(tmp_path):
    cfg = write_config(tmp_path, base_config())
    assert run("train", cfg, tmp_path / "out") == EXIT_VALIDATION


def test_train_outputs_and_cadence(tmp_path):
    cfg = write_config(tmp_path, base_config())
    out = tmp_path / "out"
    run("generate", cfg, out)
    assert run("train", cfg, out) == EXIT_OK
    steps = sorted(int(p.stem.removeprefix("step_"))
                   for p in (out / "checkpoints").glob("step_*.json"))
    assert steps == [0, 5, 10, 15, 20]
    assert (out / "history.csv").exists()
    doc = json.loads((out / "final_metrics.json").read_text())
    assert doc["steps"] == 20
    assert 0.0 <= doc["metrics"]["overall"]["accuracy"] <= 1.0


def test_train_zero_steps_initial_checkpoint_only(tmp_path):
    doc = base_config()
    doc["train"]["max_steps"] = 0
    doc["train"]["warmup_steps"] = 0
    doc["train"]["stage2_start"] = 0
    doc["train"].pop("checkpoint_every")
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "out"
    run("generate", cfg, out)
    assert run("train", cfg, out) == EXIT_OK
    steps = [p.name for p in (out / "checkpoints").glob("step_*.json")]
    assert steps == ["step_000000.json"]


def test_train_dataset_spec_drift_rejected(tmp_path):
    cfg = write_config(tmp_path, base_config())
    out = tmp_path / "out"
    run("generate", cfg, out)
    doc = base_config()
    doc["dataset"]["n_samples"] = 151
    cfg2 = write_config(tmp_path, doc, name="other.yaml")
    assert run("train", cfg2, out) == EXIT_VALIDATION


def test_train_interrupted_resume_matches_uninterrupted(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, base_config())
    ref, resumed = tmp_path / "ref", tmp_path / "resumed"
    run("generate", cfg, ref)
    run("generate", cfg, resumed)
    assert run("train", cfg, ref) == EXIT_OK

    real_train = remind.drotrain.train

    def interrupted(*args, **kwargs):
        kwargs["stop_after_step"] = 10
        return real_train(*args, **kwargs)

    monkeypatch.setattr(remind.drotrain, "train", interrupted)
    assert run("train", cfg, resumed) == EXIT_OK
    monkeypatch.setattr(remind.drotrain, "train", real_train)
    assert run("train", cfg, resumed) == EXIT_OK

    for name in ("checkpoints/step_000020.json", "history.csv",
                 "final_metrics.json", "final_metrics.csv"):
        assert (ref / name).read_bytes() == (resumed / name).read_bytes(), name


def test_train_rerun_completed_dir_is_stable(tmp_path):
    cfg = write_config(tmp_path, base_config())
    out = tmp_path / "out"
    run("generate", cfg, out)
    run("train", cfg, out)
    before = {p.name: p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert run("train", cfg, out) == EXIT_OK
    after = {p.name: p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert before == after


# ---------------------------------------------------------------------------
# analyze


def test_analyze_outputs(tmp_path):
    cfg = write_config(tmp_path, base_config())
    out = tmp_path / "out"
    run("generate", cfg, out)
    run("train", cfg, out)
    assert run("analyze", cfg, out) == EXIT_OK
    lines = (out / "consistency.csv").read_text().strip().splitlines()
    assert lines[0] == "step,group_bitmask,gc,n_used,flags"
    assert len(lines) > 5
    assert (out / "specialization.csv").exists()
    assert (out / "specialization.txt").exists()


def test_analyze_single_group_gc_one(tmp_path):
    doc = base_config()
    doc["dataset"]["missing_prob"] = [0.0, 0.0]   # only the full group exists
    doc["train"]["max_steps"] = 0
    doc["train"]["warmup_steps"] = 0
    doc["train"]["stage2_start"] = 0
    doc["train"].pop("checkpoint_every")
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "out"
    run("generate", cfg, out)
    run("train", cfg, out)
    assert run("analyze", cfg, out) == EXIT_OK
    rows = (out / "consistency.csv").read_text().strip().splitlines()[1:]
    group_rows = [r for r in rows if not r.startswith("0,ALL")]
    assert len(rows) == 2  # ALL row + the single group
    for row in rows:
        assert float(row.split(",")[2]) == pytest.approx(1.0, abs=1e-9)


def test_analyze_without_checkpoints_fails(tmp_path):
    cfg = write_config(tmp_path, base_config())
    out = tmp_path / "out"
    run("generate", cfg, out)
    assert run("analyze", cfg, out) == EXIT_VALIDATION


# ---------------------------------------------------------------------------
# protocol


def test_protocol_extreme_missingness_blocks(tmp_path):
    doc = base_config()
    doc["train"]["max_steps"] = 10
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "out"
    assert run("protocol", cfg, out) == EXIT_OK
    result = json.loads((out / "protocol_extreme-missingness.json").read_text())
    assert {"overall", "available", "absent"} <= set(result)
    csv_lines = (out / "protocol_extreme-missingness.csv").read_text().splitlines()
    assert len(csv_lines) == 4


def test_protocol_rate_one_rejected(tmp_path):
    doc = base_config()
    doc["protocol"]["rate"] = 1.0
    cfg = write_config(tmp_path, doc)
    assert run("protocol", cfg, tmp_path / "out") == EXIT_VALIDATION


def test_protocol_unseen_mc_blocks(tmp_path):
    doc = base_config()
    doc["dataset"]["missing_prob"] = [0.1, 0.5]
    doc["dataset"]["n_samples"] = 200
    doc["train"]["max_steps"] = 12
    doc["protocol"] = {"name": "unseen-mc", "heldout_bitmask": 3,
                       "scopes": ["nothing", "head"], "adapt_steps": 5}
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "out"
    run("generate", cfg, out)
    assert run("protocol", cfg, out) == EXIT_OK
    result = json.loads((out / "protocol_unseen-mc.json").read_text())
    assert [s["scope"] for s in result["scopes"]] == ["nothing", "head"]


def test_protocol_unknown_name_rejected(tmp_path):
    doc = base_config()
    doc["protocol"]["name"] = "mystery"
    cfg = write_config(tmp_path, doc)
    assert run("protocol", cfg, tmp_path / "out") == EXIT_VALIDATION


def test_protocol_determinism(tmp_path):
    doc = base_config()
    doc["train"]["max_steps"] = 8
    cfg = write_config(tmp_path, doc)
    out1, out2 = tmp_path / "p1", tmp_path / "p2"
    run("protocol", cfg, out1)
    run("protocol", cfg, out2)
    name = "protocol_extreme-missingness.json"
    assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


# ---------------------------------------------------------------------------
# sweep


def test_sweep_runs_and_emits_tables(tmp_path):
    doc = base_config()
    doc["train"]["max_steps"] = 10
    doc["train"]["checkpoint_every"] = 5
    doc["seeds"] = [0, 1]
    doc["sweep_modes"] = ["remind", "shared-moe-ablation"]
    doc["sweep_analyze"] = False
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "out"
    assert run("sweep", cfg, out) == EXIT_OK
    for seed in (0, 1):
        for mode in ("remind", "shared-moe-ablation"):
            assert (out / f"seed_{seed}" / mode / "final_metrics.json").exists()
    for table in ("acc_mean.csv", "acc_std.csv", "f1_mean.csv", "f1_std.csv"):
        lines = (out / "tables" / table).read_text().strip().splitlines()
        assert lines[0] == "group,remind,shared-moe-ablation"
        assert lines[-1].startswith("overall,")
        assert len(lines) == 1 + 3 + 1  # header + groups + overall
