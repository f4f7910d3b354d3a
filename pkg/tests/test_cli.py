import json

import numpy as np
import pytest

from fedgp.cli import ConfigError, config_problems, default_config, main, resolve_config, summarize
from fedgp.deep_kernel import init_params
from fedgp.federation import ServerState, gaussian_blobs, save_dataset
from fedgp.inducing import InducingSet
from fedgp.io import (
    append_record,
    dumps,
    load_checkpoint,
    read_json,
    read_records,
    save_checkpoint,
    state_from_dict,
    state_to_dict,
)

FAST = ["--set", "gibbs.train_chains=3", "--set", "gibbs.test_chains=4", "--set", "gibbs.burn_in=2",
        "--set", "gibbs.steps_between_samples=2", "--set", "federation.clients_per_round=2", "--quiet"]


@pytest.fixture
def run_dir(tmp_path):
    data = tmp_path / "d.csv"
    save_dataset(gaussian_blobs(4, 30, np.random.default_rng(0)), data)
    run = tmp_path / "run"
    assert main(["partition", "--data", str(data), "--out", str(run), "--clients", "4", "--seed", "1"]) == 0
    return run


def test_checkpoint_roundtrip_bytes(tmp_path, rng):
    p = init_params((3, 4, 2), rng)
    state = ServerState(p, InducingSet(rng.standard_normal((4, 2)), [0, 0, 1, 1]), 7)
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_checkpoint(a, state, {"x": 1})
    loaded, cfg = load_checkpoint(a)
    save_checkpoint(b, loaded, cfg)
    assert a.read_bytes() == b.read_bytes()
    assert np.array_equal(loaded.params.to_vector(), p.to_vector())
    assert loaded.round == 7 and cfg == {"x": 1}


def test_local_checkpoint_roundtrip(tmp_path, rng):
    states = {2: ServerState(init_params((2, 2), rng)), 0: ServerState(init_params((2, 2), rng))}
    save_checkpoint(tmp_path / "c.json", states)
    back, _ = load_checkpoint(tmp_path / "c.json")
    assert sorted(back) == [0, 2]
    assert np.array_equal(back[2].params.to_vector(), states[2].params.to_vector())


def test_state_dict_exact_floats(rng):
    p = init_params((2, 3), rng)
    d = json.loads(dumps(state_to_dict(ServerState(p))))
    assert np.array_equal(state_from_dict(d).params.to_vector(), p.to_vector())


def test_wrong_format_rejected(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError, match="expected format"):
        load_checkpoint(tmp_path / "x.json")


def test_records_append(tmp_path):
    p = tmp_path / "r.jsonl"
    append_record({"round": 0, "v": np.float64(0.5)}, p)
    append_record({"round": 1}, p)
    recs = read_records(p)
    assert [r["round"] for r in recs] == [0, 1] and recs[0]["v"] == 0.5
    assert read_records(tmp_path / "missing.jsonl") == []


def test_config_lists_every_problem():
    cfg = default_config()
    cfg["tree"]["variant"] = "nope"
    cfg["gibbs"]["burn_in"] = 0
    cfg["gibbs"]["test_chains"] = "many"
    cfg["federation"]["aggregation"] = "median"
    cfg["kernel"]["bogus"] = 1
    cfg["extra"] = {}
    bad = "\n".join(config_problems(cfg))
    for key in ("tree.variant", "gibbs.burn_in", "gibbs.test_chains", "federation.aggregation", "kernel.bogus",
                "extra"):
        assert key in bad


def test_config_cross_field():
    with pytest.raises(ConfigError, match="predictive objective only"):
        resolve_config(None, ["tree.variant=\"ip-data\"", "tree.objective=\"marginal\""])
    with pytest.raises(ConfigError, match="inducing_per_class"):
        resolve_config(None, ["tree.variant=\"ip-compute\"", "model.inducing_per_class=0"])


def test_config_file_and_override(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"federation": {"rounds": 3, "lr": 0.1}}))
    cfg = resolve_config(p, ["federation.lr=0.2", "tree.variant=ip-data"])
    assert cfg["federation"]["rounds"] == 3 and cfg["federation"]["lr"] == 0.2
    assert cfg["tree"]["variant"] == "ip-data"
    assert cfg["kernel"] == default_config()["kernel"]


def test_summarize_hand_arithmetic():
    mean, sem = summarize([0.80, 0.85, 0.90])
    assert np.isclose(mean, 0.85)
    assert np.isclose(sem, 0.05 / np.sqrt(3))


def test_rounds_zero_checkpoint_is_init(run_dir):
    assert main(["train", "--run", str(run_dir), "--rounds", "0", *FAST]) == 0
    a = read_json(run_dir / "checkpoint.json")
    b = read_json(run_dir / "checkpoints" / "round_00000.json")
    assert a == b and a["server"]["round"] == 0


def test_resume_matches_uninterrupted(tmp_path, run_dir):
    import shutil
    other = tmp_path / "other"
    shutil.copytree(run_dir, other)
    assert main(["train", "--run", str(run_dir), "--rounds", "4", *FAST]) == 0
    assert main(["train", "--run", str(other), "--rounds", "2", *FAST]) == 0
    assert main(["train", "--run", str(other), "--rounds", "4", "--quiet"]) == 0
    a = read_json(run_dir / "checkpoint.json")
    b = read_json(other / "checkpoint.json")
    assert a["server"] == b["server"]
    assert [r["round"] for r in read_records(other / "rounds.jsonl")] == [0, 1, 2, 3]


def test_resume_refuses_changed_config(run_dir, capsys):
    assert main(["train", "--run", str(run_dir), "--rounds", "1", *FAST]) == 0
    assert main(["train", "--run", str(run_dir), "--set", "tree.objective=marginal"]) == 2
    assert "refusing to resume" in capsys.readouterr().err


def test_evaluate_twice_identical(tmp_path, run_dir):
    assert main(["train", "--run", str(run_dir), "--rounds", "2", *FAST]) == 0
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["evaluate", "--run", str(run_dir), "--out", str(a)]) == 0
    assert main(["evaluate", "--run", str(run_dir), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a_reliability.csv").read_bytes() == (tmp_path / "b_reliability.csv").read_bytes()
    res = read_json(a, "fedgp-results/1")
    assert 0 <= res["federated"]["accuracy"] <= 1


def test_report_sem(tmp_path, capsys):
    paths = []
    for i, acc in enumerate((0.80, 0.85, 0.90)):
        p = tmp_path / f"r{i}.json"
        p.write_text(dumps({"format": "fedgp-results/1", "label": "x",
                            "federated": {"accuracy": acc, "ece": 0.1, "mce": 0.2, "brier": 0.3, "n": 10}}))
        paths.append(str(p))
    out = tmp_path / "rep.csv"
    assert main(["report", *paths, "--out", str(out)]) == 0
    line = out.read_text().splitlines()[2].split(",")
    assert line[0] == "x" and line[1] == "3"
    assert np.isclose(float(line[2]), 0.85) and np.isclose(float(line[3]), 0.05 / np.sqrt(3))


def test_local_mode(run_dir):
    assert main(["train", "--run", str(run_dir), "--rounds", "2", "--set", "run.mode=local", *FAST]) == 0
    state, _ = load_checkpoint(run_dir / "checkpoint.json")
    assert isinstance(state, dict) and all(s.round == 2 for s in state.values())
    assert main(["evaluate", "--run", str(run_dir)]) == 0


def test_bound_command(tmp_path, run_dir):
    assert main(["train", "--run", str(run_dir), "--rounds", "1", *FAST]) == 0
    out = tmp_path / "b.jsonl"
    assert main(["bound", "--run", str(run_dir), "--clients", "2", "--sizes", "12", "--n-test", "10",
                 "--kl-samples", "10", "--risk-samples", "50", "--out", str(out)]) == 0
    recs = read_records(out)
    assert len(recs) == 2 and all(r["bound"] >= r["empirical_gibbs_risk"] for r in recs)
    assert main(["bound", "--run", str(run_dir), "--out", str(out)]) == 2


def test_partition_refuses_overwrite(tmp_path, run_dir):
    data = tmp_path / "d.csv"
    assert main(["partition", "--data", str(data), "--out", str(run_dir)]) == 2
    man = read_json(run_dir / "manifest.json")
    assert man["seed"] == 1 and len(man["clients"]) == 4


def test_gen_data(tmp_path):
    out = tmp_path / "g.csv"
    assert main(["gen-data", "--out", str(out), "--classes", "3", "--per-class", "5", "--dim", "3"]) == 0
    assert main(["gen-data", "--validate", str(out)]) == 0
    (tmp_path / "bad.csv").write_text("garbage\n")
    assert main(["gen-data", "--validate", str(tmp_path / "bad.csv")]) == 2
