import json
import os
import subprocess
import sys

import pytest

from minitod.cli import main
from minitod.config import ExperimentConfig
from minitod.trainer import TrainConfig
from minitod.world import World


def tiny_config(tmp_path, **train_over):
    train = dict(label_proportion=0.2, epochs_sup=2, epochs_semi=2, batch_size=8,
                 lr_max=2e-3, seed=5, window=8, embed_dim=8, hidden_dim=16,
                 eval_subset=12, early_stop_patience=4)
    train.update(train_over)
    cfg = ExperimentConfig(
        world=World(),
        train=TrainConfig(**train),
        data_dir=str(tmp_path / "data"),
        out_dir=str(tmp_path / "out"),
        dataset_sizes={"train": 40, "valid": 12, "test": 12},
        data_seed=3,
    )
    path = tmp_path / "config.json"
    cfg.save(path)
    return str(path), cfg


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("cli")
    cfg_path, cfg = tiny_config(tmp_path)
    assert main(["gen", "--config", cfg_path]) == 0
    return tmp_path, cfg_path, cfg


def test_gen_outputs_exist(generated):
    tmp_path, _, cfg = generated
    for split in ("train", "valid", "test"):
        assert os.path.exists(os.path.join(cfg.data_dir, f"{split}.jsonl"))
        assert os.path.exists(os.path.join(cfg.data_dir, f"{split}.goals.jsonl"))
    assert os.path.exists(os.path.join(cfg.data_dir, "vocab.txt"))
    manifest = json.load(open(os.path.join(cfg.data_dir, "manifest.json")))
    assert manifest["world_hash"] == cfg.world.content_hash()


def test_gen_is_byte_deterministic(tmp_path):
    cfg_path, cfg = tiny_config(tmp_path)
    assert main(["gen", "--config", cfg_path]) == 0
    first = {}
    for name in ("train.jsonl", "vocab.txt", "manifest.json"):
        first[name] = open(os.path.join(cfg.data_dir, name), "rb").read()
    assert main(["gen", "--config", cfg_path]) == 0
    for name, blob in first.items():
        assert open(os.path.join(cfg.data_dir, name), "rb").read() == blob


def test_gen_manifest_hash_tracks_world(tmp_path):
    cfg_path, cfg = tiny_config(tmp_path)
    main(["gen", "--config", cfg_path])
    h1 = json.load(open(os.path.join(cfg.data_dir, "manifest.json")))["world_hash"]
    d = json.load(open(cfg_path))
    d["world"]["n_values"] = 4
    with open(cfg_path, "w") as f:
        json.dump(d, f)
    main(["gen", "--config", cfg_path])
    h2 = json.load(open(os.path.join(cfg.data_dir, "manifest.json")))["world_hash"]
    assert h1 != h2


def test_missing_config_exits_2(capsys):
    assert main(["gen", "--config", "/nonexistent/config.json"]) == 2
    assert "config error" in capsys.readouterr().err


def test_bad_train_field_exits_2(generated):
    _, cfg_path, _ = generated
    assert main(["train", "--config", cfg_path, "--label_proportion", "7.0"]) == 2


def test_train_writes_checkpoint_layout(generated):
    tmp_path, cfg_path, cfg = generated
    assert main(["train", "--config", cfg_path, "--method", "jsa"]) == 0
    out = os.path.join(cfg.out_dir, "jsa_seed5")
    for name in ("config.json", "p.ckpt", "q.ckpt", "opt_p.ckpt", "opt_q.ckpt",
                 "cache.jsonl", "metrics.csv", "grad_norms_jsa.csv", "state.json"):
        assert os.path.exists(os.path.join(out, name)), name
    lines = open(os.path.join(out, "metrics.csv")).read().splitlines()
    assert lines[0].startswith("epoch,split,")
    assert any(",test," in ln for ln in lines)


def test_train_deterministic_metrics(generated):
    tmp_path, cfg_path, cfg = generated
    args = ["train", "--config", cfg_path, "--method", "sup", "--threads", "1",
            "--seed", "7"]
    assert main(args) == 0
    path = os.path.join(cfg.out_dir, "sup_seed7", "metrics.csv")
    first = open(path, "rb").read()
    assert main(args) == 0
    assert open(path, "rb").read() == first


def test_train_two_seeds_two_outputs(generated):
    tmp_path, cfg_path, cfg = generated
    assert main(["train", "--config", cfg_path, "--method", "sup", "--seed", "21"]) == 0
    assert main(["train", "--config", cfg_path, "--method", "sup", "--seed", "22"]) == 0
    a = open(os.path.join(cfg.out_dir, "sup_seed21", "metrics.csv")).read()
    b = open(os.path.join(cfg.out_dir, "sup_seed22", "metrics.csv")).read()
    for blob in (a, b):
        assert blob.startswith("epoch,split,")
    assert a != b


def test_train_resume(generated):
    tmp_path, cfg_path, cfg = generated
    assert main(["train", "--config", cfg_path, "--method", "jsa", "--seed", "31",
                 "--epochs_semi", "2"]) == 0
    out = os.path.join(cfg.out_dir, "jsa_seed31")
    state = json.load(open(os.path.join(out, "state.json")))
    assert state["next_epoch"] == 3
    assert main(["train", "--config", cfg_path, "--method", "jsa", "--seed", "31",
                 "--epochs_semi", "4", "--resume"]) == 0
    state = json.load(open(os.path.join(out, "state.json")))
    assert state["next_epoch"] == 5


def test_resume_without_state_exits_2(generated):
    _, cfg_path, _ = generated
    assert main(["train", "--config", cfg_path, "--method", "jsa", "--seed", "99",
                 "--resume"]) == 2


def test_eval_command_reports_metrics(generated, capsys):
    tmp_path, cfg_path, cfg = generated
    assert main(["train", "--config", cfg_path, "--method", "sup", "--seed", "41"]) == 0
    assert main(["eval", "--config", cfg_path, "--method", "sup", "--seed", "41",
                 "--split", "test"]) == 0
    out = capsys.readouterr().out
    row = json.loads(out.strip().splitlines()[-1])
    assert set(row) >= {"inform", "success", "bleu", "combined", "latent_f1"}
    assert row["combined"] == pytest.approx(row["bleu"] + 0.5 * (row["inform"] + row["success"]))


def test_ablate_mis_produces_three_labeled_rows(tmp_path):
    cfg_path, cfg = tiny_config(tmp_path, epochs_sup=1, epochs_semi=1)
    assert main(["gen", "--config", cfg_path]) == 0
    assert main(["ablate-mis", "--config", cfg_path]) == 0
    path = os.path.join(cfg.out_dir, "ablate_mis_seed5.csv")
    lines = open(path).read().splitlines()
    assert len(lines) == 4
    labels = [ln.split(",")[0] for ln in lines[1:]]
    assert labels == ["Without MIS", "Session-level MIS", "Recursive turn-level MIS"]


def test_ablate_mis_rerun_identical(tmp_path):
    cfg_path, cfg = tiny_config(tmp_path, epochs_sup=1, epochs_semi=1)
    main(["gen", "--config", cfg_path])
    main(["ablate-mis", "--config", cfg_path])
    path = os.path.join(cfg.out_dir, "ablate_mis_seed5.csv")
    first = open(path, "rb").read()
    main(["ablate-mis", "--config", cfg_path])
    assert open(path, "rb").read() == first


def test_oracle_check_passes_and_writes_report(tmp_path):
    cfg_path, cfg = tiny_config(tmp_path)
    report = tmp_path / "report.json"
    code = main(["oracle-check", "--config", cfg_path, "--out", str(report),
                 "--sweeps", "20000", "--burn_in", "100"])
    assert code == 0
    rep = json.load(open(report))
    assert rep["pass"] is True
    assert rep["checks"]["recursion"]["max_abs_error"] < 1e-9
    assert rep["checks"]["perfect_proposal"]["acceptance_rate"] == 1.0
    for sampler in ("recursive", "session"):
        st = rep["checks"][f"stationarity_{sampler}"]
        assert {"tv", "acceptance_rate", "per_turn_acceptance", "sweeps",
                "burn_in", "seed"} <= set(st)


def test_oracle_check_detects_injected_fault(tmp_path):
    cfg_path, cfg = tiny_config(tmp_path)
    report = tmp_path / "report.json"
    code = main(["oracle-check", "--config", cfg_path, "--out", str(report),
                 "--sweeps", "2000", "--burn_in", "50", "--inject-non-markov"])
    assert code == 4
    rep = json.load(open(report))
    assert rep["checks"]["recursion"]["max_abs_error"] > 0.01
    assert rep["pass"] is False


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "minitod.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("gen", "train", "eval", "ablate-mis", "oracle-check"):
        assert cmd in proc.stdout
