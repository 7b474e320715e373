import json
import os

import numpy as np
import pandas as pd
import pytest

from igap import errors
from igap.cli import build_parser, main
from igap.checkpoint import load_checkpoint
from igap.config import load_config
from igap.experiment import economy_rows, prepare_data, run_acceptance, run_experiment
from igap.graph_data import load_graph, load_graphset

TINY_CONFIG = """
[model]
hidden_dim = 8
head_hidden = 16
head_out = 8

[pretrain]
epochs = 2
batch_size = 3
radius = 1

[prompt]
L = 2
K = 4
lr = 0.01
epochs = 4
checkpoint_every = 2

[synthetic]
blocks = 2
nodes_per_block = 10
p_in = 0.6
p_out = 0.05
n_features = 4
n_graphs = 8

[split]
per_class_train = 3

[spectral]
k_pre = 8
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = os.path.join(tmp_path, "tiny.toml")
    with open(path, "w", encoding="utf-8") as f:
        f.write(TINY_CONFIG)
    return path


def tiny(tiny_config, tmp_path, *overrides):
    return load_config(tiny_config, [f"experiment.out_dir={json.dumps(str(tmp_path))}", *overrides])


def stdout_lines(capsys, prefix):
    return [line for line in capsys.readouterr().out.splitlines() if line.startswith(prefix)]


def test_run_experiment_writes_outputs(tmp_path, tiny_config):
    cfg = tiny(tiny_config, tmp_path)
    report = run_experiment(cfg)
    assert len(report) == 1
    row = report.iloc[0]
    assert row["setting"] == "transductive"
    assert 0.0 <= row["test_metric"] <= 1.0
    assert row["best_epoch"] in (2, 4)
    out_dir = os.path.join(tmp_path, "igap")
    for name in ("config.json", "report.csv", "checkpoints.csv"):
        assert os.path.exists(os.path.join(out_dir, name))
    checkpoints = pd.read_csv(os.path.join(out_dir, "checkpoints.csv"))
    assert checkpoints["epoch"].tolist() == [2, 4]
    assert checkpoints["selected"].sum() == 1


def test_ablation_sweep(tmp_path, tiny_config):
    report = run_experiment(tiny(tiny_config, tmp_path, "experiment.sweep=ablation"), write=False)
    assert report["run"].tolist() == ["none", "ps", "pt", "pl"]
    assert report["trainable"].iloc[3] > report["trainable"].iloc[0]
    assert not os.path.exists(os.path.join(tmp_path, "igap"))


def test_prompt_bank_sweep(tmp_path, tiny_config):
    report = run_experiment(tiny(tiny_config, tmp_path, "experiment.sweep=L"), write=False)
    assert report["L"].tolist() == [8, 16, 32, 64]
    assert report["run"].tolist() == ["L=8", "L=16", "L=32", "L=64"]


def test_report_is_deterministic(tmp_path, tiny_config):
    cfg = tiny(tiny_config, tmp_path)
    pd.testing.assert_frame_equal(run_experiment(cfg, write=False), run_experiment(cfg, write=False))


def test_multiple_seeds(tmp_path, tiny_config):
    report = run_experiment(tiny(tiny_config, tmp_path, "experiment.seeds=[1, 2]"), write=False)
    assert report["seed"].tolist() == [1, 2]


def test_transfer_pair_source(tmp_path, tiny_config):
    cfg = tiny(tiny_config, tmp_path, "experiment.source=pair")
    prepared = prepare_data(cfg, 0)
    assert prepared.setting == "inductive"
    assert not set(prepared.finetune_data.parent_ids.tolist()) & set(range(prepared.pretrain_data.n_nodes))
    report = run_experiment(cfg, write=False)
    assert report["setting"].tolist() == ["inductive"]


def test_graph_level_source(tmp_path, tiny_config):
    cfg = tiny(tiny_config, tmp_path, "experiment.source=graphset", "synthetic.nodes_per_block=4")
    prepared = prepare_data(cfg, 0)
    assert len(prepared.finetune_data) == 8
    assert len(prepared.pretrain_data) == prepared.train.size
    report = run_experiment(cfg, write=False)
    assert report["setting"].tolist() == ["graph-level"]
    assert 0.0 <= report["test_metric"].iloc[0] <= 1.0


def test_stage_failure_carries_exit_code(tmp_path, tiny_config):
    cfg = tiny(tiny_config, tmp_path, "split.per_class_train=11")
    with pytest.raises(errors.StageError) as info:
        run_experiment(cfg, write=False)
    assert info.value.stage == "data"
    assert info.value.exit_code == errors.SplitError.exit_code


def test_default_signal_prompt_is_economical():
    cfg = load_config()
    n = cfg.synthetic.blocks * cfg.synthetic.nodes_per_block
    F, L = cfg.synthetic.n_features, cfg.prompt.L
    assert n * L + L * F < n * F


def test_economy_grid_runs(tmp_path, tiny_config):
    rows = economy_rows(tiny(tiny_config, tmp_path), 0)
    assert len(rows) == 16
    assert {(r["L"], r["K"]) for r in rows} == {(L, K) for L in (8, 16, 32, 64) for K in (16, 32, 64, 128)}
    for r in rows:
        assert r["signal_params"] == r["N"] * r["L"] + r["L"] * r["F"]
        assert r["alignment_params"] == r["N"] ** 2


def test_unknown_acceptance_run(tmp_path, tiny_config):
    with pytest.raises(errors.ConfigError):
        run_acceptance("everything", tiny(tiny_config, tmp_path))


def test_cli_pipeline(tmp_path, tiny_config, capsys):
    g = os.path.join(tmp_path, "g.txt")
    common = ["--config", tiny_config, "-q"]
    assert main(["gen-sbm", *common, "--out", g, "--seed", "4"]) == 0
    assert load_graph(g).n_nodes == 20

    pre = os.path.join(tmp_path, "pre.ckpt")
    loss_csv = os.path.join(tmp_path, "loss.csv")
    assert main(["pretrain", *common, "--graph", g, "--framework", "linkpred", "--out", pre,
                 "--loss-csv", loss_csv]) == 0
    assert load_checkpoint(pre).stage == "pretrain"
    assert len(pd.read_csv(loss_csv)) == 2

    ft = os.path.join(tmp_path, "ft.ckpt")
    metrics_csv = os.path.join(tmp_path, "metrics.csv")
    capsys.readouterr()
    assert main(["finetune", *common, "--pretrained", pre, "--graph", g, "--L", "3", "--out", ft,
                 "--metrics-csv", metrics_csv]) == 0
    [line] = stdout_lines(capsys, "test_metric")
    assert 0.0 <= float(line.split()[1]) <= 1.0
    metrics = pd.read_csv(metrics_csv)
    assert metrics["selected"].sum() == 1
    assert load_checkpoint(ft).prompts["alpha"].shape == (20, 3)

    emb = os.path.join(tmp_path, "emb.txt")
    assert main(["eval", *common, "--checkpoint", ft, "--graph", g, "--k", "5", "--embeddings", emb]) == 0
    out = capsys.readouterr().out
    assert any(line.startswith("metric ") for line in out.splitlines())
    assert "component,lambda,alignment,sp_snr" in out
    assert np.loadtxt(emb).shape == (20, 8)

    report = os.path.join(tmp_path, "report.csv")
    assert main(["spectrum-report", *common, "--graph", g, "--embeddings", emb, "--k", "4", "--out", report]) == 0
    assert len(pd.read_csv(report)) == 4

    # a fine-tune checkpoint is not a pre-trained model
    assert main(["finetune", *common, "--pretrained", ft, "--graph", g]) == errors.CheckpointError.exit_code


def test_cli_finetune_resume(tmp_path, tiny_config, capsys):
    g = os.path.join(tmp_path, "g.txt")
    common = ["--config", tiny_config, "-q"]
    main(["gen-sbm", *common, "--out", g])
    pre = os.path.join(tmp_path, "pre.ckpt")
    main(["pretrain", *common, "--graph", g, "--out", pre])
    ckpt_dir = os.path.join(tmp_path, "ckpts")
    capsys.readouterr()
    assert main(["finetune", *common, "--pretrained", pre, "--graph", g, "--checkpoint-dir", ckpt_dir]) == 0
    [full] = stdout_lines(capsys, "test_metric")
    resume = os.path.join(ckpt_dir, "finetune_epoch0002.ckpt")
    assert main(["finetune", *common, "--pretrained", pre, "--graph", g, "--resume", resume]) == 0
    [resumed] = stdout_lines(capsys, "test_metric")
    assert resumed == full


def test_cli_spectrum(tmp_path, tiny_config, capsys):
    g = os.path.join(tmp_path, "g.txt")
    common = ["--config", tiny_config, "-q"]
    main(["gen-sbm", *common, "--out", g])
    capsys.readouterr()
    dump = os.path.join(tmp_path, "spectrum.ckpt")
    assert main(["spectrum", g, *common, "--k", "3", "--dump", dump]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split() == ["index", "lambda", "residual"]
    assert len(lines) == 4
    assert abs(float(lines[1].split()[1])) < 1e-8
    ckpt = load_checkpoint(dump)
    assert ckpt.stage == "spectrum"
    assert ckpt.prompts["eigenvectors"].shape == (20, 3)
    assert main(["spectrum", g, *common, "--lanczos", "--k", "3"]) == 0
    assert main(["spectrum", g, *common, "--lanczos"]) == errors.InvalidRank.exit_code


def test_cli_spectrum_solver_choice(tmp_path, tiny_config, capsys):
    g = os.path.join(tmp_path, "g.txt")
    common = ["--config", tiny_config, "-q"]
    main(["gen-sbm", *common, "--out", g])
    capsys.readouterr()
    assert build_parser().parse_args(["spectrum", g]).solver == "dense"
    assert build_parser().parse_args(["spectrum", g, "--lanczos"]).solver == "lanczos"
    assert main(["spectrum", g, *common, "--dense", "--k", "4"]) == 0
    dense = capsys.readouterr().out.strip().splitlines()
    assert main(["spectrum", g, *common, "--lanczos", "--k", "4"]) == 0
    lanczos = capsys.readouterr().out.strip().splitlines()
    assert len(dense) == len(lanczos) == 5
    for a, b in zip(dense[1:], lanczos[1:]):
        assert float(a.split()[1]) == pytest.approx(float(b.split()[1]), abs=1e-6)
    with pytest.raises(SystemExit):
        build_parser().parse_args(["spectrum", g, "--dense", "--lanczos"])


def test_cli_split_and_generators(tmp_path, tiny_config, capsys):
    common = ["--config", tiny_config, "-q"]
    g = os.path.join(tmp_path, "g.txt")
    main(["gen-sbm", *common, "--blocks", "4", "--nodes-per-block", "6", "--out", g])
    split_csv = os.path.join(tmp_path, "split.csv")
    graphs_dir = os.path.join(tmp_path, "graphs")
    assert main(["split", *common, "--graph", g, "--setting", "inductive", "--per-class-train", "2",
                 "--out", split_csv, "--graphs-dir", graphs_dir]) == 0
    assert set(pd.read_csv(split_csv)["role"]) == {"pretrain", "finetune", "train", "val", "test"}
    assert load_graph(os.path.join(graphs_dir, "finetune.txt")).n_nodes == 6

    pair_dir = os.path.join(tmp_path, "pair")
    assert main(["gen-pair", *common, "--signal-shift", "0.5", "--structure-shift", "0.2", "--out-dir", pair_dir]) == 0
    assert load_graph(os.path.join(pair_dir, "pretrain.txt")).n_nodes == 20
    assert load_graph(os.path.join(pair_dir, "finetune.txt")).n_nodes == 20

    set_dir = os.path.join(tmp_path, "set")
    assert main(["gen-sbm", *common, "--graphset", "5", "--nodes-per-block", "4", "--out", set_dir]) == 0
    assert len(load_graphset(set_dir)) == 5


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "-q", "--coords", "5"]) == 0
    lines = [line for line in capsys.readouterr().out.splitlines() if line.endswith(" ok")]
    assert any(line.startswith("finetune[lowrank:2].P_t.A") for line in lines)
    assert any(line.startswith("pretrain[localglobal].layer0.coeffs") for line in lines)


def test_cli_error_exit_codes(tmp_path, tiny_config):
    common = ["--config", tiny_config, "-q"]
    assert main(["gen-sbm", *common, "--set", "prompt.size=3", "--out", os.path.join(tmp_path, "g.txt")]) == 2
    assert main(["spectrum", os.path.join(tmp_path, "missing.txt"), *common]) == 1
    bad = os.path.join(tmp_path, "bad.txt")
    with open(bad, "w", encoding="utf-8") as f:
        f.write("2 1 1 0\n0 0\n1\n2\n")
    assert main(["spectrum", bad, *common]) == 3


def test_cli_run_prints_report(tmp_path, tiny_config, capsys):
    assert main(["run", "--config", tiny_config, "-q", "--out-dir", str(tmp_path), "--no-write"]) == 0
    out = capsys.readouterr().out
    assert "seed,run,setting" in out
    assert not os.path.exists(os.path.join(tmp_path, "igap"))


@pytest.mark.slow
def test_lowfreq_acceptance(tmp_path):
    cfg = load_config(overrides=["pretrain.epochs=200", "experiment.seeds=[0, 1, 2, 3, 4]",
                                 f"experiment.out_dir={json.dumps(str(tmp_path))}"])
    report = run_acceptance("lowfreq", cfg)
    assert report["passed"].sum() >= 4
    assert (np.abs(report["rho_untrained"]) < 0.3).all()
    assert os.path.exists(os.path.join(tmp_path, "igap", "acceptance_lowfreq.csv"))


@pytest.mark.slow
def test_transfer_acceptance(tmp_path):
    cfg = load_config(overrides=["pretrain.epochs=100", "prompt.epochs=100", "experiment.seeds=[0, 1, 2]"])
    report = run_acceptance("transfer", cfg, write=False)
    assert (report["margin"] >= 0).sum() >= 2
