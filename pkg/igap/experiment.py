"""
End-to-end pipelines: data -> pre-train -> fine-tune -> evaluate.

``run_experiment`` writes, under ``<out_dir>/<name>/``:
    config.json      the fully resolved config
    report.csv       one row per (seed, sweep value) run with the test metric
    checkpoints.csv  validation/training metric of every evaluated checkpoint
"""

import json
import logging
import os
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pandas as pd

from . import errors
from .analysis import alignment_profile
from .config import log_config
from .const import K_SWEEP, L_SWEEP
from .graph_data import GraphSet, load_graph, load_graphset
from .model import init_model, param_count
from .pretrain import embed_nodes, pretrain_loop
from .prompts import finetune_loop
from .rng import child_seed
from .spectral import decompose
from .splits import make_splits, split_ids
from .synthetic import gen_from_config, gen_sbm_graphset, gen_transfer_pair

logger = logging.getLogger(__name__)

ABLATION_SWEEP = ("none", "ps", "pt", "pl")
ACCEPTANCE_RUNS = ("lowfreq", "transfer", "ablation", "economy")


@contextmanager
def stage(name):
    """Re-raise failures inside the block as StageError labeled ``name``."""
    try:
        yield
    except errors.StageError:
        raise
    except errors.IgapError as e:
        raise errors.StageError(name, e) from e


class PreparedData:
    """Pre-train data plus the fine-tune target and its train/val/test ids."""

    def __init__(self, pretrain_data, finetune_data, train, val, test, setting):
        self.pretrain_data = pretrain_data
        self.finetune_data = finetune_data
        self.train = train
        self.val = val
        self.test = test
        self.setting = setting


def prepare_data(cfg, seed):
    """Build or load the graphs named by ``[experiment] source`` and split them."""
    source = cfg.experiment.source
    sp = cfg.split
    ratios = (sp.val_ratio, sp.test_ratio)
    if source == "graphset":
        if cfg.graph.graphset:
            gs = load_graphset(cfg.graph.graphset)
        else:
            gs = gen_sbm_graphset(cfg.synthetic.n_graphs, cfg.synthetic.sbm(), child_seed(seed, "graphset"))
        train, val, test = split_ids(len(gs), seed=child_seed(seed, "split"))
        pretrain = GraphSet([gs.graphs[i] for i in train])
        return PreparedData(pretrain, gs, train, val, test, "graph-level")
    if source == "pair":
        g_pt, g_ft = gen_transfer_pair(cfg.synthetic.sbm(), cfg.synthetic.signal_shift,
                                       cfg.synthetic.structure_shift, child_seed(seed, "pair"))
        split = make_splits(g_ft, "transductive", ratios, sp.per_class_train, child_seed(seed, "split"))
        return PreparedData(g_pt, g_ft, split.train, split.val, split.test, "inductive")
    g = load_graph(cfg.graph.path) if source == "file" else gen_from_config(cfg.synthetic.sbm(),
                                                                             child_seed(seed, "sbm"))
    split = make_splits(g, sp.setting, ratios, sp.per_class_train, child_seed(seed, "split"),
                        class_ratio=sp.class_ratio, finetune_classes=sp.finetune_classes or None,
                        pretrain_classes=sp.pretrain_classes or None)
    return PreparedData(split.pretrain_graph, split.finetune_graph, split.train, split.val, split.test, sp.setting)


def pretrain_model(cfg, data, seed, resume=None, checkpoint_dir=None):
    """Initialize and pre-train a model on ``data`` per the config."""
    m, pt = cfg.model, cfg.pretrain
    n_features = data.n_features
    model = init_model(n_features, m.hidden_dim, m.n_layers, m.degree, m.head_hidden, m.head_out,
                       seed=child_seed(seed, "model"))
    return pretrain_loop(data, pt.framework, replace(cfg.augment, seed=child_seed(seed, "augment")), model,
                         pt.epochs, pt.lr, child_seed(seed, "pretrain"),
                         batch_size=pt.batch_size, temperature=pt.temperature, mask_rate=pt.mask_rate,
                         radius=pt.radius, k_pre=cfg.spectral.k_pre, full_basis_cap=cfg.spectral.full_basis_cap,
                         normalized=cfg.graph.normalized, resume=resume,
                         checkpoint_every=pt.checkpoint_every, checkpoint_dir=checkpoint_dir,
                         config=cfg.to_dict(), config_hash=cfg.config_hash())


def _sweep_configs(cfg):
    """(label, PromptConfig) pairs for the configured sweep."""
    base = replace(cfg.prompt, normalized=cfg.graph.normalized)
    sweep = cfg.experiment.sweep
    if sweep == "L":
        return [(f"L={L}", replace(base, L=L)) for L in L_SWEEP]
    if sweep == "K":
        return [(f"K={K}", replace(base, K=K)) for K in K_SWEEP]
    if sweep == "ablation":
        return [(a, replace(base, ablation=a)) for a in ABLATION_SWEEP]
    return [(a, replace(base, ablation=a)) for a in cfg.experiment.ablations]


def finetune_and_evaluate(params, prepared, prompt_cfg, seed, config=None, config_hash="", resume=None,
                          checkpoint_dir=None):
    """Fine-tune on the prepared target and report the selected state's test metric."""
    result = finetune_loop(params, prepared.finetune_data, prompt_cfg, child_seed(seed, "finetune"),
                           train_ids=prepared.train, val_ids=prepared.val, resume=resume,
                           checkpoint_dir=checkpoint_dir, config=config, config_hash=config_hash)
    test_metric = result.pipeline.metric(prepared.test)
    trainable = sum(param_count(result.prompts).values()) + sum(param_count(result.params).values())
    return result, test_metric, trainable


def run_experiment(cfg, write=True):
    """
    Run every seed and sweep value of a config.

    Returns:
        DataFrame report with one row per run

    Raises:
        StageError: a stage failed (``data``, ``pretrain``, ``finetune``, ``eval``)
    """
    log_config(cfg)
    out_dir = os.path.join(cfg.experiment.out_dir, cfg.experiment.name)
    rows, checkpoint_rows = [], []
    for seed in cfg.experiment.run_seeds():
        with stage("data"):
            prepared = prepare_data(cfg, seed)
        with stage("pretrain"):
            pretrained = pretrain_model(cfg, prepared.pretrain_data, seed)
        for label, prompt_cfg in _sweep_configs(cfg):
            with stage("finetune"):
                result, test_metric, trainable = finetune_and_evaluate(
                    pretrained.params, prepared, prompt_cfg, seed, cfg.to_dict(), cfg.config_hash())
            rows.append({
                "seed": seed,
                "run": label,
                "setting": prepared.setting,
                "ablation": prompt_cfg.ablation,
                "L": prompt_cfg.L,
                "K": prompt_cfg.K,
                "pretrain_loss": pretrained.losses[-1] if pretrained.losses else float("nan"),
                "best_epoch": result.best_epoch,
                "val_metric": result.best_metric,
                "test_metric": test_metric,
                "trainable": trainable,
            })
            for epoch, loss, train_metric, val_metric in result.trace:
                if val_metric is not None:
                    checkpoint_rows.append({"seed": seed, "run": label, "epoch": epoch, "loss": loss,
                                            "train_metric": train_metric, "val_metric": val_metric,
                                            "selected": epoch == result.best_epoch})
            logger.info(f"Run {label} (seed {seed}): test {test_metric:.4f} at epoch {result.best_epoch}")
    report = pd.DataFrame(rows)
    if write:
        with stage("eval"):
            _write_outputs(out_dir, cfg, report, pd.DataFrame(checkpoint_rows))
    return report


def _write_outputs(out_dir, cfg, report, checkpoints):
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
            json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        report.to_csv(os.path.join(out_dir, "report.csv"), index=False)
        checkpoints.to_csv(os.path.join(out_dir, "checkpoints.csv"), index=False)
    except OSError as e:
        raise errors.IgapError(f"cannot write results to {out_dir}: {e}") from None
    logger.info(f"Wrote report ({len(report)} runs) to {out_dir}")


def lowfreq_run(cfg, seed):
    """Spearman trend of the backbone embeddings' alignment profile, before and after pre-training."""
    g = gen_from_config(cfg.synthetic.sbm(), child_seed(seed, "sbm"))
    basis = decompose(g, normalized=cfg.graph.normalized)
    m = cfg.model
    untrained = init_model(g.n_features, m.hidden_dim, m.n_layers, m.degree, m.head_hidden, m.head_out,
                           seed=child_seed(seed, "model"))
    rho_untrained = alignment_profile(basis, embed_nodes(untrained, g, basis).T).spearman_rho
    trained = pretrain_model(replace(cfg, pretrain=replace(cfg.pretrain, framework="subgraph")), g, seed)
    rho_trained = alignment_profile(basis, embed_nodes(trained.params, g, basis).T).spearman_rho
    return {"seed": seed, "rho_untrained": rho_untrained, "rho_trained": rho_trained,
            "initial_loss": trained.losses[0] if trained.losses else float("nan"),
            "final_loss": trained.losses[-1] if trained.losses else float("nan"),
            "passed": rho_trained <= -0.5}


def transfer_run(cfg, seed, ablations=("none", "probe")):
    """Pre-train on one graph of a transfer pair, fine-tune on the other under each ablation."""
    pair_cfg = replace(cfg, experiment=replace(cfg.experiment, source="pair"))
    prepared = prepare_data(pair_cfg, seed)
    pretrained = pretrain_model(cfg, prepared.pretrain_data, seed)
    row = {"seed": seed}
    for ablation in ablations:
        prompt_cfg = replace(cfg.prompt, ablation=ablation, normalized=cfg.graph.normalized)
        _, test_metric, _ = finetune_and_evaluate(pretrained.params, prepared, prompt_cfg, seed)
        row[ablation] = test_metric
    return row


def economy_rows(cfg, seed):
    """Build and run one fine-tuning epoch for every (L, K) grid point, with prompt parameter counts."""
    syn = replace(cfg.synthetic, nodes_per_block=max(cfg.synthetic.nodes_per_block, -(-max(K_SWEEP) // cfg.synthetic.blocks)))
    g = gen_from_config(syn.sbm(), child_seed(seed, "sbm"))
    m = cfg.model
    model = init_model(g.n_features, m.hidden_dim, m.n_layers, m.degree, m.head_hidden, m.head_out,
                       seed=child_seed(seed, "model"))
    train, val, _ = split_ids(g.n_nodes, seed=child_seed(seed, "split"))
    rows = []
    for L in L_SWEEP:
        for K in K_SWEEP:
            prompt_cfg = replace(cfg.prompt, L=L, K=K, epochs=1, checkpoint_every=1)
            result = finetune_loop(model, g, prompt_cfg, seed, train_ids=train, val_ids=val)
            counts = param_count(result.prompts.signal)
            signal_params = counts["alpha"] + counts["P_s"]
            rows.append({"L": L, "K": K, "N": g.n_nodes, "F": g.n_features,
                         "signal_params": signal_params, "per_node_params": g.n_nodes * g.n_features,
                         "alignment_params": sum(param_count(result.prompts.alignment).values()),
                         "economical": signal_params < g.n_nodes * g.n_features})
    return rows


def run_acceptance(name, cfg, write=True):
    """
    Desk-scale acceptance runs.

    lowfreq: pre-training concentrates embeddings on low frequencies.
    transfer: IGAP against the frozen linear probe on an inductive transfer pair.
    ablation: full IGAP against the no-P_s and no-P_t ablations on the same pair.
    economy: signal prompt parameter counts and one epoch over the L x K grid.

    Returns:
        DataFrame, one row per seed (one per grid point for ``economy``)
    """
    if name not in ACCEPTANCE_RUNS:
        raise errors.ConfigError(f"unknown acceptance run {name!r}, expected one of {ACCEPTANCE_RUNS}")
    log_config(cfg)
    seeds = cfg.experiment.run_seeds()
    with stage(name):
        if name == "lowfreq":
            rows = [lowfreq_run(cfg, seed) for seed in seeds]
        elif name == "transfer":
            rows = [transfer_run(cfg, seed, ("none", "probe")) for seed in seeds]
            for row in rows:
                row["margin"] = row["none"] - row["probe"]
        elif name == "ablation":
            rows = [transfer_run(cfg, seed, ("none", "ps", "pt")) for seed in seeds]
            for row in rows:
                row["pt_worst"] = row["pt"] <= min(row["none"], row["ps"])
        else:
            rows = economy_rows(cfg, seeds[0])
    report = pd.DataFrame(rows)
    _log_acceptance(name, report)
    if write:
        out_dir = os.path.join(cfg.experiment.out_dir, cfg.experiment.name)
        os.makedirs(out_dir, exist_ok=True)
        report.to_csv(os.path.join(out_dir, f"acceptance_{name}.csv"), index=False)
        logger.info(f"Wrote acceptance report to {out_dir}")
    return report


def _log_acceptance(name, report):
    if report.empty:
        return
    if name == "lowfreq":
        logger.info(f"lowfreq: {int(report['passed'].sum())}/{len(report)} seeds with rho <= -0.5, "
                    f"mean untrained |rho| {np.abs(report['rho_untrained']).mean():.3f}")
    elif name == "transfer":
        wins = int((report["margin"] >= 0).sum())
        logger.info(f"transfer: IGAP >= probe on {wins}/{len(report)} seeds, mean margin {report['margin'].mean():.4f}")
    elif name == "ablation":
        logger.info(f"ablation: mean full {report['none'].mean():.4f}, no-P_s {report['ps'].mean():.4f}, "
                    f"no-P_t {report['pt'].mean():.4f}")
    else:
        logger.info(f"economy: {int(report['economical'].sum())}/{len(report)} grid points economical")
