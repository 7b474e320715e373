"""
Command line interface.

    igap pretrain --graph g.txt --framework subgraph --out pre.ckpt
    igap finetune --pretrained pre.ckpt --graph ft.txt --L 16 --K 32
    igap run --config exp.toml --set prompt.L=32
    igap run --acceptance lowfreq

Every subcommand accepts ``--config`` (TOML) and repeated ``--set
section.key=value`` overrides; explicit flags win over both. Errors exit with
the code of their class (see ``igap.errors``).
"""

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np
import pandas as pd

from . import errors
from .analysis import export_embeddings, load_embeddings, spectrum_report, write_csv
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import load_config, log_config
from .const import FRAMEWORKS, SETTINGS
from .experiment import (
    ACCEPTANCE_RUNS,
    PreparedData,
    finetune_and_evaluate,
    pretrain_model,
    run_acceptance,
    run_experiment,
)
from .graph_data import GraphSet, build_laplacian, load_graph, load_graphset, save_graph, save_graphset
from .model import init_model
from .pretrain import BasisCache, batch_loss, embed_nodes, sample_contrastive_batch, write_loss_csv
from .prompts import PromptPipeline, finetune_loop, finetune_state_checkpoint, selected_state
from .rng import child_seed
from .spectral import decompose, eig_dense, eig_lanczos, residual_norms, truncate
from .splits import make_splits, split_ids, write_split
from .synthetic import SbmConfig, gen_from_config, gen_sbm_graphset, gen_transfer_pair
from .tape import gradcheck

logger = logging.getLogger(__name__)

GRADCHECK_TOL = 1e-4


def setup_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stdout,
        force=True,
    )


def _resolve_config(args, **flags):
    """Config file + ``--set`` overrides + explicit flags (``section.key`` -> value, None skipped)."""
    overrides = list(args.set or [])
    cfg = load_config(args.config, overrides)
    by_section = {}
    for target, value in flags.items():
        if value is None:
            continue
        section, key = target.split("__", 1)
        by_section.setdefault(section, {})[key] = value
    for section, values in by_section.items():
        cfg = cfg.with_values(section, **values)
    return cfg


def _seed(args, cfg):
    return cfg.experiment.seed if args.seed is None else args.seed


def _load_data(args, cfg, seed):
    """Graph from --graph, GraphSet from --graphset, otherwise an SBM from the [synthetic] section."""
    if getattr(args, "graphset", None):
        return load_graphset(args.graphset)
    if getattr(args, "graph", None):
        return load_graph(args.graph)
    logger.info("No input graph given; generating an SBM from the [synthetic] section")
    return gen_from_config(cfg.synthetic.sbm(), child_seed(seed, "sbm"))


def cmd_pretrain(args):
    cfg = _resolve_config(args, pretrain__framework=args.framework, pretrain__epochs=args.epochs,
                          pretrain__lr=args.lr)
    log_config(cfg)
    seed = _seed(args, cfg)
    data = _load_data(args, cfg, seed)
    resume = load_checkpoint(args.resume, cfg.config_hash()) if args.resume else None
    result = pretrain_model(cfg, data, seed, resume=resume, checkpoint_dir=args.checkpoint_dir)
    save_checkpoint(result.to_checkpoint(seed, cfg.to_dict(), cfg.config_hash(), cfg.pretrain.framework),
                    args.out)
    if args.loss_csv:
        write_loss_csv(result.losses, args.loss_csv)
    return 0


def _finetune_target(data, cfg, seed):
    if isinstance(data, GraphSet):
        train, val, test = split_ids(len(data), seed=child_seed(seed, "split"))
        return PreparedData(None, data, train, val, test, "graph-level")
    sp = cfg.split
    split = make_splits(data, "transductive", (sp.val_ratio, sp.test_ratio), sp.per_class_train,
                        child_seed(seed, "split"))
    return PreparedData(None, data, split.train, split.val, split.test, "transductive")


def cmd_finetune(args):
    cfg = _resolve_config(args, prompt__L=args.L, prompt__K=args.K, prompt__lr=args.lr,
                          prompt__epochs=args.epochs, prompt__ablation=args.ablate, prompt__pt_mode=args.pt_mode)
    log_config(cfg)
    seed = _seed(args, cfg)
    pretrained = load_checkpoint(args.pretrained)
    if pretrained.stage != "pretrain" or pretrained.model is None:
        raise errors.CheckpointError(f"{args.pretrained} is a {pretrained.stage} checkpoint, not a pre-trained model")
    data = _load_data(args, cfg, seed)
    prepared = _finetune_target(data, cfg, seed)
    prompt_cfg = replace(cfg.prompt, normalized=cfg.graph.normalized)
    resume = load_checkpoint(args.resume, cfg.config_hash()) if args.resume else None
    result, test_metric, trainable = finetune_and_evaluate(pretrained.model, prepared, prompt_cfg, seed,
                                                           cfg.to_dict(), cfg.config_hash(), resume=resume,
                                                           checkpoint_dir=args.checkpoint_dir)
    logger.info(f"Trainable parameters: {trainable}")
    logger.info(f"Test metric {test_metric:.4f} (selected epoch {result.best_epoch})")
    if args.out:
        save_checkpoint(finetune_state_checkpoint(result, seed=child_seed(seed, "finetune"), config=cfg.to_dict(),
                                                  config_hash=cfg.config_hash()), args.out)
    if args.metrics_csv:
        frame = result.trace_frame()
        frame["selected"] = frame["epoch"] == result.best_epoch
        write_csv(frame, args.metrics_csv)
    print(f"test_metric {test_metric:.6f}")
    return 0


def cmd_eval(args):
    cfg = _resolve_config(args)
    seed = _seed(args, cfg)
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.model is None:
        raise errors.CheckpointError(f"{args.checkpoint} holds no model")
    g = load_graph(args.graph)
    basis = decompose(g, k=args.k, normalized=cfg.graph.normalized, seed=seed)
    if ckpt.stage == "finetune":
        prompts, params, prompt_cfg = selected_state(ckpt)
        if g.is_labeled:
            pipeline = PromptPipeline(params, prompts, g, prompt_cfg, seed)
            labeled = np.flatnonzero(g.node_labels >= 0)
            print(f"metric {pipeline.metric(labeled):.6f}")
    else:
        params = ckpt.model
    Z = embed_nodes(params, g, decompose(g, normalized=cfg.graph.normalized))
    if args.embeddings:
        export_embeddings(Z, args.embeddings)
    report = spectrum_report(basis, Z.T)
    _emit(report, args.out)
    return 0


def cmd_spectrum_report(args):
    cfg = _resolve_config(args)
    g = load_graph(args.graph)
    Z = load_embeddings(args.embeddings)
    if Z.shape[0] != g.n_nodes:
        raise errors.DimensionMismatch(f"{Z.shape[0]} embedding rows for {g.n_nodes} nodes")
    basis = decompose(g, k=args.k, normalized=cfg.graph.normalized, seed=_seed(args, cfg))
    _emit(spectrum_report(basis, Z.T), args.out)
    return 0


def _emit(frame, path):
    if path:
        write_csv(frame, path)
    else:
        print(frame.to_csv(index=False), end="")


def cmd_split(args):
    cfg = _resolve_config(args, split__setting=args.setting, split__per_class_train=args.per_class_train)
    sp = cfg.split
    g = load_graph(args.graph)
    split = make_splits(g, sp.setting, (sp.val_ratio, sp.test_ratio), sp.per_class_train, _seed(args, cfg),
                        class_ratio=sp.class_ratio, finetune_classes=sp.finetune_classes or None,
                        pretrain_classes=sp.pretrain_classes or None)
    write_split(split, args.out)
    if args.graphs_dir:
        save_graph(split.pretrain_graph, os.path.join(args.graphs_dir, "pretrain.txt"))
        save_graph(split.finetune_graph, os.path.join(args.graphs_dir, "finetune.txt"))
    for key, value in split.summary().items():
        print(f"{key} {value}")
    return 0


def cmd_spectrum(args):
    cfg = _resolve_config(args)
    seed = _seed(args, cfg)
    g = load_graph(args.graph)
    L = build_laplacian(g, normalized=cfg.graph.normalized)
    if args.solver == "lanczos":
        if args.k is None:
            raise errors.InvalidRank("--lanczos needs --k")
        basis = eig_lanczos(L, args.k, seed=seed)
    else:
        basis = eig_dense(L, size_cap=cfg.spectral.size_cap)
        if args.k is not None and args.k < basis.k:
            basis = truncate(basis, args.k)
    table = pd.DataFrame({"index": np.arange(basis.k), "lambda": basis.eigenvalues,
                          "residual": residual_norms(L, basis)})
    text = table.to_string(index=False, float_format=lambda v: f"{v:.10g}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
        logger.info(f"Wrote {basis.k} eigenpairs to {args.out}")
    else:
        print(text)
    if args.dump:
        save_checkpoint(Checkpoint("spectrum", 0, prompts={"eigenvalues": basis.eigenvalues,
                                                           "eigenvectors": basis.eigenvectors},
                                   config=cfg.to_dict(), config_hash=cfg.config_hash(),
                                   extra={"n": basis.n, "normalized": cfg.graph.normalized}), args.dump)
    return 0


def _sbm_flags(args):
    return dict(synthetic__blocks=args.blocks, synthetic__nodes_per_block=args.nodes_per_block,
                synthetic__p_in=args.p_in, synthetic__p_out=args.p_out, synthetic__n_features=args.features)


def cmd_gen_sbm(args):
    cfg = _resolve_config(args, **_sbm_flags(args))
    seed = _seed(args, cfg)
    sbm = cfg.synthetic.sbm()
    if args.graphset:
        save_graphset(gen_sbm_graphset(args.graphset, sbm, seed), args.out)
    else:
        save_graph(gen_from_config(sbm, seed), args.out)
    return 0


def cmd_gen_pair(args):
    cfg = _resolve_config(args, synthetic__signal_shift=args.signal_shift,
                          synthetic__structure_shift=args.structure_shift, **_sbm_flags(args))
    syn = cfg.synthetic
    g_pt, g_ft = gen_transfer_pair(syn.sbm(), syn.signal_shift, syn.structure_shift, _seed(args, cfg))
    save_graph(g_pt, os.path.join(args.out_dir, "pretrain.txt"))
    save_graph(g_ft, os.path.join(args.out_dir, "finetune.txt"))
    return 0


def _gradcheck_reports(seed, n_coords):
    """Relative errors for every trainable array of a small model, prompt set and pre-training loss."""
    g = gen_from_config(SbmConfig(blocks=2, nodes_per_block=6, p_in=0.6, p_out=0.1, n_features=4), seed)
    model = init_model(g.n_features, hidden_dim=5, n_layers=2, degree=2, head_hidden=8, head_out=3,
                       seed=child_seed(seed, "model"))
    # non-trivial filters so the coefficient gradients see every power
    for i in range(model.n_layers):
        model.arrays[f"layer{i}.coeffs"][:] = [1.0, 0.3, -0.05]
    # a row with every hidden unit dead would otherwise have zero norm
    model.arrays["head.b2"][:] = 0.1
    reports = {}
    ids = np.arange(g.n_nodes)
    for mode in ("dense", "lowrank:2"):
        cfg_prompt = replace(load_config().prompt, L=3, K=4, epochs=0, ablation="pl", pt_mode=mode,
                             ortho_penalty=0.1)
        pipeline = finetune_loop(model, g, cfg_prompt, seed).pipeline
        pipeline.params.arrays["head.b2"][:] = 0.1
        fixed = pipeline.variables(trainable=())
        arrays = {name: pipeline.arrays()[name] for name in pipeline.trainable_names()}
        report = gradcheck(lambda v: pipeline.loss({**fixed, **v}, ids), arrays, n_coords=n_coords, seed=seed)
        reports.update({f"finetune[{mode}].{name}": err for name, err in report.items()})
    aug = load_config().augment
    bases = BasisCache(k_pre=8, seed=seed)
    for framework in FRAMEWORKS:
        batch = sample_contrastive_batch(g, framework, aug, batch_size=2, seed=seed, radius=1)
        fixed = model.variables(trainable=())
        arrays = {name: model.arrays[name] for name in model.trainable_names()}
        report = gradcheck(lambda v: batch_loss(batch, {**fixed, **v}, bases), arrays, n_coords=n_coords, seed=seed)
        reports.update({f"pretrain[{framework}].{name}": err for name, err in report.items()})
    return reports


def cmd_gradcheck(args):
    cfg = _resolve_config(args)
    reports = _gradcheck_reports(_seed(args, cfg), args.coords)
    failed = []
    for name, err in reports.items():
        status = "ok" if err <= args.tol else "FAIL"
        print(f"{name} {err:.3e} {status}")
        if err > args.tol:
            failed.append(name)
    if failed:
        raise errors.ContractViolation(f"{len(failed)} array(s) exceed relative error {args.tol}: {', '.join(failed)}")
    return 0


def cmd_run(args):
    cfg = _resolve_config(args, experiment__seed=args.seed, experiment__out_dir=args.out_dir)
    if args.acceptance:
        report = run_acceptance(args.acceptance, cfg, write=not args.no_write)
    else:
        report = run_experiment(cfg, write=not args.no_write)
    print(report.to_csv(index=False), end="")
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="Override a config value")
    common.add_argument("--seed", type=int, help="Master seed (default: [experiment] seed)")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")

    parser = argparse.ArgumentParser(prog="igap", description="Spectral graph pre-training and inductive prompt tuning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="Contrastive pre-training")
    inputs = p.add_mutually_exclusive_group()
    inputs.add_argument("--graph", help="Graph file (default: SBM from config)")
    inputs.add_argument("--graphset", help="GraphSet directory")
    p.add_argument("--framework", choices=FRAMEWORKS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True, help="Checkpoint to write")
    p.add_argument("--loss-csv", help="Per-epoch loss CSV")
    p.add_argument("--resume", help="Pre-train checkpoint to continue from")
    p.add_argument("--checkpoint-dir", help="Directory for periodic checkpoints")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="Prompt tuning on a frozen pre-trained model")
    p.add_argument("--pretrained", required=True, help="Pre-train checkpoint")
    inputs = p.add_mutually_exclusive_group()
    inputs.add_argument("--graph", help="Labeled fine-tune graph (default: SBM from config)")
    inputs.add_argument("--graphset", help="GraphSet directory with graph labels")
    p.add_argument("--L", type=int, help="Signal prompt bank size")
    p.add_argument("--K", type=int, help="Aligned eigenvector count")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--ablate", help="none, ps, pt, pl, nolabel or probe")
    p.add_argument("--pt-mode", help="dense or lowrank:R")
    p.add_argument("--out", help="Fine-tune checkpoint to write")
    p.add_argument("--metrics-csv", help="Per-epoch loss and metric CSV")
    p.add_argument("--resume", help="Fine-tune checkpoint to continue from")
    p.add_argument("--checkpoint-dir", help="Directory for periodic checkpoints")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", parents=[common], help="Spectrum report (and metric) of a checkpoint on a graph")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--k", type=int, help="Components in the report (default: all)")
    p.add_argument("--embeddings", help="Also export the backbone embeddings here")
    p.add_argument("--out", help="Report CSV (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("spectrum-report", parents=[common], help="Spectrum report of exported embeddings")
    p.add_argument("--graph", required=True)
    p.add_argument("--embeddings", required=True, help="n x H whitespace-separated rows")
    p.add_argument("--k", type=int)
    p.add_argument("--out", help="Report CSV (default: stdout)")
    p.set_defaults(func=cmd_spectrum_report)

    p = sub.add_parser("split", parents=[common], help="Pre-train / fine-tune split of a labeled graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--setting", choices=SETTINGS)
    p.add_argument("--per-class-train", type=int)
    p.add_argument("--out", required=True, help="Split CSV (role,node)")
    p.add_argument("--graphs-dir", help="Also write pretrain.txt and finetune.txt here")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("spectrum", parents=[common], help="Laplacian eigenpairs of a graph")
    p.add_argument("graph")
    p.add_argument("--k", type=int)
    solver = p.add_mutually_exclusive_group()
    solver.add_argument("--dense", dest="solver", action="store_const", const="dense", help="Dense solver (default)")
    solver.add_argument("--lanczos", dest="solver", action="store_const", const="lanczos", help="Lanczos solver, needs --k")
    p.add_argument("--out", help="Text table (default: stdout)")
    p.add_argument("--dump", help="Binary eigenpair dump in checkpoint format")
    p.set_defaults(func=cmd_spectrum, solver="dense")

    for name, func, help_text in (("gen-sbm", cmd_gen_sbm, "Generate an SBM graph or graph set"),
                                  ("gen-pair", cmd_gen_pair, "Generate a pre-train / fine-tune SBM pair")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--blocks", type=int)
        p.add_argument("--nodes-per-block", type=int)
        p.add_argument("--p-in", type=float)
        p.add_argument("--p-out", type=float)
        p.add_argument("--features", type=int)
        p.set_defaults(func=func)
        if name == "gen-sbm":
            p.add_argument("--graphset", type=int, help="Write a GraphSet of this many graphs instead")
            p.add_argument("--out", required=True, help="Graph file (directory with --graphset)")
        else:
            p.add_argument("--signal-shift", type=float)
            p.add_argument("--structure-shift", type=float)
            p.add_argument("--out-dir", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference check of every trainable array")
    p.add_argument("--coords", type=int, default=20, help="Coordinates per array")
    p.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("run", parents=[common], help="Full pipeline or an acceptance run")
    p.add_argument("--acceptance", choices=ACCEPTANCE_RUNS)
    p.add_argument("--out-dir", help="Output root (default: [experiment] out_dir)")
    p.add_argument("--no-write", action="store_true", help="Print the report only")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    try:
        return args.func(args)
    except errors.IgapError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
