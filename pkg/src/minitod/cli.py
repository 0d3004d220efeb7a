"""Command-line entry point: dataset generation, training, evaluation, the
MIS-strategy ablation and the exact oracle checks.

Exit codes: 0 success, 2 configuration error, 3 numeric abort (non-finite
gradient), 4 oracle tolerance failure.  Every command overwrites its outputs
idempotently.  All execution is single-threaded and bit-reproducible for a
fixed seed; --threads is accepted for interface compatibility and values
above 1 do not change results.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import mis, oracle
from .config import ExperimentConfig
from .data import DataError, Dataset, mask_labels, read_jsonl, write_jsonl
from .metrics import MetricsReport, evaluate_corpus, write_grad_norms, grad_variance
from .models import TabularModel, load_model
from .optim import AdamW, NumericsError
from .trainer import (
    ConfigError,
    TrainConfig,
    make_models,
    rng_stream,
    semi_supervised_train,
)
from .vocab import Vocab, join_latent
from .world import Goal, World, db_query, gen_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_ORACLE = 4

SAMPLER_LABELS = [
    ("none", "Without MIS"),
    ("session", "Session-level MIS"),
    ("recursive", "Recursive turn-level MIS"),
]


def _add_train_overrides(sp) -> None:
    """One flag per TrainConfig field, plus the short aliases."""
    for f in dataclasses.fields(TrainConfig):
        typ = {"int": int, "float": float}.get(f.type, str)
        sp.add_argument(f"--{f.name}", type=typ, default=None)
    sp.add_argument("--proportion", type=float, default=None, help="alias for --label_proportion")
    sp.add_argument("--proposal", choices=["greedy", "stochastic"], default=None,
                    help="alias for --proposal_mode")


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    d = cfg.train.to_dict()
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            d[f.name] = v
    if getattr(args, "proportion", None) is not None:
        d["label_proportion"] = args.proportion
    if getattr(args, "proposal", None) is not None:
        d["proposal_mode"] = args.proposal
    cfg.train = TrainConfig.from_dict(d)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _load_split(cfg: ExperimentConfig, vocab: Vocab, split: str):
    path = os.path.join(cfg.data_dir, f"{split}.jsonl")
    dialogs = read_jsonl(path, vocab)
    goals = {}
    gpath = os.path.join(cfg.data_dir, f"{split}.goals.jsonl")
    with open(gpath, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                obj = json.loads(line)
                goals[obj["id"]] = Goal.from_dict(obj["goal"])
    return dialogs, goals


def cmd_gen(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.out:
        cfg.data_dir = args.out
    world = cfg.world
    os.makedirs(cfg.data_dir, exist_ok=True)
    manifest = {
        "world_hash": world.content_hash(),
        "data_seed": cfg.data_seed,
        "sizes": dict(cfg.dataset_sizes),
        "vocab_hash": world.vocab.content_hash(),
    }
    for split, n in cfg.dataset_sizes.items():
        dialogs, goals = gen_dataset(world, n, cfg.data_seed + {"train": 0, "valid": 1, "test": 2}.get(split, 9), split)
        write_jsonl(dialogs, world.vocab, os.path.join(cfg.data_dir, f"{split}.jsonl"))
        with open(os.path.join(cfg.data_dir, f"{split}.goals.jsonl"), "w", encoding="utf-8") as f:
            for d in dialogs:
                f.write(json.dumps({"id": d.id, "goal": goals[d.id].to_dict()}, sort_keys=True) + "\n")
    world.vocab.save(os.path.join(cfg.data_dir, "vocab.txt"))
    with open(os.path.join(cfg.data_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {sorted(cfg.dataset_sizes)} to {cfg.data_dir} (world {manifest['world_hash'][:12]})")
    return EXIT_OK


def _run_training(cfg: ExperimentConfig, out_dir: str, resume: bool = False) -> dict:
    world = cfg.world
    vocab = world.vocab
    tc = cfg.train
    train_dialogs, train_goals = _load_split(cfg, vocab, "train")
    valid_dialogs, valid_goals = _load_split(cfg, vocab, "valid")
    test_dialogs, test_goals = _load_split(cfg, vocab, "test")

    masked, sealed = mask_labels(train_dialogs, tc.label_proportion, rng_stream(tc.seed, "mask"))
    train_ds = Dataset(dialogs=masked, vocab=vocab, goals=train_goals, sealed_gold=sealed)

    db_fn = lambda b: db_query(world, b)
    n_valid = tc.eval_subset or len(valid_dialogs)
    valid_sub = valid_dialogs[:n_valid]

    def eval_hook(p, q, epoch):
        rng = rng_stream(tc.seed, f"eval.{epoch}")
        return evaluate_corpus(p, q, world, valid_sub, valid_goals,
                               marginal_K=tc.marginal_K, marginal_subset=tc.marginal_subset,
                               rng=rng, latent_max_len=tc.latent_max_len)

    os.makedirs(out_dir, exist_ok=True)
    kwargs = {}
    state_path = os.path.join(out_dir, "state.json")
    if resume:
        if not os.path.exists(state_path):
            raise ConfigError(f"--resume given but no state at {state_path}")
        with open(state_path, encoding="utf-8") as f:
            state = json.load(f)
        p = load_model(os.path.join(out_dir, "p.ckpt"), vocab)
        q = load_model(os.path.join(out_dir, "q.ckpt"), vocab)
        cache = mis.LatentCache.load(os.path.join(out_dir, "cache.jsonl"), vocab)
        kwargs = dict(
            p=p, q=q, cache=cache,
            opt_p=AdamW.load(os.path.join(out_dir, "opt_p.ckpt")),
            opt_q=AdamW.load(os.path.join(out_dir, "opt_q.ckpt")),
            start_epoch=state["next_epoch"], skip_phase1=True,
        )

    result = semi_supervised_train(tc, train_ds, eval_hook=eval_hook, db_fn=db_fn, **kwargs)

    report = MetricsReport()
    if result.pretrain_row is not None:
        report.add(0, "valid", result.pretrain_row)
    for i, row in enumerate(result.history):
        epoch = i + 1
        span = result.epoch_norm_spans[i] if i < len(result.epoch_norm_spans) else None
        norms = result.phi_grad_norms[span[0]: span[1]] if span else []
        gv = grad_variance(norms) if norms and sum(norms) > 0 else ""
        acc = result.epoch_accept_rates[i] if i < len(result.epoch_accept_rates) else ""
        report.add(epoch, "valid", row, mean_accept_rate=acc, phi_grad_norm_variance=gv)

    test_rng = rng_stream(tc.seed, "eval.test")
    test_row = evaluate_corpus(result.p, result.q, world, test_dialogs, test_goals,
                               marginal_K=tc.marginal_K, marginal_subset=tc.marginal_subset,
                               rng=test_rng, latent_max_len=tc.latent_max_len)
    overall_gv = grad_variance(result.phi_grad_norms) if result.phi_grad_norms else ""
    report.add(result.best_epoch, "test", test_row,
               mean_accept_rate=result.cache.acceptance_rate() if result.cache.entries else "",
               phi_grad_norm_variance=overall_gv)

    cfg.save(os.path.join(out_dir, "config.json"))
    result.p.save(os.path.join(out_dir, "p.ckpt"))
    result.q.save(os.path.join(out_dir, "q.ckpt"))
    result.opt_p.save(os.path.join(out_dir, "opt_p.ckpt"))
    result.opt_q.save(os.path.join(out_dir, "opt_q.ckpt"))
    result.cache.save(os.path.join(out_dir, "cache.jsonl"), vocab)
    report.to_csv(os.path.join(out_dir, "metrics.csv"))
    write_grad_norms(os.path.join(out_dir, f"grad_norms_{tc.method}.csv"), result.phi_grad_norms)
    with open(state_path, "w", encoding="utf-8") as f:
        json.dump({"next_epoch": result.stopped_epoch + 1, "best_epoch": result.best_epoch}, f)
        f.write("\n")
    test_row["best_epoch"] = result.best_epoch
    return test_row


def cmd_train(args) -> int:
    cfg = _apply_overrides(ExperimentConfig.load(args.config), args)
    out_dir = os.path.join(cfg.out_dir, f"{cfg.train.method}_seed{cfg.train.seed}")
    row = _run_training(cfg, out_dir, resume=args.resume)
    print(f"method={cfg.train.method} seed={cfg.train.seed} "
          f"test combined={row['combined']:.3f} latent_f1={row['latent_f1']:.4f} "
          f"(best epoch {row['best_epoch']}) -> {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _apply_overrides(ExperimentConfig.load(args.config), args)
    world = cfg.world
    vocab = world.vocab
    ckpt = args.ckpt or os.path.join(cfg.out_dir, f"{cfg.train.method}_seed{cfg.train.seed}")
    p = load_model(os.path.join(ckpt, "p.ckpt"), vocab)
    q = load_model(os.path.join(ckpt, "q.ckpt"), vocab)
    dialogs, goals = _load_split(cfg, vocab, args.split)
    rng = rng_stream(cfg.train.seed, f"cmd_eval.{args.split}")
    row = evaluate_corpus(p, q, world, dialogs, goals, marginal_K=cfg.train.marginal_K,
                          marginal_subset=cfg.train.marginal_subset, rng=rng,
                          latent_max_len=cfg.train.latent_max_len)
    out = {k: row[k] for k in sorted(row)}
    print(json.dumps(out, sort_keys=True))
    if args.out:
        report = MetricsReport()
        report.add(0, args.split, row)
        report.to_csv(args.out)
    return EXIT_OK


def cmd_ablate_mis(args) -> int:
    cfg = _apply_overrides(ExperimentConfig.load(args.config), args)
    rows = []
    for sampler, label in SAMPLER_LABELS:
        run_cfg = ExperimentConfig.from_dict(cfg.to_dict())
        d = run_cfg.train.to_dict()
        d["method"] = "jsa"
        d["sampler"] = sampler
        run_cfg.train = TrainConfig.from_dict(d)
        out_dir = os.path.join(cfg.out_dir, f"ablate_{sampler}_seed{run_cfg.train.seed}")
        row = _run_training(run_cfg, out_dir)
        rows.append((label, row))
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, f"ablate_mis_seed{cfg.train.seed}.csv")
    cols = ["inform", "success", "bleu", "combined", "latent_f1"]
    with open(path, "w", encoding="utf-8") as f:
        f.write("method," + ",".join(cols) + "\n")
        for label, row in rows:
            f.write(label + "," + ",".join(repr(float(row[c])) for c in cols) + "\n")
    for label, row in rows:
        print(f"{label}: combined={row['combined']:.3f}")
    print(f"-> {path}")
    return EXIT_OK


def _oracle_instance(world: World, seed: int, T: int, scale: float = 0.12):
    """A small tabular instance with mildly coupled turns for chain checks."""
    from .data import Dialog, TurnRecord

    vocab = world.vocab
    rng = rng_stream(seed, "oracle.instance")
    p = TabularModel(vocab, "generative")
    p.params[:] = rng.normal(0.0, scale, p.params.shape)
    turns = [TurnRecord(u=(vocab.id("u:dom0"),), b=None, a=None, db=None, r=())]
    for t in range(1, T):
        r = (vocab.id("r:ok"),) if t == T - 1 else ()
        turns.append(TurnRecord(u=(), b=None, a=None, db=None, r=r))
    dialog = Dialog(id=f"oracle-{seed}", turns=turns, labeled=False)
    beliefs = [(vocab.id(f"b:d0-s0={i}"),) for i in range(2)]
    acts = [(vocab.id("act:offer-d0"),), (vocab.id("act:none-d0"),)]
    space = oracle.FiniteLatentSpace([join_latent(vocab, b, a) for b in beliefs for a in acts])
    return p, dialog, space


def cmd_oracle_check(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    world = cfg.world
    seed = cfg.train.seed
    report = {"checks": {}}
    tol_recur = 1e-9

    max_err = 0.0
    for i in range(20):
        T = 2 + (i % 2)
        p, dialog, space = _oracle_instance(world, seed * 1000 + i, T, scale=1.0)
        if args.inject_non_markov:
            base = oracle.MarkovTurnScorer(p, dialog, oracle.empty_db)
            corrupt = _NonMarkovScorer(base, space)
            err = oracle.check_recursion(p, dialog, space, joint_scorer=corrupt)
        else:
            err = oracle.check_recursion(p, dialog, space)
        max_err = max(max_err, err)
    report["checks"]["recursion"] = {"max_abs_error": max_err, "tolerance": tol_recur,
                                     "pass": max_err < tol_recur}

    p, dialog, space = _oracle_instance(world, seed, T=3)
    perfect = oracle.FiniteProposal.exact_filtering(p, dialog, space)
    rep_perfect = oracle.stationarity_report(
        p, perfect, dialog, space, "recursive", sweeps=args.sweeps // 10,
        burn_in=args.burn_in, rng=rng_stream(seed, "oracle.perfect"), seed=seed)
    report["checks"]["perfect_proposal"] = {
        **rep_perfect, "pass": rep_perfect["acceptance_rate"] == 1.0}

    imperfect = perfect.perturbed(0.35)
    for sampler in ("recursive", "session"):
        rep = oracle.stationarity_report(
            p, imperfect, dialog, space, sampler, sweeps=args.sweeps,
            burn_in=args.burn_in, rng=rng_stream(seed, f"oracle.{sampler}"), seed=seed)
        rep["pass"] = rep["tv"] <= 0.05
        report["checks"][f"stationarity_{sampler}"] = rep

    report["pass"] = all(c["pass"] for c in report["checks"].values())
    out_path = args.out or "oracle_report.json"
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    for name, c in report["checks"].items():
        print(f"{name}: {'PASS' if c['pass'] else 'FAIL'}")
    return EXIT_OK if report["pass"] else EXIT_ORACLE


class _NonMarkovScorer:
    """Test hook: a turn factor that also reads the latent two turns back."""

    def __init__(self, base: oracle.MarkovTurnScorer, space):
        self.base = base
        self.space = space

    def turn_log_prob(self, t: int, prefix: tuple) -> float:
        val = self.base.turn_log_prob(t, prefix)
        if t >= 2 and prefix[t - 2] == self.space.candidates[0]:
            val += 4.0
        return val


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="minitod",
                                     description="latent-state dialog training with exact oracles")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen", help="generate the synthetic datasets")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="run one training configuration")
    sp.add_argument("--config", required=True)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", default=None)
    _add_train_overrides(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    sp.add_argument("--config", required=True)
    sp.add_argument("--ckpt", default=None)
    sp.add_argument("--split", default="test", choices=["train", "valid", "test"])
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", default=None)
    _add_train_overrides(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate-mis", help="compare latent-update strategies")
    sp.add_argument("--config", required=True)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", default=None)
    _add_train_overrides(sp)
    sp.set_defaults(func=cmd_ablate_mis)

    sp = sub.add_parser("oracle-check", help="run the exact-enumeration checks")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", default=None)
    sp.add_argument("--sweeps", type=int, default=100000)
    sp.add_argument("--burn_in", type=int, default=200)
    sp.add_argument("--inject-non-markov", action="store_true",
                    help="test hook: corrupt the joint to verify the check detects it")
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_oracle_check)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
