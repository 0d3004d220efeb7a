"""Training: supervised teacher-forcing, semi-supervised latent-sampling
updates, the straight-through variational baseline, scheduling, early
stopping and checkpointing.

Phase 1 pretrains both models on the labeled subset.  Phase 2 interleaves
supervised and unsupervised minibatches; unsupervised dialogs get latents
either from an MIS sweep (treated as labels once accepted), from the
always-accept self-training ablation, or from the straight-through
single-sample ELBO estimator, depending on the configured method.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from . import mis
from .data import DataError, Dataset, Dialog
from .models import NeuralNGramModel, TabularModel
from .optim import AdamW
from .vocab import (
    build_gen_context,
    build_inf_context,
    join_latent,
    latent_is_well_formed,
    make_gen_target,
    split_latent,
)

SupOnly = "sup"
Jsa = "jsa"
VariationalST = "var"

METHODS = (SupOnly, Jsa, VariationalST)
SAMPLERS = ("recursive", "session", "none")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    label_proportion: float = 0.1
    epochs_sup: int = 30
    epochs_semi: int = 40
    batch_size: int = 16
    grad_accum: int = 1
    lr_max: float = 3e-3
    warmup_frac: float = 0.2
    seed: int = 9
    method: str = Jsa
    proposal_mode: str = "greedy"
    early_stop_patience: int = 4
    sup_unsup_mix: float = 1.0  # supervised batches per unsupervised batch
    sampler: str = "recursive"
    weight_decay: float = 0.0
    variant: str = "neural"
    embed_dim: int = 16
    hidden_dim: int = 32
    window: int = 4
    st_sample_mode: str = "stochastic"  # latent draws for the variational baseline
    latent_max_len: int = 16
    turn_max_len: int = 24
    eval_subset: int = 0
    marginal_K: int = 0
    marginal_subset: int = 20

    def validate(self) -> None:
        if not 0.0 < self.label_proportion <= 1.0:
            raise ConfigError("label_proportion must be in (0, 1]")
        for name in ("epochs_sup", "epochs_semi", "batch_size", "grad_accum",
                     "early_stop_patience", "latent_max_len", "turn_max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr_max <= 0 or self.sup_unsup_mix <= 0:
            raise ConfigError("lr_max and sup_unsup_mix must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must be in [0, 1)")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {SAMPLERS}")
        if self.proposal_mode not in ("greedy", "stochastic"):
            raise ConfigError("proposal_mode must be greedy or stochastic")
        if self.st_sample_mode not in ("greedy", "stochastic"):
            raise ConfigError("st_sample_mode must be greedy or stochastic")
        if self.variant not in ("neural", "tabular"):
            raise ConfigError("variant must be neural or tabular")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Deterministic named substream of the master seed."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence((seed, zlib.crc32(name.encode())))))


def make_models(cfg: TrainConfig, vocab):
    if cfg.variant == "tabular":
        return TabularModel(vocab, "generative"), TabularModel(vocab, "inference")
    p = NeuralNGramModel(vocab, "generative", cfg.embed_dim, cfg.hidden_dim,
                         cfg.window, init_seed=cfg.seed * 2 + 1)
    q = NeuralNGramModel(vocab, "inference", cfg.embed_dim, cfg.hidden_dim,
                         cfg.window, init_seed=cfg.seed * 2 + 2)
    return p, q


def _turn_factors(vocab, dialog: Dialog, t: int, prev_b, h, db):
    """(gen context, gen target, inf context, latent target) for one turn."""
    turn = dialog.turns[t]
    prev_r = dialog.turns[t - 1].r if t > 0 else ()
    b, a = split_latent(vocab, h)
    gen_ctx = build_gen_context(vocab, prev_b, prev_r, turn.u)
    gen_target, _ = make_gen_target(vocab, b, a, turn.r, tuple(db))
    inf_ctx = build_inf_context(vocab, prev_b, prev_r, turn.u, turn.r)
    return gen_ctx, gen_target, inf_ctx, h


def dialog_log_probs_and_grads(p, q, dialog: Dialog, latents, db_fn, gp, gq):
    """Teacher-forced joint and inference log-probs with gradient accumulation.

    ``latents`` is None for labeled dialogs (gold labels and stored db are
    used); otherwise it is the sampled trajectory and db is recomputed from
    each sampled belief.  Malformed sampled latents skip their turn.
    Returns (sum log p, sum log q, skipped turn count).
    """
    vocab = p.vocab
    lp_total = lq_total = 0.0
    skipped = 0
    prev_b = ()
    for t, turn in enumerate(dialog.turns):
        if latents is None:
            h = join_latent(vocab, turn.b, turn.a)
            db = turn.db if turn.db is not None else db_fn(turn.b)
        else:
            h = latents[t]
            if not latent_is_well_formed(vocab, h):
                skipped += 1
                prev_b = mis.belief_of(vocab, h)
                continue
            db = db_fn(split_latent(vocab, h)[0])
        gen_ctx, gen_target, inf_ctx, h_target = _turn_factors(
            vocab, dialog, t, prev_b, h, db)
        lp_total += p.accumulate_grad(gen_ctx, gen_target, gp)
        lq_total += q.accumulate_grad(inf_ctx, h_target, gq)
        prev_b = split_latent(vocab, h)[0]
    return lp_total, lq_total, skipped


def supervised_step(p, q, batch: list[Dialog], opt_p: AdamW, opt_q: AdamW, db_fn):
    """One teacher-forced update on labeled dialogs; returns mean NLLs."""
    for d in batch:
        if not d.labeled:
            raise DataError(f"supervised_step got unlabeled dialog {d.id}")
    gp = np.zeros_like(p.params)
    gq = np.zeros_like(q.params)
    lp = lq = 0.0
    for d in batch:
        dlp, dlq, _ = dialog_log_probs_and_grads(p, q, d, None, db_fn, gp, gq)
        lp += dlp
        lq += dlq
    n = len(batch)
    loss_grad_p = -gp / n
    loss_grad_q = -gq / n
    opt_p.update(p.params, loss_grad_p)
    opt_q.update(q.params, loss_grad_q)
    return -lp / n, -lq / n, float(np.sqrt(np.sum(loss_grad_q ** 2)))


def sample_latents(p, q, dialog: Dialog, cache: mis.LatentCache, rng, cfg: TrainConfig, db_fn):
    """Draw one latent trajectory for an unlabeled dialog per the configured sampler."""
    if cfg.sampler == "none":
        return mis.propose_only(q, dialog, rng, cfg.proposal_mode, cfg.latent_max_len)
    mis.ensure_initialized(cache, q, dialog, rng, cfg.latent_max_len)
    run = mis.recursive_turn_mis if cfg.sampler == "recursive" else mis.session_mis
    return run(p, q, dialog, cache, rng, cfg.proposal_mode, db_fn, cfg.latent_max_len)


def jsa_unsup_step(p, q, batch: list[Dialog], cache: mis.LatentCache, opt_p: AdamW,
                   opt_q: AdamW, rng, cfg: TrainConfig, db_fn):
    """Sample latents, then update exactly as if they were labels."""
    gp = np.zeros_like(p.params)
    gq = np.zeros_like(q.params)
    j_p = j_q = 0.0
    for d in batch:
        latents = sample_latents(p, q, d, cache, rng, cfg, db_fn)
        dlp, dlq, _ = dialog_log_probs_and_grads(p, q, d, latents, db_fn, gp, gq)
        j_p += dlp
        j_q += dlq
    n = len(batch)
    loss_grad_p = -gp / n
    loss_grad_q = -gq / n
    opt_p.update(p.params, loss_grad_p)
    opt_q.update(q.params, loss_grad_q)
    return j_p / n, j_q / n, float(np.sqrt(np.sum(loss_grad_q ** 2)))


def _st_turn_phi_path(p, q, gen_ctx, gen_target, inf_ctx, h, gq_elbo):
    """Straight-through path of the per-turn ELBO into the inference params.

    The sampled latent's one-hot rows are relaxed as hard + soft - detached
    soft; gradients flow through every place the latent enters as embedding
    input (gather semantics: the discrete index selection itself does not
    propagate).  For tabular models inputs are discrete keys, so the path
    vanishes and only the score term remains.
    """
    vocab = q.vocab
    _, _, _, _, demb_p = p.detailed_score(gen_ctx, gen_target)
    _, idx_q, states_q, logsoft_q, demb_q = q.detailed_score(inf_ctx, h)
    if demb_p is None and demb_q is None:
        return  # tabular/tabular: nothing flows through the input path
    b, a = split_latent(vocab, h)
    n_b = len(b)
    # db span width (db tokens plus SEP_DB) inside the generative target
    n_r = _resp_len(gen_target, vocab)
    db_span = len(gen_target) - (n_b + 1) - (len(a) + 1) - (n_r + 1)

    def gen_pos(j: int):
        """Full-sequence position of latent token j inside the gen target."""
        if j <= n_b:
            return j  # belief tokens and SEP_B align one-to-one
        if j == len(h) - 1:
            return None  # the latent's EOS has no generative counterpart
        return j + db_span  # act tokens shift past the injected db span

    n_gen_ctx = len(gen_ctx)
    n_inf_ctx = len(inf_ctx)
    for row, (j, state) in enumerate(zip(idx_q, states_q)):
        dy = np.zeros(len(vocab))
        if demb_p is not None:
            gpos = gen_pos(j)
            if gpos is not None:
                dy += p.E @ demb_p[n_gen_ctx + gpos]
        if demb_q is not None:
            dy -= q.E @ demb_q[n_inf_ctx + j]
        if not np.any(dy):
            continue
        s = np.exp(logsoft_q[row])
        s[~np.isfinite(logsoft_q[row])] = 0.0
        dlogits = s * dy - s * float(s @ dy)
        q.step_vjp(state, dlogits, gq_elbo)


def _resp_len(gen_target, vocab) -> int:
    i = len(gen_target) - 2  # skip EOS
    n = 0
    while i >= 0 and gen_target[i] != vocab.sep_a:
        n += 1
        i -= 1
    return n


def variational_st_step(p, q, batch: list[Dialog], opt_p: AdamW, opt_q: AdamW,
                        rng, cfg: TrainConfig, db_fn):
    """Single-sample straight-through ELBO ascent on unlabeled dialogs.

    Per turn, a latent is drawn from q and treated as a relaxed one-hot.  The
    reconstruction gradient reaches theta directly.  Phi receives both the
    straight-through input path (gradients flowing through every place the
    relaxed rows enter as embeddings) and the score term
    (log p - log q) * grad log q at the sample, with no baseline or control
    variate.  Malformed draws skip their turn.
    """
    vocab = q.vocab
    gp_elbo = np.zeros_like(p.params)
    gq_elbo = np.zeros_like(q.params)
    elbo = 0.0
    n_terms = 0
    for dialog in batch:
        prev_b = ()
        for t, turn in enumerate(dialog.turns):
            prev_r = dialog.turns[t - 1].r if t > 0 else ()
            inf_ctx = build_inf_context(vocab, prev_b, prev_r, turn.u, turn.r)
            h = q.sample(inf_ctx, cfg.latent_max_len, cfg.st_sample_mode, rng)
            if not latent_is_well_formed(vocab, h):
                prev_b = mis.belief_of(vocab, h)
                continue
            b, a = split_latent(vocab, h)
            gen_ctx = build_gen_context(vocab, prev_b, prev_r, turn.u)
            gen_target, _ = make_gen_target(vocab, b, a, turn.r, tuple(db_fn(b)))
            lp = p.accumulate_grad(gen_ctx, gen_target, gp_elbo)
            gq_score = np.zeros_like(q.params)
            lq = q.accumulate_grad(inf_ctx, h, gq_score)
            f = lp - lq
            # (f - 1) folds the ELBO's direct -grad log q derivative into the
            # score term
            gq_elbo += (f - 1.0) * gq_score
            _st_turn_phi_path(p, q, gen_ctx, gen_target, inf_ctx, h, gq_elbo)
            elbo += f
            n_terms += 1
            prev_b = b
    n = len(batch)
    loss_grad_p = -gp_elbo / n
    loss_grad_q = -gq_elbo / n
    opt_p.update(p.params, loss_grad_p)
    opt_q.update(q.params, loss_grad_q)
    return elbo / max(n_terms, 1), float(np.sqrt(np.sum(loss_grad_q ** 2)))


@dataclass
class TrainResult:
    p: object
    q: object
    history: list = field(default_factory=list)
    phi_grad_norms: list = field(default_factory=list)
    unsup_grad_norms: list = field(default_factory=list)
    epoch_norm_spans: list = field(default_factory=list)
    cache: mis.LatentCache = field(default_factory=mis.LatentCache)
    best_epoch: int = 0
    best_score: float = float("-inf")
    stopped_epoch: int = 0
    epoch_accept_rates: list = field(default_factory=list)
    opt_p: object = None
    opt_q: object = None
    pretrain_row: dict = None


def _batches(items: list, size: int, rng) -> list[list]:
    order = rng.permutation(len(items))
    return [
        [items[j] for j in order[i: i + size]]
        for i in range(0, len(items), size)
    ]


def semi_supervised_train(cfg: TrainConfig, train: Dataset, eval_hook=None,
                          db_fn=None, p=None, q=None, cache=None,
                          opt_p=None, opt_q=None, start_epoch: int = 1,
                          skip_phase1: bool = False) -> TrainResult:
    """Two-phase training per the configured method; returns the best models.

    ``eval_hook(p, q, epoch)`` must return a dict with at least a "combined"
    entry; it drives per-epoch validation and early stopping.  Models,
    optimizers, cache and start_epoch may be supplied to resume an
    interrupted phase-2 run.
    """
    cfg.validate()
    labeled = train.labeled
    unlabeled = train.unlabeled
    if not labeled:
        raise ConfigError("no labeled dialogs; check label_proportion / masking")
    if db_fn is None:
        raise ConfigError("db_fn is required (deterministic DB lookup)")
    if p is None or q is None:
        p, q = make_models(cfg, train.vocab)
    cache = cache if cache is not None else mis.LatentCache()

    # grad_accum folds consecutive minibatches into one update
    eff_batch = cfg.batch_size * cfg.grad_accum
    n_sup1 = -(-len(labeled) // eff_batch)
    if cfg.method == SupOnly:
        n_unsup = 0
        n_sup2 = n_sup1
    else:
        n_unsup = -(-len(unlabeled) // eff_batch)
        n_sup2 = max(1, round(cfg.sup_unsup_mix * n_unsup))

    rng_phase1 = rng_stream(cfg.seed, "data.phase1")
    rng_phase2 = rng_stream(cfg.seed, "data.phase2")
    rng_unsup = rng_stream(cfg.seed, "unsup")

    result = TrainResult(p=p, q=q, cache=cache)

    # phase 1: supervised pretraining with its own warmup/decay schedule;
    # method-independent by construction
    if not skip_phase1:
        steps1 = cfg.epochs_sup * n_sup1
        opt_p1 = AdamW(len(p.params), cfg.lr_max, steps1, cfg.warmup_frac,
                       weight_decay=cfg.weight_decay)
        opt_q1 = AdamW(len(q.params), cfg.lr_max, steps1, cfg.warmup_frac,
                       weight_decay=cfg.weight_decay)
        for _ in range(cfg.epochs_sup):
            for batch in _batches(labeled, eff_batch, rng_phase1):
                supervised_step(p, q, batch, opt_p1, opt_q1, db_fn)
        if eval_hook is not None:
            result.pretrain_row = eval_hook(p, q, 0)

    # phase 2 runs a fresh optimizer and schedule
    steps2 = cfg.epochs_semi * (n_sup2 + n_unsup)
    if opt_p is None:
        opt_p = AdamW(len(p.params), cfg.lr_max, steps2, cfg.warmup_frac,
                      weight_decay=cfg.weight_decay)
    if opt_q is None:
        opt_q = AdamW(len(q.params), cfg.lr_max, steps2, cfg.warmup_frac,
                      weight_decay=cfg.weight_decay)
    result.opt_p = opt_p
    result.opt_q = opt_q

    # phase 2: interleaved supervised / unsupervised minibatches
    # (on resume, fast-forward the shuffling stream past completed epochs)
    for _ in range(start_epoch - 1):
        rng_phase2.permutation(len(labeled))
        if cfg.method != SupOnly:
            rng_phase2.permutation(len(unlabeled))
    best_p = p.params.copy()
    best_q = q.params.copy()
    bad = 0
    for epoch in range(start_epoch, cfg.epochs_semi + 1):
        sup_batches = _batches(labeled, eff_batch, rng_phase2)
        if cfg.method == SupOnly:
            schedule = [("sup", b) for b in sup_batches]
        else:
            unsup_batches = _batches(unlabeled, eff_batch, rng_phase2)
            need = max(1, round(cfg.sup_unsup_mix * len(unsup_batches)))
            sup_cycle = [sup_batches[i % len(sup_batches)] for i in range(need)]
            schedule = []
            used = 0
            credit = 0.0
            for ub in unsup_batches:
                credit += need / len(unsup_batches)
                while used < need and credit >= 1.0 - 1e-12:
                    schedule.append(("sup", sup_cycle[used]))
                    used += 1
                    credit -= 1.0
                schedule.append(("unsup", ub))
            while used < need:
                schedule.append(("sup", sup_cycle[used]))
                used += 1
        accept_before = (sum(sum(v) for v in cache.accepts.values()),
                         sum(sum(v) for v in cache.steps.values()))
        span_start = len(result.phi_grad_norms)
        for kind, batch in schedule:
            if kind == "sup":
                _, _, gq_norm = supervised_step(p, q, batch, opt_p, opt_q, db_fn)
            elif cfg.method == Jsa:
                _, _, gq_norm = jsa_unsup_step(p, q, batch, cache, opt_p, opt_q,
                                               rng_unsup, cfg, db_fn)
                result.unsup_grad_norms.append(gq_norm)
            else:
                _, gq_norm = variational_st_step(p, q, batch, opt_p, opt_q,
                                                 rng_unsup, cfg, db_fn)
                result.unsup_grad_norms.append(gq_norm)
            # the recorded series covers every inference-model update in the
            # semi-supervised phase
            result.phi_grad_norms.append(gq_norm)
        result.epoch_norm_spans.append((span_start, len(result.phi_grad_norms)))
        acc_a = sum(sum(v) for v in cache.accepts.values()) - accept_before[0]
        acc_s = sum(sum(v) for v in cache.steps.values()) - accept_before[1]
        result.epoch_accept_rates.append(acc_a / acc_s if acc_s else "")

        row = eval_hook(p, q, epoch) if eval_hook else {"combined": 0.0}
        result.history.append(row)
        score = row["combined"]
        if score > result.best_score:
            result.best_score = score
            result.best_epoch = epoch
            best_p = p.params.copy()
            best_q = q.params.copy()
            bad = 0
        else:
            bad += 1
        result.stopped_epoch = epoch
        if bad >= cfg.early_stop_patience:
            break

    p.set_params(best_p)
    q.set_params(best_q)
    return result
