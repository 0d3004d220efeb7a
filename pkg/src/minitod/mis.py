"""Metropolis independence sampling over latent dialog states.

Each unlabeled dialog owns a cached latent trajectory, the chain's current
state.  A sweep proposes a fresh latent per turn from the inference model and
accepts or rejects it against the cached one using the importance ratio
between the generative turn factor and the proposal probability.  The
denominator weight pairs the NEW sweep prefix with the OLD cached turn
latent.  All weights live in the log domain; a malformed latent (no SEP_B)
carries weight -inf and can never displace a well-formed one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .data import Dialog
from .vocab import (
    TokenSeq,
    Vocab,
    build_gen_context,
    build_inf_context,
    latent_is_well_formed,
    make_gen_target,
    split_latent,
)

NEG_INF = float("-inf")
DEFAULT_LATENT_MAX_LEN = 16


class CacheError(RuntimeError):
    pass


@dataclass
class MisOutcome:
    h: TokenSeq
    accepted: bool
    log_ratio: float  # numerator minus denominator log-weight, before clamping


class LatentCache:
    """Cached latent trajectories plus per-turn acceptance counters."""

    def __init__(self):
        self.entries: dict[str, list[TokenSeq]] = {}
        self.accepts: dict[str, list[int]] = {}
        self.steps: dict[str, list[int]] = {}

    def initialized(self, dialog_id: str) -> bool:
        return dialog_id in self.entries

    def get(self, dialog_id: str) -> list[TokenSeq]:
        if dialog_id not in self.entries:
            raise CacheError(f"latent cache not initialized for dialog {dialog_id}")
        return self.entries[dialog_id]

    def put(self, dialog_id: str, latents: list[TokenSeq]) -> None:
        self.entries[dialog_id] = list(latents)
        self.accepts.setdefault(dialog_id, [0] * len(latents))
        self.steps.setdefault(dialog_id, [0] * len(latents))

    def record(self, dialog_id: str, turn: int, accepted: bool) -> None:
        self.steps[dialog_id][turn] += 1
        if accepted:
            self.accepts[dialog_id][turn] += 1

    def acceptance_rate(self) -> float:
        acc = sum(sum(v) for v in self.accepts.values())
        tot = sum(sum(v) for v in self.steps.values())
        return acc / tot if tot else 0.0

    def save(self, path, vocab: Vocab) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for did in sorted(self.entries):
                obj = {"id": did, "latents": [vocab.strings(h) for h in self.entries[did]]}
                f.write(json.dumps(obj, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, vocab: Vocab) -> "LatentCache":
        cache = cls()
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                cache.put(obj["id"], [vocab.ids(toks) for toks in obj["latents"]])
        return cache


def belief_of(vocab: Vocab, h: TokenSeq) -> TokenSeq:
    """Belief span of a latent, tolerant of malformed input (for conditioning only)."""
    if vocab.sep_b in h:
        return h[: h.index(vocab.sep_b)]
    return tuple(t for t in h if t != vocab.eos)


def importance_log_weight(p, q, prev_b: TokenSeq, prev_r: TokenSeq, u: TokenSeq,
                          r: TokenSeq, h: TokenSeq, db_fn) -> float:
    """log of the (unnormalized) target/proposal ratio for one turn latent.

    Target factor: p(h, db(h_belief), r | b_prev, r_prev, u); proposal factor:
    q(h | b_prev, r_prev, u, r).  Returns -inf for malformed h.
    """
    vocab = p.vocab
    if not latent_is_well_formed(vocab, h):
        return NEG_INF
    b, a = split_latent(vocab, h)
    gen_ctx = build_gen_context(vocab, prev_b, prev_r, u)
    target, _ = make_gen_target(vocab, b, a, r, tuple(db_fn(b)))
    lp_p = p.log_prob(gen_ctx, target)
    if lp_p == NEG_INF:
        return NEG_INF
    inf_ctx = build_inf_context(vocab, prev_b, prev_r, u, r)
    lp_q = q.log_prob(inf_ctx, h)
    return lp_p - lp_q


def _accept(log_num: float, log_den: float, rng) -> tuple[bool, float]:
    """MIS accept decision in the log domain.

    The uniform draw is skipped whenever the ratio already clamps to one, so
    a chain with all-ratio-one steps consumes exactly the proposal draws.
    """
    if log_num == NEG_INF:
        return False, NEG_INF
    if log_den == NEG_INF:
        return True, math.inf
    log_ratio = log_num - log_den
    if log_ratio >= 0.0:
        return True, log_ratio
    xi = rng.random()
    if xi <= 0.0:
        return True, log_ratio
    return math.log(xi) <= log_ratio, log_ratio


def mis_turn_step(p, q, prev_b: TokenSeq, prev_r: TokenSeq, u: TokenSeq, r: TokenSeq,
                  cached_h: TokenSeq, rng, proposal_mode: str, db_fn,
                  max_len: int = DEFAULT_LATENT_MAX_LEN) -> MisOutcome:
    """Propose h' ~ q and accept with min{1, w(h') / w(cached)}."""
    vocab = q.vocab
    inf_ctx = build_inf_context(vocab, prev_b, prev_r, u, r)
    proposed = q.sample(inf_ctx, max_len, proposal_mode, rng)
    log_num = importance_log_weight(p, q, prev_b, prev_r, u, r, proposed, db_fn)
    log_den = importance_log_weight(p, q, prev_b, prev_r, u, r, cached_h, db_fn)
    accepted, log_ratio = _accept(log_num, log_den, rng)
    return MisOutcome(h=proposed if accepted else cached_h, accepted=accepted,
                      log_ratio=log_ratio)


def recursive_turn_mis(p, q, dialog: Dialog, cache: LatentCache, rng,
                       proposal_mode: str, db_fn,
                       max_len: int = DEFAULT_LATENT_MAX_LEN) -> list[TokenSeq]:
    """One turn-by-turn MIS sweep over a dialog.

    Turn t conditions on the latent selected in THIS sweep at t-1 and
    compares the proposal against the cached turn-t latent.  The cache is
    overwritten with the sweep's output.
    """
    vocab = q.vocab
    cached = cache.get(dialog.id)
    out: list[TokenSeq] = []
    for t, turn in enumerate(dialog.turns):
        prev_b = belief_of(vocab, out[t - 1]) if t > 0 else ()
        prev_r = dialog.turns[t - 1].r if t > 0 else ()
        outcome = mis_turn_step(p, q, prev_b, prev_r, turn.u, turn.r,
                                cached[t], rng, proposal_mode, db_fn, max_len)
        cache.record(dialog.id, t, outcome.accepted)
        out.append(outcome.h)
    cache.put(dialog.id, out)
    return out


def session_log_weight(p, q, dialog: Dialog, latents: list[TokenSeq], db_fn) -> float:
    """Sum of per-turn importance log-weights along one whole trajectory."""
    vocab = p.vocab
    total = 0.0
    for t, turn in enumerate(dialog.turns):
        prev_b = belief_of(vocab, latents[t - 1]) if t > 0 else ()
        prev_r = dialog.turns[t - 1].r if t > 0 else ()
        w = importance_log_weight(p, q, prev_b, prev_r, turn.u, turn.r, latents[t], db_fn)
        if w == NEG_INF:
            return NEG_INF
        total += w
    return total


def session_mis(p, q, dialog: Dialog, cache: LatentCache, rng, proposal_mode: str,
                db_fn, max_len: int = DEFAULT_LATENT_MAX_LEN) -> list[TokenSeq]:
    """Whole-session MIS: ancestral proposal of h_{1:T}, one accept/reject."""
    vocab = q.vocab
    cached = cache.get(dialog.id)
    proposed: list[TokenSeq] = []
    for t, turn in enumerate(dialog.turns):
        prev_b = belief_of(vocab, proposed[t - 1]) if t > 0 else ()
        prev_r = dialog.turns[t - 1].r if t > 0 else ()
        inf_ctx = build_inf_context(vocab, prev_b, prev_r, turn.u, turn.r)
        proposed.append(q.sample(inf_ctx, max_len, proposal_mode, rng))
    log_num = session_log_weight(p, q, dialog, proposed, db_fn)
    log_den = session_log_weight(p, q, dialog, cached, db_fn)
    accepted, _ = _accept(log_num, log_den, rng)
    out = proposed if accepted else cached
    for t in range(dialog.T):
        cache.record(dialog.id, t, accepted)
    cache.put(dialog.id, out)
    return list(out)


def propose_only(q, dialog: Dialog, rng, proposal_mode: str,
                 max_len: int = DEFAULT_LATENT_MAX_LEN) -> list[TokenSeq]:
    """Self-training ablation: ancestral proposal, always accepted.

    Never consults the generative model or the cache.
    """
    vocab = q.vocab
    out: list[TokenSeq] = []
    for t, turn in enumerate(dialog.turns):
        prev_b = belief_of(vocab, out[t - 1]) if t > 0 else ()
        prev_r = dialog.turns[t - 1].r if t > 0 else ()
        inf_ctx = build_inf_context(vocab, prev_b, prev_r, turn.u, turn.r)
        out.append(q.sample(inf_ctx, max_len, proposal_mode, rng))
    return out


def ensure_initialized(cache: LatentCache, q, dialog: Dialog, rng,
                       max_len: int = DEFAULT_LATENT_MAX_LEN) -> None:
    """First visit: seed the chain with the inference model's greedy guess."""
    if cache.initialized(dialog.id):
        return
    latents = propose_only(q, dialog, rng, "greedy", max_len)
    cache.put(dialog.id, latents)
