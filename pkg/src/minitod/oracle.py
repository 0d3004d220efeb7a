"""Exact brute-force machinery on small instances.

Restricting latents to an explicit candidate list makes everything
enumerable: the posterior over whole trajectories, the per-turn filtering
recursion, and the stationary behavior of the MIS samplers.  Proposals are
renormalized over the candidate list so empirical chains and enumerated
distributions share support; the renormalization constant cancels inside
acceptance ratios, so the samplers themselves run unmodified.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import mis
from .data import Dialog
from .models import Greedy, Stochastic
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
ENUM_BUDGET = 10 ** 6


class OracleError(RuntimeError):
    pass


def empty_db(belief: TokenSeq) -> TokenSeq:
    """Default db injection for oracle micro-instances: nothing injected."""
    return ()


@dataclass
class FiniteLatentSpace:
    candidates: list[TokenSeq]

    def __post_init__(self):
        if len(set(self.candidates)) != len(self.candidates):
            raise OracleError("latent candidates must be deduplicated")
        if len(self.candidates) > 16:
            raise OracleError("finite latent space capped at 16 candidates")

    def __len__(self) -> int:
        return len(self.candidates)

    def validate(self, vocab: Vocab) -> None:
        for h in self.candidates:
            if not latent_is_well_formed(vocab, h):
                raise OracleError(f"candidate latent {h} is malformed")


@dataclass
class ExactPosterior:
    """Normalized distribution over latent trajectories (tuples over H)."""

    table: dict[tuple, float]

    def prob(self, traj: tuple) -> float:
        return self.table.get(tuple(traj), 0.0)

    def turn_marginal(self, t: int) -> dict[TokenSeq, float]:
        out: dict[TokenSeq, float] = {}
        for traj, p in self.table.items():
            out[traj[t]] = out.get(traj[t], 0.0) + p
        return out

    def sample(self, rng) -> tuple:
        trajs = sorted(self.table)
        probs = np.array([self.table[t] for t in trajs])
        idx = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
        return trajs[min(idx, len(trajs) - 1)]


class MarkovTurnScorer:
    """log p(h_t, r_t | h_{t-1}, r_{t-1}, u_t) for a trajectory prefix.

    Reads only the immediately preceding latent; memoized on
    (turn, previous latent, current latent).
    """

    def __init__(self, p, dialog: Dialog, db_fn=empty_db):
        self.p = p
        self.dialog = dialog
        self.db_fn = db_fn
        self._memo: dict = {}

    def turn_log_prob(self, t: int, prefix: tuple) -> float:
        h_prev = prefix[t - 1] if t > 0 else None
        h = prefix[t]
        key = (t, h_prev, h)
        if key in self._memo:
            return self._memo[key]
        vocab = self.p.vocab
        turn = self.dialog.turns[t]
        prev_b = mis.belief_of(vocab, h_prev) if t > 0 else ()
        prev_r = self.dialog.turns[t - 1].r if t > 0 else ()
        if not latent_is_well_formed(vocab, h):
            val = NEG_INF
        else:
            b, a = split_latent(vocab, h)
            ctx = build_gen_context(vocab, prev_b, prev_r, turn.u)
            target, _ = make_gen_target(vocab, b, a, turn.r, tuple(self.db_fn(b)))
            val = self.p.log_prob(ctx, target)
        self._memo[key] = val
        return val


def _normalize_log_table(raw: dict) -> dict:
    vals = [v for v in raw.values() if v > NEG_INF]
    if not vals:
        raise OracleError("all trajectories have zero probability")
    m = max(vals)
    z = m + math.log(sum(math.exp(v - m) for v in vals))
    return {k: (math.exp(v - z) if v > NEG_INF else 0.0) for k, v in raw.items()}


def enumerate_posterior(p, dialog: Dialog, space: FiniteLatentSpace,
                        db_fn=empty_db, scorer=None) -> ExactPosterior:
    """Exact posterior over H^T by scoring every trajectory and normalizing."""
    space.validate(p.vocab)
    T = dialog.T
    if len(space) ** T > ENUM_BUDGET:
        raise OracleError(f"|H|^T = {len(space)}^{T} exceeds enumeration budget")
    scorer = scorer or MarkovTurnScorer(p, dialog, db_fn)
    raw = {}
    for traj in itertools.product(space.candidates, repeat=T):
        lw = 0.0
        for t in range(T):
            v = scorer.turn_log_prob(t, traj[: t + 1])
            if v == NEG_INF:
                lw = NEG_INF
                break
            lw += v
        raw[traj] = lw
    return ExactPosterior(_normalize_log_table(raw))


def check_recursion(p, dialog: Dialog, space: FiniteLatentSpace,
                    db_fn=empty_db, joint_scorer=None) -> float:
    """Verify the filtering-posterior recursion by full enumeration.

    For each t, the posterior over length-t prefixes given the first t turns
    must be proportional to (posterior over length-(t-1) prefixes) times the
    Markov turn factor.  Both sides are enumerated independently and compared
    after normalization; the max absolute probability error is returned.  A
    non-Markov joint (via ``joint_scorer``) breaks the identity detectably.
    """
    space.validate(p.vocab)
    T = dialog.T
    markov = MarkovTurnScorer(p, dialog, db_fn)
    joint = joint_scorer or markov
    if len(space) ** T > ENUM_BUDGET:
        raise OracleError("enumeration budget exceeded")

    def prefix_posterior(t_incl: int) -> dict:
        raw = {}
        for traj in itertools.product(space.candidates, repeat=t_incl + 1):
            lw = 0.0
            for s in range(t_incl + 1):
                v = joint.turn_log_prob(s, traj[: s + 1])
                if v == NEG_INF:
                    lw = NEG_INF
                    break
                lw += v
            raw[traj] = lw
        return _normalize_log_table(raw)

    max_err = 0.0
    prev = {(): 1.0}
    for t in range(T):
        lhs = prefix_posterior(t)
        raw_rhs = {}
        for prefix_prev, p_prev in prev.items():
            for h in space.candidates:
                traj = prefix_prev + (h,)
                factor = markov.turn_log_prob(t, traj)
                lp = math.log(p_prev) if p_prev > 0.0 else NEG_INF
                raw_rhs[traj] = lp + factor if (lp > NEG_INF and factor > NEG_INF) else NEG_INF
        rhs = _normalize_log_table(raw_rhs)
        for traj in lhs:
            max_err = max(max_err, abs(lhs[traj] - rhs.get(traj, 0.0)))
        prev = lhs
    return max_err


def tv_distance(a: dict, b: dict) -> float:
    """Total variation distance between two distributions over a common space."""
    keys = set(a) | set(b)
    return 0.5 * sum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys)


class MemoizedModel:
    """log_prob cache around a frozen model; long chains revisit few targets."""

    def __init__(self, model):
        self._model = model
        self.vocab = model.vocab
        self.kind = model.kind
        self._cache: dict = {}

    def log_prob(self, context, target) -> float:
        key = (tuple(context), tuple(target))
        if key not in self._cache:
            self._cache[key] = self._model.log_prob(context, target)
        return self._cache[key]

    def sample(self, context, max_len, mode, rng, db_fn=None):
        return self._model.sample(context, max_len, mode, rng, db_fn)


class FiniteProposal:
    """A proposal restricted to an explicit candidate list, keyed by context.

    Quacks like an inference-kind model for the MIS samplers: ``sample`` draws
    a candidate, ``log_prob`` scores one.  Because the candidate set is shared
    with the enumeration oracle, empirical chains and exact posteriors live on
    the same support.
    """

    kind = "inference"

    def __init__(self, vocab: Vocab, table: dict):
        # table: context TokenSeq -> (candidates list, log-prob ndarray)
        self.vocab = vocab
        self.table = table

    def _row(self, context: TokenSeq):
        try:
            return self.table[tuple(context)]
        except KeyError:
            raise OracleError(f"finite proposal has no row for context {context}") from None

    def log_prob(self, context: TokenSeq, target: TokenSeq) -> float:
        cands, logp = self._row(context)
        for h, lp in zip(cands, logp):
            if h == tuple(target):
                return float(lp)
        return NEG_INF

    def sample(self, context: TokenSeq, max_len: int, mode: str, rng, db_fn=None) -> TokenSeq:
        cands, logp = self._row(context)
        if mode == Greedy:
            return cands[int(np.argmax(logp))]
        probs = np.exp(logp - logp.max())
        probs = probs / probs.sum()
        idx = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
        return cands[min(idx, len(cands) - 1)]

    # -- constructors --------------------------------------------------------

    @staticmethod
    def contexts_for(dialog: Dialog, space: FiniteLatentSpace, vocab: Vocab):
        """All (t, prev latent, context) triples a sweep over the dialog can visit."""
        out = []
        for t, turn in enumerate(dialog.turns):
            prevs = [None] if t == 0 else list(space.candidates)
            for h_prev in prevs:
                prev_b = mis.belief_of(vocab, h_prev) if h_prev is not None else ()
                prev_r = dialog.turns[t - 1].r if t > 0 else ()
                ctx = build_inf_context(vocab, prev_b, prev_r, turn.u, turn.r)
                out.append((t, h_prev, ctx))
        return out

    @classmethod
    def from_model(cls, q, dialog: Dialog, space: FiniteLatentSpace) -> "FiniteProposal":
        """Renormalize a token-level inference model over the candidate list."""
        vocab = q.vocab
        table = {}
        for _, _, ctx in cls.contexts_for(dialog, space, vocab):
            if ctx in table:
                continue
            lps = np.array([q.log_prob(ctx, h) for h in space.candidates])
            if np.all(np.isneginf(lps)):
                raise OracleError("inference model assigns zero mass to every candidate")
            m = np.max(lps[np.isfinite(lps)])
            z = m + np.log(np.sum(np.exp(np.where(np.isfinite(lps), lps - m, NEG_INF))))
            table[ctx] = (list(space.candidates), lps - z)
        return cls(vocab, table)

    @classmethod
    def exact_filtering(cls, p, dialog: Dialog, space: FiniteLatentSpace,
                        db_fn=empty_db) -> "FiniteProposal":
        """The perfect proposal: per-turn conditionals of the filtering recursion.

        q*(h_t | h_{t-1}) is proportional to the Markov turn factor, so every
        importance weight within a turn is the same constant and MIS accepts
        with probability one.
        """
        vocab = p.vocab
        scorer = MarkovTurnScorer(p, dialog, db_fn)
        table = {}
        for t, h_prev, ctx in cls.contexts_for(dialog, space, vocab):
            if ctx in table:
                continue
            lps = np.array([
                scorer.turn_log_prob(t, _pad_prefix(h_prev, h, t))
                for h in space.candidates
            ])
            if np.all(np.isneginf(lps)):
                raise OracleError("turn factor vanishes on every candidate")
            m = np.max(lps[np.isfinite(lps)])
            z = m + np.log(np.sum(np.exp(np.where(np.isfinite(lps), lps - m, NEG_INF))))
            table[ctx] = (list(space.candidates), lps - z)
        return cls(vocab, table)

    @classmethod
    def smoothing_conditionals(cls, p, dialog: Dialog, space: FiniteLatentSpace,
                               db_fn=empty_db) -> "FiniteProposal":
        """Per-turn conditionals of the FULL posterior (future evidence included).

        Ancestral sampling from these reproduces the exact posterior.  By the
        Markov structure the conditional depends on the prefix only through
        the previous latent, so the context key remains valid.
        """
        vocab = p.vocab
        scorer = MarkovTurnScorer(p, dialog, db_fn)
        T = dialog.T
        cands = space.candidates

        def lse(vals):
            m = max(vals)
            if m == NEG_INF:
                return NEG_INF
            return m + math.log(sum(math.exp(v - m) for v in vals))

        # backward[t][h] = log-sum over h_{t+1:T} of the future factor products
        backward = [dict() for _ in range(T)]
        backward[T - 1] = {h: 0.0 for h in cands}
        for t in range(T - 2, -1, -1):
            for h in cands:
                backward[t][h] = lse([
                    scorer.turn_log_prob(t + 1, _pad_prefix(h, h2, t + 1)) + backward[t + 1][h2]
                    for h2 in cands
                ])
        table = {}
        for t, h_prev, ctx in cls.contexts_for(dialog, space, vocab):
            if ctx in table:
                continue
            lps = np.array([
                scorer.turn_log_prob(t, _pad_prefix(h_prev, h, t)) + backward[t][h]
                for h in cands
            ])
            m = np.max(lps[np.isfinite(lps)])
            z = m + np.log(np.sum(np.exp(np.where(np.isfinite(lps), lps - m, NEG_INF))))
            table[ctx] = (list(cands), lps - z)
        return cls(vocab, table)

    def perturbed(self, mix_uniform: float) -> "FiniteProposal":
        """Mix each row with the uniform distribution (an imperfect proposal)."""
        table = {}
        for ctx, (cands, logp) in self.table.items():
            probs = np.exp(logp - logp.max())
            probs = probs / probs.sum()
            probs = (1.0 - mix_uniform) * probs + mix_uniform / len(cands)
            table[ctx] = (list(cands), np.log(probs))
        return FiniteProposal(self.vocab, table)


def _pad_prefix(h_prev, h, t: int) -> tuple:
    """Build a prefix whose last two slots are (h_prev, h); earlier slots unused
    by the Markov scorer but must exist positionally."""
    if t == 0:
        return (h,)
    return (h_prev,) * t + (h,)


def stationarity_report(p, q, dialog: Dialog, space: FiniteLatentSpace,
                        sampler: str, sweeps: int, burn_in: int, rng,
                        db_fn=empty_db, seed=None, proposal_mode: str = Stochastic) -> dict:
    """Run a sampler and compare its empirical trajectory law to the exact posterior.

    Greedy proposal chains are degenerate and rejected here.  ``q`` may be a
    token-level model (it is then renormalized over the candidates) or a
    FiniteProposal already.
    """
    if proposal_mode != Stochastic:
        raise OracleError("stationarity reports require stochastic proposals")
    if sampler not in ("recursive", "session"):
        raise OracleError(f"unknown sampler {sampler!r}")
    proposal = q if isinstance(q, FiniteProposal) else FiniteProposal.from_model(q, dialog, space)
    exact = enumerate_posterior(p, dialog, space, db_fn)
    p = MemoizedModel(p)  # frozen-parameter chain: cache turn scorings

    cache = mis.LatentCache()
    cache.put(dialog.id, [space.candidates[0]] * dialog.T)
    run = mis.recursive_turn_mis if sampler == "recursive" else mis.session_mis
    counts: dict[tuple, int] = {}
    for i in range(burn_in + sweeps):
        traj = tuple(run(p, proposal, dialog, cache, rng, Stochastic, db_fn))
        if i >= burn_in:
            counts[traj] = counts.get(traj, 0) + 1
        if i == burn_in - 1:
            # acceptance statistics measured post burn-in only
            cache.accepts[dialog.id] = [0] * dialog.T
            cache.steps[dialog.id] = [0] * dialog.T
    total = sum(counts.values())
    empirical = {k: v / total for k, v in counts.items()}
    per_turn = [
        cache.accepts[dialog.id][t] / max(1, cache.steps[dialog.id][t])
        for t in range(dialog.T)
    ]
    return {
        "tv": tv_distance(empirical, exact.table),
        "acceptance_rate": sum(per_turn) / len(per_turn),
        "per_turn_acceptance": per_turn,
        "sweeps": sweeps,
        "burn_in": burn_in,
        "seed": seed,
    }
