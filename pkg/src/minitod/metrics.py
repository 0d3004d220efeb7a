"""Evaluation metrics and the end-to-end corpus evaluation driver.

Inform/Success are structural analogues for the MiniTOD domain: Inform asks
whether the final predicted belief selects the same DB buckets as the goal's
full constraint set; Success additionally requires every requested slot to be
answered by some predicted inform act.  These are not comparable to any
external benchmark's absolute numbers.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import mis
from .data import Dialog
from .models import Greedy, parse_gen_target
from .vocab import TokenSeq, Vocab, build_gen_context, join_latent
from .world import World, db_query, goal_db_signature

log = logging.getLogger(__name__)

NEG_INF = float("-inf")

METRIC_COLUMNS = [
    "epoch", "split", "inform", "success", "bleu", "combined",
    "latent_precision", "latent_recall", "latent_f1", "marginal_ll",
    "mean_accept_rate", "phi_grad_norm_variance",
]


class MetricsError(ValueError):
    pass


def combined_score(inform: float, success: float, bleu: float) -> float:
    """BLEU plus half the sum of Inform and Success."""
    for x in (inform, success, bleu):
        if not math.isfinite(x):
            raise MetricsError("combined_score inputs must be finite")
    return bleu + 0.5 * (inform + success)


def _latent_units(vocab: Vocab, h: TokenSeq) -> Counter:
    """Label tokens of a latent: belief slot-value pairs and act tokens.

    Markers and db tokens are excluded before comparison.
    """
    drop = set(vocab.separators) | {vocab.eos, vocab.bos} | set(vocab.db_ids)
    return Counter(t for t in h if t not in drop)


def latent_prf(vocab: Vocab, pred_h: list[TokenSeq], gold_h: list[TokenSeq]):
    """Micro-averaged precision/recall/F1 over latent label tokens.

    Empty prediction and empty gold count as a perfect match by convention;
    empty prediction against non-empty gold scores zero.
    """
    if len(pred_h) != len(gold_h):
        raise MetricsError(f"turn count mismatch: {len(pred_h)} vs {len(gold_h)}")
    n_match = n_pred = n_gold = 0
    for ph, gh in zip(pred_h, gold_h):
        pu, gu = _latent_units(vocab, ph), _latent_units(vocab, gh)
        inter = pu & gu
        n_match += sum(inter.values())
        n_pred += sum(pu.values())
        n_gold += sum(gu.values())
    if n_pred == 0 and n_gold == 0:
        return 1.0, 1.0, 1.0
    precision = n_match / n_pred if n_pred else 0.0
    recall = n_match / n_gold if n_gold else 0.0
    f1 = (2 * precision * recall / (precision + recall)) if (precision + recall) else 0.0
    return precision, recall, f1


@dataclass
class PredictedDialog:
    """End-to-end generation output for one dialog (model's own beliefs)."""

    id: str
    beliefs: list[TokenSeq]
    acts: list[TokenSeq]
    resps: list[TokenSeq]


def inform_success(world: World, preds: list[PredictedDialog], goals: dict) -> tuple[float, float]:
    """Percentage of dialogs whose final belief selects the goal's DB buckets,
    and of those, whose predicted acts answer every requested slot."""
    if not preds:
        raise MetricsError("no predictions to evaluate")
    n_inform = n_success = 0
    for pd in preds:
        goal = goals[pd.id]
        informed = db_query(world, pd.beliefs[-1]) == goal_db_signature(world, goal)
        act_tokens = {t for a in pd.acts for t in a}
        answered = all(
            world.vocab.token_to_id.get(f"act:info-d{dom}-s{j}") in act_tokens
            for dom, slots in goal.requested.items()
            for j in slots
        )
        n_inform += informed
        n_success += informed and answered
    n = len(preds)
    return 100.0 * n_inform / n, 100.0 * n_success / n


def _ngrams(seq, n: int) -> Counter:
    return Counter(tuple(seq[i: i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(candidates: list[TokenSeq], references: list[TokenSeq],
                smooth: bool = False) -> float:
    """Corpus-level BLEU-4 with clipped counts and brevity penalty, times 100.

    One reference per candidate; uniform n-gram weights.  With smoothing off
    (the default), any n-gram order with zero clipped matches zeroes the score.
    """
    if not candidates or len(candidates) != len(references):
        raise MetricsError("need equal, non-empty candidate and reference lists")
    log_p = 0.0
    for n in range(1, 5):
        clipped = total = 0
        for cand, ref in zip(candidates, references):
            c_counts = _ngrams(cand, n)
            r_counts = _ngrams(ref, n)
            total += sum(c_counts.values())
            clipped += sum(min(c, r_counts[g]) for g, c in c_counts.items())
        if smooth:
            clipped += 1
            total += 1
        if clipped == 0 or total == 0:
            return 0.0
        log_p += 0.25 * math.log(clipped / total)
    c_len = sum(len(c) for c in candidates)
    r_len = sum(len(r) for r in references)
    if c_len == 0:
        return 0.0
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return 100.0 * bp * math.exp(log_p)


def marginal_ll_is(p, q, dialog: Dialog, K: int, rng, db_fn,
                   max_len: int = mis.DEFAULT_LATENT_MAX_LEN) -> float:
    """Importance-sampled conditional marginal log-likelihood of the responses.

    K latent trajectories are drawn ancestrally from q; each contributes the
    session-level log importance weight; the estimate is a max-shifted
    log-mean-exp.  Malformed samples carry weight -inf.
    """
    if K < 1:
        raise MetricsError("K must be >= 1")
    weights = np.empty(K)
    for k in range(K):
        latents = mis.propose_only(q, dialog, rng, "stochastic", max_len)
        weights[k] = mis.session_log_weight(p, q, dialog, latents, db_fn)
    finite = weights[np.isfinite(weights)]
    if finite.size == 0:
        log.warning("marginal_ll_is: all %d samples malformed for dialog %s", K, dialog.id)
        return NEG_INF
    m = finite.max()
    return float(m + np.log(np.sum(np.exp(finite - m))) - np.log(K))


def grad_variance(series) -> float:
    """Population variance of the series normalized to unit sum."""
    arr = np.asarray(series, dtype=np.float64)
    if arr.size == 0:
        raise MetricsError("empty gradient-norm series")
    if np.any(arr < 0):
        raise MetricsError("gradient norms must be non-negative")
    total = arr.sum()
    if total <= 0:
        raise MetricsError("gradient-norm series sums to zero")
    norm = arr / total
    return float(np.mean((norm - norm.mean()) ** 2))


# -- end-to-end corpus evaluation -------------------------------------------


def predict_dialog(p, world: World, dialog: Dialog, turn_max_len: int = 24) -> PredictedDialog:
    """Greedy end-to-end generation: the model's own belief feeds the DB query;
    gold previous responses condition each turn (corpus-style evaluation)."""
    vocab = world.vocab
    prev_b: TokenSeq = ()
    beliefs, acts, resps = [], [], []
    for t, turn in enumerate(dialog.turns):
        prev_r = dialog.turns[t - 1].r if t > 0 else ()
        ctx = build_gen_context(vocab, prev_b, prev_r, turn.u)
        seq = p.sample(ctx, turn_max_len, Greedy, rng=None,
                       db_fn=lambda b: db_query(world, b))
        b, _db, a, r = parse_gen_target(vocab, seq)
        beliefs.append(b)
        acts.append(a)
        resps.append(r)
        prev_b = b
    return PredictedDialog(id=dialog.id, beliefs=beliefs, acts=acts, resps=resps)


def evaluate_corpus(p, q, world: World, dialogs: list[Dialog], goals: dict,
                    marginal_K: int = 0, marginal_subset: int = 0, rng=None,
                    latent_max_len: int = mis.DEFAULT_LATENT_MAX_LEN) -> dict:
    """Full evaluation pass: generation metrics for p, latent P/R/F1 for q.

    The inference model predicts latents by greedy self-rollout (its own
    previous belief conditions the next turn), matching how it is used as a
    proposal.  Requires labeled dialogs.
    """
    preds = [predict_dialog(p, world, d) for d in dialogs]
    inform, success = inform_success(world, preds, goals)
    cands = [r for pd in preds for r in pd.resps]
    refs = [t.r for d in dialogs for t in d.turns]
    bleu = corpus_bleu(cands, refs)

    pred_h, gold_h = [], []
    for d in dialogs:
        latents = mis.propose_only(q, d, None, Greedy, latent_max_len)
        pred_h.extend(latents)
        gold_h.extend(join_latent(world.vocab, t.b, t.a) for t in d.turns)
    precision, recall, f1 = latent_prf(world.vocab, pred_h, gold_h)

    marginal = ""
    if marginal_K > 0 and rng is not None:
        subset = dialogs[:marginal_subset] if marginal_subset else dialogs
        vals = [marginal_ll_is(p, q, d, marginal_K, rng,
                               lambda b: db_query(world, b), latent_max_len)
                for d in subset]
        finite = [v for v in vals if math.isfinite(v)]
        marginal = float(np.mean(finite)) if finite else NEG_INF

    return {
        "inform": inform,
        "success": success,
        "bleu": bleu,
        "combined": combined_score(inform, success, bleu),
        "latent_precision": precision,
        "latent_recall": recall,
        "latent_f1": f1,
        "marginal_ll": marginal,
    }


@dataclass
class MetricsReport:
    """Per-epoch metric rows with a stable CSV serialization."""

    rows: list[dict] = field(default_factory=list)

    def add(self, epoch: int, split: str, values: dict, mean_accept_rate="",
            phi_grad_norm_variance="") -> dict:
        row = {c: "" for c in METRIC_COLUMNS}
        row["epoch"] = epoch
        row["split"] = split
        row.update({k: v for k, v in values.items() if k in METRIC_COLUMNS})
        row["mean_accept_rate"] = mean_accept_rate
        row["phi_grad_norm_variance"] = phi_grad_norm_variance
        self.rows.append(row)
        return row

    @staticmethod
    def _fmt(v) -> str:
        if isinstance(v, float):
            return repr(v)
        return str(v)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(",".join(METRIC_COLUMNS) + "\n")
            for row in self.rows:
                f.write(",".join(self._fmt(row[c]) for c in METRIC_COLUMNS) + "\n")


def write_grad_norms(path, norms) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("iteration,norm\n")
        for i, v in enumerate(norms):
            f.write(f"{i},{v!r}\n")
