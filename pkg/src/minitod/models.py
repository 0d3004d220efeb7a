"""Conditional autoregressive categorical sequence models.

Two interchangeable scorers sit behind one interface:

* ``TabularModel`` -- next-token logits read from an explicit table keyed by
  (previous content token, position role).  Separator markers are transparent
  when determining the previous token, so e.g. the first act token conditions
  on the last DB token rather than on a constant marker.  Used wherever exact
  enumeration or hand arithmetic is wanted.
* ``NeuralNGramModel`` -- logits = U . tanh(W . [embeddings of the last k
  context/target tokens]).  Used for actual training runs.

Both expose exact log-probabilities, stochastic/greedy sampling and analytic
gradients with respect to a flat float64 parameter vector.  All probability
arithmetic is in the log domain.

Model kinds and their target structure:

* ``generative``: b ++ SEP_B ++ db ++ SEP_DB ++ a ++ SEP_A ++ r ++ EOS, where
  the db span is injected deterministically (probability one, never scored).
* ``inference``: b ++ SEP_B ++ a ++ EOS (the latent wire format).
* ``flat``: unstructured single-role targets, mainly for tests and oracles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .vocab import (
    ROLE_ACT,
    ROLE_BELIEF,
    ROLE_FLAT,
    ROLE_RESP,
    TokenSeq,
    Vocab,
    require_complete,
)

NEG_INF = float("-inf")

# decode phases
PH_BELIEF = "belief"
PH_DB = "db"
PH_ACT = "act"
PH_RESP = "resp"
PH_FLAT = "flat"
PH_END = "end"

KINDS = ("generative", "inference", "flat")

Stochastic = "stochastic"
Greedy = "greedy"


class ModelError(ValueError):
    pass


def n_roles(kind: str) -> int:
    return {"generative": 3, "inference": 2, "flat": 1}[kind]


def default_role_support(kind: str, vocab: Vocab) -> np.ndarray:
    """Boolean (n_roles, |V|) mask of tokens each role may emit."""
    V = len(vocab)
    sup = np.zeros((n_roles(kind), V), dtype=bool)

    def fill(role, ids):
        for i in ids:
            sup[role, i] = True

    if kind == "generative":
        fill(ROLE_BELIEF, vocab.belief_ids | {vocab.sep_b})
        fill(ROLE_ACT, vocab.act_ids | {vocab.sep_a})
        fill(ROLE_RESP, vocab.resp_ids | {vocab.eos})
    elif kind == "inference":
        fill(ROLE_BELIEF, vocab.belief_ids | {vocab.sep_b})
        fill(ROLE_ACT, vocab.act_ids | {vocab.eos})
    else:
        allowed = set(range(V)) - {vocab.bos} - set(vocab.separators)
        fill(ROLE_FLAT, allowed)
    return sup


@dataclass(frozen=True)
class DecodeState:
    """Incremental walker over a (context, target-prefix) pair.

    Tracks the structural phase, the separator-transparent previous content
    token, and the raw last-k window used by the neural scorer.
    """

    phase: str
    prev: int
    window: TokenSeq  # raw last-k tokens including separators

    @property
    def role(self) -> int:
        if self.phase == PH_BELIEF:
            return ROLE_BELIEF
        if self.phase == PH_ACT:
            return ROLE_ACT
        if self.phase == PH_RESP:
            return ROLE_RESP
        if self.phase == PH_FLAT:
            return ROLE_FLAT
        raise ModelError(f"phase {self.phase} has no scoring role")


def _advance_phase(kind: str, vocab: Vocab, phase: str, tok: int) -> str:
    if phase == PH_END:
        return PH_END
    if kind == "flat":
        return PH_END if tok == vocab.eos else PH_FLAT
    if kind == "inference":
        if phase == PH_BELIEF:
            return PH_ACT if tok == vocab.sep_b else PH_BELIEF
        return PH_END if tok == vocab.eos else PH_ACT
    # generative
    if phase == PH_BELIEF:
        return PH_DB if tok == vocab.sep_b else PH_BELIEF
    if phase == PH_DB:
        return PH_ACT if tok == vocab.sep_db else PH_DB
    if phase == PH_ACT:
        return PH_RESP if tok == vocab.sep_a else PH_ACT
    return PH_END if tok == vocab.eos else PH_RESP


def _initial_phase(kind: str) -> str:
    return {"generative": PH_BELIEF, "inference": PH_BELIEF, "flat": PH_FLAT}[kind]


class CondSeqModel:
    """Shared machinery; concrete scorers implement ``_row_log_probs`` etc."""

    variant = "base"

    def __init__(self, vocab: Vocab, kind: str):
        if kind not in KINDS:
            raise ModelError(f"unknown model kind {kind!r}")
        self.vocab = vocab
        self.kind = kind
        self.window_k = 1  # overridden by neural variant

    # -- structural walking -------------------------------------------------

    def initial_state(self, context: TokenSeq) -> DecodeState:
        self.vocab.check(context)
        prev = self.vocab.bos
        for t in reversed(context):
            if t not in self.vocab.separators:
                prev = t
                break
        k = self.window_k
        window = ((self.vocab.bos,) * k + tuple(context))[-k:]
        return DecodeState(phase=_initial_phase(self.kind), prev=prev, window=window)

    def advance(self, state: DecodeState, tok: int) -> DecodeState:
        phase = _advance_phase(self.kind, self.vocab, state.phase, tok)
        prev = state.prev if tok in self.vocab.separators else tok
        k = self.window_k
        window = (state.window + (tok,))[-k:]
        return DecodeState(phase=phase, prev=prev, window=window)

    def walk_target(self, context: TokenSeq, target: TokenSeq):
        """Return per-position (states, scored, structurally_ok).

        Positions inside a generative DB span are valid but unscored; a token
        that is structurally impossible there (not a db token, not SEP_DB)
        marks the whole target invalid.
        """
        state = self.initial_state(context)
        states, scored = [], []
        ok = True
        for tok in target:
            if state.phase == PH_END:
                ok = False
                states.append(state)
                scored.append(False)
                continue
            if state.phase == PH_DB:
                if tok != self.vocab.sep_db and tok not in self.vocab.db_ids:
                    ok = False
                states.append(state)
                scored.append(False)
            else:
                states.append(state)
                scored.append(True)
            state = self.advance(state, tok)
        if state.phase != PH_END:
            ok = False  # target did not structurally terminate
        return states, scored, ok

    # -- scoring ------------------------------------------------------------

    def step_log_probs(self, state: DecodeState) -> np.ndarray:
        """Log next-token distribution (length |V|, -inf off support)."""
        if state.phase == PH_DB:
            raise ModelError("db span is injected deterministically, not sampled")
        if state.phase == PH_END:
            raise ModelError("sequence already terminated")
        raise NotImplementedError

    def log_prob(self, context: TokenSeq, target: TokenSeq) -> float:
        """Sum of log p(target_i | context, target_<i) over scored positions.

        Returns -inf (never raises) when the target is structurally invalid
        for this model kind or steps outside the support.
        """
        self.vocab.check(context)
        self.vocab.check(target)
        require_complete(self.vocab, target)
        lp, _ = self._score(context, target)
        return lp

    def grad_log_prob(self, context: TokenSeq, target: TokenSeq) -> np.ndarray:
        """Exact analytic gradient of log_prob w.r.t. the flat parameters."""
        grad = np.zeros_like(self.params)
        self.accumulate_grad(context, target, grad)
        return grad

    def accumulate_grad(self, context: TokenSeq, target: TokenSeq, out: np.ndarray) -> float:
        """Add the gradient into ``out`` (fused with the forward); returns log_prob."""
        raise NotImplementedError

    def _score(self, context, target):
        raise NotImplementedError

    # -- sampling -----------------------------------------------------------

    def sample(self, context: TokenSeq, max_len: int, mode: str, rng, db_fn=None) -> TokenSeq:
        """Decode a complete target.

        Greedy mode takes the argmax each step (ties break to the lowest token
        index); stochastic mode samples the exact next-token distribution.
        Decoding stops at EOS or is force-terminated by appending EOS after
        max_len emitted tokens.  For generative models, once the belief span
        closes the db tokens given by ``db_fn(belief)`` are injected verbatim.
        """
        if max_len < 1:
            raise ModelError("max_len must be >= 1")
        if mode not in (Stochastic, Greedy):
            raise ModelError(f"unknown sampling mode {mode!r}")
        state = self.initial_state(context)
        out: list[int] = []
        belief: list[int] = []
        emitted = 0
        while emitted < max_len:
            logp = self.step_log_probs(state)
            if mode == Greedy:
                tok = int(np.argmax(logp))
            else:
                probs = np.exp(logp - _logsumexp(logp))
                cdf = np.cumsum(probs)
                tok = int(np.searchsorted(cdf, rng.random(), side="right"))
                tok = min(tok, len(probs) - 1)
            if not np.isfinite(logp[tok]):
                raise ModelError("sampled token off support; model row is degenerate")
            out.append(tok)
            emitted += 1
            if state.phase == PH_BELIEF and tok != self.vocab.sep_b:
                belief.append(tok)
            state = self.advance(state, tok)
            if self.kind == "generative" and state.phase == PH_DB:
                db = tuple(db_fn(tuple(belief))) if db_fn is not None else ()
                for d in db:
                    out.append(d)
                    state = self.advance(state, d)
                out.append(self.vocab.sep_db)
                state = self.advance(state, self.vocab.sep_db)
            if state.phase == PH_END:
                return tuple(out)
        out.append(self.vocab.eos)
        return tuple(out)

    # -- (de)serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        raise NotImplementedError

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f)

    def clone(self):
        other = load_model_dict(self.to_dict(), self.vocab)
        return other


def _logsumexp(row: np.ndarray) -> float:
    m = np.max(row)
    if not np.isfinite(m):
        return NEG_INF
    return m + np.log(np.sum(np.exp(row - m)))


def _masked_log_softmax(rows: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise log softmax restricted to mask; -inf elsewhere."""
    masked = np.where(mask, rows, NEG_INF)
    m = np.max(masked, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    lse = m + np.log(np.sum(np.exp(masked - m), axis=1, keepdims=True))
    return masked - lse


class TabularModel(CondSeqModel):
    """Explicit conditional table: logits[prev content token, role, next token].

    The parameter vector is the flattened logits array, so its length depends
    only on |V| and the kind's role count.  ``support`` may be customized per
    (prev, role) row, which is how tests build forced-termination instances.
    """

    variant = "tabular"

    def __init__(self, vocab: Vocab, kind: str, support: np.ndarray | None = None):
        super().__init__(vocab, kind)
        V = len(vocab)
        R = n_roles(kind)
        self.logits = np.zeros((V, R, V), dtype=np.float64)
        if support is None:
            role_sup = default_role_support(kind, vocab)
            support = np.broadcast_to(role_sup[None, :, :], (V, R, V)).copy()
        if support.shape != (V, R, V):
            raise ModelError(f"support must have shape {(V, R, V)}")
        self.support = support.astype(bool)
        self._default_support = support is None

    @property
    def params(self) -> np.ndarray:
        return self.logits.reshape(-1)

    def set_params(self, flat: np.ndarray) -> None:
        self.logits[...] = np.asarray(flat, dtype=np.float64).reshape(self.logits.shape)

    def step_log_probs(self, state: DecodeState) -> np.ndarray:
        if state.phase in (PH_DB, PH_END):
            return super().step_log_probs(state)
        row = self.logits[state.prev, state.role]
        mask = self.support[state.prev, state.role]
        return _masked_log_softmax(row[None, :], mask[None, :])[0]

    def _gather(self, context, target):
        states, scored, ok = self.walk_target(context, target)
        idx = [i for i, s in enumerate(scored) if s]
        prev = np.array([states[i].prev for i in idx], dtype=np.intp)
        role = np.array([states[i].role for i in idx], dtype=np.intp)
        tgt = np.array([target[i] for i in idx], dtype=np.intp)
        return prev, role, tgt, ok

    def _score(self, context, target):
        prev, role, tgt, ok = self._gather(context, target)
        if not ok:
            return NEG_INF, None
        rows = self.logits[prev, role]
        mask = self.support[prev, role]
        logp = _masked_log_softmax(rows, mask)
        vals = logp[np.arange(len(tgt)), tgt]
        total = float(np.sum(vals))
        return (total if np.isfinite(total) else NEG_INF), (prev, role, tgt, logp, mask)

    def accumulate_grad(self, context, target, out) -> float:
        self.vocab.check(context)
        self.vocab.check(target)
        require_complete(self.vocab, target)
        lp, cache = self._score(context, target)
        if cache is None or not np.isfinite(lp):
            return lp
        prev, role, tgt, logp, mask = cache
        probs = np.where(mask, np.exp(logp), 0.0)
        V = len(self.vocab)
        R = self.logits.shape[1]
        grad3 = out.reshape(V, R, V)
        d = -probs
        d[np.arange(len(tgt)), tgt] += 1.0
        np.add.at(grad3, (prev, role), d)
        return lp

    def detailed_score(self, context, target):
        """Forward details for estimator plumbing: per-scored-position states,
        log-softmax rows, and input-embedding gradients of log_prob (None for
        the tabular variant, whose inputs are discrete table keys)."""
        self.vocab.check(context)
        self.vocab.check(target)
        require_complete(self.vocab, target)
        states, scored, ok = self.walk_target(context, target)
        idx = [i for i, s in enumerate(scored) if s]
        if not ok:
            return NEG_INF, idx, [states[i] for i in idx], None, None
        prev = np.array([states[i].prev for i in idx], dtype=np.intp)
        role = np.array([states[i].role for i in idx], dtype=np.intp)
        tgt = np.array([target[i] for i in idx], dtype=np.intp)
        rows = self.logits[prev, role]
        mask = self.support[prev, role]
        logp = _masked_log_softmax(rows, mask)
        total = float(np.sum(logp[np.arange(len(tgt)), tgt]))
        return total, idx, [states[i] for i in idx], logp, None

    def step_vjp(self, state: DecodeState, dlogits: np.ndarray, out: np.ndarray) -> None:
        """Accumulate dlogits (gradient w.r.t. this step's logits) into params."""
        V = len(self.vocab)
        R = self.logits.shape[1]
        grad3 = out.reshape(V, R, V)
        grad3[state.prev, state.role] += dlogits

    def to_dict(self) -> dict:
        default = default_role_support(self.kind, self.vocab)
        V = len(self.vocab)
        is_default = bool(
            np.array_equal(self.support, np.broadcast_to(default[None], self.support.shape))
        )
        d = {
            "variant": self.variant,
            "kind": self.kind,
            "vocab_hash": self.vocab.content_hash(),
            "params": self.params.tolist(),
        }
        d["support"] = "default" if is_default else self.support.astype(int).reshape(-1).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict, vocab: Vocab) -> "TabularModel":
        _check_vocab_hash(d, vocab)
        V = len(vocab)
        R = n_roles(d["kind"])
        support = None
        if d["support"] != "default":
            support = np.array(d["support"], dtype=bool).reshape(V, R, V)
        model = cls(vocab, d["kind"], support=support)
        model.set_params(np.array(d["params"], dtype=np.float64))
        return model


class NeuralNGramModel(CondSeqModel):
    """MLP scorer over the embeddings of the last k context/target tokens.

    logits = U . tanh(W . x) with x the concatenation of k embeddings; the
    softmax is restricted to the active role's token support.
    """

    variant = "neural"

    def __init__(self, vocab: Vocab, kind: str, embed_dim: int = 16,
                 hidden_dim: int = 32, window: int = 4, init_seed: int = 0,
                 init_scale: float = 0.1):
        super().__init__(vocab, kind)
        V = len(vocab)
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.window_k = window
        self.role_support = default_role_support(kind, vocab)
        n = V * embed_dim + hidden_dim * window * embed_dim + V * hidden_dim
        self._flat = np.zeros(n, dtype=np.float64)
        self.E = self._flat[: V * embed_dim].reshape(V, embed_dim)
        off = V * embed_dim
        self.W = self._flat[off: off + hidden_dim * window * embed_dim].reshape(
            hidden_dim, window * embed_dim
        )
        off += hidden_dim * window * embed_dim
        self.U = self._flat[off:].reshape(V, hidden_dim)
        rng = np.random.Generator(np.random.PCG64(init_seed))
        self.E[...] = rng.normal(0.0, init_scale, self.E.shape)
        self.W[...] = rng.normal(0.0, init_scale, self.W.shape)
        # zero output weights start every conditional at uniform-over-support
        self.U[...] = 0.0

    @property
    def params(self) -> np.ndarray:
        return self._flat

    def set_params(self, flat: np.ndarray) -> None:
        self._flat[...] = np.asarray(flat, dtype=np.float64)

    def _logits_for_windows(self, windows: np.ndarray):
        X = self.E[windows].reshape(windows.shape[0], -1)
        H = np.tanh(X @ self.W.T)
        logits = H @ self.U.T
        return X, H, logits

    def step_log_probs(self, state: DecodeState) -> np.ndarray:
        if state.phase in (PH_DB, PH_END):
            return super().step_log_probs(state)
        windows = np.array([state.window], dtype=np.intp)
        _, _, logits = self._logits_for_windows(windows)
        mask = self.role_support[state.role][None, :]
        return _masked_log_softmax(logits, mask)[0]

    def _prepare(self, context, target):
        states, scored, ok = self.walk_target(context, target)
        idx = [i for i, s in enumerate(scored) if s]
        windows = np.array([states[i].window for i in idx], dtype=np.intp)
        roles = np.array([states[i].role for i in idx], dtype=np.intp)
        tgt = np.array([target[i] for i in idx], dtype=np.intp)
        return windows, roles, tgt, ok

    def _score(self, context, target):
        windows, roles, tgt, ok = self._prepare(context, target)
        if not ok:
            return NEG_INF, None
        X, H, logits = self._logits_for_windows(windows)
        mask = self.role_support[roles]
        logp = _masked_log_softmax(logits, mask)
        vals = logp[np.arange(len(tgt)), tgt]
        total = float(np.sum(vals))
        return (total if np.isfinite(total) else NEG_INF), (windows, tgt, X, H, logp, mask)

    def accumulate_grad(self, context, target, out) -> float:
        self.vocab.check(context)
        self.vocab.check(target)
        require_complete(self.vocab, target)
        lp, cache = self._score(context, target)
        if cache is None or not np.isfinite(lp):
            return lp
        windows, tgt, X, H, logp, mask = cache
        P = len(tgt)
        probs = np.where(mask, np.exp(logp), 0.0)
        dlogits = -probs
        dlogits[np.arange(P), tgt] += 1.0

        V = len(self.vocab)
        d, hd, k = self.embed_dim, self.hidden_dim, self.window_k
        gE = out[: V * d].reshape(V, d)
        off = V * d
        gW = out[off: off + hd * k * d].reshape(hd, k * d)
        off += hd * k * d
        gU = out[off:].reshape(V, hd)

        gU += dlogits.T @ H
        dH = dlogits @ self.U
        dpre = dH * (1.0 - H * H)
        gW += dpre.T @ X
        dX = (dpre @ self.W).reshape(P, k, d)
        np.add.at(gE, windows.reshape(-1), dX.reshape(-1, d))
        return lp

    def detailed_score(self, context, target):
        """Forward details plus input-embedding gradients of log_prob.

        The returned array has one d-vector per position of the concatenated
        (context, target) sequence: the gradient of log_prob with respect to
        the embedding content fed in at that position.
        """
        self.vocab.check(context)
        self.vocab.check(target)
        require_complete(self.vocab, target)
        states, scored, ok = self.walk_target(context, target)
        idx = [i for i, s in enumerate(scored) if s]
        if not ok:
            return NEG_INF, idx, [states[i] for i in idx], None, None
        windows = np.array([states[i].window for i in idx], dtype=np.intp)
        roles = np.array([states[i].role for i in idx], dtype=np.intp)
        tgt = np.array([target[i] for i in idx], dtype=np.intp)
        X, H, logits = self._logits_for_windows(windows)
        mask = self.role_support[roles]
        logp = _masked_log_softmax(logits, mask)
        total = float(np.sum(logp[np.arange(len(tgt)), tgt]))
        if not np.isfinite(total):
            return NEG_INF, idx, [states[i] for i in idx], logp, None

        P = len(tgt)
        probs = np.where(mask, np.exp(logp), 0.0)
        dlogits = -probs
        dlogits[np.arange(P), tgt] += 1.0
        dH = dlogits @ self.U
        dpre = dH * (1.0 - H * H)
        d, k = self.embed_dim, self.window_k
        dX = (dpre @ self.W).reshape(P, k, d)
        L = len(context) + len(target)
        demb = np.zeros((L, d))
        n_ctx = len(context)
        for pi, i in enumerate(idx):
            for w in range(k):
                pos = n_ctx + i - k + w
                if pos >= 0:
                    demb[pos] += dX[pi, w]
        return total, idx, [states[i] for i in idx], logp, demb

    def step_vjp(self, state: DecodeState, dlogits: np.ndarray, out: np.ndarray) -> None:
        """Accumulate dlogits (gradient w.r.t. one step's logits) into params."""
        windows = np.array([state.window], dtype=np.intp)
        X, H, _ = self._logits_for_windows(windows)
        V = len(self.vocab)
        d, hd, k = self.embed_dim, self.hidden_dim, self.window_k
        gE = out[: V * d].reshape(V, d)
        off = V * d
        gW = out[off: off + hd * k * d].reshape(hd, k * d)
        off += hd * k * d
        gU = out[off:].reshape(V, hd)
        gU += np.outer(dlogits, H[0])
        dH = self.U.T @ dlogits
        dpre = dH * (1.0 - H[0] * H[0])
        gW += np.outer(dpre, X[0])
        dX = (self.W.T @ dpre).reshape(k, d)
        np.add.at(gE, np.array(state.window, dtype=np.intp), dX)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "kind": self.kind,
            "vocab_hash": self.vocab.content_hash(),
            "hyper": {
                "embed_dim": self.embed_dim,
                "hidden_dim": self.hidden_dim,
                "window": self.window_k,
            },
            "params": self.params.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, vocab: Vocab) -> "NeuralNGramModel":
        _check_vocab_hash(d, vocab)
        h = d["hyper"]
        model = cls(vocab, d["kind"], embed_dim=h["embed_dim"],
                    hidden_dim=h["hidden_dim"], window=h["window"])
        model.set_params(np.array(d["params"], dtype=np.float64))
        return model


def _check_vocab_hash(d: dict, vocab: Vocab) -> None:
    if d["vocab_hash"] != vocab.content_hash():
        raise ModelError("checkpoint was written against a different vocabulary")


def load_model_dict(d: dict, vocab: Vocab) -> CondSeqModel:
    if d["variant"] == "tabular":
        return TabularModel.from_dict(d, vocab)
    if d["variant"] == "neural":
        return NeuralNGramModel.from_dict(d, vocab)
    raise ModelError(f"unknown model variant {d['variant']!r}")


def load_model(path, vocab: Vocab) -> CondSeqModel:
    with open(path, encoding="utf-8") as f:
        return load_model_dict(json.load(f), vocab)


def parse_gen_target(vocab: Vocab, seq: TokenSeq):
    """Split a generated joint sequence into (b, db, a, r) spans, tolerantly.

    Missing separators leave later spans empty rather than raising, so that
    malformed decodes degrade gracefully in evaluation.
    """
    b, db, a, r = [], [], [], []
    spans = {PH_BELIEF: b, PH_DB: db, PH_ACT: a, PH_RESP: r}
    phase = PH_BELIEF
    for tok in seq:
        if tok == vocab.eos:
            break
        nxt = _advance_phase("generative", vocab, phase, tok)
        if nxt == phase:
            spans[phase].append(tok)
        phase = nxt
    return tuple(b), tuple(db), tuple(a), tuple(r)
