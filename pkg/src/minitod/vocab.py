"""Closed token vocabulary and the structured-sequence conventions built on it.

Every quantity in the system (user utterance, belief state, DB result, system
act, response, latent state) is a ragged sequence of vocabulary ids.  Token
strings carry their class in a prefix ("u:", "b:", "db:", "act:", "r:"), which
is what the role state machines below key on.  There is deliberately no
padding token anywhere.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

TokenSeq = tuple[int, ...]

BOS = "<bos>"
EOS = "<eos>"
SEP_B = "<sep_b>"
SEP_DB = "<sep_db>"
SEP_A = "<sep_a>"

SPECIALS = (BOS, EOS, SEP_B, SEP_DB, SEP_A)

# role ids shared by both model kinds; "db" spans are injected, never scored
ROLE_BELIEF = 0
ROLE_ACT = 1
ROLE_RESP = 2
ROLE_FLAT = 0

GEN_ROLES = (ROLE_BELIEF, ROLE_ACT, ROLE_RESP)
INF_ROLES = (ROLE_BELIEF, ROLE_ACT)


class VocabError(ValueError):
    """Raised for ids outside the vocabulary or malformed vocab definitions."""


class MalformedLatentError(ValueError):
    """Raised when a latent sequence cannot be split into belief and act."""


@dataclass
class Vocab:
    tokens: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabError("duplicate tokens in vocabulary")
        for marker in SPECIALS:
            if self.tokens.count(marker) != 1:
                raise VocabError(f"special marker {marker!r} must appear exactly once")
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        self.bos = self.token_to_id[BOS]
        self.eos = self.token_to_id[EOS]
        self.sep_b = self.token_to_id[SEP_B]
        self.sep_db = self.token_to_id[SEP_DB]
        self.sep_a = self.token_to_id[SEP_A]
        self.separators = frozenset((self.sep_b, self.sep_db, self.sep_a))
        self.user_ids = self._class_ids("u:")
        self.belief_ids = self._class_ids("b:")
        self.db_ids = self._class_ids("db:")
        self.act_ids = self._class_ids("act:")
        self.resp_ids = self._class_ids("r:")

    def _class_ids(self, prefix: str) -> frozenset[int]:
        return frozenset(i for i, t in enumerate(self.tokens) if t.startswith(prefix))

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.token_to_id[token]
        except KeyError:
            raise VocabError(f"unknown token {token!r}") from None

    def ids(self, tokens) -> TokenSeq:
        return tuple(self.id(t) for t in tokens)

    def strings(self, seq: TokenSeq) -> list[str]:
        self.check(seq)
        return [self.tokens[i] for i in seq]

    def check(self, seq: TokenSeq) -> None:
        for i in seq:
            if not 0 <= i < len(self.tokens):
                raise VocabError(f"token id {i} out of range for |V|={len(self.tokens)}")

    def content_hash(self) -> str:
        h = hashlib.sha256("\n".join(self.tokens).encode("utf-8"))
        return h.hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(tokens)


def is_complete(vocab: Vocab, seq: TokenSeq) -> bool:
    """A complete target ends with EOS and contains EOS nowhere else."""
    return len(seq) >= 1 and seq[-1] == vocab.eos and vocab.eos not in seq[:-1]


def require_complete(vocab: Vocab, seq: TokenSeq) -> None:
    if not is_complete(vocab, seq):
        raise ValueError(f"target must be EOS-terminated exactly once, got {seq}")


def build_gen_context(vocab: Vocab, prev_b: TokenSeq, prev_r: TokenSeq, u: TokenSeq) -> TokenSeq:
    """Conditioning input for the generative turn model: BOS + b_prev + r_prev + u.

    All components are content tokens (no EOS terminators).  At the first turn
    prev_b and prev_r are empty.
    """
    for part in (prev_b, prev_r, u):
        vocab.check(part)
    return (vocab.bos,) + tuple(prev_b) + tuple(prev_r) + tuple(u)


def build_inf_context(vocab: Vocab, prev_b: TokenSeq, prev_r: TokenSeq, u: TokenSeq, r: TokenSeq) -> TokenSeq:
    """Conditioning input for the inference model: gen context + current response."""
    vocab.check(r)
    return build_gen_context(vocab, prev_b, prev_r, u) + tuple(r)


def join_latent(vocab: Vocab, b: TokenSeq, a: TokenSeq) -> TokenSeq:
    """Latent state wire format: belief ++ SEP_B ++ act ++ EOS."""
    vocab.check(b)
    vocab.check(a)
    return tuple(b) + (vocab.sep_b,) + tuple(a) + (vocab.eos,)


def split_latent(vocab: Vocab, h: TokenSeq) -> tuple[TokenSeq, TokenSeq]:
    """Split a latent into (belief, act); inverse of join_latent.

    Requires exactly one SEP_B.  The act part runs up to (not including) the
    terminating EOS when present.
    """
    vocab.check(h)
    if sum(1 for t in h if t == vocab.sep_b) != 1:
        raise MalformedLatentError(f"latent must contain exactly one SEP_B: {h}")
    cut = h.index(vocab.sep_b)
    b = h[:cut]
    a = h[cut + 1:]
    if a and a[-1] == vocab.eos:
        a = a[:-1]
    return b, a


def latent_is_well_formed(vocab: Vocab, h: TokenSeq) -> bool:
    try:
        split_latent(vocab, h)
    except (MalformedLatentError, VocabError):
        return False
    return True


def make_gen_target(vocab: Vocab, b: TokenSeq, a: TokenSeq, r: TokenSeq, db: TokenSeq) -> tuple[TokenSeq, tuple[bool, ...]]:
    """Assemble the joint generative target and its scored-position mask.

    Layout: b ++ SEP_B ++ db ++ SEP_DB ++ a ++ SEP_A ++ r ++ EOS.  The db span
    (db tokens and SEP_DB) is deterministically injected downstream of the
    belief, carries probability one, and is therefore excluded from scoring.
    """
    for part in (b, a, r, db):
        vocab.check(part)
    target = (
        tuple(b) + (vocab.sep_b,)
        + tuple(db) + (vocab.sep_db,)
        + tuple(a) + (vocab.sep_a,)
        + tuple(r) + (vocab.eos,)
    )
    scored = (
        (True,) * (len(b) + 1)
        + (False,) * (len(db) + 1)
        + (True,) * (len(a) + 1)
        + (True,) * (len(r) + 1)
    )
    return target, scored


def make_inf_target(vocab: Vocab, h: TokenSeq) -> tuple[TokenSeq, tuple[bool, ...]]:
    """Inference-model target is the latent itself; every position is scored."""
    vocab.check(h)
    return tuple(h), (True,) * len(h)
