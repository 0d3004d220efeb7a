"""Dialog records, JSONL persistence and label masking.

All sequence fields hold content tokens only (no EOS or separator markers);
target builders add structure.  An unlabeled turn has belief, act and db all
absent.  When a dataset is masked for semi-supervised training, the stripped
gold labels move into a sealed side store that the training code never sees;
only evaluation may read it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .vocab import TokenSeq, Vocab


class DataError(ValueError):
    pass


@dataclass
class TurnRecord:
    u: TokenSeq
    b: TokenSeq | None
    a: TokenSeq | None
    db: TokenSeq | None
    r: TokenSeq

    @property
    def labeled(self) -> bool:
        return self.b is not None

    def validate(self) -> None:
        if (self.b is None) != (self.a is None):
            raise DataError("belief and act must be both present or both absent")


@dataclass
class Dialog:
    id: str
    turns: list[TurnRecord]
    labeled: bool

    @property
    def T(self) -> int:
        return len(self.turns)

    def validate(self) -> None:
        if not self.turns:
            raise DataError(f"dialog {self.id} has no turns")
        for t in self.turns:
            t.validate()
        if self.labeled != all(t.labeled for t in self.turns):
            raise DataError(f"dialog {self.id}: labeled flag inconsistent with turns")


@dataclass
class Dataset:
    """Dialogs plus eval-only side information.

    ``goals`` drive the inform/success metrics; ``sealed_gold`` holds labels
    stripped by masking, keyed by dialog id.  Trainers receive ``dialogs``
    only and must never read the sealed store.
    """

    dialogs: list[Dialog]
    vocab: Vocab
    goals: dict = field(default_factory=dict)
    sealed_gold: dict = field(default_factory=dict)

    @property
    def labeled(self) -> list[Dialog]:
        return [d for d in self.dialogs if d.labeled]

    @property
    def unlabeled(self) -> list[Dialog]:
        return [d for d in self.dialogs if not d.labeled]


def turn_to_obj(vocab: Vocab, t: TurnRecord) -> dict:
    obj = {"user": vocab.strings(t.u)}
    if t.b is not None:
        obj["belief"] = vocab.strings(t.b)
    if t.a is not None:
        obj["act"] = vocab.strings(t.a)
    if t.db is not None:
        obj["db"] = vocab.strings(t.db)
    obj["resp"] = vocab.strings(t.r)
    return obj


def turn_from_obj(vocab: Vocab, obj: dict) -> TurnRecord:
    def seq(key):
        return vocab.ids(obj[key]) if key in obj else None

    if "user" not in obj or "resp" not in obj:
        raise DataError("turn object must carry 'user' and 'resp'")
    return TurnRecord(
        u=vocab.ids(obj["user"]),
        b=seq("belief"),
        a=seq("act"),
        db=seq("db"),
        r=vocab.ids(obj["resp"]),
    )


def write_jsonl(dialogs: list[Dialog], vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for d in dialogs:
            obj = {
                "id": d.id,
                "labeled": d.labeled,
                "turns": [turn_to_obj(vocab, t) for t in d.turns],
            }
            f.write(json.dumps(obj, sort_keys=True) + "\n")


def read_jsonl(path, vocab: Vocab) -> list[Dialog]:
    dialogs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                d = Dialog(
                    id=obj["id"],
                    turns=[turn_from_obj(vocab, t) for t in obj["turns"]],
                    labeled=bool(obj["labeled"]),
                )
                d.validate()
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: bad dialog record at line {lineno}: {exc}") from exc
            dialogs.append(d)
    return dialogs


def mask_labels(dialogs: list[Dialog], proportion: float, rng) -> tuple[list[Dialog], dict]:
    """Keep labels on a uniform random ceil(proportion*N) subset.

    Returns (masked dialogs, sealed gold store).  Masked dialogs keep (u, r)
    byte-for-byte; belief/act/db are removed and stored sealed.
    """
    if not 0.0 < proportion <= 1.0:
        raise DataError(f"label proportion must be in (0, 1], got {proportion}")
    for d in dialogs:
        if not d.labeled:
            raise DataError("mask_labels expects a fully labeled dataset")
    n = len(dialogs)
    n_keep = math.ceil(proportion * n)
    keep = set(rng.permutation(n)[:n_keep].tolist())
    out, sealed = [], {}
    for i, d in enumerate(dialogs):
        if i in keep:
            out.append(d)
            continue
        sealed[d.id] = [(t.b, t.a, t.db) for t in d.turns]
        turns = [TurnRecord(u=t.u, b=None, a=None, db=None, r=t.r) for t in d.turns]
        out.append(Dialog(id=d.id, turns=turns, labeled=False))
    return out, sealed
