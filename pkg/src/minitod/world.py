"""The MiniTOD synthetic task-oriented-dialog domain.

A tiny world with a known ground-truth program: users pursue a sampled goal
across 2-5 turns, mentioning slot constraints; beliefs accumulate mentions in
canonical order; a deterministic DB lookup buckets the match count; the system
act follows a fixed policy over (belief, DB, asks); responses are delexicalized
fixed-length templates.

The interesting wrinkle is ambiguity: with some probability a mention turn
omits its domain word, so the surface form is consistent with the same slot
and value in either domain.  The true reading is recoverable from the goal
(ground truth) and, statistically, from the system's reply, but not from the
user utterance itself.  That keeps the posterior over latent states genuinely
non-degenerate.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dialog, TurnRecord
from .vocab import BOS, EOS, SEP_A, SEP_B, SEP_DB, TokenSeq, Vocab

BUCKET_NONE = "db:none"
BUCKET_FEW = "db:few"
BUCKET_MANY = "db:many"


@dataclass
class World:
    n_domains: int = 2
    n_slots: int = 3
    n_values: int = 5
    n_synonyms: int = 3  # surface variants per slot-value mention
    n_entities: int = 25
    few_max: int = 3  # 1..few_max matches -> db:few, more -> db:many
    length_probs: dict = field(default_factory=lambda: {2: 0.25, 3: 0.35, 4: 0.25, 5: 0.15})
    ambig_prob: float = 0.15
    resp_domain_drop_prob: float = 0.15
    world_seed: int = 7

    def __post_init__(self):
        if self.n_domains != 2:
            raise ValueError("MiniTOD ambiguity construction assumes exactly 2 domains")
        if abs(sum(self.length_probs.values()) - 1.0) > 1e-9:
            raise ValueError("length_probs must sum to 1")
        self.vocab = build_vocab(self)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.world_seed)))
        # per-domain entity tables: value index per slot
        self.entities = [
            rng.integers(0, self.n_values, size=(self.n_entities, self.n_slots))
            for _ in range(self.n_domains)
        ]

    def to_dict(self) -> dict:
        return {
            "n_domains": self.n_domains,
            "n_slots": self.n_slots,
            "n_values": self.n_values,
            "n_synonyms": self.n_synonyms,
            "n_entities": self.n_entities,
            "few_max": self.few_max,
            "length_probs": {str(k): v for k, v in sorted(self.length_probs.items())},
            "ambig_prob": self.ambig_prob,
            "resp_domain_drop_prob": self.resp_domain_drop_prob,
            "world_seed": self.world_seed,
        }

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "World":
        d = dict(d)
        d["length_probs"] = {int(k): v for k, v in d["length_probs"].items()}
        return cls(**d)

    # token helpers
    def belief_token(self, dom: int, slot: int, val: int) -> str:
        return f"b:d{dom}-s{slot}={val}"

    def mention_token(self, slot: int, val: int, syn: int = 0) -> str:
        # synonym variants share the same meaning; the suffix is surface only
        return f"u:s{slot}={val}.{syn}"


def build_vocab(world: World) -> Vocab:
    toks = [BOS, EOS, SEP_B, SEP_DB, SEP_A]
    toks += ["u:hi", "u:bye"]
    toks += [f"u:dom{d}" for d in range(world.n_domains)]
    toks += [f"u:ask-s{j}" for j in range(world.n_slots)]
    toks += [
        f"u:s{j}={v}.{k}"
        for j in range(world.n_slots)
        for v in range(world.n_values)
        for k in range(world.n_synonyms)
    ]
    toks += [
        f"b:d{d}-s{j}={v}"
        for d in range(world.n_domains)
        for j in range(world.n_slots)
        for v in range(world.n_values)
    ]
    toks += [BUCKET_NONE, BUCKET_FEW, BUCKET_MANY]
    for d in range(world.n_domains):
        toks += [f"act:req-d{d}-s{j}" for j in range(world.n_slots)]
        toks += [f"act:offer-d{d}", f"act:none-d{d}"]
        toks += [f"act:info-d{d}-s{j}" for j in range(world.n_slots)]
    toks += [f"r:dom{d}" for d in range(world.n_domains)]
    toks += [f"r:s{j}" for j in range(world.n_slots)]
    toks += ["r:ok", "r:ask", "r:have", "r:none", "r:val",
             "r:bye", "r:please", "r:sure", "r:sorry", "r:hey"]
    return Vocab(toks)


def parse_belief_token(vocab: Vocab, tok_id: int):
    """Return (domain, slot, value) or None when not a parseable belief token."""
    s = vocab.tokens[tok_id]
    if not s.startswith("b:d"):
        return None
    try:
        dom_part, rest = s[3:].split("-s", 1)
        slot_part, val_part = rest.split("=", 1)
        return int(dom_part), int(slot_part), int(val_part)
    except ValueError:
        return None


def belief_constraints(world: World, belief: TokenSeq) -> dict[int, dict[int, set]]:
    """Per-domain slot constraints from a belief span; unparseable tokens ignored."""
    cons: dict[int, dict[int, set]] = {}
    for t in belief:
        parsed = parse_belief_token(world.vocab, t)
        if parsed is None:
            continue
        dom, slot, val = parsed
        if not (0 <= dom < world.n_domains and 0 <= slot < world.n_slots):
            continue
        cons.setdefault(dom, {}).setdefault(slot, set()).add(val)
    return cons


def domain_match_count(world: World, cons: dict[int, set], dom: int) -> int:
    # a slot constrained to two different values matches nothing (contradiction)
    table = world.entities[dom]
    n = 0
    for row in table:
        if all(len(vals) == 1 and row[slot] in vals for slot, vals in cons.items()):
            n += 1
    return n


def bucket_name(world: World, count: int) -> str:
    if count == 0:
        return BUCKET_NONE
    if count <= world.few_max:
        return BUCKET_FEW
    return BUCKET_MANY


def db_query(world: World, belief: TokenSeq) -> TokenSeq:
    """Deterministic DB lookup: one bucket token per constrained domain.

    Buckets are emitted in canonical domain order; an empty or unparseable
    belief yields the unconstrained convention [db:many].
    """
    cons = belief_constraints(world, belief)
    if not cons:
        return (world.vocab.id(BUCKET_MANY),)
    out = []
    for dom in sorted(cons):
        count = domain_match_count(world, cons[dom], dom)
        out.append(world.vocab.id(bucket_name(world, count)))
    return tuple(out)


def focus_bucket(world: World, belief: TokenSeq, focus: int) -> str:
    cons = belief_constraints(world, belief)
    if focus not in cons:
        return BUCKET_MANY
    return bucket_name(world, domain_match_count(world, cons[focus], focus))


@dataclass
class Goal:
    domains: list[int]                      # visited in order
    constraints: dict[int, dict[int, int]]  # domain -> slot -> value
    requested: dict[int, list[int]]         # domain -> asked slots (final domain only)
    T: int

    def to_dict(self) -> dict:
        return {
            "domains": self.domains,
            "constraints": {str(d): {str(s): v for s, v in c.items()}
                            for d, c in self.constraints.items()},
            "requested": {str(d): list(v) for d, v in self.requested.items()},
            "T": self.T,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Goal":
        return cls(
            domains=list(d["domains"]),
            constraints={int(k): {int(s): v for s, v in c.items()}
                         for k, c in d["constraints"].items()},
            requested={int(k): list(v) for k, v in d["requested"].items()},
            T=int(d["T"]),
        )


def goal_db_signature(world: World, goal: Goal) -> TokenSeq:
    """DB buckets the goal's full constraint set would select."""
    belief = goal_belief(world, goal)
    return db_query(world, belief)


def goal_belief(world: World, goal: Goal) -> TokenSeq:
    toks = []
    for dom in sorted(goal.constraints):
        for slot in sorted(goal.constraints[dom]):
            toks.append(world.vocab.id(world.belief_token(dom, slot, goal.constraints[dom][slot])))
    return tuple(toks)


def canonical_belief(world: World, pairs: set[tuple[int, int, int]]) -> TokenSeq:
    ordered = sorted(pairs)
    return tuple(world.vocab.id(world.belief_token(d, j, v)) for d, j, v in ordered)


def system_act(world: World, belief: TokenSeq, focus: int, asked: list[int]) -> TokenSeq:
    """Deterministic system policy given belief state, focus domain and asks."""
    v = world.vocab
    if asked:
        return tuple(v.id(f"act:info-d{focus}-s{j}") for j in asked)
    bucket = focus_bucket(world, belief, focus)
    if bucket == BUCKET_NONE:
        return (v.id(f"act:none-d{focus}"),)
    if bucket == BUCKET_MANY:
        cons = belief_constraints(world, belief).get(focus, {})
        for j in range(world.n_slots):
            if j not in cons:
                return (v.id(f"act:req-d{focus}-s{j}"),)
        return (v.id(f"act:offer-d{focus}"),)
    return (v.id(f"act:offer-d{focus}"),)


def response_for(world: World, act: TokenSeq, rng) -> TokenSeq:
    """Delexicalized 4-token template realization of an act (two variants each)."""
    v = world.vocab
    head = v.tokens[act[0]]
    variant = int(rng.integers(0, 2))
    drop = rng.random() < world.resp_domain_drop_prob
    parts = head.split("-")  # e.g. act:req-d0-s1 / act:offer-d1
    dom = parts[1][1:]
    opener = "r:hey" if drop else f"r:dom{dom}"
    if head.startswith("act:req-"):
        slot = head.rsplit("-s", 1)[1]
        tail = "r:please" if variant == 0 else "r:sure"
        toks = [opener, "r:ask", f"r:s{slot}", tail]
    elif head.startswith("act:none-"):
        tail = "r:please" if variant == 0 else "r:sure"
        toks = [opener, "r:none", "r:sorry", tail]
    elif head.startswith("act:offer-"):
        tail = "r:ok" if variant == 0 else "r:sure"
        toks = [opener, "r:have", "r:val", tail]
    elif head.startswith("act:info-"):
        slot = head.rsplit("-s", 1)[1]
        tail = "r:ok" if variant == 0 else "r:bye"
        toks = [opener, "r:val", f"r:s{slot}", tail]
    else:
        raise ValueError(f"unknown act head {head}")
    return v.ids(toks)


def sample_goal(world: World, rng) -> Goal:
    """Draw a goal consistent with the target dialog length.

    The final (requested) domain always carries two constrained slots; a
    two-domain goal opens with a one-constraint side domain, so accumulated
    beliefs never exceed three slot-value pairs.  Goals are rejection-sampled
    until the final domain's full constraint set selects the db:few bucket,
    which lets every generated dialog close with a successful inform.
    """
    T = int(rng.choice(sorted(world.length_probs), p=[world.length_probs[k] for k in sorted(world.length_probs)]))
    # plans list the mention count of each pre-ask turn (0 = small-talk turn)
    if T == 2:
        n_dom, plan = 1, [2]
    elif T == 3:
        if rng.random() < 0.5:
            n_dom, plan = 1, [1, 1]
        else:
            n_dom, plan = 2, [1, 2]
    elif T == 4:
        n_dom, plan = 2, [1, 1, 1]
    else:
        n_dom, plan = 2, [1, 1, 1, 0]

    for _ in range(200):
        doms = [int(d) for d in rng.permutation(world.n_domains)[:n_dom]]
        constraints: dict[int, dict[int, int]] = {}
        used_pairs = set()
        ok = True
        for k, dom in enumerate(doms):
            n_cons = 2 if k == len(doms) - 1 else 1
            slots = sorted(int(s) for s in rng.permutation(world.n_slots)[:n_cons])
            cmap = {}
            for j in slots:
                val = int(rng.integers(0, world.n_values))
                if (j, val) in used_pairs:
                    ok = False
                    break
                used_pairs.add((j, val))
                cmap[j] = val
            if not ok:
                break
            constraints[dom] = cmap
        if not ok:
            continue
        final = doms[-1]
        if bucket_name(world, domain_match_count(
                world, {j: {v} for j, v in constraints[final].items()}, final)) != BUCKET_FEW:
            continue
        free = [j for j in range(world.n_slots) if j not in constraints[final]]
        goal = Goal(domains=doms, constraints=constraints,
                    requested={final: [free[0]]}, T=T)
        goal._plan = plan  # mention counts per pre-ask turn
        return goal
    raise RuntimeError("could not sample a satisfiable goal; world too tight")


def gen_dialog(world: World, rng, dialog_id: str) -> tuple[Dialog, Goal]:
    """Generate one fully-labeled, ground-truth-consistent dialog."""
    v = world.vocab
    goal = sample_goal(world, rng)
    plan = goal._plan

    # assign mention turns to domain blocks in order
    mention_list = []
    for dom in goal.domains:
        for j in sorted(goal.constraints[dom]):
            mention_list.append((dom, j, goal.constraints[dom][j]))
    per_turn: list[list[tuple[int, int, int]]] = []
    idx = 0
    for count in plan:
        per_turn.append(mention_list[idx: idx + count])
        idx += count
    assert idx == len(mention_list)

    turns = []
    pairs: set[tuple[int, int, int]] = set()
    active = goal.domains[0]
    for mentions in per_turn:
        if mentions:
            dom = mentions[0][0]
            # the lead token announces the domain; an ambiguous utterance drops
            # it, leaving the mention consistent with either domain's slot-value
            ambiguous = rng.random() < world.ambig_prob
            u = ["u:hi" if ambiguous else f"u:dom{dom}"]
            for _, j, val in mentions:
                u.append(world.mention_token(j, val, int(rng.integers(0, world.n_synonyms))))
            while len(u) < 3:
                u.append("u:hi")
            for d, j, val in mentions:
                pairs.add((d, j, val))
            active = dom
        else:
            u = ["u:hi", "u:hi", "u:hi"]
            dom = active
        belief = canonical_belief(world, pairs)
        db = db_query(world, belief)
        act = system_act(world, belief, dom, [])
        resp = response_for(world, act, rng)
        turns.append(TurnRecord(u=v.ids(u), b=belief, a=act, db=db, r=resp))

    final = goal.domains[-1]
    asked = goal.requested[final]
    u = [f"u:ask-s{asked[0]}", "u:bye", "u:bye"]
    belief = canonical_belief(world, pairs)
    db = db_query(world, belief)
    act = system_act(world, belief, final, asked)
    resp = response_for(world, act, rng)
    turns.append(TurnRecord(u=v.ids(u), b=belief, a=act, db=db, r=resp))

    dlg = Dialog(id=dialog_id, turns=turns, labeled=True)
    dlg.validate()
    return dlg, goal


def rederive_labels(world: World, goal: Goal, utterances: list[TokenSeq]):
    """Reproduce (b, db, a) per turn from the goal and the user side alone.

    This is the deterministic part of the generator; it is what the
    ground-truth-consistency invariant checks.
    """
    v = world.vocab
    mention_by_pair = {}
    for dom, cmap in goal.constraints.items():
        for j, val in cmap.items():
            mention_by_pair[(j, val)] = dom
    out = []
    pairs: set[tuple[int, int, int]] = set()
    active = goal.domains[0]
    for t, u in enumerate(utterances):
        toks = [v.tokens[i] for i in u]
        asked = [int(s.rsplit("-s", 1)[1]) for s in toks if s.startswith("u:ask-s")]
        mentions = []
        for s in toks:
            if s.startswith("u:s") and "=" in s:
                j, rest = s[3:].split("=")
                val = rest.split(".")[0]
                mentions.append((int(j), int(val)))
        if asked:
            focus = goal.domains[-1]
        elif mentions:
            focus = mention_by_pair[mentions[0]]
            active = focus
        else:
            focus = active
        for j, val in mentions:
            pairs.add((mention_by_pair[(j, val)], j, val))
        belief = canonical_belief(world, pairs)
        db = db_query(world, belief)
        act = system_act(world, belief, focus, asked)
        out.append((belief, db, act))
    return out


def gen_dataset(world: World, n: int, seed: int, prefix: str) -> tuple[list[Dialog], dict[str, Goal]]:
    """Generate n dialogs with per-dialog derived rng streams (order independent)."""
    dialogs, goals = [], {}
    for i in range(n):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, i))))
        did = f"{prefix}-{i:05d}"
        dlg, goal = gen_dialog(world, rng, did)
        dialogs.append(dlg)
        goals[did] = goal
    return dialogs, goals
