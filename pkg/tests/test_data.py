import json

import pytest

from minitod.data import DataError, mask_labels, read_jsonl, write_jsonl
from minitod.world import gen_dataset

from conftest import make_rng


@pytest.fixture(scope="module")
def dialogs(world):
    ds, _ = gen_dataset(world, 40, seed=31, prefix="io")
    return ds


def test_jsonl_round_trip(tmp_path, world, dialogs):
    path = tmp_path / "d.jsonl"
    write_jsonl(dialogs, world.vocab, path)
    back = read_jsonl(path, world.vocab)
    assert back == dialogs


def test_unlabeled_serializes_without_label_keys(tmp_path, world, dialogs):
    masked, _ = mask_labels(dialogs, 0.5, make_rng(3))
    path = tmp_path / "m.jsonl"
    write_jsonl(masked, world.vocab, path)
    with open(path) as f:
        for line in f:
            obj = json.loads(line)
            for turn in obj["turns"]:
                if not obj["labeled"]:
                    assert "belief" not in turn
                    assert "act" not in turn
                    assert "db" not in turn
                else:
                    assert "belief" in turn
    back = read_jsonl(path, world.vocab)
    assert back == masked


def test_truncated_line_reports_line_number(tmp_path, world, dialogs):
    path = tmp_path / "bad.jsonl"
    write_jsonl(dialogs[:3], world.vocab, path)
    with open(path, "a") as f:
        f.write('{"id": "oops", "labeled": true')  # truncated record
    with pytest.raises(DataError, match="line 4"):
        read_jsonl(path, world.vocab)


def test_mask_identity_at_full_proportion(dialogs):
    masked, sealed = mask_labels(dialogs, 1.0, make_rng(1))
    assert masked == dialogs
    assert sealed == {}


def test_mask_exact_count(dialogs):
    masked, sealed = mask_labels(dialogs, 0.1, make_rng(2))
    labeled = [d for d in masked if d.labeled]
    assert len(labeled) == 4  # ceil(0.1 * 40)
    assert len(sealed) == 36


def test_mask_same_seed_same_split(dialogs):
    m1, _ = mask_labels(dialogs, 0.25, make_rng(7))
    m2, _ = mask_labels(dialogs, 0.25, make_rng(7))
    assert [d.labeled for d in m1] == [d.labeled for d in m2]


def test_mask_preserves_surface(dialogs):
    masked, sealed = mask_labels(dialogs, 0.2, make_rng(5))
    for orig, m in zip(dialogs, masked):
        for ot, mt in zip(orig.turns, m.turns):
            assert ot.u == mt.u
            assert ot.r == mt.r
        if not m.labeled:
            assert all(t.b is None and t.a is None and t.db is None for t in m.turns)
            assert sealed[m.id] == [(t.b, t.a, t.db) for t in orig.turns]


def test_mask_bad_proportion(dialogs):
    with pytest.raises(DataError):
        mask_labels(dialogs, 0.0, make_rng(1))
    with pytest.raises(DataError):
        mask_labels(dialogs, 1.5, make_rng(1))


def test_mask_rejects_unlabeled_input(dialogs):
    masked, _ = mask_labels(dialogs, 0.5, make_rng(1))
    with pytest.raises(DataError):
        mask_labels(masked, 0.5, make_rng(1))
