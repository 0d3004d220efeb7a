import numpy as np
import pytest

from minitod.data import Dialog, TurnRecord
from minitod.models import NeuralNGramModel, TabularModel
from minitod.oracle import FiniteLatentSpace
from minitod.vocab import Vocab, join_latent
from minitod.world import World


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance-criteria pass/fail lines after the run."""
    try:
        import test_acceptance
    except ImportError:
        return
    if getattr(test_acceptance, "RESULTS", None):
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)


def make_rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


@pytest.fixture(scope="session")
def world():
    return World()


@pytest.fixture(scope="session")
def vocab(world):
    return world.vocab


def random_tabular(vocab, kind, seed=0, scale=1.0):
    m = TabularModel(vocab, kind)
    rng = make_rng(seed)
    m.params[:] = rng.normal(0.0, scale, m.params.shape)
    return m


def random_neural(vocab, kind, seed=0, scale=0.3, **hyper):
    m = NeuralNGramModel(vocab, kind, init_seed=seed, **hyper)
    rng = make_rng(seed + 1)
    m.params[:] += rng.normal(0.0, scale, m.params.shape)
    return m


def micro_dialog(vocab, T=2, last_resp="r:ok", first_user="u:dom0", dialog_id="micro",
                 coupled=True):
    """T-turn oracle instance.

    Coupled: later turns have empty user/response content, so their factors
    read the previous latent's belief through the context (the previous-token
    chain).  Uncoupled: every turn carries its own user token, so the
    posterior factorizes across turns.
    """
    if coupled:
        turns = [TurnRecord(u=(vocab.id(first_user),), b=None, a=None, db=None, r=())]
        for t in range(1, T):
            r = (vocab.id(last_resp),) if t == T - 1 else ()
            turns.append(TurnRecord(u=(), b=None, a=None, db=None, r=r))
    else:
        turns = [
            TurnRecord(u=(vocab.id(first_user),), b=None, a=None, db=None,
                       r=(vocab.id(last_resp),))
            for _ in range(T)
        ]
    return Dialog(id=dialog_id, turns=turns, labeled=False)


def micro_space(vocab, n_beliefs=2, n_acts=2):
    beliefs = [(vocab.id(f"b:d0-s0={i}"),) for i in range(n_beliefs)]
    acts = [(vocab.id(a),) for a in ("act:offer-d0", "act:none-d0", "act:req-d0-s2")[:n_acts]]
    return FiniteLatentSpace([join_latent(vocab, b, a) for b in beliefs for a in acts])


def tiny_flat_vocab():
    """Minimal vocabulary whose flat-kind support has exactly 4 choices."""
    from minitod.vocab import BOS, EOS, SEP_A, SEP_B, SEP_DB
    return Vocab([BOS, EOS, SEP_B, SEP_DB, SEP_A, "r:a", "r:b", "r:c"])
