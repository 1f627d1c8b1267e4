import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from im3f.model import AssignmentState, Hyperparameters, RatingsDataset, residual


def test_residual_examples():
    assert residual(4, 3, 0, 0.5) == 0.5
    assert residual(3.2, 3.2, 0, 0) == 0
    assert residual(5, 3, 0.25, 1.5) == pytest.approx(0.25)


def test_hyperparameter_defaults_fill_in():
    hp = Hyperparameters(D=3)
    assert np.array_equal(hp.W0, np.eye(3))
    assert hp.nu0 == 3.0 and np.array_equal(hp.mu0, np.zeros(3))


@pytest.mark.parametrize(
    "kw",
    [dict(D=0), dict(D=2, nu0=1.0), dict(sigma2=0), dict(gamma=-1), dict(beta=0), dict(alpha=0),
     dict(D=2, W0=[[1, 2], [2, 1]]), dict(D=2, W0=[[1, 0.5], [0, 1]]), dict(K_U=0)],
)
def test_hyperparameter_validation(kw):
    with pytest.raises(ValueError):
        Hyperparameters(**kw)


def test_hyperparameter_dict_round_trip():
    hp = Hyperparameters(D=2, W0=[[2, 0.5], [0.5, 1]], gamma=0.3, K_U=4)
    back = Hyperparameters.from_dict(hp.to_dict())
    assert back.to_dict() == hp.to_dict()


def test_dataset_indices_are_inverse():
    ds = RatingsDataset(3, 4, [0, 2, 1, 0], [3, 0, 1, 1], [1.0, 2.0, 3.0, 4.0])
    assert sorted(ds.by_user(0).tolist()) == [0, 3]
    assert ds.by_item(1).tolist() == [2, 3]
    for u in range(3):
        assert np.all(ds.users[ds.by_user(u)] == u)
    assert ds.user_counts().tolist() == [2, 1, 1]


@given(st.sets(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=30))
def test_dataset_csr_covers_every_rating_once(pairs):
    u, j = np.array(sorted(pairs)).T
    ds = RatingsDataset(7, 7, u, j, np.arange(u.size, dtype=float))
    by_u = np.concatenate([ds.by_user(x) for x in range(7)])
    by_j = np.concatenate([ds.by_item(x) for x in range(7)])
    assert sorted(by_u.tolist()) == list(range(u.size)) == sorted(by_j.tolist())


def test_dataset_rejects_duplicates_and_bad_ids():
    with pytest.raises(ValueError, match="duplicate"):
        RatingsDataset(2, 2, [0, 0], [1, 1], [1.0, 2.0])
    with pytest.raises(ValueError):
        RatingsDataset(2, 2, [0, 2], [1, 1], [1.0, 2.0])


def test_dataset_is_read_only():
    ds = RatingsDataset(1, 1, [0], [0], [1.0])
    with pytest.raises(ValueError):
        ds.values[0] = 2.0


def test_assignment_counts():
    ds = RatingsDataset(2, 2, [0, 0, 1], [0, 1, 1], [1.0, 1.0, 1.0])
    a = AssignmentState.from_assignments(ds, [1, 0, 1], [0, 0, 0], 2, 1)
    assert a.n_user.tolist() == [[1, 1], [0, 1]]
    assert a.n_item.tolist() == [[1], [2]]
    a.check(ds)
    a.n_user[0, 0] += 1
    with pytest.raises(AssertionError):
        a.check(ds)
