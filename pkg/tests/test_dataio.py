import math
import os

import numpy as np
import pytest

from conftest import random_dataset
from im3f.dataio import (
    DataFormatError,
    SplitError,
    StateChecksumError,
    StateFileError,
    StateTruncatedError,
    StateVersionError,
    VariantMismatchError,
    load_dblp,
    load_movielens,
    load_state,
    read_metrics,
    round_record,
    save_state,
    split_every_entity,
    split_leave_one_out,
    subsample_users,
    write_metrics,
)
from im3f.gibbs import MetricsRecord, ModelConfig, run_chain
from im3f.model import Hyperparameters, RatingsDataset


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


# -- MovieLens -------------------------------------------------------------


def test_ml1m_line(tmp_path):
    ds = load_movielens(write(tmp_path, "r.dat", "1::1193::5::978300760\n"), "ml1m")
    assert (ds.num_users, ds.num_items) == (1, 1)
    assert ds.user_ids.tolist() == [1] and ds.item_ids.tolist() == [1193]
    assert ds.values.tolist() == [5.0]


def test_ml100k_ids_in_order_of_first_appearance(tmp_path):
    p = write(tmp_path, "u.data", "7\t3\t4\t1\n2\t3\t5\t1\n7\t9\t1\t2\n")
    ds = load_movielens(p, "ml100k")
    assert ds.user_ids.tolist() == [7, 2] and ds.item_ids.tolist() == [3, 9]
    assert ds.users.tolist() == [0, 1, 0] and ds.items.tolist() == [0, 0, 1]


@pytest.mark.parametrize(
    "text,match",
    [
        ("1\t2\t3\n", "line 1"),
        ("1\t2\t3\t4\n1\tx\t3\t4\n", "line 2"),
        ("1\t2\t9\t4\n", "outside"),
        ("1\t2\t3\t4\n5\t6\t2\t4\n1\t2\t4\t5\n", "line 3: duplicate.*line 1"),
    ],
)
def test_ml100k_errors_carry_line_numbers(tmp_path, text, match):
    with pytest.raises(DataFormatError, match=match):
        load_movielens(write(tmp_path, "u.data", text), "ml100k")


def test_ml100k_table_counts(ml100k):
    assert (ml100k.num_ratings, ml100k.num_users, ml100k.num_items) == (100_000, 943, 1682)


# -- DBLP ------------------------------------------------------------------


def test_dblp_filter_and_maps(tmp_path):
    p = write(tmp_path, "c.tsv", "a\tb\t3\na\tc\t11\nc\ta\t1\nb\tb\t0\n")
    ds = load_dblp(p)
    assert ds.num_ratings == 2
    assert ds.user_ids.tolist() == ["a", "c"] and ds.item_ids.tolist() == ["b", "a"]
    assert ds.values.tolist() == [3.0, 1.0]


def test_dblp_keeps_first_rows(tmp_path):
    p = write(tmp_path, "c.tsv", "".join(f"a{i}\tb{i}\t2\n" for i in range(10)))
    assert load_dblp(p, max_rows=4).num_ratings == 4


@pytest.mark.parametrize("text,match", [("X\tY\t3\nX\tY\t3\n", "duplicate"), ("X\tY\t2.5\n", "line 1.*integer"),
                                        ("X\tY\n", "line 1")])
def test_dblp_errors(tmp_path, text, match):
    with pytest.raises(DataFormatError, match=match):
        load_dblp(write(tmp_path, "c.tsv", text))


# -- splits ----------------------------------------------------------------


def test_loo_one_per_user_and_no_orphans(ml100k):
    train, test = split_leave_one_out(ml100k, 0)
    assert test.num_ratings == 943
    assert np.all(test.user_counts() == 1)
    assert np.all(train.item_counts() > 0)
    assert train.num_ratings + test.num_ratings == ml100k.num_ratings


def test_loo_deterministic_and_seed_dependent():
    ds = random_dataset(np.random.default_rng(0), U=30, M=20, density=0.5)
    a = split_leave_one_out(ds, 1)[1]
    b = split_leave_one_out(ds, 1)[1]
    c = split_leave_one_out(ds, 2)[1]
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_loo_redraws_instead_of_orphaning():
    # item 0 is rated only by user 0, so user 0 must hold out item 1
    ds = RatingsDataset(3, 3, [0, 0, 1, 1, 2, 2], [0, 1, 1, 2, 1, 2], [1.0, 2.0, 3.0, 4.0, 5.0, 1.0])
    for seed in range(20):
        train, test = split_leave_one_out(ds, seed)
        assert np.all(train.item_counts() > 0)


def test_loo_rejects_single_rating_user():
    ds = RatingsDataset(2, 2, [0, 0, 1], [0, 1, 0], [1.0, 1.0, 1.0])
    with pytest.raises(SplitError, match="user 1"):
        split_leave_one_out(ds, 0)


def test_cover_split_partitions_and_covers():
    ds = random_dataset(np.random.default_rng(3), U=25, M=15, density=0.4)
    train, test, exc = split_every_entity(ds, 5)
    assert train.num_ratings + test.num_ratings == ds.num_ratings
    covered_u = set(test.users.tolist())
    covered_i = set(test.items.tolist())
    exc_u = {i for k, i in exc if k == "user"}
    exc_i = {i for k, i in exc if k == "item"}
    assert covered_u | exc_u == set(range(25)) and covered_i | exc_i == set(range(15))
    assert np.all(train.user_counts() > 0) and np.all(train.item_counts() > 0)
    again = split_every_entity(ds, 5)
    assert np.array_equal(again.test.values, test.values)


def test_cover_split_pigeonhole():
    ds = RatingsDataset(1, 1, [0], [0], [3.0])
    train, test, exc = split_every_entity(ds, 0)
    assert test.num_ratings == 0 and exc == [("item", 0), ("user", 0)]


def test_subsample_users_renumbers():
    ds = random_dataset(np.random.default_rng(4), U=20, M=10)
    sub = subsample_users(ds, 5, 0)
    assert sub.num_users == 5
    assert np.all(sub.item_counts() > 0) and np.all(sub.user_counts() > 0)


# -- state files -----------------------------------------------------------


@pytest.fixture(scope="module")
def chains():
    ds = random_dataset(np.random.default_rng(5), U=10, M=8)
    out = {}
    for v in ("bpmf", "m3f", "im3f"):
        cfg = ModelConfig(v, Hyperparameters(D=2), iters=5, burnin=1, seed=3)
        out[v] = (ds, cfg, run_chain(ds, cfg, ds)[0])
    return out


@pytest.mark.parametrize("variant", ["bpmf", "m3f", "im3f"])
def test_round_trip_continues_identically(tmp_path, chains, variant):
    ds, cfg, st = chains[variant]
    p = tmp_path / "s.im3f"
    save_state(st, p)
    loaded = load_state(p, expect_variant=variant)
    save_state(loaded, tmp_path / "again.im3f")
    assert (tmp_path / "again.im3f").read_bytes() == p.read_bytes()
    more = ModelConfig(variant, cfg.hp, iters=8, burnin=1, seed=3)
    _, ra = run_chain(ds, more, ds, state=load_state(p))
    full = run_chain(ds, more, ds)[1]
    assert [r.test_rmse for r in ra] == [r.test_rmse for r in full[5:]]


def test_corrupted_byte_is_checksum_error(tmp_path, chains):
    p = tmp_path / "s.im3f"
    save_state(chains["im3f"][2], p)
    raw = bytearray(p.read_bytes())
    raw[len(raw) // 2] ^= 0x40
    p.write_bytes(bytes(raw))
    with pytest.raises(StateChecksumError):
        load_state(p)


def test_truncation_is_reported(tmp_path, chains):
    p = tmp_path / "s.im3f"
    save_state(chains["m3f"][2], p)
    raw = p.read_bytes()
    for cut in (10, 200, len(raw) - 5):
        p.write_bytes(raw[:cut])
        with pytest.raises(StateTruncatedError):
            load_state(p)


def test_version_mismatch(tmp_path, chains):
    p = tmp_path / "s.im3f"
    save_state(chains["bpmf"][2], p)
    raw = bytearray(p.read_bytes())
    raw[4] = 99
    p.write_bytes(bytes(raw))
    with pytest.raises(StateVersionError):
        load_state(p)


def test_variant_mismatch(tmp_path, chains):
    p = tmp_path / "s.im3f"
    save_state(chains["bpmf"][2], p)
    with pytest.raises(VariantMismatchError):
        load_state(p, expect_variant="im3f")


def test_not_a_state_file(tmp_path):
    p = write(tmp_path, "x", "hello world, certainly not a state file")
    with pytest.raises(StateFileError):
        load_state(p)


def test_errors_are_distinct():
    kinds = {StateChecksumError, StateTruncatedError, StateVersionError, VariantMismatchError}
    assert len(kinds) == 4 and all(issubclass(k, StateFileError) for k in kinds)


# -- metrics ---------------------------------------------------------------


def test_metrics_round_trip(tmp_path):
    recs = [MetricsRecord(i + 1, 1 / (i + 3), math.nan if i == 0 else 0.9123456789, 3, 1, 0.1234567 * i)
            for i in range(500)]
    p = tmp_path / "m.csv"
    write_metrics(recs, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "iter,train_rmse,test_rmse,k_user,k_item,seconds"
    assert len(lines) == 501
    assert lines[2] == "2,0.25,0.912346,3,1,0.123457"
    back = read_metrics(p)
    for a, b in zip(back, map(round_record, recs)):
        assert a.iter == b.iter and a.k_user == b.k_user and a.train_rmse == b.train_rmse
        assert a.test_rmse == b.test_rmse or (math.isnan(a.test_rmse) and math.isnan(b.test_rmse))
    write_metrics(back, tmp_path / "m2.csv")
    assert (tmp_path / "m2.csv").read_bytes() == p.read_bytes()


def test_metrics_unwritable(tmp_path):
    with pytest.raises(OSError):
        write_metrics([], tmp_path / "missing" / "m.csv")
