"""Rating-file loaders, train/test splits, state files and metrics CSVs."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import struct
from dataclasses import astuple, fields
from typing import NamedTuple

import numpy as np

from . import crf
from .gibbs import ChainState, MetricsRecord, PredictionAccumulator
from .model import AssignmentState, BiasState, FactorState, Hyperparameters, RatingsDataset
from .randstats import make_rng, rng_from_state, rng_state

FORMATS = ("ml100k", "ml1m", "dblp")


class DataFormatError(ValueError):
    """Malformed input file; the message carries the path and line number."""


class SplitError(ValueError):
    pass


# ---------------------------------------------------------------------------
# loaders


class _IdMap:
    """Original id -> contiguous index, in order of first appearance."""

    def __init__(self):
        self.index = {}
        self.ids = []

    def __call__(self, key):
        i = self.index.get(key)
        if i is None:
            i = self.index[key] = len(self.ids)
            self.ids.append(key)
        return i


def _build(path, users, items, values, umap, imap, lines, id_dtype):
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    key = users * max(len(imap.ids), 1) + items
    order = np.argsort(key, kind="stable")
    dup = np.flatnonzero(key[order][1:] == key[order][:-1])
    if dup.size:
        first, second = sorted((int(order[dup[0]]), int(order[dup[0] + 1])))
        raise DataFormatError(
            f"{path}, line {lines[second]}: duplicate (user, item) pair "
            f"({umap.ids[users[second]]}, {imap.ids[items[second]]}), first seen on line {lines[first]}"
        )
    return RatingsDataset(
        len(umap.ids), len(imap.ids), users, items, np.asarray(values, dtype=np.float64),
        np.asarray(umap.ids, dtype=id_dtype), np.asarray(imap.ids, dtype=id_dtype),
    )


def load_movielens(path, format: str = "ml100k") -> RatingsDataset:
    """Read a MovieLens ratings file.

    ``ml100k`` lines are ``user<TAB>item<TAB>rating<TAB>timestamp``; ``ml1m``
    lines are ``user::item::rating::timestamp``.  Ids are renumbered from 0
    in order of first appearance; the originals are kept in ``user_ids`` and
    ``item_ids``.
    """
    if format not in ("ml100k", "ml1m"):
        raise ValueError(f"unknown MovieLens format {format!r}")
    sep = "\t" if format == "ml100k" else "::"
    umap, imap = _IdMap(), _IdMap()
    users, items, values, lines = [], [], [], []
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(sep)
            if len(parts) != 4:
                raise DataFormatError(f"{path}, line {lineno}: expected 4 fields separated by {sep!r}, got {line!r}")
            try:
                u, j, r = int(parts[0]), int(parts[1]), float(parts[2])
                int(parts[3])
            except ValueError:
                raise DataFormatError(f"{path}, line {lineno}: non-numeric field in {line!r}") from None
            if not 1.0 <= r <= 5.0:
                raise DataFormatError(f"{path}, line {lineno}: rating {r} outside [1, 5]")
            users.append(umap(u))
            items.append(imap(j))
            values.append(r)
            lines.append(lineno)
    return _build(path, users, items, values, umap, imap, lines, np.int64)


def load_dblp(path, max_rows: int = 2_000_000, min_count: int = 1, max_count: int = 10) -> RatingsDataset:
    """Read ``author_a<TAB>author_b<TAB>count`` co-authorship rows.

    The first author goes to the user side and the second to the item side.
    Rows with a count outside ``[min_count, max_count]`` are skipped and the
    first ``max_rows`` remaining rows are kept, in file order.
    """
    umap, imap = _IdMap(), _IdMap()
    users, items, values, lines = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if len(values) >= max_rows:
                break
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not parts[0] or not parts[1]:
                raise DataFormatError(f"{path}, line {lineno}: expected author_a<TAB>author_b<TAB>count, got {line!r}")
            try:
                count = int(parts[2])
            except ValueError:
                raise DataFormatError(f"{path}, line {lineno}: count {parts[2]!r} is not an integer") from None
            if not min_count <= count <= max_count:
                continue
            users.append(umap(parts[0]))
            items.append(imap(parts[1]))
            values.append(float(count))
            lines.append(lineno)
    return _build(path, users, items, values, umap, imap, lines, str)


def load_ratings(path, format: str) -> RatingsDataset:
    if format == "dblp":
        return load_dblp(path)
    return load_movielens(path, format)


def _compact(dataset: RatingsDataset, rows) -> RatingsDataset:
    """Ratings at ``rows`` with users and items renumbered to what remains."""
    rows = np.sort(np.asarray(rows, dtype=np.int64))
    u_keep, users = np.unique(dataset.users[rows], return_inverse=True)
    i_keep, items = np.unique(dataset.items[rows], return_inverse=True)
    uid = None if dataset.user_ids is None else dataset.user_ids[u_keep]
    iid = None if dataset.item_ids is None else dataset.item_ids[i_keep]
    return RatingsDataset(u_keep.size, i_keep.size, users, items, dataset.values[rows], uid, iid)


def subsample_users(dataset: RatingsDataset, n_users: int, seed: int) -> RatingsDataset:
    """All ratings of ``n_users`` users drawn without replacement; ids renumbered."""
    if not 0 < n_users <= dataset.num_users:
        raise ValueError(f"n_users must be in [1, {dataset.num_users}], got {n_users}")
    rng = make_rng(seed, 101)
    keep = np.zeros(dataset.num_users, dtype=bool)
    keep[rng.choice(dataset.num_users, size=n_users, replace=False)] = True
    return _compact(dataset, np.flatnonzero(keep[dataset.users]))


def subsample_ratings(dataset: RatingsDataset, n_ratings: int, seed: int) -> RatingsDataset:
    """``n_ratings`` ratings drawn without replacement; ids renumbered."""
    n_ratings = min(int(n_ratings), dataset.num_ratings)
    rng = make_rng(seed, 102)
    return _compact(dataset, rng.choice(dataset.num_ratings, size=n_ratings, replace=False))


# ---------------------------------------------------------------------------
# splits


class CoverSplit(NamedTuple):
    train: RatingsDataset
    test: RatingsDataset
    exceptions: list


def split_leave_one_out(dataset: RatingsDataset, seed: int):
    """Hold out one random rating per user.

    A draw that would leave its item without training ratings is redrawn
    from the user's other ratings.
    """
    counts = dataset.user_counts()
    single = np.flatnonzero(counts < 2)
    if single.size:
        raise SplitError(f"user {int(single[0])} has {int(counts[single[0]])} rating(s); leave-one-out needs at least 2")
    rng = make_rng(seed, 201)
    item_left = dataset.item_counts().copy()
    test = np.empty(dataset.num_users, dtype=np.int64)
    for u in range(dataset.num_users):
        cand = rng.permutation(dataset.by_user(u))
        ok = cand[item_left[dataset.items[cand]] > 1]
        if ok.size == 0:
            raise SplitError(f"user {u}: every held-out choice would leave an item with no training ratings")
        r = ok[0]
        test[u] = r
        item_left[dataset.items[r]] -= 1
    in_test = np.zeros(dataset.num_ratings, dtype=bool)
    in_test[test] = True
    return dataset.subset(np.flatnonzero(~in_test)), dataset.subset(np.flatnonzero(in_test))


def split_every_entity(dataset: RatingsDataset, seed: int) -> CoverSplit:
    """Move ratings to test until every user and item appears there at least once.

    Entities are visited in random order; each one not yet covered gets one
    of its ratings moved, skipping moves that would leave its user or item
    without training ratings.  Entities that cannot be covered are returned
    in ``exceptions`` as ``("user" | "item", id)``.
    """
    if dataset.num_ratings == 0:
        raise SplitError("cannot split an empty dataset")
    rng = make_rng(seed, 202)
    U, M = dataset.num_users, dataset.num_items
    u_left = dataset.user_counts().copy()
    i_left = dataset.item_counts().copy()
    u_cov = np.zeros(U, dtype=bool)
    i_cov = np.zeros(M, dtype=bool)
    in_test = np.zeros(dataset.num_ratings, dtype=bool)
    exceptions = []
    for e in rng.permutation(U + M):
        is_user = e < U
        ent = int(e) if is_user else int(e - U)
        if (u_cov if is_user else i_cov)[ent]:
            continue
        cand = rng.permutation(dataset.by_user(ent) if is_user else dataset.by_item(ent))
        for r in cand:
            u, j = dataset.users[r], dataset.items[r]
            if in_test[r] or u_left[u] < 2 or i_left[j] < 2:
                continue
            in_test[r] = True
            u_left[u] -= 1
            i_left[j] -= 1
            u_cov[u] = i_cov[j] = True
            break
        else:
            exceptions.append(("user" if is_user else "item", ent))
    exceptions.sort()
    return CoverSplit(dataset.subset(np.flatnonzero(~in_test)), dataset.subset(np.flatnonzero(in_test)), exceptions)


def make_split(dataset: RatingsDataset, strategy: str, seed: int):
    """(train, test, exceptions) for ``loo`` or ``cover``."""
    if strategy == "loo":
        train, test = split_leave_one_out(dataset, seed)
        return train, test, []
    if strategy == "cover":
        return tuple(split_every_entity(dataset, seed))
    raise ValueError(f"unknown split strategy {strategy!r}")


# ---------------------------------------------------------------------------
# state files
#
# layout: b"IM3F" | u16 version | u64 header length | JSON header |
#         array payload | sha256 of everything before it
# every array is stored C-ordered little-endian at the offset the header gives

MAGIC = b"IM3F"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHQ")


class StateFileError(Exception):
    """Unreadable state file."""


class StateVersionError(StateFileError):
    pass


class StateTruncatedError(StateFileError):
    pass


class StateChecksumError(StateFileError):
    pass


class VariantMismatchError(StateFileError):
    pass


_FACTOR_FIELDS = [f.name for f in fields(FactorState)]


def _state_payload(state: ChainState):
    arrays = {f"factors.{k}": getattr(state.factors, k) for k in _FACTOR_FIELDS}
    rs = rng_state(state.rng)
    for k, v in rs["state"].items():
        arrays[f"rng.state.{k}"] = v
    arrays["rng.buffer"] = rs["buffer"]
    meta = {
        "variant": state.variant,
        "likelihood": state.likelihood,
        "iteration": state.iteration,
        "hp": state.hp.to_dict(),
        "rng": {k: rs[k] for k in ("bit_generator", "buffer_pos", "has_uint32", "uinteger")},
        "accumulators": {},
    }
    if state.variant in ("bpmf", "m3f"):
        arrays["biases.c"] = state.biases.c
        arrays["biases.d"] = state.biases.d
    if state.variant == "m3f":
        for k in ("z_U", "z_M", "n_user", "n_item"):
            arrays[f"assign.{k}"] = getattr(state.assignments, k)
    if state.variant == "im3f":
        meta["franchises"] = {}
        for side, fr in (("user", state.user_fr), ("item", state.item_fr)):
            meta["franchises"][side] = {"n_restaurants": fr.n_restaurants, "n_other": fr.n_other}
            for k, v in fr.state_arrays().items():
                arrays[f"fr.{side}.{k}"] = v
    for key, acc in sorted(state.accumulators.items()):
        meta["accumulators"][key] = acc.count
        arrays[f"acc.{key}"] = acc.total
    return meta, arrays


def save_state(state: ChainState, path, extra_meta: dict | None = None):
    """Write ``state`` to ``path`` atomically (temporary file plus rename)."""
    meta, arrays = _state_payload(state)
    if extra_meta:
        meta["extra"] = extra_meta
    table, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = le.tobytes()
        table.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    meta["arrays"] = table
    meta["payload_bytes"] = offset
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(body)
        fh.write(digest)
    os.replace(tmp, path)


def read_state_file(path):
    """Validated (metadata, arrays) from a state file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        if not MAGIC.startswith(raw[:4]):
            raise StateFileError(f"{path}: not an IM3F state file")
        raise StateTruncatedError(f"{path}: file ends inside the fixed prefix ({len(raw)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise StateFileError(f"{path}: not an IM3F state file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise StateVersionError(f"{path}: format version {version}, this build reads version {FORMAT_VERSION}")
    hend = _PREFIX.size + hlen
    if len(raw) < hend:
        raise StateTruncatedError(f"{path}: file ends inside the header")
    try:
        meta = json.loads(raw[_PREFIX.size:hend].decode("utf-8"))
        expected = hend + int(meta["payload_bytes"]) + 32
    except (ValueError, KeyError, TypeError) as err:
        raise StateChecksumError(f"{path}: header is corrupt ({err})") from None
    if len(raw) < expected:
        raise StateTruncatedError(f"{path}: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise StateChecksumError(f"{path}: {len(raw) - expected} unexpected trailing bytes")
    if hashlib.sha256(raw[:-32]).digest() != raw[-32:]:
        raise StateChecksumError(f"{path}: checksum mismatch, the file is corrupt")
    arrays = {}
    for ent in meta["arrays"]:
        start = hend + ent["offset"]
        arr = np.frombuffer(raw, dtype=np.dtype(ent["dtype"]), count=ent["nbytes"] // np.dtype(ent["dtype"]).itemsize,
                            offset=start)
        arrays[ent["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True).reshape(ent["shape"])
    return meta, arrays


def load_state(path, expect_variant: str | None = None) -> ChainState:
    """Rebuild a chain state written by :func:`save_state`."""
    meta, arrays = read_state_file(path)
    variant = meta["variant"]
    if expect_variant is not None and variant != expect_variant:
        raise VariantMismatchError(f"{path}: state holds a {variant} chain, expected {expect_variant}")
    hp = Hyperparameters.from_dict(meta["hp"])
    factors = FactorState(*(arrays[f"factors.{k}"] for k in _FACTOR_FIELDS))
    rs = dict(meta["rng"])
    rs["state"] = {k[len("rng.state."):]: v for k, v in arrays.items() if k.startswith("rng.state.")}
    rs["buffer"] = arrays["rng.buffer"]
    state = ChainState(variant, hp, meta["likelihood"], factors, rng_from_state(rs), meta["iteration"])
    if variant in ("bpmf", "m3f"):
        state.biases = BiasState(arrays["biases.c"], arrays["biases.d"])
    if variant == "m3f":
        state.assignments = AssignmentState(*(arrays[f"assign.{k}"] for k in ("z_U", "z_M", "n_user", "n_item")))
    if variant == "im3f":
        for side in ("user", "item"):
            pre = f"fr.{side}."
            fa = {k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)}
            info = meta["franchises"][side]
            fr = crf.Franchise.from_state_arrays(fa, meta["likelihood"], info["n_restaurants"], info["n_other"])
            setattr(state, f"{side}_fr", fr)
    for key, count in meta["accumulators"].items():
        state.accumulators[key] = PredictionAccumulator(arrays[f"acc.{key}"], count)
    return state


# ---------------------------------------------------------------------------
# metrics

METRICS_HEADER = ("iter", "train_rmse", "test_rmse", "k_user", "k_item", "seconds")


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.6g" % v


def format_metrics_row(rec: MetricsRecord) -> str:
    return ",".join(_fmt(v) for v in astuple(rec))


def write_metrics(records, path):
    """CSV with one row per iteration; reals at 6 significant digits."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        for rec in records:
            fh.write(format_metrics_row(rec) + "\n")


def read_metrics(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRICS_HEADER:
            raise DataFormatError(f"{path}: unexpected metrics header {header}")
        out = []
        for row in reader:
            it, tr, te, ku, km, sec = row
            out.append(MetricsRecord(int(it), float(tr), float(te), int(ku), int(km), float(sec)))
    return out


def round_record(rec: MetricsRecord) -> MetricsRecord:
    """The record as it reads back from a metrics file."""
    return MetricsRecord(
        rec.iter, *(float(_fmt(v)) for v in (rec.train_rmse, rec.test_rmse)), rec.k_user, rec.k_item,
        float(_fmt(rec.seconds)),
    )


def nan_equal(a: float, b: float) -> bool:
    return a == b or (math.isnan(a) and math.isnan(b))
