"""Domain types shared by the samplers: ratings, hyperparameters and chain state."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

VARIANTS = ("bpmf", "m3f", "im3f")


def residual(r, chi0, bias_other, dot):
    """Rating minus the global bias, the other side's bias and the factor score."""
    return r - chi0 - bias_other - dot


@dataclass(frozen=True, eq=False)
class Hyperparameters:
    D: int = 10
    W0: np.ndarray | None = None
    nu0: float | None = None
    lambda0: float = 10.0
    mu0: np.ndarray | None = None
    sigma2: float = 0.5
    sigma0_2: float = 0.1
    chi0: float = 0.0
    c0: float = 0.0
    d0: float = 0.0
    gamma: float = 1.0
    beta: float = 1.0
    K_U: int = 2
    K_M: int = 1
    alpha: float = 10.0

    def __post_init__(self):
        D = int(self.D)
        if D < 1:
            raise ValueError(f"latent rank D must be >= 1, got {self.D}")
        object.__setattr__(self, "D", D)
        W0 = np.eye(D) if self.W0 is None else np.array(self.W0, dtype=float, copy=True)
        mu0 = np.zeros(D) if self.mu0 is None else np.array(self.mu0, dtype=float, copy=True)
        nu0 = float(D) if self.nu0 is None else float(self.nu0)
        if W0.shape != (D, D) or mu0.shape != (D,):
            raise ValueError("W0 must be D x D and mu0 a D-vector")
        if not np.allclose(W0, W0.T):
            raise ValueError("W0 must be symmetric")
        try:
            np.linalg.cholesky(W0)
        except np.linalg.LinAlgError as err:
            raise ValueError("W0 must be positive definite") from err
        if nu0 <= D - 1:
            raise ValueError(f"nu0 must exceed D - 1 = {D - 1}, got {nu0}")
        for name in ("lambda0", "sigma2", "sigma0_2", "gamma", "beta", "alpha"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.K_U < 1 or self.K_M < 1:
            raise ValueError("K_U and K_M must be >= 1")
        W0.setflags(write=False)
        mu0.setflags(write=False)
        object.__setattr__(self, "W0", W0)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "nu0", nu0)
        for name in ("lambda0", "sigma2", "sigma0_2", "chi0", "c0", "d0", "gamma", "beta", "alpha"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "K_U", int(self.K_U))
        object.__setattr__(self, "K_M", int(self.K_M))

    def replace(self, **changes) -> "Hyperparameters":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            out[name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        return cls(**d)


def _csr(keys, n):
    counts = np.bincount(keys, minlength=n)
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    idx = np.argsort(keys, kind="stable").astype(np.int64)
    return ptr, idx


@dataclass(frozen=True, eq=False)
class RatingsDataset:
    """Immutable sparse rating triples with per-user and per-item indices.

    ``by_user(u)`` / ``by_item(j)`` return positions into the rating arrays.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    values: np.ndarray
    user_ids: np.ndarray | None = None
    item_ids: np.ndarray | None = None
    user_ptr: np.ndarray = field(init=False, repr=False)
    user_idx: np.ndarray = field(init=False, repr=False)
    item_ptr: np.ndarray = field(init=False, repr=False)
    item_idx: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        users = np.ascontiguousarray(self.users, dtype=np.int64)
        items = np.ascontiguousarray(self.items, dtype=np.int64)
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if not (users.shape == items.shape == values.shape and users.ndim == 1):
            raise ValueError("users, items and values must be equal-length 1-d arrays")
        if users.size:
            if users.min() < 0 or users.max() >= self.num_users:
                raise ValueError("user id out of range")
            if items.min() < 0 or items.max() >= self.num_items:
                raise ValueError("item id out of range")
        key = users * max(self.num_items, 1) + items
        if np.unique(key).size != key.size:
            raise ValueError("duplicate (user, item) pair")
        for name, arr in (("users", users), ("items", items), ("values", values)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        up, ui = _csr(users, self.num_users)
        ip, ii = _csr(items, self.num_items)
        for name, arr in (("user_ptr", up), ("user_idx", ui), ("item_ptr", ip), ("item_idx", ii)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.values.size

    @property
    def num_ratings(self) -> int:
        return self.values.size

    def by_user(self, u: int) -> np.ndarray:
        return self.user_idx[self.user_ptr[u] : self.user_ptr[u + 1]]

    def by_item(self, j: int) -> np.ndarray:
        return self.item_idx[self.item_ptr[j] : self.item_ptr[j + 1]]

    def user_counts(self) -> np.ndarray:
        return np.diff(self.user_ptr)

    def item_counts(self) -> np.ndarray:
        return np.diff(self.item_ptr)

    def mean_rating(self) -> float:
        return float(self.values.mean()) if self.values.size else 0.0

    def subset(self, rows) -> "RatingsDataset":
        """Ratings at ``rows``, keeping the id space."""
        rows = np.asarray(rows, dtype=np.int64)
        return RatingsDataset(
            self.num_users, self.num_items, self.users[rows], self.items[rows], self.values[rows],
            self.user_ids, self.item_ids,
        )

    def with_values(self, values) -> "RatingsDataset":
        return RatingsDataset(
            self.num_users, self.num_items, self.users, self.items, values, self.user_ids, self.item_ids
        )

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.array([self.num_users, self.num_items], dtype="<i8").tobytes())
        for arr in (self.users, self.items):
            h.update(arr.astype("<i8").tobytes())
        h.update(self.values.astype("<f8").tobytes())
        return h.hexdigest()


@dataclass
class FactorState:
    """Latent factors and their Gaussian-Wishart hyperparameters.

    ``A`` is U x D and ``B`` is M x D: row u of ``A`` is the user factor a_u.
    """

    Lambda_U: np.ndarray
    Lambda_M: np.ndarray
    mu_U: np.ndarray
    mu_M: np.ndarray
    A: np.ndarray
    B: np.ndarray

    def check(self):
        for name in ("Lambda_U", "Lambda_M"):
            np.linalg.cholesky(getattr(self, name))
        for name in ("Lambda_U", "Lambda_M", "mu_U", "mu_M", "A", "B"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise FloatingPointError(f"non-finite entries in {name}")

    def copy(self) -> "FactorState":
        return FactorState(*(getattr(self, f).copy() for f in self.__dataclass_fields__))


@dataclass
class BiasState:
    """c[u, k]: bias of user u under item topic k; d[j, i]: bias of item j under user topic i."""

    c: np.ndarray
    d: np.ndarray

    def check(self, k_item: int | None = None, k_user: int | None = None):
        if k_item is not None and self.c.shape[1] != k_item:
            raise AssertionError(f"c has {self.c.shape[1]} columns, expected {k_item}")
        if k_user is not None and self.d.shape[1] != k_user:
            raise AssertionError(f"d has {self.d.shape[1]} columns, expected {k_user}")
        if not (np.all(np.isfinite(self.c)) and np.all(np.isfinite(self.d))):
            raise FloatingPointError("non-finite bias")

    def copy(self) -> "BiasState":
        return BiasState(self.c.copy(), self.d.copy())


@dataclass
class AssignmentState:
    """Per-rating topic assignments for the parametric model, with their counts.

    ``n_user[u, i]`` counts ratings of user u with user topic i and ``n_item[j, k]``
    ratings of item j with item topic k.
    """

    z_U: np.ndarray
    z_M: np.ndarray
    n_user: np.ndarray
    n_item: np.ndarray

    @classmethod
    def from_assignments(cls, dataset: RatingsDataset, z_U, z_M, K_U: int, K_M: int):
        z_U = np.asarray(z_U, dtype=np.int64).copy()
        z_M = np.asarray(z_M, dtype=np.int64).copy()
        n_user = np.zeros((dataset.num_users, K_U), dtype=np.int64)
        n_item = np.zeros((dataset.num_items, K_M), dtype=np.int64)
        np.add.at(n_user, (dataset.users, z_U), 1)
        np.add.at(n_item, (dataset.items, z_M), 1)
        return cls(z_U, z_M, n_user, n_item)

    def check(self, dataset: RatingsDataset):
        ref = AssignmentState.from_assignments(
            dataset, self.z_U, self.z_M, self.n_user.shape[1], self.n_item.shape[1]
        )
        if not (np.array_equal(ref.n_user, self.n_user) and np.array_equal(ref.n_item, self.n_item)):
            raise AssertionError("topic counts out of sync with assignments")

    def copy(self) -> "AssignmentState":
        return AssignmentState(self.z_U.copy(), self.z_M.copy(), self.n_user.copy(), self.n_item.copy())
