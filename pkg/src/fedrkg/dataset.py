"""Raw rating ingestion, preprocessing, chronological splitting and batching.

Every record with a rating is an implicit positive. Users below an interaction
threshold are dropped, the survivors are reindexed densely and split
leave-one-out by time: the latest interaction is the test item, the one before
it the validation item, everything else is training data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

CACHE_MAGIC = "# fedrkg-dataset"
CACHE_VERSION = 1


class DatasetError(ValueError):
    """Raised for unreadable input files or datasets that violate preconditions."""


@dataclass(frozen=True)
class RawFormat:
    sep: str | None  # None splits on any whitespace
    has_rating: bool = True
    has_timestamp: bool = True
    header: bool = False
    # column positions of user, item, rating, timestamp
    columns: tuple[int, int, int, int] = (0, 1, 2, 3)


FORMATS: dict[str, RawFormat] = {
    "ml-1m": RawFormat(sep="::"),
    "amazon-video": RawFormat(sep=","),
    # FilmTrust ships without timestamps; file order stands in for time.
    "filmtrust": RawFormat(sep=None, has_timestamp=False),
    # hetrec-2011 user_taggedartists-timestamps.dat: userID artistID tagID timestamp
    "lastfm-2k": RawFormat(sep="\t", has_rating=False, header=True, columns=(0, 1, -1, 3)),
    "csv": RawFormat(sep=","),
    "tsv": RawFormat(sep="\t"),
}


@dataclass
class RawInteractions:
    users: list[str] = field(default_factory=list)
    items: list[str] = field(default_factory=list)
    ratings: list[float] = field(default_factory=list)
    timestamps: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.users)

    @property
    def records(self) -> Iterator[tuple[str, str, float, int]]:
        return zip(self.users, self.items, self.ratings, self.timestamps)

    def append(self, user: str, item: str, rating: float, timestamp: int) -> None:
        self.users.append(user)
        self.items.append(item)
        self.ratings.append(rating)
        self.timestamps.append(timestamp)


def _parse_line(line: str, fmt: RawFormat, lineno: int) -> tuple[str, str, float, int]:
    parts = line.split(fmt.sep) if fmt.sep is not None else line.split()
    parts = [p.strip() for p in parts]
    u_col, i_col, r_col, t_col = fmt.columns
    used = [u_col, i_col] + ([r_col] if fmt.has_rating else []) + ([t_col] if fmt.has_timestamp else [])
    needed = max(used) + 1
    if len(parts) < needed:
        raise DatasetError(f"line {lineno}: expected at least {needed} fields, got {len(parts)}")
    user, item = parts[u_col], parts[i_col]
    if not user or not item:
        raise DatasetError(f"line {lineno}: empty user or item key")
    rating = 1.0
    if fmt.has_rating:
        try:
            rating = float(parts[r_col])
        except ValueError:
            raise DatasetError(f"line {lineno}: non-numeric rating {parts[r_col]!r}") from None
        if not math.isfinite(rating):
            raise DatasetError(f"line {lineno}: non-finite rating {parts[r_col]!r}")
    timestamp = lineno
    if fmt.has_timestamp:
        try:
            timestamp = int(parts[t_col])
        except ValueError:
            raise DatasetError(f"line {lineno}: non-integer timestamp {parts[t_col]!r}") from None
    return user, item, rating, timestamp


def load_raw(path: str | Path, format: str) -> RawInteractions:
    """Read a delimited rating file into :class:`RawInteractions`.

    Blank lines are skipped; any other malformed line raises
    :class:`DatasetError` naming its 1-based line number.
    """
    if format not in FORMATS:
        raise DatasetError(f"unknown format {format!r}; choose from {sorted(FORMATS)}")
    fmt = FORMATS[format]
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"no such file: {path}")
    raw = RawInteractions()
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            if fmt.header and lineno == 1:
                continue
            if not line.strip():
                continue
            raw.append(*_parse_line(line.rstrip("\r\n"), fmt, lineno))
    return raw


def key_order(key: str) -> tuple:
    """Total order on raw keys: numeric keys numerically, then the rest lexically."""
    if key.isdigit():
        return (0, int(key), key)
    return (1, 0, key)


@dataclass
class TrainingBatch:
    user: int
    items: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class InteractionDataset:
    user_keys: list[str]
    item_keys: list[str]
    train: list[np.ndarray]
    val: np.ndarray
    test: np.ndarray
    train_ts: list[np.ndarray]
    val_ts: np.ndarray
    test_ts: np.ndarray
    name: str = "dataset"

    def __post_init__(self) -> None:
        self.user_index = {k: u for u, k in enumerate(self.user_keys)}
        self.item_index = {k: i for i, k in enumerate(self.item_keys)}
        # sorted positives for O(log k) negative sampling
        self._sorted_train = [np.sort(t) for t in self.train]
        self._sorted_observed = [
            np.unique(np.concatenate([t, [self.val[u], self.test[u]]])) for u, t in enumerate(self.train)
        ]
        self._train_sets = [frozenset(t.tolist()) for t in self.train]
        for u, pos in enumerate(self._sorted_train):
            if len(pos) == 0:
                raise DatasetError(f"user {self.user_keys[u]!r} has no training items")
            if len(pos) >= self.m:
                raise DatasetError(
                    f"user {self.user_keys[u]!r} interacted with every item; no negatives to sample"
                )

    @property
    def n(self) -> int:
        return len(self.user_keys)

    @property
    def m(self) -> int:
        return len(self.item_keys)

    @property
    def num_interactions(self) -> int:
        return sum(len(t) for t in self.train) + 2 * self.n

    def stats(self) -> dict:
        inter = self.num_interactions
        return {
            "name": self.name,
            "users": self.n,
            "items": self.m,
            "interactions": inter,
            "sparsity": 1.0 - inter / (self.n * self.m),
        }

    def train_items(self, user: int) -> frozenset:
        return self._train_sets[user]

    def train_counts(self) -> np.ndarray:
        return np.array([len(t) for t in self.train], dtype=np.int64)

    def item_train_counts(self) -> np.ndarray:
        counts = np.zeros(self.m, dtype=np.int64)
        for t in self.train:
            np.add.at(counts, t, 1)
        return counts

    def sample_negatives(
        self, user: int, count_per_positive: int, rng: np.random.Generator, pool: str = "train"
    ) -> np.ndarray:
        """Uniform draws, with replacement, from the user's negative pool.

        ``pool="train"`` excludes only training positives, so held-out items can
        be drawn; ``pool="all"`` also excludes the validation and test items.
        """
        if pool == "train":
            excluded = self._sorted_train[user]
        elif pool == "all":
            excluded = self._sorted_observed[user]
        else:
            raise ValueError(f"unknown negative pool {pool!r}")
        k = len(excluded)
        if k >= self.m:
            raise DatasetError(f"user {self.user_keys[user]!r} has an empty {pool!r} negative pool")
        size = count_per_positive * len(self.train[user])
        r = rng.integers(0, self.m - k, size=size)
        # shift each draw past the excluded ids that precede it
        offsets = excluded - np.arange(k)
        return r + np.searchsorted(offsets, r, side="right")

    def build_batches(
        self,
        user: int,
        batch_size: int,
        neg_per_pos: int,
        rng: np.random.Generator,
        pool: str = "train",
    ) -> list[TrainingBatch]:
        pos = self.train[user]
        neg = self.sample_negatives(user, neg_per_pos, rng, pool)
        items = np.concatenate([pos, neg])
        labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
        order = rng.permutation(len(items))
        items, labels = items[order], labels[order]
        return [
            TrainingBatch(user, items[s : s + batch_size], labels[s : s + batch_size])
            for s in range(0, len(items), batch_size)
        ]

    def to_raw(self) -> RawInteractions:
        raw = RawInteractions()
        for u, ukey in enumerate(self.user_keys):
            for i, ts in zip(self.train[u].tolist(), self.train_ts[u].tolist()):
                raw.append(ukey, self.item_keys[i], 1.0, ts)
            raw.append(ukey, self.item_keys[self.val[u]], 1.0, int(self.val_ts[u]))
            raw.append(ukey, self.item_keys[self.test[u]], 1.0, int(self.test_ts[u]))
        return raw

    def structurally_equal(self, other: "InteractionDataset") -> bool:
        return (
            self.user_keys == other.user_keys
            and self.item_keys == other.item_keys
            and np.array_equal(self.val, other.val)
            and np.array_equal(self.test, other.test)
            and all(np.array_equal(a, b) for a, b in zip(self.train, other.train))
            and len(self.train) == len(other.train)
        )


def chrono_split(
    histories: dict[str, list[tuple[int, str]]],
) -> dict[str, tuple[list[tuple[int, str]], tuple[int, str], tuple[int, str]]]:
    """Leave-one-out split of per-user ``(timestamp, item_key)`` histories.

    Ties on timestamp are ordered by item key. Returns ``user -> (train, val, test)``.
    """
    out = {}
    for user, hist in histories.items():
        if len(hist) < 3:
            raise DatasetError(f"user {user!r} has {len(hist)} interactions; need at least 3 to split")
        ordered = sorted(hist, key=lambda rec: (rec[0], key_order(rec[1])))
        out[user] = (ordered[:-2], ordered[-2], ordered[-1])
    return out


def preprocess(raw: RawInteractions, min_interactions: int, name: str = "dataset") -> InteractionDataset:
    if min_interactions < 3:
        raise DatasetError("min_interactions must be at least 3 (train, val and test need one each)")
    # collapse duplicate (user, item) pairs, keeping the latest timestamp
    latest: dict[tuple[str, str], int] = {}
    for user, item, _rating, ts in raw.records:
        prev = latest.get((user, item))
        if prev is None or ts > prev:
            latest[(user, item)] = ts
    histories: dict[str, list[tuple[int, str]]] = {}
    for (user, item), ts in latest.items():
        histories.setdefault(user, []).append((ts, item))
    histories = {u: h for u, h in histories.items() if len(h) >= min_interactions}
    if not histories:
        raise DatasetError(f"no user has at least {min_interactions} interactions")

    user_keys = sorted(histories, key=key_order)
    item_keys = sorted({item for h in histories.values() for _ts, item in h}, key=key_order)
    item_index = {k: i for i, k in enumerate(item_keys)}
    splits = chrono_split(histories)

    train, train_ts = [], []
    val = np.empty(len(user_keys), dtype=np.int64)
    test = np.empty(len(user_keys), dtype=np.int64)
    val_ts = np.empty(len(user_keys), dtype=np.int64)
    test_ts = np.empty(len(user_keys), dtype=np.int64)
    for u, ukey in enumerate(user_keys):
        tr, va, te = splits[ukey]
        train.append(np.array([item_index[k] for _ts, k in tr], dtype=np.int64))
        train_ts.append(np.array([ts for ts, _k in tr], dtype=np.int64))
        val[u], val_ts[u] = item_index[va[1]], va[0]
        test[u], test_ts[u] = item_index[te[1]], te[0]
    return InteractionDataset(user_keys, item_keys, train, val, test, train_ts, val_ts, test_ts, name=name)


def save_cache(dataset: InteractionDataset, path: str | Path) -> None:
    """Write the dataset as tab-separated text behind a versioned header.

    Layout::

        # fedrkg-dataset v1
        N\t<name>\t<n>\t<m>
        U\t<user id>\t<raw key>          one per user
        I\t<item id>\t<raw key>          one per item
        R\t<user id>\t<item id>\t<split>\t<timestamp>   split in {train,val,test}
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{CACHE_MAGIC} v{CACHE_VERSION}\n")
        fh.write(f"N\t{dataset.name}\t{dataset.n}\t{dataset.m}\n")
        for u, k in enumerate(dataset.user_keys):
            fh.write(f"U\t{u}\t{k}\n")
        for i, k in enumerate(dataset.item_keys):
            fh.write(f"I\t{i}\t{k}\n")
        for u in range(dataset.n):
            for i, ts in zip(dataset.train[u].tolist(), dataset.train_ts[u].tolist()):
                fh.write(f"R\t{u}\t{i}\ttrain\t{ts}\n")
            fh.write(f"R\t{u}\t{dataset.val[u]}\tval\t{dataset.val_ts[u]}\n")
            fh.write(f"R\t{u}\t{dataset.test[u]}\ttest\t{dataset.test_ts[u]}\n")


def load_cache(path: str | Path) -> InteractionDataset:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != f"{CACHE_MAGIC} v{CACHE_VERSION}":
            raise DatasetError(f"{path}: unsupported cache header {header!r}")
        _tag, name, n, m = fh.readline().rstrip("\n").split("\t")
        n, m = int(n), int(m)
        user_keys, item_keys = [""] * n, [""] * m
        train = [[] for _ in range(n)]
        train_ts = [[] for _ in range(n)]
        val = np.full(n, -1, dtype=np.int64)
        test = np.full(n, -1, dtype=np.int64)
        val_ts = np.zeros(n, dtype=np.int64)
        test_ts = np.zeros(n, dtype=np.int64)
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if parts[0] == "U":
                user_keys[int(parts[1])] = parts[2]
            elif parts[0] == "I":
                item_keys[int(parts[1])] = parts[2]
            elif parts[0] == "R":
                u, i, split, ts = int(parts[1]), int(parts[2]), parts[3], int(parts[4])
                if split == "train":
                    train[u].append(i)
                    train_ts[u].append(ts)
                elif split == "val":
                    val[u], val_ts[u] = i, ts
                else:
                    test[u], test_ts[u] = i, ts
    return InteractionDataset(
        user_keys,
        item_keys,
        [np.array(t, dtype=np.int64) for t in train],
        val,
        test,
        [np.array(t, dtype=np.int64) for t in train_ts],
        val_ts,
        test_ts,
        name=name,
    )


def synthetic_raw(
    n_users: int = 200,
    n_items: int = 500,
    mean_interactions: int = 25,
    n_clusters: int = 8,
    popularity_skew: float = 1.0,
    seed: int = 0,
) -> RawInteractions:
    """Clustered implicit-feedback data with a popularity tail, for demos and tests.

    Each user belongs to a taste cluster and mixes cluster-preferred items with
    globally popular ones; the mixing share varies per user so that both
    "follower" and "distinct" users exist.
    """
    rng = np.random.default_rng(seed)
    popularity = 1.0 / np.arange(1, n_items + 1) ** popularity_skew
    popularity = rng.permutation(popularity)
    popularity /= popularity.sum()
    cluster_of_item = rng.integers(0, n_clusters, size=n_items)
    raw = RawInteractions()
    for u in range(n_users):
        cluster = rng.integers(0, n_clusters)
        follow = rng.beta(2, 2)
        count = max(3, int(rng.poisson(mean_interactions)))
        count = min(count, n_items // 2)
        local = np.where(cluster_of_item == cluster, 1.0, 0.02) * rng.gamma(1.0, size=n_items)
        local /= local.sum()
        pref = follow * popularity + (1 - follow) * local
        items = rng.choice(n_items, size=count, replace=False, p=pref)
        times = np.sort(rng.integers(0, 10_000_000, size=count))
        for item, ts in zip(items, times):
            raw.append(f"u{u}", f"i{item}", float(rng.integers(1, 6)), int(ts))
    return raw
