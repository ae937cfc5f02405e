"""Interaction data: records, filtering, splitting, graphs and sampling.

Users and items share one node index space in every graph: users occupy
``[0, num_users)`` and item ``i`` lives at node ``num_users + i``.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

CATALOG_FIELDS = ("title", "category", "description", "comment")


class DataError(ValueError):
    """Malformed or inconsistent interaction data."""


class IndexBoundsError(DataError):
    pass


class InfeasibleNoiseError(DataError):
    pass


class SamplingError(DataError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    rating: int | None = None
    timestamp: int | None = None

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise DataError("user_id and item_id must be non-empty")
        if self.rating is not None and not 1 <= self.rating <= 5:
            raise DataError(f"rating {self.rating} outside [1, 5]")


@dataclass
class TextCatalog:
    """Item metadata and user comments keyed by external ids.

    ``comments`` maps ``(user_id, item_id)`` to the user's comment on that
    item; ``user_notes`` holds comments not bound to an item.
    """

    items: dict[str, dict[str, str]] = field(default_factory=dict)
    comments: dict[tuple[str, str], str] = field(default_factory=dict)
    user_notes: dict[str, list[str]] = field(default_factory=dict)

    def item_field(self, item_id: str, name: str) -> str:
        return self.items.get(item_id, {}).get(name, "")

    def to_json(self) -> dict:
        return {
            "items": {k: dict(sorted(v.items())) for k, v in sorted(self.items.items())},
            "comments": [[u, i, t] for (u, i), t in sorted(self.comments.items())],
            "user_notes": {k: list(v) for k, v in sorted(self.user_notes.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TextCatalog":
        return cls(
            items={k: dict(v) for k, v in obj.get("items", {}).items()},
            comments={(u, i): t for u, i, t in obj.get("comments", [])},
            user_notes={k: list(v) for k, v in obj.get("user_notes", {}).items()},
        )


def _pairs(arr) -> np.ndarray:
    a = np.asarray(arr, dtype=np.int64).reshape(-1, 2)
    if len(a) == 0:
        return a
    order = np.lexsort((a[:, 1], a[:, 0]))
    return a[order]


@dataclass(frozen=True, eq=False)
class Dataset:
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    timestamps: dict[tuple[int, int], int] = field(default_factory=dict)
    catalog: TextCatalog | None = None
    noise_ledger: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        for name in ("train", "val", "test", "noise_ledger"):
            object.__setattr__(self, name, _pairs(getattr(self, name)))
        for name in ("train", "val", "test"):
            arr = getattr(self, name)
            if len(arr) and (
                arr[:, 0].min() < 0 or arr[:, 0].max() >= self.num_users
                or arr[:, 1].min() < 0 or arr[:, 1].max() >= self.num_items
            ):
                raise IndexBoundsError(f"{name} split has an out-of-range index")
        codes = [self.codes(getattr(self, n)) for n in ("train", "val", "test")]
        total = sum(len(c) for c in codes)
        if len(np.unique(np.concatenate(codes))) != total:
            raise DataError("train/val/test must be disjoint and duplicate-free")

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    def codes(self, pairs: np.ndarray) -> np.ndarray:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return pairs[:, 0] * self.num_items + pairs[:, 1]

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {u: k for k, u in enumerate(self.user_ids)}

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {i: k for k, i in enumerate(self.item_ids)}

    @cached_property
    def train_codes(self) -> np.ndarray:
        return np.sort(self.codes(self.train))

    def _by_user(self, pairs: np.ndarray) -> list[np.ndarray]:
        out = [[] for _ in range(self.num_users)]
        for u, i in pairs:
            out[u].append(i)
        return [np.asarray(x, dtype=np.int64) for x in out]

    @cached_property
    def train_items(self) -> list[np.ndarray]:
        return self._by_user(self.train)

    @cached_property
    def val_items(self) -> list[np.ndarray]:
        return self._by_user(self.val)

    @cached_property
    def test_items(self) -> list[np.ndarray]:
        return self._by_user(self.test)

    @cached_property
    def item_users(self) -> list[np.ndarray]:
        out = [[] for _ in range(self.num_items)]
        for u, i in self.train:
            out[i].append(u)
        return [np.asarray(x, dtype=np.int64) for x in out]

    def recent_train_items(self, u: int) -> list[int]:
        """Train items of ``u`` ordered oldest to newest (ties by index)."""
        items = [int(i) for i in self.train_items[u]]
        return sorted(items, key=lambda i: (self.timestamps.get((u, i), -1), i))

    def replace(self, **changes) -> "Dataset":
        kw = dict(
            user_ids=self.user_ids, item_ids=self.item_ids, train=self.train,
            val=self.val, test=self.test, timestamps=self.timestamps,
            catalog=self.catalog, noise_ledger=self.noise_ledger,
        )
        kw.update(changes)
        return Dataset(**kw)

    def summary(self) -> dict[str, float]:
        n = len(self.train) + len(self.val) + len(self.test)
        return {
            "users": self.num_users,
            "items": self.num_items,
            "interactions": n,
            "density": n / max(self.num_users * self.num_items, 1),
        }

    # -- persistence -------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "format": "llard-dataset/1",
            "user_ids": list(self.user_ids),
            "item_ids": list(self.item_ids),
            "train": self.train.tolist(),
            "val": self.val.tolist(),
            "test": self.test.tolist(),
            "timestamps": [[u, i, t] for (u, i), t in sorted(self.timestamps.items())],
            "catalog": self.catalog.to_json() if self.catalog is not None else None,
            "noise_ledger": self.noise_ledger.tolist(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        cat = obj.get("catalog")
        return cls(
            user_ids=tuple(obj["user_ids"]),
            item_ids=tuple(obj["item_ids"]),
            train=obj["train"],
            val=obj["val"],
            test=obj["test"],
            timestamps={(u, i): t for u, i, t in obj.get("timestamps", [])},
            catalog=TextCatalog.from_json(cat) if cat is not None else None,
            noise_ledger=obj.get("noise_ledger", []),
        )


# -- file formats --------------------------------------------------------------


def read_interactions(path: str | Path) -> list[InteractionRecord]:
    """Parse ``user \\t item \\t rating \\t timestamp`` lines (last two may be empty)."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2 or len(parts) > 4:
                raise DataError(f"line {lineno}: expected 2-4 tab-separated fields, got {len(parts)}")
            parts += [""] * (4 - len(parts))
            user, item, rating, ts = parts
            try:
                records.append(InteractionRecord(
                    user.strip(), item.strip(),
                    int(rating) if rating.strip() else None,
                    int(float(ts)) if ts.strip() else None,
                ))
            except (ValueError, DataError) as exc:
                raise DataError(f"line {lineno}: {exc}") from None
    return records


def write_interactions(records: Iterable[InteractionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            rating = "" if r.rating is None else str(r.rating)
            ts = "" if r.timestamp is None else str(r.timestamp)
            fh.write(f"{r.user_id}\t{r.item_id}\t{rating}\t{ts}\n")


def read_catalog(path: str | Path) -> TextCatalog:
    """Parse ``kind \\t id \\t field \\t text`` lines.

    A user comment bound to an item uses the field name ``comment:<item_id>``;
    a bare ``comment`` is kept as a general user note.
    """
    cat = TextCatalog()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t", 3)
            if len(parts) != 4:
                raise DataError(f"catalog line {lineno}: expected 4 tab-separated fields")
            kind, ident, name, text = parts
            base = name.split(":", 1)[0]
            if kind not in ("u", "i") or base not in CATALOG_FIELDS:
                raise DataError(f"catalog line {lineno}: bad kind/field {kind!r}/{name!r}")
            if kind == "i":
                cat.items.setdefault(ident, {})[name] = text
            elif ":" in name:
                cat.comments[(ident, name.split(":", 1)[1])] = text
            else:
                cat.user_notes.setdefault(ident, []).append(text)
    return cat


def write_catalog(cat: TextCatalog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item, fields in sorted(cat.items.items()):
            for name, text in sorted(fields.items()):
                fh.write(f"i\t{item}\t{name}\t{text}\n")
        for (user, item), text in sorted(cat.comments.items()):
            fh.write(f"u\t{user}\tcomment:{item}\t{text}\n")
        for user, notes in sorted(cat.user_notes.items()):
            for text in notes:
                fh.write(f"u\t{user}\tcomment\t{text}\n")


def write_ledger(pairs: np.ndarray, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in np.asarray(pairs).reshape(-1, 2):
            fh.write(f"{int(u)}\t{int(i)}\n")


def read_ledger(path: str | Path) -> np.ndarray:
    rows = [line.split("\t") for line in Path(path).read_text().splitlines() if line.strip()]
    return np.asarray([[int(a), int(b)] for a, b in rows], dtype=np.int64).reshape(-1, 2)


# -- filtering and splitting ----------------------------------------------------


def kcore_filter(
    records: Sequence[InteractionRecord], k: int, min_rating: int | None = None
) -> list[InteractionRecord]:
    """Drop low ratings, then peel users/items until every degree is >= k.

    Records without a rating survive the rating filter. Degrees count distinct
    partners, so duplicate records do not inflate them.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    kept = [r for r in records if min_rating is None or r.rating is None or r.rating >= min_rating]
    user_nbrs: dict[str, set[str]] = defaultdict(set)
    item_nbrs: dict[str, set[str]] = defaultdict(set)
    for r in kept:
        user_nbrs[r.user_id].add(r.item_id)
        item_nbrs[r.item_id].add(r.user_id)

    queue = [("u", u) for u, s in user_nbrs.items() if len(s) < k]
    queue += [("i", i) for i, s in item_nbrs.items() if len(s) < k]
    dead_u: set[str] = set()
    dead_i: set[str] = set()
    while queue:
        kind, node = queue.pop()
        if kind == "u":
            if node in dead_u:
                continue
            dead_u.add(node)
            for i in user_nbrs.pop(node):
                nbrs = item_nbrs[i]
                nbrs.discard(node)
                if len(nbrs) < k and i not in dead_i:
                    queue.append(("i", i))
        else:
            if node in dead_i:
                continue
            dead_i.add(node)
            for u in item_nbrs.pop(node):
                nbrs = user_nbrs[u]
                nbrs.discard(node)
                if len(nbrs) < k and u not in dead_u:
                    queue.append(("u", u))
    return [r for r in kept if r.user_id not in dead_u and r.item_id not in dead_i]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(
    records: Sequence[InteractionRecord],
    ratios: tuple[float, float, float] = (3, 1, 1),
    seed: int = 0,
    catalog: TextCatalog | None = None,
) -> Dataset:
    """Per-user random train/val/test partition.

    Val and test sizes are rounded (half up); train takes the remainder and is
    never left empty. Duplicate (user, item) records collapse to the first.
    """
    if not records:
        raise DataError("no records to split")
    user_ids = tuple(sorted({r.user_id for r in records}))
    item_ids = tuple(sorted({r.item_id for r in records}))
    uidx = {u: k for k, u in enumerate(user_ids)}
    iidx = {i: k for k, i in enumerate(item_ids)}

    per_user: dict[int, list[int]] = defaultdict(list)
    timestamps: dict[tuple[int, int], int] = {}
    seen: set[tuple[int, int]] = set()
    for r in records:
        key = (uidx[r.user_id], iidx[r.item_id])
        if key in seen:
            continue
        seen.add(key)
        per_user[key[0]].append(key[1])
        if r.timestamp is not None:
            timestamps[key] = r.timestamp

    a, b, c = ratios
    total = a + b + c
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for u in range(len(user_ids)):
        items = np.sort(np.asarray(per_user[u], dtype=np.int64))
        items = items[rng.permutation(len(items))]
        n = len(items)
        n_val = _round_half_up(n * b / total)
        n_test = _round_half_up(n * c / total)
        while n - n_val - n_test < 1:
            if n_test >= n_val and n_test > 0:
                n_test -= 1
            else:
                n_val -= 1
        val += [(u, i) for i in items[:n_val]]
        test += [(u, i) for i in items[n_val:n_val + n_test]]
        train += [(u, i) for i in items[n_val + n_test:]]
    return Dataset(user_ids, item_ids, train, val, test, timestamps=timestamps, catalog=catalog)


def inject_noise(dataset: Dataset, ratio: float, seed: int) -> Dataset:
    """Add floor(ratio * |train|) uniformly drawn unobserved pairs to train.

    The added pairs are recorded in ``noise_ledger`` (appended to any ledger
    already present).
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    n_new = int(math.floor(ratio * len(dataset.train)))
    nu, ni = dataset.num_users, dataset.num_items
    observed = np.unique(np.concatenate([
        dataset.codes(dataset.train), dataset.codes(dataset.val), dataset.codes(dataset.test)
    ]))
    n_absent = nu * ni - len(observed)
    if n_new > n_absent or (n_absent == 0):
        raise InfeasibleNoiseError(f"need {n_new} absent pairs, only {n_absent} exist")
    rng = np.random.default_rng(seed)
    if n_new * 4 <= n_absent:
        chosen: list[int] = []
        taken = set(observed.tolist())
        while len(chosen) < n_new:
            for code in rng.integers(0, nu * ni, size=2 * (n_new - len(chosen)) + 8).tolist():
                if code not in taken:
                    taken.add(code)
                    chosen.append(code)
                    if len(chosen) == n_new:
                        break
        picked = np.asarray(chosen, dtype=np.int64)
    else:
        absent = np.setdiff1d(np.arange(nu * ni, dtype=np.int64), observed)
        picked = rng.choice(absent, size=n_new, replace=False)
    new_pairs = np.stack([picked // ni, picked % ni], axis=1)
    return dataset.replace(
        train=np.concatenate([dataset.train, new_pairs]),
        noise_ledger=np.concatenate([dataset.noise_ledger, new_pairs]),
    )


# -- graphs --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InteractionGraph:
    """Undirected user-item(-user) graph with a weighted symmetric normalization.

    ``edges`` holds node pairs ``(a, b)`` with ``a < b``; ``kinds`` is 0 for
    user-item and 1 for user-user edges.
    """

    num_users: int
    num_items: int
    edges: np.ndarray
    weights: np.ndarray
    kinds: np.ndarray
    adjacency: sp.csr_matrix

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.edges}


def normalized_adjacency(num_nodes: int, edges: np.ndarray, weights: np.ndarray) -> sp.csr_matrix:
    """D^{-1/2} (A*W) D^{-1/2} with weighted degrees; isolated rows stay zero."""
    a, b = edges[:, 0], edges[:, 1]
    deg = np.bincount(a, weights, minlength=num_nodes) + np.bincount(b, weights, minlength=num_nodes)
    inv = np.zeros(num_nodes)
    np.divide(1.0, np.sqrt(deg), out=inv, where=deg > 0)
    vals = weights * inv[a] * inv[b]
    rows = np.concatenate([a, b])
    cols = np.concatenate([b, a])
    mat = sp.coo_matrix((np.concatenate([vals, vals]), (rows, cols)), shape=(num_nodes, num_nodes))
    return mat.tocsr()


def graph_from_edges(
    num_users: int,
    num_items: int,
    edges: Iterable[tuple[int, int]] | np.ndarray,
    weights: Iterable[float] | np.ndarray | None = None,
) -> InteractionGraph:
    """Build a graph from unified node-index pairs.

    Duplicate edges (in either orientation) collapse to one with the maximum
    weight. Item-item pairs and self-loops are rejected.
    """
    n = num_users + num_items
    e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64).reshape(-1, 2)
    w = np.ones(len(e)) if weights is None else np.asarray(list(weights) if not isinstance(weights, np.ndarray) else weights, dtype=np.float64)
    if len(w) != len(e):
        raise ValueError("weights must align with edges")
    if len(e) and (e.min() < 0 or e.max() >= n):
        raise IndexBoundsError("edge endpoint outside node range")
    if np.any((w < 0) | (w > 1)) or not np.all(np.isfinite(w)):
        raise ValueError("edge weights must lie in [0, 1]")
    lo, hi = np.minimum(e[:, 0], e[:, 1]), np.maximum(e[:, 0], e[:, 1])
    if np.any(lo == hi):
        raise DataError("self-loops are not allowed")
    if np.any(lo >= num_users):
        raise DataError("item-item edges are not allowed")
    codes = lo * n + hi
    uniq, inverse = np.unique(codes, return_inverse=True)
    wmax = np.zeros(len(uniq))
    np.maximum.at(wmax, inverse, w)
    e = np.stack([uniq // n, uniq % n], axis=1)
    kinds = (e[:, 1] < num_users).astype(np.int8)
    adj = normalized_adjacency(n, e, wmax)
    return InteractionGraph(num_users, num_items, e, wmax, kinds, adj)


def ui_edges(dataset_or_users, pairs: np.ndarray | None = None) -> np.ndarray:
    """Map (user, item) index pairs to unified node pairs."""
    if pairs is None:
        ds = dataset_or_users
        num_users, pairs = ds.num_users, ds.train
    else:
        num_users = dataset_or_users
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return np.stack([pairs[:, 0], pairs[:, 1] + num_users], axis=1)


def build_graph(
    dataset: Dataset,
    extra_edges: Iterable[tuple[int, int]] | None = None,
    edge_weights: Sequence[float] | np.ndarray | None = None,
) -> InteractionGraph:
    """Graph over the train edges plus optional extra unified-index edges.

    ``edge_weights`` aligns with train edges followed by ``extra_edges``.
    """
    edges = ui_edges(dataset)
    if extra_edges is not None:
        extra = np.asarray(list(extra_edges), dtype=np.int64).reshape(-1, 2)
        edges = np.concatenate([edges, extra])
    return graph_from_edges(dataset.num_users, dataset.num_items, edges, edge_weights)


# -- sampling ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TripleBatch:
    triples: np.ndarray  # (n, 3): user, positive item, negative item

    @property
    def size(self) -> int:
        return len(self.triples)

    @property
    def users(self) -> np.ndarray:
        return self.triples[:, 0]

    @property
    def pos(self) -> np.ndarray:
        return self.triples[:, 1]

    @property
    def neg(self) -> np.ndarray:
        return self.triples[:, 2]


def sample_triples(dataset: Dataset, batch_size: int, seed: int | np.random.Generator) -> TripleBatch:
    """Uniform (u, i) draws from train with a uniform unobserved negative j."""
    if len(dataset.train) == 0:
        raise SamplingError("train split is empty")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ni = dataset.num_items
    counts = np.bincount(dataset.train[:, 0], minlength=dataset.num_users)
    open_rows = np.flatnonzero(counts[dataset.train[:, 0]] < ni)
    if len(open_rows) == 0:
        raise SamplingError("every user's positives cover all items")
    rows = open_rows[rng.integers(0, len(open_rows), size=batch_size)]
    users = dataset.train[rows, 0]
    pos = dataset.train[rows, 1]
    neg = rng.integers(0, ni, size=batch_size)
    known = dataset.train_codes
    bad = np.flatnonzero(np.isin(users * ni + neg, known, assume_unique=False))
    while len(bad):
        neg[bad] = rng.integers(0, ni, size=len(bad))
        still = np.isin(users[bad] * ni + neg[bad], known)
        bad = bad[still]
    return TripleBatch(np.stack([users, pos, neg], axis=1))
