"""Full-rank Recall/NDCG, robustness sweeps and cold-start group reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, inject_noise

DEFAULT_NS = (10, 20)
DEFAULT_RATIOS = (0.05, 0.10, 0.15, 0.20)


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2, dtype=np.float64))


def excluded_items(dataset: Dataset, user: int, split: str, exclude_val: bool = True) -> np.ndarray:
    """Items never offered as candidates: train positives, plus val positives at test time."""
    parts = [dataset.train_items[user]]
    if split == "test" and exclude_val:
        parts.append(dataset.val_items[user])
    return np.concatenate(parts)


def rank_candidates(scores: np.ndarray, exclude: Sequence[int]) -> np.ndarray:
    """Candidate items by descending score; ties go to the smaller item index."""
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.ones(len(scores), dtype=bool)
    keep[np.asarray(exclude, dtype=np.int64)] = False
    cand = np.flatnonzero(keep)
    return cand[np.argsort(-scores[cand], kind="stable")]


def topn_metrics(ranked: Sequence[int], test_items: Sequence[int], n: int) -> tuple[float, float]:
    """(recall, ndcg) at cutoff ``n`` with binary gains."""
    if n < 1:
        raise ValueError("N must be >= 1")
    test = set(int(i) for i in test_items)
    if not test:
        raise ValueError("empty test set")
    top = [int(i) for i in ranked[:n]]
    hits = np.array([i in test for i in top], dtype=np.float64)
    disc = _discounts(n)
    dcg = float((hits * disc[:len(hits)]).sum())
    idcg = float(disc[:min(n, len(test))].sum())
    return float(hits.sum()) / len(test), dcg / idcg


@dataclass
class MetricReport:
    """Per-user Recall/NDCG at each cutoff; users are those with >= 1 target item."""

    split: str
    ns: tuple[int, ...]
    users: np.ndarray
    recall: dict[int, np.ndarray]
    ndcg: dict[int, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def mean(self, metric: str, n: int) -> float:
        values = {"recall": self.recall, "ndcg": self.ndcg}[metric.lower()][n]
        return float(values.mean()) if len(values) else 0.0

    def subset(self, users: Sequence[int]) -> "MetricReport":
        pick = np.isin(self.users, np.asarray(users, dtype=np.int64))
        return MetricReport(self.split, self.ns, self.users[pick],
                            {n: v[pick] for n, v in self.recall.items()},
                            {n: v[pick] for n, v in self.ndcg.items()}, dict(self.metadata))

    def rows(self) -> list[tuple[str, int, float]]:
        return [(m, n, self.mean(m, n)) for m in ("recall", "ndcg") for n in self.ns]

    def to_tsv(self) -> str:
        head = "".join(f"# {k}\t{v}\n" for k, v in sorted(self.metadata.items()))
        body = "".join(f"{m}\t{n}\t{v!r}\n" for m, n, v in self.rows())
        return head + "metric\tN\tvalue\n" + body

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_tsv())


Scorer = Callable[[np.ndarray], np.ndarray]


def evaluate(scorer: Scorer | np.ndarray, dataset: Dataset, split: str = "test",
             ns: Sequence[int] = DEFAULT_NS, exclude_val: bool = True, block: int = 512,
             metadata: dict | None = None) -> MetricReport:
    """Rank every candidate item for each user with targets in ``split``.

    ``scorer`` maps an array of user indices to a (users x items) score
    matrix, or is the full matrix itself.
    """
    if split not in ("val", "test"):
        raise ValueError("split must be 'val' or 'test'")
    ns = tuple(sorted(set(int(n) for n in ns)))
    if not ns or ns[0] < 1:
        raise ValueError("cutoffs must be >= 1")
    if isinstance(scorer, np.ndarray):
        matrix = scorer
        scorer = lambda users: matrix[users]  # noqa: E731
    targets = dataset.test_items if split == "test" else dataset.val_items
    users = np.asarray([u for u in range(dataset.num_users) if len(targets[u])], dtype=np.int64)
    nmax, ni = ns[-1], dataset.num_items
    disc = _discounts(nmax)
    recall = {n: np.zeros(len(users)) for n in ns}
    ndcg = {n: np.zeros(len(users)) for n in ns}
    for start in range(0, len(users), block):
        chunk = users[start:start + block]
        scores = np.array(scorer(chunk), dtype=np.float64, copy=True).reshape(len(chunk), ni)
        is_target = np.zeros((len(chunk), ni), dtype=bool)
        n_cand = np.empty(len(chunk), dtype=np.int64)
        for r, u in enumerate(chunk):
            ex = excluded_items(dataset, int(u), split, exclude_val)
            scores[r, ex] = -np.inf
            n_cand[r] = ni - len(ex)
            is_target[r, targets[u]] = True
        top = np.argsort(-scores, axis=1, kind="stable")[:, :nmax]
        hits = np.take_along_axis(is_target, top, axis=1)
        hits &= np.arange(top.shape[1])[None, :] < n_cand[:, None]
        n_true = is_target.sum(1)
        for n in ns:
            h = hits[:, :n].astype(np.float64)
            recall[n][start:start + len(chunk)] = h.sum(1) / n_true
            idcg = np.cumsum(disc)[np.minimum(n, n_true) - 1]
            ndcg[n][start:start + len(chunk)] = (h * disc[:h.shape[1]]).sum(1) / idcg
    return MetricReport(split, ns, users, recall, ndcg, dict(metadata or {}))


# -- robustness ------------------------------------------------------------------------------


def drop_rate(clean: float, noisy: float) -> float:
    return 0.0 if clean == 0 else (clean - noisy) / clean


@dataclass
class SweepRow:
    ratio: float
    recall: float
    ndcg: float
    drop_rate: float


def robustness_sweep(dataset: Dataset, run: Callable[[Dataset], MetricReport],
                     ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0, n: int = 20,
                     clean: MetricReport | None = None) -> list[SweepRow]:
    """Inject noise at each ratio, retrain via ``run`` and compare test Recall@n.

    ``run`` trains on the given dataset and returns its test report; the val and
    test splits are never touched by the injection.
    """
    clean = clean or run(dataset)
    base = clean.mean("recall", n)
    rows = [SweepRow(0.0, base, clean.mean("ndcg", n), 0.0)]
    for k, ratio in enumerate(r for r in ratios if r > 0):
        report = run(inject_noise(dataset, ratio, seed + 1000 * (k + 1)))
        rec = report.mean("recall", n)
        rows.append(SweepRow(float(ratio), rec, report.mean("ndcg", n), drop_rate(base, rec)))
    return rows


def write_sweep(rows: Sequence[SweepRow], path: str | Path, n: int = 20) -> None:
    lines = [f"ratio\trecall@{n}\tndcg@{n}\tdrop_rate"]
    lines += [f"{r.ratio!r}\t{r.recall!r}\t{r.ndcg!r}\t{r.drop_rate!r}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def write_series(path: str | Path, xs: Sequence[float], ys: Sequence[float]) -> None:
    """Plot data as ``x \\t y`` lines."""
    Path(path).write_text("".join(f"{float(x)!r}\t{float(y)!r}\n" for x, y in zip(xs, ys)))


# -- cold start ----------------------------------------------------------------------------


@dataclass
class ColdStartGroup:
    group: int
    users: np.ndarray
    median_train: float
    report: MetricReport


def frequency_groups(dataset: Dataset, users: Sequence[int], groups: int = 5) -> list[np.ndarray]:
    """Split users into equal-size groups by train count (sparsest first, ties by index)."""
    users = np.asarray(users, dtype=np.int64)
    if len(users) < groups:
        raise ValueError(f"need at least {groups} users for {groups} groups, got {len(users)}")
    counts = np.array([len(dataset.train_items[u]) for u in users])
    order = users[np.lexsort((users, counts))]
    return [np.sort(g) for g in np.array_split(order, groups)]


def coldstart_report(report: MetricReport, dataset: Dataset, groups: int = 5) -> list[ColdStartGroup]:
    out = []
    for g, members in enumerate(frequency_groups(dataset, report.users, groups)):
        med = float(np.median([len(dataset.train_items[u]) for u in members]))
        out.append(ColdStartGroup(g, members, med, report.subset(members)))
    return out


def write_coldstart(groups: Sequence[ColdStartGroup], path: str | Path) -> None:
    ns = groups[0].report.ns if groups else DEFAULT_NS
    cols = [f"{m}@{n}" for m in ("recall", "ndcg") for n in ns]
    lines = ["group\tusers\tmedian_train\t" + "\t".join(cols)]
    for g in groups:
        vals = [g.report.mean(m, n) for m in ("recall", "ndcg") for n in ns]
        lines.append(f"{g.group}\t{len(g.users)}\t{g.median_train!r}\t" + "\t".join(repr(v) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def expected_random_recall(dataset: Dataset, n: int = 20, exclude_val: bool = True) -> tuple[float, float]:
    """Expected mean Recall@n under uniformly random ranking and its standard error.

    Hits per user are hypergeometric: ``n`` draws from the candidates, of which
    the user's test items are the successes.
    """
    means, variances = [], []
    for u in range(dataset.num_users):
        t = len(dataset.test_items[u])
        if not t:
            continue
        cand = dataset.num_items - len(excluded_items(dataset, u, "test", exclude_val))
        k = min(n, cand)
        means.append(k / cand)
        var_hits = k * (t / cand) * (1 - t / cand) * ((cand - k) / (cand - 1) if cand > 1 else 0.0)
        variances.append(var_hits / t ** 2)
    m = len(means)
    return float(np.mean(means)), math.sqrt(float(np.sum(variances))) / m
