"""Clustered synthetic interactions with planted cross-cluster noise.

Users and items are split into clusters; every item's text names its
cluster's keywords, and users interact only inside their own cluster. Noise
edges are drawn across clusters and recorded in the dataset's noise ledger, so
a keyword-driven mock LLM can act as a knowledge oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    InteractionRecord,
    TextCatalog,
    split_dataset,
    write_catalog,
    write_interactions,
)
from .llm.mock import MockRules

CLUSTER_KEYWORDS = (
    ("jazz", "saxophone"),
    ("chess", "strategy"),
    ("hiking", "mountain"),
    ("baking", "pastry"),
    ("robotics", "circuit"),
    ("poetry", "sonnet"),
    ("gardening", "orchid"),
    ("astronomy", "telescope"),
    ("cycling", "gravel"),
    ("pottery", "glaze"),
)


@dataclass(eq=False)
class PlantedData:
    clean: Dataset
    noisy: Dataset  # clean plus injected train edges, listed in noisy.noise_ledger
    user_cluster: np.ndarray
    item_cluster: np.ndarray
    rules: MockRules
    records: list[InteractionRecord]  # raw clean records, for file-based pipelines

    @property
    def noise(self) -> np.ndarray:
        return self.noisy.noise_ledger


def _catalog(item_ids, item_cluster, rng) -> TextCatalog:
    items = {}
    for ext, c in zip(item_ids, item_cluster):
        a, b = CLUSTER_KEYWORDS[c]
        items[ext] = {
            "title": f"{a.capitalize()} volume {ext}",
            "category": f"{a} / {b}",
            "description": f"A {a} piece centred on {b}." + (f" Readers of {a} return to it." if rng.random() < 0.5 else ""),
        }
    return TextCatalog(items=items)


def plant_cross_cluster_noise(dataset: Dataset, user_cluster: np.ndarray, item_cluster: np.ndarray,
                              ratio: float, seed: int) -> Dataset:
    """Add floor(ratio * |train|) absent (user, item) pairs whose clusters differ."""
    n_new = int(math.floor(ratio * len(dataset.train)))
    rng = np.random.default_rng(seed)
    taken = set(dataset.codes(np.concatenate([dataset.train, dataset.val, dataset.test])).tolist())
    ni = dataset.num_items
    chosen: list[tuple[int, int]] = []
    while len(chosen) < n_new:
        u = int(rng.integers(dataset.num_users))
        i = int(rng.integers(ni))
        if user_cluster[u] != item_cluster[i] and u * ni + i not in taken:
            taken.add(u * ni + i)
            chosen.append((u, i))
    pairs = np.asarray(chosen, dtype=np.int64).reshape(-1, 2)
    ts = dict(dataset.timestamps)
    for u, i in chosen:
        ts[(u, i)] = int(rng.integers(0, 10_000))
    return dataset.replace(train=np.concatenate([dataset.train, pairs]), timestamps=ts,
                           noise_ledger=np.concatenate([dataset.noise_ledger, pairs]))


def make_planted_dataset(num_users: int = 200, num_items: int = 200, num_clusters: int = 5,
                         density: float = 0.35, noise_ratio: float = 0.2, seed: int = 0) -> PlantedData:
    if not 1 <= num_clusters <= len(CLUSTER_KEYWORDS):
        raise ValueError(f"num_clusters must be in [1, {len(CLUSTER_KEYWORDS)}]")
    rng = np.random.default_rng(seed)
    user_cluster = np.arange(num_users) % num_clusters
    item_cluster = np.arange(num_items) % num_clusters
    width = max(len(str(num_users)), len(str(num_items)))
    uid = [f"u{k:0{width}d}" for k in range(num_users)]
    iid = [f"i{k:0{width}d}" for k in range(num_items)]
    records = []
    for u in range(num_users):
        pool = np.flatnonzero(item_cluster == user_cluster[u])
        picks = pool[rng.random(len(pool)) < density]
        if len(picks) < 3:
            picks = rng.choice(pool, size=min(3, len(pool)), replace=False)
        for i in np.sort(picks):
            records.append(InteractionRecord(uid[u], iid[i], None, int(rng.integers(0, 10_000))))
    catalog = _catalog(iid, item_cluster, rng)
    clean = split_dataset(records, seed=seed, catalog=catalog)
    # ids are zero-padded, so sorted order equals construction order
    noisy = plant_cross_cluster_noise(clean, user_cluster, item_cluster, noise_ratio, seed + 1)
    vocab = [w for pair in CLUSTER_KEYWORDS[:num_clusters] for w in pair]
    return PlantedData(clean, noisy, user_cluster, item_cluster, MockRules(vocabulary=vocab), records)


def write_planted_raw(data: PlantedData, directory: str | Path) -> dict[str, Path]:
    """Write interactions (noisy train included), catalog and mock rules as raw files."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ds = data.noisy
    recs = []
    for split in (ds.train, ds.val, ds.test):
        for u, i in split:
            ts = ds.timestamps.get((int(u), int(i)))
            recs.append(InteractionRecord(ds.user_ids[u], ds.item_ids[i], None, ts))
    recs.sort(key=lambda r: (r.user_id, r.item_id))
    paths = {"interactions": d / "interactions.tsv", "catalog": d / "catalog.tsv", "rules": d / "mock_rules.json"}
    write_interactions(recs, paths["interactions"])
    write_catalog(ds.catalog, paths["catalog"])
    data.rules.save(paths["rules"])
    return paths
