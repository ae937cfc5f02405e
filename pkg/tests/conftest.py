import numpy as np
import pytest
import torch

from llard.data import Dataset, TextCatalog


def make_dataset(num_users, num_items, train, val=(), test=(), catalog=None, timestamps=None):
    return Dataset(
        tuple(f"u{k}" for k in range(num_users)),
        tuple(f"i{k}" for k in range(num_items)),
        np.asarray(train, dtype=np.int64).reshape(-1, 2),
        np.asarray(val, dtype=np.int64).reshape(-1, 2),
        np.asarray(test, dtype=np.int64).reshape(-1, 2),
        timestamps=timestamps or {},
        catalog=catalog,
    )


def random_dataset(rng, num_users, num_items, density=0.3, min_train=1):
    """Random disjoint splits; every user gets at least ``min_train`` train items."""
    train, val, test = [], [], []
    for u in range(num_users):
        items = rng.permutation(num_items)
        n = max(min_train + 2, int(rng.binomial(num_items, density)))
        n = min(n, num_items)
        chosen = items[:n]
        n_val = int(rng.integers(0, max(1, n // 4) + 1))
        n_test = int(rng.integers(1, max(1, n // 4) + 1)) if n - n_val - min_train >= 1 else 0
        val += [(u, i) for i in chosen[:n_val]]
        test += [(u, i) for i in chosen[n_val:n_val + n_test]]
        train += [(u, i) for i in chosen[n_val + n_test:]]
    return make_dataset(num_users, num_items, train, val, test)


def toy_catalog(num_users, num_items, keywords):
    """Catalog whose item i mentions keywords[i % len(keywords)]."""
    items = {}
    for i in range(num_items):
        kw = keywords[i % len(keywords)]
        items[f"i{i}"] = {"title": f"{kw} title {i}", "category": kw, "description": f"all about {kw}"}
    return TextCatalog(items=items)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
