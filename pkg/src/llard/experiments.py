"""Planted-noise experiments on the clustered synthetic data."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data import Dataset
from .evaluation import DEFAULT_RATIOS, SweepRow, robustness_sweep
from .llm.gateway import LLMGateway
from .pipeline import RunResult, generate_knowledge, mock_gateway, train_and_evaluate
from .synthetic import PlantedData, make_planted_dataset
from .trainer import TrainConfig, export_denoised_graph

# Settings of the planted-noise study; defaults elsewhere are left untouched.
PLANTED_CONFIG = TrainConfig(batch_size=256, lr=5e-3, alpha=0.03, gumbel_tau=0.5, max_epochs=100, patience=20)
PLANTED_DENSITY = 0.15


def baseline_config(config: TrainConfig) -> TrainConfig:
    """Plain backbone: every knowledge and compression term off, no mask."""
    return config.replace(no_mi_min=True, no_mi_max=True, no_pk=True, no_rk=True, use_mask=False)


def separation_auc(clean: np.ndarray, noisy: np.ndarray) -> float:
    """P(q_clean > q_noisy) with ties counted half (Mann-Whitney statistic)."""
    clean, noisy = np.asarray(clean, dtype=np.float64), np.asarray(noisy, dtype=np.float64)
    ranks = rankdata(np.concatenate([clean, noisy]))
    u = ranks[:len(clean)].sum() - len(clean) * (len(clean) + 1) / 2
    return float(u / (len(clean) * len(noisy)))


def noise_membership(dataset: Dataset) -> np.ndarray:
    """Boolean per train edge (sorted order): True when the edge is in the noise ledger."""
    return np.isin(dataset.train_codes, dataset.codes(dataset.noise_ledger))


@dataclass
class PlantedOutcome:
    seed: int
    full_recall: float
    baseline_recall: float
    mean_q_noise: float
    mean_q_clean: float
    auc: float
    seconds: float


def exported_q(run: RunResult, config: TrainConfig) -> np.ndarray:
    state = run.state
    q, _ = export_denoised_graph(state.model, run.context, config, config.eval_tau(state.epoch))
    return q


def run_planted(seed: int, config: TrainConfig = PLANTED_CONFIG, density: float = PLANTED_DENSITY,
                noise_ratio: float = 0.2, gateway: LLMGateway | None = None) -> PlantedOutcome:
    start = time.perf_counter()
    data: PlantedData = make_planted_dataset(density=density, noise_ratio=noise_ratio, seed=seed)
    ds = data.noisy
    cfg = config.replace(seed=seed)
    kp, kr = generate_knowledge(gateway or mock_gateway(data.rules), ds, cfg)
    full = train_and_evaluate(ds, cfg, kp, kr)
    base = train_and_evaluate(ds, baseline_config(cfg))
    q = exported_q(full, cfg)
    is_noise = noise_membership(ds)
    return PlantedOutcome(
        seed, full.report.mean("recall", 20), base.report.mean("recall", 20),
        float(q[is_noise].mean()), float(q[~is_noise].mean()),
        separation_auc(q[~is_noise], q[is_noise]), time.perf_counter() - start,
    )


def planted_robustness(seed: int, config: TrainConfig, density: float = PLANTED_DENSITY,
                       ratios=DEFAULT_RATIOS) -> list[SweepRow]:
    """Drop-rate sweep on the clean planted data with uniform noise injection.

    Knowledge is regenerated for every noisy copy, since profiles and
    relations depend on the train edges.
    """
    data = make_planted_dataset(density=density, noise_ratio=0.0, seed=seed)
    cfg = config.replace(seed=seed)
    ab = cfg.ablation
    gateway = mock_gateway(data.rules)

    def run(ds: Dataset):
        kp = kr = None
        if ab.use_prf or ab.use_rel:
            kp, kr = generate_knowledge(gateway, ds, cfg, relations=ab.use_rel)
        return train_and_evaluate(ds, cfg, kp, kr).report

    return robustness_sweep(data.clean, run, ratios, seed=seed)
