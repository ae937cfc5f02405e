"""End-to-end helpers: knowledge generation, training and evaluation in one call."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .data import Dataset, InteractionGraph
from .evaluation import MetricReport, evaluate
from .llm.gateway import LLMGateway, ResponseCache
from .llm.mock import MockProvider, MockRules
from .preference import PreferenceKnowledge, generate_preference_knowledge
from .relation import RelationKnowledge, build_enriched_graph, generate_relation_knowledge
from .trainer import FitResult, TrainConfig, TrainingContext, make_scorer


def mock_gateway(rules: MockRules | None = None, cache_path: str | Path | None = None,
                 max_parallel: int = 4) -> LLMGateway:
    return LLMGateway(MockProvider(rules), ResponseCache(cache_path), max_parallel)


def generate_knowledge(gateway: LLMGateway, dataset: Dataset, config: TrainConfig,
                       relations: bool = True) -> tuple[PreferenceKnowledge, RelationKnowledge | None]:
    kp = generate_preference_knowledge(gateway, dataset, dim=config.dim, head_hidden=config.head_hidden,
                                       seed=config.seed)
    kr = generate_relation_knowledge(gateway, dataset, kp) if relations else None
    return kp, kr


@dataclass(eq=False)
class RunResult:
    fit: FitResult
    context: TrainingContext
    report: MetricReport

    @property
    def state(self):
        return self.fit.checkpoint.restore(self.context)


def train_and_evaluate(dataset: Dataset, config: TrainConfig, kp: PreferenceKnowledge | None = None,
                       kr: RelationKnowledge | None = None, split: str = "test",
                       metrics_path: str | Path | None = None) -> RunResult:
    """Fit with early stopping, then evaluate the best checkpoint on ``split``."""
    from .trainer import fit

    ab = config.ablation
    grel: InteractionGraph | None = build_enriched_graph(dataset, kr) if (kr is not None and ab.use_rel) else None
    ctx = TrainingContext.build(dataset, config, kp, grel)
    result = fit(dataset, config, ctx=ctx, metrics_path=metrics_path)
    state = result.checkpoint.restore(ctx)
    scorer = make_scorer(state.model, ctx, config, config.eval_tau(state.epoch))
    report = evaluate(scorer, dataset, split, metadata={"seed": config.seed, "config": config.hash()})
    return RunResult(result, ctx, report)
