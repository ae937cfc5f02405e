"""Training loop: sampling, masked forward passes, the combined loss, Adam,
early stopping, checkpoints and denoised-graph export."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import io
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data import Dataset, InteractionGraph, build_graph, sample_triples, ui_edges
from .model import (
    BackboneConfig,
    DenoiseModel,
    SparseAdj,
    edge_logits,
    forward_lightgcn,
    sample_mask,
    DELTA_EPS,
)
from .objective import (
    Ablation,
    KernelConfig,
    LossBreakdown,
    alignment_loss,
    loss_comp,
    loss_rec,
    loss_rel,
    median_bandwidth,
    total_loss,
)
from .preference import PreferenceKnowledge, ProjectionHead

CHECKPOINT_VERSION = 1
TERMS = ("l_rec", "l_prf", "l_rel", "l_comp")


class NumericError(RuntimeError):
    pass


class MissingKnowledgeError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.1
    beta: float = 0.01
    gumbel_tau: float = 0.2
    gumbel_tau_end: typing.Optional[float] = None
    contrastive_tau: float = 0.2
    lr: float = 1e-3
    batch_size: int = 1024
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    backbone: str = "lightgcn"
    layers: int = 3
    dim: int = 64
    mask_hidden: int = 64
    head_hidden: int = 0
    use_mask: bool = True
    no_mi_min: bool = False
    no_mi_max: bool = False
    no_pk: bool = False
    no_rk: bool = False
    bandwidth_mode: str = "median"
    sigma_k: float = 1.0
    sigma_m: float = 1.0
    include_positive: bool = False
    monitor: str = "recall@20"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 0:
            raise ValueError("batch_size and patience must be >= 1, max_epochs >= 0")
        if not 0 < self.contrastive_tau <= 1:
            raise ValueError("contrastive_tau must lie in (0, 1]")
        if self.gumbel_tau <= 0 or (self.gumbel_tau_end is not None and self.gumbel_tau_end <= 0):
            raise ValueError("gumbel temperatures must be positive")
        BackboneConfig(self.backbone, self.layers, self.dim)
        KernelConfig(self.bandwidth_mode, self.sigma_k, self.sigma_m)

    @property
    def ablation(self) -> Ablation:
        return Ablation(self.no_mi_min, self.no_mi_max, self.no_pk, self.no_rk)

    @property
    def kernel(self) -> KernelConfig:
        return KernelConfig(self.bandwidth_mode, self.sigma_k, self.sigma_m)

    @property
    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.backbone, self.layers, self.dim)

    def tau_at(self, epoch: int) -> float:
        """Gumbel temperature for a 0-based epoch, linearly annealed if an end value is set."""
        if self.gumbel_tau_end is None or self.max_epochs <= 1:
            return self.gumbel_tau
        frac = min(max(epoch / (self.max_epochs - 1), 0.0), 1.0)
        return self.gumbel_tau + frac * (self.gumbel_tau_end - self.gumbel_tau)

    def eval_tau(self, epochs_done: int) -> float:
        """Temperature of the last completed epoch (the initial one before training)."""
        return self.tau_at(max(epochs_done - 1, 0))

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if v is None else str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        return (base or cls()).replace(**parse_config_text(text))

    @classmethod
    def from_file(cls, path: str | Path, base: "TrainConfig | None" = None) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), base)


def coerce_value(name: str, raw: str, hint):
    raw = raw.strip()
    if typing.get_origin(hint) is typing.Union:
        if raw.lower() in ("none", ""):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    if hint is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    return hint(raw)


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` starts a comment) into typed overrides."""
    hints = typing.get_type_hints(TrainConfig)
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = coerce_value(key, value, hints[key])
    return out


# -- context -------------------------------------------------------------------------------


@dataclass(eq=False)
class TrainingContext:
    """Tensors shared by every step: graphs, edges and pooled text vectors."""

    num_users: int
    num_items: int
    train_edges: torch.Tensor  # (m, 2) unified node ids, sorted by (user, item)
    train_codes: np.ndarray
    plain_adj: SparseAdj
    rel_adj: SparseAdj | None
    pooled_users: torch.Tensor | None
    pooled_items: torch.Tensor | None

    @classmethod
    def build(cls, dataset: Dataset, config: TrainConfig, kp: PreferenceKnowledge | None = None,
              grel: InteractionGraph | None = None, dtype=torch.float32) -> "TrainingContext":
        ab = config.ablation
        if ab.use_prf and kp is None:
            raise MissingKnowledgeError("preference knowledge required unless no_pk or no_mi_max is set")
        if ab.use_rel and grel is None:
            raise MissingKnowledgeError("relation knowledge required unless no_rk or no_mi_max is set")
        edges = torch.as_tensor(ui_edges(dataset), dtype=torch.long)
        plain = SparseAdj.from_graph(build_graph(dataset), dtype)
        return cls(
            dataset.num_users, dataset.num_items, edges, dataset.train_codes, plain,
            SparseAdj.from_graph(grel, dtype) if grel is not None else None,
            torch.as_tensor(kp.pooled_users, dtype=dtype) if kp is not None else None,
            torch.as_tensor(kp.pooled_items, dtype=dtype) if kp is not None else None,
        )

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    def edge_index(self, users: torch.Tensor, items: torch.Tensor) -> torch.Tensor:
        codes = users.numpy() * self.num_items + items.numpy()
        return torch.as_tensor(np.searchsorted(self.train_codes, codes), dtype=torch.long)


def build_model(ctx: TrainingContext, config: TrainConfig, dtype=torch.float32) -> DenoiseModel:
    head = None
    if ctx.pooled_users is not None:
        head = ProjectionHead(ctx.pooled_users.shape[1], config.dim, config.head_hidden, seed=config.seed + 7)
    model = DenoiseModel(ctx.num_users, ctx.num_items, config.backbone_config, config.mask_hidden, head,
                         seed=config.seed)
    return model.to(dtype)


def draw_delta(n: int, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(n, generator=generator, dtype=dtype)
    return DELTA_EPS + (1 - 2 * DELTA_EPS) * u


def mask_weights(model: DenoiseModel, ctx: TrainingContext, config: TrainConfig, tau: float,
                 train_mode: bool, delta: torch.Tensor | None = None) -> torch.Tensor | None:
    if not config.use_mask:
        return None
    logits = edge_logits(model.mask, model.table, ctx.train_edges)
    return sample_mask(logits, tau, train_mode=train_mode, delta=delta)


def masked_representations(model: DenoiseModel, ctx: TrainingContext, config: TrainConfig,
                           q: torch.Tensor | None) -> torch.Tensor:
    if config.backbone == "gmf":
        return model.table
    adj = ctx.plain_adj if q is None else SparseAdj.weighted(ctx.num_nodes, ctx.train_edges, q)
    return forward_lightgcn(adj, model.table, config.layers)


def compute_losses(model: DenoiseModel, ctx: TrainingContext, triples: torch.Tensor, config: TrainConfig,
                   tau: float, delta: torch.Tensor | None = None,
                   bandwidths: dict | None = None) -> dict[str, torch.Tensor]:
    """All four loss terms and the total for one batch (training-mode mask)."""
    nu = ctx.num_users
    ab = config.ablation
    q = mask_weights(model, ctx, config, tau, True, delta)
    h_masked = masked_representations(model, ctx, config, q)
    weights = None
    if config.backbone == "gmf" and q is not None:
        weights = q[ctx.edge_index(triples[:, 0], triples[:, 1])]
    out = {"l_rec": loss_rec(h_masked, triples, nu, weights)}
    users = torch.unique(triples[:, 0])
    items = torch.unique(triples[:, 1:])
    zero = model.table.new_zeros(())
    out["l_prf"] = zero
    if ab.use_prf:
        pu = model.head(ctx.pooled_users[users])
        pi = model.head(ctx.pooled_items[items])
        out["l_prf"] = alignment_loss(h_masked, pu, pi, users, items, nu, config.contrastive_tau,
                                      config.include_positive)
    out["l_rel"] = zero
    if ab.use_rel:
        h_rel = forward_lightgcn(ctx.rel_adj, model.table, config.layers)
        out["l_rel"] = loss_rel(h_masked, h_rel, users, items, nu, config.contrastive_tau, config.include_positive)
    out["l_comp"] = zero
    if ab.use_comp:
        h_plain = forward_lightgcn(ctx.plain_adj, model.table, config.layers)
        out["l_comp"] = loss_comp(h_plain, h_masked, users, items, nu, config.kernel, bandwidths)
    out["total"] = total_loss(out["l_rec"], out["l_prf"], out["l_rel"], out["l_comp"],
                              config.alpha, config.beta, ab)
    return out


def median_bandwidths(model: DenoiseModel, ctx: TrainingContext, config: TrainConfig, triples: torch.Tensor,
                      tau: float, delta: torch.Tensor | None) -> dict[str, tuple[float, float]]:
    """Per-batch median-heuristic bandwidths, held constant for differentiation."""
    with torch.no_grad():
        q = mask_weights(model, ctx, config, tau, True, delta)
        hm = masked_representations(model, ctx, config, q)
        hp = forward_lightgcn(ctx.plain_adj, model.table, config.layers)
        users = torch.unique(triples[:, 0])
        items = ctx.num_users + torch.unique(triples[:, 1:])
        return {
            "users": (median_bandwidth(hp[users]), median_bandwidth(hm[users])),
            "items": (median_bandwidth(hp[items]), median_bandwidth(hm[items])),
        }


# -- state, steps, epochs --------------------------------------------------------------------


@dataclass(eq=False)
class TrainState:
    model: DenoiseModel
    optimizer: torch.optim.Adam
    config: TrainConfig
    rng: np.random.Generator
    generator: torch.Generator
    epoch: int = 0
    step: int = 0
    best_metric: float = float("-inf")


def init_state(ctx: TrainingContext, config: TrainConfig) -> TrainState:
    model = build_model(ctx, config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    return TrainState(model, opt, config, np.random.default_rng(config.seed),
                      torch.Generator().manual_seed(config.seed + 1))


class MetricsLog:
    """Tab-separated per-step telemetry."""

    HEADER = "step\tl_rec\tl_prf\tl_rel\tl_comp\ttotal\tgrad_table\tgrad_mask\tgrad_head\n"

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.rows: list[list[float]] = []
        if self.path is not None:
            self.path.write_text(self.HEADER)

    def append(self, step: int, values: list[float]) -> None:
        self.rows.append([step] + values)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write("\t".join([str(step)] + [repr(float(v)) for v in values]) + "\n")


def _grad_norm(params) -> float:
    sq = [float((p.grad.double() ** 2).sum()) for p in params if p.grad is not None]
    return math.sqrt(sum(sq)) if sq else 0.0


def diagnose_gradients(model, ctx, triples, config, tau, delta, bandwidths) -> list[str]:
    """Names of loss terms whose gradient is non-finite."""
    bad = []
    params = [p for p in model.parameters()]
    for name in TERMS:
        model.zero_grad()
        losses = compute_losses(model, ctx, triples, config, tau, delta, bandwidths)
        if not losses[name].requires_grad:
            continue
        grads = torch.autograd.grad(losses[name], params, allow_unused=True)
        if any(g is not None and not torch.isfinite(g).all() for g in grads):
            bad.append(name)
    return bad


def train_step(state: TrainState, ctx: TrainingContext, dataset: Dataset,
               log: MetricsLog | None = None) -> LossBreakdown:
    cfg = state.config
    model = state.model
    batch = sample_triples(dataset, cfg.batch_size, state.rng)
    triples = torch.as_tensor(batch.triples, dtype=torch.long)
    tau = cfg.tau_at(state.epoch)
    delta = draw_delta(len(ctx.train_edges), state.generator) if cfg.use_mask else None
    bw = None
    if cfg.ablation.use_comp and cfg.bandwidth_mode == "median":
        bw = median_bandwidths(model, ctx, cfg, triples, tau, delta)
    model.train()
    losses = compute_losses(model, ctx, triples, cfg, tau, delta, bw)
    values = {k: float(v.detach()) for k, v in losses.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise NumericError(f"non-finite loss at epoch {state.epoch} step {state.step}: {values}")
    state.optimizer.zero_grad()
    losses["total"].backward()
    if not all(torch.isfinite(p.grad).all() for p in model.parameters() if p.grad is not None):
        bad = diagnose_gradients(model, ctx, triples, cfg, tau, delta, bw)
        raise NumericError(f"non-finite gradient at step {state.step} from {bad or 'combined loss'}")
    norms = [_grad_norm([model.table]), _grad_norm(model.mask.parameters()),
             _grad_norm(model.head.parameters()) if model.head is not None else 0.0]
    state.optimizer.step()
    out = LossBreakdown(values["l_rec"], values["l_prf"], values["l_rel"], values["l_comp"], values["total"])
    if log is not None:
        log.append(state.step, out.as_row() + norms)
    state.step += 1
    return out


def train_epoch(state: TrainState, ctx: TrainingContext, dataset: Dataset,
                log: MetricsLog | None = None) -> LossBreakdown:
    """ceil(|train| / batch) steps; returns the mean of each loss component."""
    steps = max(1, math.ceil(len(dataset.train) / state.config.batch_size))
    rows = [train_step(state, ctx, dataset, log).as_row() for _ in range(steps)]
    state.epoch += 1
    return LossBreakdown(*np.mean(np.asarray(rows), axis=0).tolist())


# -- inference -------------------------------------------------------------------------------


def eval_q(model: DenoiseModel, ctx: TrainingContext, config: TrainConfig, tau: float) -> torch.Tensor | None:
    with torch.no_grad():
        return mask_weights(model, ctx, config, tau, train_mode=False)


def representations(model: DenoiseModel, ctx: TrainingContext, config: TrainConfig, tau: float) -> torch.Tensor:
    """Deterministic eval-mode representations on the denoised graph."""
    with torch.no_grad():
        return masked_representations(model, ctx, config, eval_q(model, ctx, config, tau))


def make_scorer(model: DenoiseModel, ctx: TrainingContext, config: TrainConfig, tau: float) -> Callable:
    h = representations(model, ctx, config, tau)
    hu, hi = h[:ctx.num_users], h[ctx.num_users:]

    def score(users) -> np.ndarray:
        idx = torch.as_tensor(np.asarray(users), dtype=torch.long)
        return (hu[idx] @ hi.T).double().numpy()

    return score


def export_denoised_graph(model: DenoiseModel, ctx: TrainingContext, config: TrainConfig, tau: float,
                          path: str | Path | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode q per train edge and the retained pairs (q >= 0.5).

    File layout: ``# soft`` section of ``u \\t i \\t q`` lines, then a
    ``# hard`` section of ``u \\t i`` lines (user and item indices).
    """
    q = eval_q(model, ctx, config, tau)
    q = np.ones(len(ctx.train_edges), dtype=np.float32) if q is None else q.numpy().astype(np.float32)
    pairs = ctx.train_edges.numpy().copy()
    pairs[:, 1] -= ctx.num_users
    hard = pairs[q >= 0.5]
    if path is not None:
        buf = io.StringIO()
        buf.write("# soft\n")
        for (u, i), w in zip(pairs, q):
            buf.write(f"{u}\t{i}\t{float(w)!r}\n")
        buf.write("# hard\n")
        for u, i in hard:
            buf.write(f"{u}\t{i}\n")
        Path(path).write_text(buf.getvalue())
    return q, hard


def read_denoised_graph(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    soft, hard, section = [], [], None
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            section = line[1:].strip()
            continue
        parts = line.split("\t")
        if section == "soft":
            soft.append((int(parts[0]), int(parts[1]), float(parts[2])))
        else:
            hard.append((int(parts[0]), int(parts[1])))
    s = np.asarray(soft, dtype=np.float64).reshape(-1, 3)
    return s[:, :2].astype(np.int64), s[:, 2], np.asarray(hard, dtype=np.int64).reshape(-1, 2)


# -- checkpoints -------------------------------------------------------------------------------


@dataclass(eq=False)
class Checkpoint:
    config: TrainConfig
    num_users: int
    num_items: int
    text_dim: int | None
    epoch: int
    best_metric: float
    tensors: dict[str, np.ndarray]  # model parameters, float32
    moments: dict[str, np.ndarray] = field(default_factory=dict)  # "<param>.exp_avg" etc.
    adam_step: int = 0

    @classmethod
    def capture(cls, state: TrainState, ctx: TrainingContext) -> "Checkpoint":
        names = [n for n, _ in state.model.named_parameters()]
        tensors = {n: p.detach().cpu().numpy().astype(np.float32).copy() for n, p in state.model.named_parameters()}
        moments, step = {}, 0
        params = dict(state.model.named_parameters())
        for n in names:
            st = state.optimizer.state.get(params[n], {})
            if st:
                moments[f"{n}.exp_avg"] = st["exp_avg"].detach().numpy().astype(np.float32).copy()
                moments[f"{n}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy().astype(np.float32).copy()
                step = max(step, int(st["step"]))
        text_dim = ctx.pooled_users.shape[1] if ctx.pooled_users is not None else None
        return cls(copy.deepcopy(state.config), ctx.num_users, ctx.num_items, text_dim, state.epoch,
                   state.best_metric, tensors, moments, step)

    def save(self, path: str | Path) -> None:
        sections = [(n, list(a.shape)) for n, a in self.tensors.items()]
        sections += [(n, list(a.shape)) for n, a in self.moments.items()]
        cfg = self.config
        best = self.best_metric if math.isfinite(self.best_metric) else None
        header = {
            "format": "llard-checkpoint", "version": CHECKPOINT_VERSION,
            "backbone": cfg.backbone, "d": cfg.dim, "L": cfg.layers,
            "num_users": self.num_users, "num_items": self.num_items, "text_dim": self.text_dim,
            "epoch": self.epoch, "best_metric": best, "adam_step": self.adam_step,
            "config_hash": cfg.hash(), "config": cfg.to_text(), "sections": sections,
        }
        with open(path, "wb") as fh:
            fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
            for arr in list(self.tensors.values()) + list(self.moments.values()):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        nl = raw.index(b"\n")
        h = json.loads(raw[:nl])
        if h.get("format") != "llard-checkpoint" or h.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a checkpoint")
        pos = nl + 1
        arrays = {}
        for name, shape in h["sections"]:
            n = int(np.prod(shape)) * 4
            arrays[name] = np.frombuffer(raw[pos:pos + n], dtype="<f4").reshape(shape).copy()
            pos += n
        moments = {k: v for k, v in arrays.items() if k.endswith((".exp_avg", ".exp_avg_sq"))}
        tensors = {k: v for k, v in arrays.items() if k not in moments}
        best = h["best_metric"] if h["best_metric"] is not None else float("-inf")
        return cls(TrainConfig.from_text(h["config"]), h["num_users"], h["num_items"], h["text_dim"],
                   h["epoch"], best, tensors, moments, h["adam_step"])

    def restore(self, ctx: TrainingContext) -> TrainState:
        state = init_state(ctx, self.config)
        params = dict(state.model.named_parameters())
        with torch.no_grad():
            for name, arr in self.tensors.items():
                # a context without text knowledge builds no projection head
                if name in params:
                    params[name].copy_(torch.from_numpy(arr))
        for name, p in params.items():
            if f"{name}.exp_avg" in self.moments:
                state.optimizer.state[p] = {
                    "step": torch.tensor(float(self.adam_step)),
                    "exp_avg": torch.from_numpy(self.moments[f"{name}.exp_avg"].copy()),
                    "exp_avg_sq": torch.from_numpy(self.moments[f"{name}.exp_avg_sq"].copy()),
                }
        state.epoch, state.best_metric = self.epoch, self.best_metric
        return state


# -- fit ------------------------------------------------------------------------------------------


@dataclass
class FitResult:
    checkpoint: Checkpoint
    best_epoch: int
    history: list[dict]
    epochs_run: int


def default_validator(dataset: Dataset, ctx: TrainingContext, metric: str = "recall@20"):
    from .evaluation import evaluate

    name, n = metric.split("@")

    def validate(state: TrainState) -> float:
        score = make_scorer(state.model, ctx, state.config, state.config.eval_tau(state.epoch))
        report = evaluate(score, dataset, "val", ns=(int(n),))
        return report.mean(name, int(n))

    return validate


def fit(dataset: Dataset, config: TrainConfig, kp: PreferenceKnowledge | None = None,
        grel: InteractionGraph | None = None, validate: Callable[[TrainState], float] | None = None,
        metrics_path: str | Path | None = None, ctx: TrainingContext | None = None) -> FitResult:
    """Train with early stopping on the validation metric; return the best checkpoint.

    ``validate`` defaults to validation Recall@20 (``config.monitor``). With
    ``max_epochs == 0`` the initial state is evaluated and returned.
    """
    ctx = ctx or TrainingContext.build(dataset, config, kp, grel)
    state = init_state(ctx, config)
    validate = validate or default_validator(dataset, ctx, config.monitor)
    log = MetricsLog(metrics_path)
    history: list[dict] = []
    if config.max_epochs == 0:
        state.best_metric = validate(state)
        history.append({"epoch": 0, "val": state.best_metric})
        return FitResult(Checkpoint.capture(state, ctx), 0, history, 0)

    best: Checkpoint | None = None
    best_epoch, stale = 0, 0
    for _ in range(config.max_epochs):
        losses = train_epoch(state, ctx, dataset, log)
        metric = validate(state)
        history.append({"epoch": state.epoch, "val": metric, **dataclasses.asdict(losses)})
        if best is None or metric > state.best_metric:
            state.best_metric = metric
            best_epoch, stale = state.epoch, 0
            best = Checkpoint.capture(state, ctx)
        else:
            stale += 1
            if stale >= config.patience:
                break
    return FitResult(best, best_epoch, history, state.epoch)
