import math

import numpy as np
import pytest
import torch

from llard.data import sample_triples
from llard.pipeline import generate_knowledge, mock_gateway
from llard.relation import build_enriched_graph
from llard.synthetic import make_planted_dataset
from llard.trainer import (
    Checkpoint,
    MissingKnowledgeError,
    NumericError,
    TrainConfig,
    TrainingContext,
    compute_losses,
    export_denoised_graph,
    fit,
    init_state,
    parse_config_text,
    read_denoised_graph,
    representations,
    train_epoch,
    train_step,
)

from conftest import random_dataset

PLAIN = dict(no_pk=True, no_rk=True)


@pytest.fixture(scope="module")
def world():
    data = make_planted_dataset(num_users=30, num_items=30, num_clusters=3, density=0.4, noise_ratio=0.2, seed=0)
    cfg = TrainConfig(dim=8, mask_hidden=8, layers=2, batch_size=64, max_epochs=3, patience=2, lr=5e-3)
    kp, kr = generate_knowledge(mock_gateway(data.rules), data.noisy, cfg)
    return data.noisy, cfg, kp, kr


def full_context(world, cfg=None):
    ds, base, kp, kr = world
    cfg = cfg or base
    return TrainingContext.build(ds, cfg, kp, build_enriched_graph(ds, kr))


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.dim, c.layers, c.batch_size, c.lr, c.contrastive_tau, c.alpha, c.beta, c.patience,
                c.max_epochs) == (64, 3, 1024, 1e-3, 0.2, 0.1, 0.01, 10, 200)

    @pytest.mark.parametrize("bad", [dict(lr=0), dict(batch_size=0), dict(patience=0), dict(contrastive_tau=1.5),
                                     dict(gumbel_tau=0), dict(backbone="mlp"), dict(bandwidth_mode="x")])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_text_round_trip(self):
        c = TrainConfig(alpha=0.5, no_pk=True, gumbel_tau_end=0.05, backbone="gmf")
        assert TrainConfig.from_text(c.to_text()) == c

    def test_parse_comments_and_types(self):
        out = parse_config_text("# header\nalpha = 0.3  # inline\n\nno_rk = yes\nlayers=2\ngumbel_tau_end = none\n")
        assert out == {"alpha": 0.3, "no_rk": True, "layers": 2, "gumbel_tau_end": None}

    @pytest.mark.parametrize("text", ["bogus = 1", "alpha", "no_pk = maybe"])
    def test_parse_errors(self, text):
        with pytest.raises(ValueError):
            parse_config_text(text)

    def test_hash(self):
        assert TrainConfig().hash() == TrainConfig().hash()
        assert TrainConfig().hash() != TrainConfig(beta=0.02).hash()
        assert len(TrainConfig().hash()) == 16

    def test_temperature_anneal(self):
        c = TrainConfig(gumbel_tau=1.0, gumbel_tau_end=0.1, max_epochs=10)
        assert c.tau_at(0) == 1.0 and c.tau_at(9) == pytest.approx(0.1) and c.tau_at(50) == pytest.approx(0.1)
        assert c.eval_tau(0) == 1.0 and c.eval_tau(10) == pytest.approx(0.1)
        assert TrainConfig(gumbel_tau=0.3).tau_at(7) == 0.3


def scripted_fit(ds, values, **cfg):
    config = TrainConfig(dim=4, mask_hidden=4, layers=1, batch_size=256, **PLAIN, **cfg)
    seen = []

    def validate(state):
        seen.append(state.epoch)
        return values[state.epoch - 1] if state.epoch else -1.0

    return fit(ds, config, validate=validate), seen


class TestEarlyStopping:
    def test_worsening_with_patience_one(self, rng):
        res, _ = scripted_fit(random_dataset(rng, 10, 12), [0.5, 0.4, 0.3, 0.2], patience=1, max_epochs=10)
        assert res.epochs_run == 2 and res.best_epoch == 1 and res.checkpoint.epoch == 1

    def test_improvement_at_seven(self, rng):
        values = [0.1, 0.2, 0.3, 0.3, 0.3, 0.35, 0.4, 0.39, 0.38, 0.37]
        res, seen = scripted_fit(random_dataset(rng, 10, 12), values, patience=3, max_epochs=10)
        assert res.epochs_run == 10 and res.best_epoch == 7
        assert res.checkpoint.best_metric == 0.4 and seen == list(range(1, 11))

    def test_zero_epochs_returns_initial_state(self, rng):
        ds = random_dataset(rng, 10, 12)
        res, seen = scripted_fit(ds, [], max_epochs=0)
        assert res.epochs_run == 0 and seen == [0] and res.checkpoint.best_metric == -1.0
        config = res.checkpoint.config
        fresh = init_state(TrainingContext.build(ds, config), config)
        assert np.array_equal(res.checkpoint.tensors["table"], fresh.model.table.detach().numpy())

    def test_first_epoch_is_incumbent_even_if_zero(self, rng):
        res, _ = scripted_fit(random_dataset(rng, 10, 12), [0.0, 0.0, 0.0], patience=2, max_epochs=5)
        assert res.best_epoch == 1 and res.epochs_run == 3


class TestCheckpoint:
    def test_round_trip_bit_exact(self, world, tmp_path):
        ds, cfg, kp, kr = world
        ctx = full_context(world)
        state = init_state(ctx, cfg)
        train_epoch(state, ctx, ds)
        Checkpoint.capture(state, ctx).save(tmp_path / "a.ckpt")
        loaded = Checkpoint.load(tmp_path / "a.ckpt")
        restored = loaded.restore(ctx)
        tau = cfg.eval_tau(state.epoch)
        assert torch.equal(representations(state.model, ctx, cfg, tau), representations(restored.model, ctx, cfg, tau))
        for (n, p), (_, r) in zip(state.model.named_parameters(), restored.model.named_parameters()):
            assert torch.equal(p, r), n
        loaded.save(tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert loaded.adam_step == state.step and loaded.epoch == 1 and loaded.config == cfg

    def test_resumed_training_matches(self, world):
        ds, cfg, kp, kr = world
        ctx = full_context(world)
        state = init_state(ctx, cfg)
        train_epoch(state, ctx, ds)
        resumed = Checkpoint.capture(state, ctx).restore(ctx)
        resumed.step = state.step
        resumed.rng.bit_generator.state = state.rng.bit_generator.state
        resumed.generator.set_state(state.generator.get_state())
        assert train_step(state, ctx, ds).as_row() == train_step(resumed, ctx, ds).as_row()

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x").write_bytes(b'{"format": "other"}\n')
        with pytest.raises(ValueError):
            Checkpoint.load(tmp_path / "x")


class TestExport:
    def test_zero_mask_network_gives_half(self, world, tmp_path):
        ds, cfg, _, _ = world
        ctx = full_context(world)
        state = init_state(ctx, cfg)
        with torch.no_grad():
            for p in state.model.mask.parameters():
                p.zero_()
        q, hard = export_denoised_graph(state.model, ctx, cfg, cfg.gumbel_tau, tmp_path / "g.tsv")
        assert np.all(q == 0.5) and len(hard) == len(ds.train)
        pairs, soft, hard_back = read_denoised_graph(tmp_path / "g.tsv")
        assert np.array_equal(pairs, ds.train) and np.all(soft == 0.5) and np.array_equal(hard_back, ds.train)

    def test_reexport_identical(self, world, tmp_path):
        ds, cfg, _, _ = world
        ctx = full_context(world)
        state = init_state(ctx, cfg)
        train_epoch(state, ctx, ds)
        export_denoised_graph(state.model, ctx, cfg, 0.2, tmp_path / "a")
        export_denoised_graph(state.model, ctx, cfg, 0.2, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_hard_set_is_threshold(self, world):
        ds, cfg, _, _ = world
        ctx = full_context(world)
        state = init_state(ctx, cfg)
        train_epoch(state, ctx, ds)
        q, hard = export_denoised_graph(state.model, ctx, cfg, 0.2)
        assert np.array_equal(hard, ds.train[q >= 0.5])

    def test_unmasked_model_keeps_everything(self, rng):
        ds = random_dataset(rng, 5, 6)
        cfg = TrainConfig(dim=4, use_mask=False, **PLAIN)
        ctx = TrainingContext.build(ds, cfg)
        q, hard = export_denoised_graph(init_state(ctx, cfg).model, ctx, cfg, 0.2)
        assert np.all(q == 1.0) and len(hard) == len(ds.train)


class TestDeterminism:
    def test_same_seed_same_metrics_file(self, world, tmp_path):
        ds, cfg, kp, kr = world
        grel = build_enriched_graph(ds, kr)
        for name in ("a", "b"):
            fit(ds, cfg.replace(max_epochs=2), kp, grel, metrics_path=tmp_path / f"{name}.tsv")
        assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()

    def test_different_seed_differs(self, world):
        ds, cfg, kp, kr = world
        ctx = full_context(world)
        a = train_step(init_state(ctx, cfg), ctx, ds)
        b = train_step(init_state(ctx, cfg.replace(seed=1)), ctx, ds)
        assert a.as_row() != b.as_row()


def reference_mf_bpr(table, dataset, batch_size, steps, seed, lr):
    """From-scratch float64 MF-BPR with hand-written gradients and Adam."""
    e = table.astype(np.float64).copy()
    nu = dataset.num_users
    m, v = np.zeros_like(e), np.zeros_like(e)
    rng = np.random.default_rng(seed)
    losses = []
    for t in range(1, steps + 1):
        trip = sample_triples(dataset, batch_size, rng).triples
        u, i, j = trip[:, 0], nu + trip[:, 1], nu + trip[:, 2]
        x = np.einsum("bd,bd->b", e[u], e[i] - e[j])
        losses.append(float(np.mean(np.logaddexp(0.0, -x))))
        coef = -1.0 / (1.0 + np.exp(x)) / len(x)
        g = np.zeros_like(e)
        np.add.at(g, u, coef[:, None] * (e[i] - e[j]))
        np.add.at(g, i, coef[:, None] * e[u])
        np.add.at(g, j, -coef[:, None] * e[u])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        e -= lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    return losses


class TestMatrixFactorizationReduction:
    def config(self):
        return TrainConfig(alpha=0.0, beta=0.0, backbone="gmf", layers=0, use_mask=False, dim=8,
                           batch_size=128, lr=1e-2, seed=4, **PLAIN)

    def test_matches_reference_losses(self, world):
        ds = world[0]
        cfg = self.config()
        ctx = TrainingContext.build(ds, cfg)
        state = init_state(ctx, cfg)
        table0 = state.model.table.detach().numpy().copy()
        ours = [train_step(state, ctx, ds).l_rec for _ in range(40)]
        ref = reference_mf_bpr(table0, ds, cfg.batch_size, 40, cfg.seed, cfg.lr)
        assert np.allclose(ours, ref, rtol=1e-4, atol=1e-6)

    def test_total_equals_rec(self, world):
        ds = world[0]
        cfg = self.config()
        ctx = TrainingContext.build(ds, cfg)
        row = train_step(init_state(ctx, cfg), ctx, ds)
        assert row.total == row.l_rec

    def test_epoch_loss_decreases(self):
        ds = make_planted_dataset(noise_ratio=0.0, seed=0).clean
        cfg = self.config().replace(batch_size=256)
        ctx = TrainingContext.build(ds, cfg)
        state = init_state(ctx, cfg)
        means = [train_epoch(state, ctx, ds).l_rec for _ in range(5)]
        assert all(b < a for a, b in zip(means, means[1:]))


class TestLosses:
    def test_gmf_weights_bpr_by_edge_q(self, world):
        ds, cfg, _, _ = world
        cfg = cfg.replace(backbone="gmf", **PLAIN)
        ctx = TrainingContext.build(ds, cfg)
        model = init_state(ctx, cfg).model
        triples = torch.as_tensor(sample_triples(ds, 32, 0).triples)
        delta = torch.full((len(ds.train),), 0.3)
        out = compute_losses(model, ctx, triples, cfg, 0.5, delta)
        with torch.no_grad():
            from llard.model import edge_logits, sample_mask

            q = sample_mask(edge_logits(model.mask, model.table, ctx.train_edges), 0.5, delta=delta)
            t = model.table
            nu = ds.num_users
            expect = 0.0
            for u, i, j in triples.tolist():
                k = int(np.searchsorted(ds.train_codes, u * ds.num_items + i))
                x = float(t[u] @ t[nu + i] - t[u] @ t[nu + j])
                expect += float(q[k]) * math.log1p(math.exp(-x))
        assert out["l_rec"].item() == pytest.approx(expect / len(triples), rel=1e-5)

    def test_missing_knowledge(self, world):
        ds, cfg, _, _ = world
        with pytest.raises(MissingKnowledgeError):
            TrainingContext.build(ds, cfg)
        with pytest.raises(MissingKnowledgeError):
            TrainingContext.build(ds, cfg.replace(no_pk=True))

    def test_head_gradient_only_from_preference_term(self, world):
        ds, cfg, kp, kr = world
        ctx = full_context(world)
        state = init_state(ctx, cfg.replace(no_pk=True))
        log_rows = []

        class Log:
            def append(self, step, values):
                log_rows.append(values)

        train_step(state, ctx, ds, Log())
        assert log_rows[0][1] == 0.0 and log_rows[0][-1] == 0.0
        state = init_state(ctx, cfg)
        train_step(state, ctx, ds, Log())
        assert log_rows[1][-1] > 0

    def test_non_finite_loss_raises(self, world):
        ds, cfg, _, _ = world
        cfg = cfg.replace(**PLAIN)
        ctx = TrainingContext.build(ds, cfg)
        state = init_state(ctx, cfg)
        with torch.no_grad():
            state.model.table[0, 0] = float("nan")
        with pytest.raises(NumericError):
            train_step(state, ctx, ds)

    def test_metrics_log_layout(self, world, tmp_path):
        ds, cfg, kp, kr = world
        fit(ds, cfg.replace(max_epochs=1), kp, build_enriched_graph(ds, kr), metrics_path=tmp_path / "m.tsv")
        lines = (tmp_path / "m.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["step", "l_rec", "l_prf", "l_rel", "l_comp", "total",
                                        "grad_table", "grad_mask", "grad_head"]
        steps = math.ceil(len(ds.train) / cfg.batch_size)
        assert len(lines) == 1 + steps
        for line in lines[1:]:
            vals = [float(x) for x in line.split("\t")]
            l_rec, l_prf, l_rel, l_comp, total = vals[1:6]
            assert abs(total - (l_rec + cfg.alpha * (l_prf + l_rel) + cfg.beta * l_comp)) < 1e-5
