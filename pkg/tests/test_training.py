import math

import numpy as np
import pytest
import torch

from cyctop.errors import ValidationError
from cyctop.graph import ConnectivityMatrix, betti1, make_graph
from cyctop.model import CycGATConfig
from cyctop.pipeline import collate, prepare_sample
from cyctop.synth import SynthSpec, generate
from cyctop.training import (
    AdamState,
    TrainConfig,
    adam_step,
    backbone_graph,
    evaluate,
    evaluate_saliency,
    retained_count,
    grid_search,
    loss,
    stratified_split,
    train,
)

from conftest import ladder, random_graph


def tiny_model(**kw):
    base = dict(n_nodes=8, n_layers=1, n_filters=2, n_heads=1, epec_k=2, mlp_hidden=[4])
    base.update(kw)
    return CycGATConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    ds = generate(SynthSpec(n_nodes=8, n_samples=40, density=0.4, seed=3))
    return ds.pairs()


class TestLoss:
    def test_log2(self):
        assert float(loss(0.0, 1, np.zeros(3), 0.0)) == pytest.approx(math.log(2), abs=1e-15)

    def test_penalty(self):
        with_pen = float(loss(0.0, 1, np.full(10, 0.5), 0.1))
        assert with_pen - math.log(2) == pytest.approx(0.5, abs=1e-12)

    def test_lambda_zero_ignores_saliency(self, rng):
        for _ in range(10):
            logit, y = rng.normal() * 3, int(rng.integers(2))
            a = float(loss(logit, y, rng.uniform(size=7), 0.0))
            b = float(loss(logit, y, np.zeros(7), 0.0))
            assert a == b

    def test_stable_for_large_logits(self):
        assert float(loss(800.0, 1, [0.1], 0.0)) == pytest.approx(0.0, abs=1e-300)
        assert float(loss(-800.0, 1, [0.1], 0.0)) == pytest.approx(800.0)


class TestAdam:
    def params(self):
        return {"a": torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64),
                "b": torch.tensor([[0.3]], dtype=torch.float64)}

    def test_zero_gradient(self):
        p = self.params()
        before = {k: v.clone() for k, v in p.items()}
        adam_step(p, {k: torch.zeros_like(v) for k, v in p.items()}, AdamState(), TrainConfig())
        assert all(torch.equal(p[k], before[k]) for k in p)

    def test_first_step_is_lr_sign(self):
        cfg = TrainConfig(lr=1e-3)
        p = self.params()
        before = {k: v.clone() for k, v in p.items()}
        g = {"a": torch.tensor([3.0, -0.01, 200.0], dtype=torch.float64),
             "b": torch.tensor([[-1e-3]], dtype=torch.float64)}
        adam_step(p, g, AdamState(), cfg)
        for k in p:
            step = before[k] - p[k]
            assert torch.allclose(step, cfg.lr * torch.sign(g[k]), rtol=1e-4, atol=0)

    def test_matches_reference_sequence(self, rng):
        cfg = TrainConfig(lr=0.01)
        x = torch.as_tensor(rng.normal(size=5))
        ref = x.clone().requires_grad_(True)
        opt = torch.optim.Adam([ref], lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
        state = AdamState()
        p = {"x": x}
        for _ in range(10):
            g = torch.as_tensor(rng.normal(size=5))
            adam_step(p, {"x": g}, state, cfg)
            ref.grad = g.clone()
            opt.step()
        assert torch.allclose(p["x"], ref.detach(), rtol=0, atol=1e-12)

    def test_deterministic(self, rng):
        gs = [torch.as_tensor(rng.normal(size=3)) for _ in range(10)]
        out = []
        for _ in range(2):
            p, s = self.params(), AdamState()
            for g in gs:
                adam_step(p, {"a": g, "b": g[:1].reshape(1, 1)}, s, TrainConfig())
            out.append(p)
        assert all(out[0][k].numpy().tobytes() == out[1][k].numpy().tobytes() for k in out[0])


class TestSplit:
    def test_stratified_and_disjoint(self):
        labels = np.array([0] * 60 + [1] * 40)
        tr, va, te = stratified_split(labels, TrainConfig(), 0)
        assert len(set(tr) | set(va) | set(te)) == 100
        assert not (set(tr) & set(va) or set(tr) & set(te) or set(va) & set(te))
        assert np.sum(labels[va] == 1) == 6 and np.sum(labels[te] == 0) == 9

    def test_degenerate(self):
        with pytest.raises(ValidationError, match="degenerate split"):
            stratified_split(np.zeros(30, dtype=int), TrainConfig(), 0)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            TrainConfig(train_frac=0.5, val_frac=0.2, test_frac=0.2)
        with pytest.raises(ValidationError):
            TrainConfig(lr=0)

    def test_seed_from_environment(self, monkeypatch):
        monkeypatch.setenv("CYCTOP_SEED", "11")
        assert TrainConfig().resolved_seed() == 11
        assert TrainConfig(seed=4).resolved_seed() == 4


class TestTrain:
    def test_report_is_reproducible(self, tiny_data):
        cfg = TrainConfig(seed=1, max_epochs=4, batch_size=8)
        a = train(tiny_data, tiny_model(), cfg)[1].to_json()
        b = train(tiny_data, tiny_model(), cfg)[1].to_json()
        assert a == b

    def test_selected_epoch_and_restore(self, tiny_data):
        cfg = TrainConfig(seed=2, max_epochs=6, batch_size=8, patience=10)
        model, rep, samples = train(tiny_data, tiny_model(), cfg)
        vals = [h["val_loss"] for h in rep.history]
        assert rep.selected_epoch == int(np.argmin(vals))
        assert rep.best_val_loss == min(vals)
        va = rep.split["val"]
        batches = [collate([samples[i] for i in va[s:s + 8]]) for s in range(0, len(va), 8)]
        assert evaluate(model, batches, cfg.l1_lambda)[0] == pytest.approx(rep.best_val_loss, abs=1e-12)

    def test_patience_zero_stops_on_first_bad_epoch(self, tiny_data):
        cfg = TrainConfig(seed=0, max_epochs=30, batch_size=8, patience=0, lr=0.05)
        _, rep, _ = train(tiny_data, tiny_model(), cfg)
        vals = [h["val_loss"] for h in rep.history]
        if len(vals) < 30:
            assert vals[-1] >= min(vals[:-1])
            assert all(b < a for a, b in zip(vals[:-2], vals[1:-1]))

    def test_constant_features_give_prior(self):
        cm = ConnectivityMatrix.from_array(np.where(np.eye(8) == 1, 0.0, 0.5))
        data = [(cm, i % 2) for i in range(40)]
        _, rep, _ = train(data, tiny_model(), TrainConfig(seed=0, max_epochs=5, batch_size=8))
        assert rep.test_accuracy == pytest.approx(0.5, abs=0.2)

    def test_separable_task(self):
        ds = generate(SynthSpec(n_nodes=10, n_samples=120, density=0.35, seed=0))
        assert ds.checks["separability_accuracy"] == 1.0
        cfg = TrainConfig(seed=0, max_epochs=40, batch_size=16, lr=5e-3, patience=10)
        _, rep, _ = train(ds.pairs(), tiny_model(n_nodes=10, n_filters=4, n_heads=2, mlp_hidden=[16]), cfg)
        assert rep.test_accuracy >= 0.9

    def test_too_few_samples(self, tiny_data):
        with pytest.raises(ValidationError):
            train(tiny_data[:10], tiny_model(), TrainConfig(seed=0))

    def test_no_epec_ignores_encodings(self, tiny_data):
        cfg = TrainConfig(seed=0, max_epochs=2, batch_size=8)
        model, rep, samples = train(tiny_data, tiny_model(), cfg, use_epec=False)
        assert rep.config["use_epec"] is False
        assert all(c.W3 is None for c in model.convs)

    def test_l1_shrinks_saliency(self, tiny_data):
        masses = []
        for lam in (0.0, 1e-4, 1e-2):
            cfg = TrainConfig(seed=0, max_epochs=15, patience=15, batch_size=8, l1_lambda=lam, lr=1e-2)
            _, rep, _ = train(tiny_data, tiny_model(), cfg)
            masses.append(np.mean([np.sum(s) for s in rep.test_saliency]))
        assert masses[0] >= masses[1] >= masses[2]

    def test_grid_search(self, tiny_data):
        cfg = TrainConfig(seed=0, max_epochs=2, batch_size=8)
        best, results = grid_search(tiny_data, tiny_model(), cfg, {"lr": [1e-3, 1e-2], "k": [1, 2]})
        assert len(results) == 4
        assert [r["point"] for r in results] == [
            {"k": 1, "lr": 1e-3}, {"k": 1, "lr": 1e-2}, {"k": 2, "lr": 1e-3}, {"k": 2, "lr": 1e-2}]
        assert best == min(results, key=lambda r: r["best_val_loss"])["point"]
        with pytest.raises(ValidationError):
            grid_search(tiny_data, tiny_model(), cfg, {"momentum": [0.9]})


class TestSaliencyEvaluation:
    def test_uniform_saliency_matches_input(self, rng):
        for _ in range(10):
            g = random_graph(rng, 12, 0.4)
            s = prepare_sample(g, k=2)
            res = evaluate_saliency([s], [np.full(g.n_edges, 0.5)])
            row = res["per_sample"][0]
            assert row["betti_backbone"] == row["betti_input_matched"]

    def test_tree_saliency_has_no_cycles(self):
        g = ladder(6)
        s = prepare_sample(g, k=2)
        sal = np.zeros(g.n_edges)
        sal[s.tree.tree_edges] = 1.0
        res = evaluate_saliency([s], [sal], mass=0.99,
                                planted=[g.edges[s.tree.tree_edges]])
        row = res["per_sample"][0]
        assert row["betti_backbone"] == 0 and row["backbone_recovery"] == 1.0

    def test_mass_rule(self):
        g = make_graph(4, [(0, 1), (0, 2), (1, 2), (2, 3)])
        # 0.5 of the mass sits on the first edge, 0.75 on the first two
        assert retained_count([0.4, 0.2, 0.1, 0.1], 0.5) == 1
        assert retained_count([0.4, 0.2, 0.1, 0.1], 0.6) == 2
        assert retained_count(np.full(8, 0.3), 0.25) == 2
        assert backbone_graph(g, [0.1, 0.2, 0.4, 0.1], 0.5).edges.tolist() == [[1, 2]]

    def test_keep_everything(self, rng):
        g = random_graph(rng, 9, 0.5)
        bb = backbone_graph(g, rng.uniform(size=g.n_edges), 1.0)
        assert np.array_equal(bb.edges, g.edges)
        assert betti1(bb) == betti1(g)

    def test_bad_fraction(self):
        with pytest.raises(ValidationError):
            backbone_graph(make_graph(3, [(0, 1)]), [0.5], 0.0)

    def test_mean_map(self):
        g = make_graph(3, [(0, 1), (1, 2)])
        s = prepare_sample(g, k=1)
        res = evaluate_saliency([s, s], [[0.2, 0.4], [0.4, 0.8]])
        assert np.allclose(res["mean_saliency"], [0.3, 0.0, 0.6])
