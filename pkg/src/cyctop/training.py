"""Loss, ADAM, early-stopped training and backbone evaluation."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError
from .graph import ConnectivityMatrix, FunctionalGraph, betti1, make_graph
from .model import CycGAT, CycGATConfig
from .pipeline import Sample, collate, prepare_sample

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    l1_lambda: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    train_frac: float = 0.7
    val_frac: float = 0.15
    test_frac: float = 0.15
    quantile: float = 0.25
    method: str = "treepath"
    seed: int | None = None

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if min(fracs) <= 0 or abs(sum(fracs) - 1) > 1e-9:
            raise ValidationError(f"split fractions must be positive and sum to 1, got {fracs}")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValidationError(f"invalid training configuration: {self}")
        if self.l1_lambda < 0:
            raise ValidationError("l1_lambda must be non-negative")

    def resolved_seed(self) -> int:
        if self.seed is not None:
            return int(self.seed)
        return int(os.environ.get("CYCTOP_SEED", 0))


def loss(logit, label, saliency, l1_lambda: float):
    """Binary cross-entropy on the logit plus an L1 penalty on the saliency map.

    Works on scalars or on a batch; for a batch pass ``graph_id`` via
    :func:`batch_loss` instead.
    """
    logit = torch.as_tensor(logit, dtype=torch.float64)
    label = torch.as_tensor(label, dtype=logit.dtype)
    bce = F.binary_cross_entropy_with_logits(logit, label, reduction="sum")
    return bce + l1_lambda * torch.as_tensor(saliency, dtype=logit.dtype).abs().sum()


def batch_loss(logits, saliency, batch, l1_lambda: float):
    """Mean over graphs of the per-graph loss."""
    bce = F.binary_cross_entropy_with_logits(logits, batch.labels, reduction="sum")
    return (bce + l1_lambda * saliency.sum()) / batch.n_graphs


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> AdamState:
    """In-place bias-corrected ADAM update of every tensor in ``params``."""
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps))
    return state


def stratified_split(labels, cfg: TrainConfig, seed: int, groups=None):
    """Seeded train/validation/test indices, stratified by class.

    With ``groups``, whole groups are assigned to one part (stratified by the
    group's majority class) so that near-duplicate samples never straddle the
    split.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    if groups is None:
        units = [[i] for i in range(len(labels))]
    else:
        groups = np.asarray(groups)
        if len(groups) != len(labels):
            raise ValidationError(f"{len(groups)} group ids for {len(labels)} samples")
        units = [list(np.flatnonzero(groups == g)) for g in np.unique(groups)]
    strata = np.array([np.bincount(labels[u]).argmax() for u in units])
    for cls in np.unique(strata):
        idx = np.flatnonzero(strata == cls)
        rng.shuffle(idx)
        n_val = int(round(cfg.val_frac * len(idx)))
        n_test = int(round(cfg.test_frac * len(idx)))
        n_train = len(idx) - n_val - n_test
        for part, chosen in zip(parts, (idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:])):
            for u in chosen:
                part.extend(units[u])
    out = tuple(np.sort(np.asarray(p, dtype=np.int64)) for p in parts)
    for name, part in zip(("train", "validation", "test"), out):
        if len(np.unique(labels[part])) < 2:
            raise ValidationError(f"degenerate split: {name} set does not contain both classes")
    return out


@dataclass
class TrainReport:
    history: list  # per-epoch dicts
    selected_epoch: int
    best_val_loss: float
    test_loss: float
    test_accuracy: float
    split: dict
    test_saliency: list  # per test sample: list of saliency values in edge order
    config: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _prepare(dataset, cfg: TrainConfig, k: int) -> list[Sample]:
    out = []
    for item in dataset:
        if isinstance(item, Sample):
            out.append(item)
            continue
        cm, label = item
        out.append(prepare_sample(cm, label, cfg.quantile, k, cfg.method))
    return out


def _batches(samples, idx, size, use_epec, dtype):
    return [collate([samples[i] for i in idx[s:s + size]], use_epec, dtype)
            for s in range(0, len(idx), size)]


@torch.no_grad()
def evaluate(model: CycGAT, batches, l1_lambda: float):
    """Mean loss and accuracy in eval mode; returns (loss, accuracy, saliency per graph)."""
    model.eval()
    total, correct, count = 0.0, 0, 0
    sal = []
    for b in batches:
        logits, s = model(b)
        total += float(batch_loss(logits, s, b, l1_lambda)) * b.n_graphs
        correct += int(((logits > 0).to(b.labels.dtype) == b.labels).sum())
        count += b.n_graphs
        for g in range(b.n_graphs):
            sal.append(s[b.graph_id == g].tolist())
    return total / count, correct / count, sal


def train(dataset, model_config: CycGATConfig, train_config: TrainConfig | None = None,
          use_epec: bool = True, samples: list[Sample] | None = None, groups=None):
    """Fit a model with early stopping on validation loss.

    ``dataset`` is a sequence of ``(ConnectivityMatrix, label)`` pairs or of
    prepared samples; ``groups`` optionally ties samples that must share a
    split. Returns the model restored to its best epoch, the report and the
    prepared samples.
    """
    cfg = train_config or TrainConfig()
    seed = cfg.resolved_seed()
    mcfg = replace(model_config, use_epec=use_epec)
    samples = samples if samples is not None else _prepare(dataset, cfg, mcfg.epec_k)
    if len(samples) < 20:
        raise ValidationError(f"training needs at least 20 samples, got {len(samples)}")
    n_nodes = samples[0].graph.n_nodes
    if mcfg.n_nodes != n_nodes:
        mcfg = replace(mcfg, n_nodes=n_nodes)
    labels = np.array([s.label for s in samples])
    tr, va, te = stratified_split(labels, cfg, seed, groups)

    torch.use_deterministic_algorithms(True)
    dt = mcfg.torch_dtype
    model = CycGAT(mcfg, seed=seed)
    params = dict(model.named_parameters())
    state = AdamState()
    rng = np.random.default_rng(seed + 1)
    val_batches = _batches(samples, va, cfg.batch_size, use_epec, dt)

    history = []
    best = (math.inf, -1, None)
    stale = 0
    for epoch in range(cfg.max_epochs):
        order = tr[rng.permutation(len(tr))]
        model.train()
        run_loss, run_correct = 0.0, 0
        for b in _batches(samples, order, cfg.batch_size, use_epec, dt):
            logits, s = model(b)
            lval = batch_loss(logits, s, b, cfg.l1_lambda)
            grads = torch.autograd.grad(lval, list(params.values()), allow_unused=True)
            grads = {n: (torch.zeros_like(p) if g is None else g)
                     for (n, p), g in zip(params.items(), grads)}
            adam_step(params, grads, state, cfg)
            run_loss += lval.item() * b.n_graphs
            run_correct += int(((logits.detach() > 0).to(dt) == b.labels).sum())
        val_loss, val_acc, _ = evaluate(model, val_batches, cfg.l1_lambda)
        history.append({
            "epoch": epoch,
            "train_loss": run_loss / len(tr),
            "train_accuracy": run_correct / len(tr),
            "val_loss": val_loss,
            "val_accuracy": val_acc,
        })
        log.info("epoch %d train %.4f val %.4f acc %.3f", epoch, run_loss / len(tr), val_loss, val_acc)
        if val_loss < best[0]:
            best = (val_loss, epoch, {k: v.detach().clone() for k, v in model.state_dict().items()})
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break

    model.load_state_dict(best[2])
    test_loss, test_acc, test_sal = evaluate(model, _batches(samples, te, cfg.batch_size, use_epec, dt),
                                             cfg.l1_lambda)
    report = TrainReport(
        history=history,
        selected_epoch=best[1],
        best_val_loss=best[0],
        test_loss=test_loss,
        test_accuracy=test_acc,
        split={"train": tr.tolist(), "val": va.tolist(), "test": te.tolist()},
        test_saliency=test_sal,
        config={"model": asdict(mcfg), "train": {**asdict(cfg), "seed": seed}, "use_epec": use_epec},
    )
    return model, report, samples


def top_edges(scores, tiebreak, k: int) -> np.ndarray:
    """Indices of the ``k`` highest ``scores``; ties by ``tiebreak`` (desc), then index."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(tiebreak), -np.asarray(scores)))
    return np.sort(order[:k])


def retained_count(saliency, mass: float = 0.25) -> int:
    """Fewest top-saliency edges whose saliency sum reaches ``mass`` of the total."""
    if not 0 < mass <= 1:
        raise ValidationError(f"saliency threshold must lie in (0, 1], got {mass}")
    s = np.sort(np.asarray(saliency, dtype=np.float64))[::-1]
    total = s.sum()
    if mass >= 1 or len(s) == 0:
        return len(s)
    if total <= 0:
        return math.ceil(round(mass * len(s), 9))
    # relative slack so that uniform maps give ceil(mass * E) despite rounding
    k = int(np.searchsorted(np.cumsum(s), mass * total * (1 - 1e-12))) + 1
    return min(k, len(s))


def backbone_graph(g: FunctionalGraph, saliency, mass: float = 0.25) -> FunctionalGraph:
    """Binarize a saliency map, keeping the top edges that carry ``mass`` of its total."""
    k = retained_count(saliency, mass)
    keep = top_edges(saliency, np.abs(g.edge_signals), k)
    return make_graph(g.n_nodes, g.edges[keep], np.asarray(saliency)[keep])


def evaluate_saliency(samples, saliencies, mass: float = 0.25, planted=None) -> dict:
    """Compare cycle counts of saliency backbones with the input graphs.

    For every sample the backbone keeps the strongest edges holding ``mass`` of
    the total saliency and the reference keeps as many edges by ``|FC|``, so
    the two Betti numbers are compared at equal edge count. ``planted``
    optionally gives, per sample, the ground-truth backbone edges as node pairs.
    """
    rows = []
    n = samples[0].graph.n_nodes
    n_slots = n * (n - 1) // 2
    mean_map = np.zeros(n_slots)
    for idx, (s, sal) in enumerate(zip(samples, saliencies)):
        g = s.graph
        sal = np.asarray(sal, dtype=np.float64)
        bb = backbone_graph(g, sal, mass)
        k = bb.n_edges
        ref_keep = top_edges(np.abs(g.edge_signals), np.zeros(g.n_edges), k)
        ref = make_graph(g.n_nodes, g.edges[ref_keep], g.edge_signals[ref_keep])
        row = {
            "edges_kept": k,
            "betti_backbone": betti1(bb),
            "betti_input_matched": betti1(ref),
            "betti_input": betti1(g),
        }
        if planted is not None:
            truth = {tuple(map(int, e)) for e in planted[idx]}
            got = {tuple(map(int, e)) for e in bb.edges}
            row["backbone_recovery"] = len(truth & got) / max(1, len(truth))
        rows.append(row)
        mean_map[g.slots()] += sal
    mean_map /= max(1, len(samples))
    summary = {
        "n_samples": len(rows),
        "fraction_fewer_cycles": float(np.mean([r["betti_backbone"] < r["betti_input_matched"] for r in rows])),
        "mean_betti_backbone": float(np.mean([r["betti_backbone"] for r in rows])),
        "mean_betti_input_matched": float(np.mean([r["betti_input_matched"] for r in rows])),
    }
    if planted is not None:
        summary["mean_backbone_recovery"] = float(np.mean([r["backbone_recovery"] for r in rows]))
    return {"summary": summary, "per_sample": rows, "mean_saliency": mean_map.tolist()}


def dataset_from_matrices(matrices, labels):
    return [(m if isinstance(m, ConnectivityMatrix) else ConnectivityMatrix.from_array(m), int(y))
            for m, y in zip(matrices, labels)]


def grid_search(dataset, model_config: CycGATConfig, train_config: TrainConfig | None = None,
                grid: dict | None = None, use_epec: bool = True, groups=None):
    """Train once per point of a grid over ``lr``, ``l1_lambda`` and ``k``.

    Points are visited in sorted-product order and ranked by best validation
    loss (first wins on ties). Returns ``(best_point, results)`` where each
    result is ``{"point", "best_val_loss", "test_accuracy"}``.
    """
    import itertools

    cfg = train_config or TrainConfig()
    grid = {key: list(vals) for key, vals in (grid or {}).items()}
    unknown = set(grid) - {"lr", "l1_lambda", "k"}
    if unknown:
        raise ValidationError(f"grid keys must be among lr, l1_lambda, k; got {sorted(unknown)}")
    keys = sorted(grid)
    results = []
    cache = {}
    for values in itertools.product(*(grid[key] for key in keys)):
        point = dict(zip(keys, values))
        k = int(point.get("k", model_config.epec_k))
        tc = replace(cfg, **{key: float(point[key]) for key in ("lr", "l1_lambda") if key in point})
        if k not in cache:
            cache[k] = _prepare(dataset, cfg, k)
        _, report, _ = train(None, replace(model_config, epec_k=k), tc, use_epec, samples=cache[k], groups=groups)
        results.append({"point": point, "best_val_loss": report.best_val_loss,
                        "test_accuracy": report.test_accuracy})
    best = min(range(len(results)), key=lambda i: (results[i]["best_val_loss"], i))
    return results[best]["point"], results
