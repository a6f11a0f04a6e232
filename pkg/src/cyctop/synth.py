"""Labelled connectivity matrices with a planted functional backbone.

Every sample carries a backbone spanning tree plus a set of redundant
edges that close short cycles around it. Two labelling rules exist:

``backbone-weight``
    The class shifts the (positive) correlation carried by backbone edges.
    Redundant edges are anti-correlated with magnitudes overlapping the
    backbone's, so the strongest ``|FC|`` edges are not the backbone.

``position-dependent``
    Both classes carry the same multiset of values; the class decides whether
    values rise or fall along the leading cycle-Laplacian eigenvector. All
    samples share one mirror-symmetric topology whose two halves swap under
    the mirror, so the classes are mirror images of each other. Samples come
    in twins sharing a relabelling and noise, per-slot statistics match
    between classes, and the direction of the gradient can only be read off
    the positional encoding.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .graph import ConnectivityMatrix, load_connectivity, make_graph, n_retained, save_connectivity

NOISE = {"easy": 0.02, "hard": 0.05}
NON_EDGE = 0.15
BACKBONE_FLOOR = 0.42
REDUNDANT_RANGE = (0.3, 0.9)
WEIGHT_EFFECT_CAP = 0.2
POSITION_EFFECT_CAP = 0.15


@dataclass
class SynthSpec:
    n_nodes: int = 30
    n_samples: int = 400
    backbone_type: str = "tree"
    redundant_edge_fraction: float = 0.2
    signal_snr: float = 5.0
    label_rule: str = "backbone-weight"
    difficulty: str = "easy"
    seed: int = 0
    density: float = 0.25

    def __post_init__(self):
        if self.n_samples < 20:
            raise ValidationError("n_samples must be at least 20")
        if self.n_nodes < 4:
            raise ValidationError("n_nodes must be at least 4")
        if not 0 < self.redundant_edge_fraction < 1 or not 0 < self.density < 1:
            raise ValidationError("fractions must lie in (0, 1)")
        if self.backbone_type not in ("tree", "modular-core"):
            raise ValidationError(f"unknown backbone type {self.backbone_type!r}")
        if self.label_rule not in ("backbone-weight", "position-dependent"):
            raise ValidationError(f"unknown label rule {self.label_rule!r}")
        if self.difficulty not in NOISE:
            raise ValidationError(f"unknown difficulty {self.difficulty!r}")
        if self.signal_snr < 0:
            raise ValidationError("signal_snr must be non-negative")
        if n_retained(self.n_nodes, self.density) < self.n_nodes - 1:
            raise ValidationError("density too low to retain a spanning backbone")

    @property
    def noise(self) -> float:
        return NOISE[self.difficulty]

    def effect(self, cap: float) -> float:
        return min(self.signal_snr * self.noise, cap) if math.isfinite(self.signal_snr) else cap


@dataclass
class SynthDataset:
    spec: SynthSpec
    matrices: list
    labels: np.ndarray
    backbones: list  # per sample: (N-1, 2) planted backbone node pairs
    checks: dict = field(default_factory=dict)
    groups: np.ndarray | None = None  # samples sharing a group must share a split

    def pairs(self):
        return list(zip(self.matrices, (int(y) for y in self.labels)))


# -- topology ---------------------------------------------------------------


def _tree(n, rng, kind):
    perm = rng.permutation(n)
    edges = []
    if kind == "tree":
        # attach each node to one of the three most recent ones: long, thin trees
        for t in range(1, n):
            parent = perm[t - 1 - rng.integers(0, min(3, t))]
            edges.append((perm[t], parent))
    else:
        n_mod = max(2, round(math.sqrt(n) / 2))
        modules = np.array_split(perm, n_mod)
        hubs = [m[0] for m in modules]
        for m in modules:
            edges.extend((m[0], v) for v in m[1:])
        edges.extend(zip(hubs[:-1], hubs[1:]))
    return np.sort(np.asarray(edges), axis=1)


def _tree_distances(n, tree):
    adj = [[] for _ in range(n)]
    for i, j in tree:
        adj[i].append(j)
        adj[j].append(i)
    dist = np.full((n, n), -1)
    for s in range(n):
        dist[s, s] = 0
        frontier = [s]
        while frontier:
            nxt = []
            for u in frontier:
                for w in adj[u]:
                    if dist[s, w] < 0:
                        dist[s, w] = dist[s, u] + 1
                        nxt.append(w)
            frontier = nxt
    return dist


def planted_topology(spec: SynthSpec, rng):
    """Shared backbone tree and redundant edges (both as sorted node pairs)."""
    n = spec.n_nodes
    tree = _tree(n, rng, spec.backbone_type)
    pairs = n * (n - 1) // 2
    budget = n_retained(n, spec.density) - (n - 1)
    n_red = min(round(spec.redundant_edge_fraction * (pairs - (n - 1))), budget)
    dist = _tree_distances(n, tree)
    iu, ju = np.triu_indices(n, 1)
    d = dist[iu, ju]
    cand = np.flatnonzero(d >= 2)
    # short cycles are preferred: redundant links wrap closely around the core
    w = np.exp(-(d[cand] - 2) / 1.5)
    pick = rng.choice(cand, size=n_red, replace=False, p=w / w.sum())
    redundant = np.stack([iu[np.sort(pick)], ju[np.sort(pick)]], axis=1)
    return tree, redundant


# -- generation -------------------------------------------------------------


def generate(spec: SynthSpec) -> SynthDataset:
    rng = np.random.default_rng(spec.seed)
    if spec.label_rule == "backbone-weight":
        tree, redundant = planted_topology(spec, rng)
        ds = _backbone_weight(spec, tree, redundant, rng)
        ds.checks["separability_accuracy"] = separability_oracle(ds)
    else:
        ds = _position_dependent(spec, rng)
        ds.checks["max_abs_t"] = max_abs_t(ds)
        ds.checks["positional_oracle_accuracy"] = positional_oracle(ds)
    return ds


def _noise_matrix(n, rng):
    m = rng.uniform(-NON_EDGE, NON_EDGE, size=(n, n))
    m = np.triu(m, 1)
    return m + m.T


def _fill(m, edges, vals):
    m[edges[:, 0], edges[:, 1]] = vals
    m[edges[:, 1], edges[:, 0]] = vals


def _backbone_weight(spec, tree, redundant, rng):
    n = spec.n_nodes
    delta = spec.effect(WEIGHT_EFFECT_CAP)
    labels = np.arange(spec.n_samples) % 2
    mats = []
    for y in labels:
        m = _noise_matrix(n, rng)
        bb = 0.6 + (y - 0.5) * delta + spec.noise * rng.standard_normal(len(tree))
        _fill(m, tree, np.clip(bb, BACKBONE_FLOOR, 0.98))
        _fill(m, redundant, -rng.uniform(*REDUNDANT_RANGE, size=len(redundant)))
        mats.append(ConnectivityMatrix(m))
    return SynthDataset(spec, mats, labels, [tree] * spec.n_samples)


def leading_position(n, tree, redundant, k=1):
    """First cycle-Laplacian eigenvector on the edges, scaled to [-1, 1].

    Returned per planted edge (tree edges first, then redundant). On a
    mirrored topology it is antisymmetric, so negating it permutes the same
    set of values.
    """
    from .pipeline import prepare_sample

    edges = np.concatenate([tree, redundant])
    signals = np.concatenate([np.full(len(tree), 0.75), np.full(len(redundant), 0.4)])
    g = make_graph(n, edges, signals)
    s = prepare_sample(g, k=k)
    p1 = s.encoding.p_e[:, 0]
    idx = g.edge_index()
    p = np.array([p1[idx[(int(i), int(j))]] for i, j in edges])
    scale = np.abs(p).max()
    return p / scale if scale > 0 else p


def mirrored_topology(spec: SynthSpec, rng, max_tries: int = 200):
    """Backbone and redundant edges invariant under swapping two halves.

    Half A holds nodes ``0..h-1``, half B their mirror images ``h..2h-1``; an
    odd node out sits between the two anchors. A few mirror-invariant links
    ``(a, a')`` tie the halves' cycles together. Draws are repeated until the
    leading cycle-Laplacian eigenvector is simple and flips sign under the
    swap, so a signal rising along it and the same signal falling are mirror
    images of one another.
    """
    n = spec.n_nodes
    h = n // 2
    sigma = np.concatenate([np.arange(h, 2 * h), np.arange(h), np.arange(2 * h, n)])
    budget = n_retained(n, spec.density) - (n - 1)
    pairs = n * (n - 1) // 2
    n_red = min(round(spec.redundant_edge_fraction * (pairs - (n - 1))), budget)
    n_cross = 2 + n_red % 2
    if n_red < n_cross + 2:
        raise ValidationError("too few redundant edges for a mirrored topology")
    for _ in range(max_tries):
        half = _tree(h, rng, spec.backbone_type)
        anchor = int(rng.integers(h))
        tree = [*map(tuple, half), *map(tuple, half + h)]
        tree += [(anchor, anchor + h)] if n % 2 == 0 else [(anchor, 2 * h), (anchor + h, 2 * h)]
        dist = _tree_distances(h, half)
        iu, ju = np.triu_indices(h, 1)
        d = dist[iu, ju]
        cand = np.flatnonzero(d >= 2)
        n_half = (n_red - n_cross) // 2
        if len(cand) < n_half:
            continue
        w = np.exp(-(d[cand] - 2) / 1.5)
        pick = np.sort(rng.choice(cand, size=n_half, replace=False, p=w / w.sum()))
        # cross links close short loops through the anchor
        near = np.argsort(dist[anchor] + rng.uniform(0, 0.5, h), kind="stable")
        cross = [(int(a), int(a) + h) for a in near[:n_cross + 1] if a != anchor][:n_cross]
        red = [(int(iu[c]), int(ju[c])) for c in pick]
        red += [(i + h, j + h) for i, j in red] + cross
        tree = np.sort(np.asarray(tree), axis=1)
        redundant = np.sort(np.asarray(red), axis=1)
        redundant = redundant[np.lexsort((redundant[:, 1], redundant[:, 0]))]
        if _antisymmetric_lead(n, tree, redundant, sigma):
            return tree, redundant
    raise ValidationError("could not draw a mirrored topology with an antisymmetric leading mode")


def _antisymmetric_lead(n, tree, redundant, sigma):
    from .pipeline import prepare_sample

    edges = np.concatenate([tree, redundant])
    g = make_graph(n, edges, np.concatenate([np.full(len(tree), 0.75), np.full(len(redundant), 0.4)]))
    s = prepare_sample(g, k=2)
    lam = s.encoding.eigenvalues
    if s.encoding.effective_k < 2 or lam[1] - lam[0] < 1e-3 * max(1.0, lam[1]):
        return False
    p1 = s.encoding.p_e[:, 0]
    idx = g.edge_index()
    mirror = [idx[tuple(sorted((int(sigma[i]), int(sigma[j]))))] for i, j in g.edges]
    return bool(np.allclose(p1[mirror], -p1, atol=1e-9))


def _position_dependent(spec, rng):
    n = spec.n_nodes
    a = spec.effect(POSITION_EFFECT_CAP)
    tree, redundant = mirrored_topology(spec, rng)
    u = leading_position(n, tree, redundant)
    nt = len(tree)
    u_tree, u_red = u[:nt], u[nt:]
    mats, labels, backbones, groups = [], [], [], []
    for pair in range(math.ceil(spec.n_samples / 2)):
        perm = rng.permutation(n)
        base = _noise_matrix(n, rng)
        eps_t = spec.noise * rng.standard_normal(nt)
        eps_r = spec.noise * rng.standard_normal(len(redundant))
        twins = []
        for c in (1.0, -1.0):
            m = base.copy()
            _fill(m, tree, np.clip(0.75 + c * a * u_tree + eps_t, 0.6, 0.98))
            _fill(m, redundant, np.clip(0.4 + c * a * u_red + eps_r, 0.2, 0.55))
            twins.append(ConnectivityMatrix(m[np.ix_(np.argsort(perm), np.argsort(perm))]))
        # the orientation of the encoding depends on the node labels, so the
        # class is read off the relabelled sample itself
        first = int(_positional_score(twins[0], spec.density) > 0)
        for m, y in zip(twins, (first, 1 - first)):
            if len(mats) == spec.n_samples:
                break
            mats.append(m)
            labels.append(y)
            backbones.append(np.sort(perm[tree], axis=1))
            groups.append(pair)
    return SynthDataset(spec, mats, np.asarray(labels), backbones, groups=np.asarray(groups))


# -- self-checks --------------------------------------------------------------


def upper_values(ds: SynthDataset) -> np.ndarray:
    n = ds.spec.n_nodes
    iu, ju = np.triu_indices(n, 1)
    return np.stack([m.values[iu, ju] for m in ds.matrices])


def max_abs_t(ds: SynthDataset) -> float:
    """Largest two-sample t statistic over all upper-triangle slots."""
    from scipy.stats import ttest_ind

    x = upper_values(ds)
    y = ds.labels
    with np.errstate(invalid="ignore", divide="ignore"):
        t = ttest_ind(x[y == 1], x[y == 0], axis=0).statistic
    return float(np.max(np.abs(np.nan_to_num(t, nan=0.0))))


def separability_oracle(ds: SynthDataset) -> float:
    """Training accuracy of a logistic regression on the planted backbone edges."""
    from sklearn.linear_model import LogisticRegression

    x = np.stack([m.values[b[:, 0], b[:, 1]] for m, b in zip(ds.matrices, ds.backbones)])
    clf = LogisticRegression(C=1e4, max_iter=5000).fit(x, ds.labels)
    return float(clf.score(x, ds.labels))


def positional_oracle(ds: SynthDataset, quantile: float | None = None) -> float:
    """Classify each sample by the sign of corr(signal, first EPEC coordinate).

    Signals are centred separately on tree and non-tree edges of the maximum
    spanning tree so the backbone offset does not enter the correlation.
    """
    q = quantile if quantile is not None else ds.spec.density
    correct = sum(int(_positional_score(m, q) > 0) == y for m, y in zip(ds.matrices, ds.labels))
    return float(correct / len(ds.labels))


def _positional_score(cm: ConnectivityMatrix, quantile: float) -> float:
    from .pipeline import prepare_sample

    s = prepare_sample(cm, quantile=quantile, k=1)
    x = s.graph.edge_signals.copy()
    for part in (s.tree.tree_edges, s.tree.extra_edges):
        x[part] -= x[part].mean()
    return float(np.dot(x, s.encoding.p_e[:, 0]))


# -- export -----------------------------------------------------------------


def export_dataset(ds: SynthDataset, directory) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    samples = []
    for i, (m, y, b) in enumerate(zip(ds.matrices, ds.labels, ds.backbones)):
        name = f"sample_{i:04d}.cycg"
        save_connectivity(m, directory / name)
        entry = {"file": name, "label": int(y), "backbone": b.tolist()}
        if ds.groups is not None:
            entry["group"] = int(ds.groups[i])
        samples.append(entry)
    manifest = {
        "version": 1,
        "spec": asdict(ds.spec),
        "seed": ds.spec.seed,
        "checks": ds.checks,
        "samples": samples,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_dataset(directory) -> SynthDataset:
    directory = Path(directory)
    path = directory / "manifest.json" if directory.is_dir() else directory
    try:
        manifest = json.loads(path.read_text())
        spec = SynthSpec(**manifest["spec"])
        entries = manifest["samples"]
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read dataset manifest {path}: {exc}") from None
    base = path.parent
    mats = [load_connectivity(base / e["file"], "packed-binary") for e in entries]
    labels = np.array([int(e["label"]) for e in entries])
    backbones = [np.asarray(e.get("backbone", []), dtype=np.int64).reshape(-1, 2) for e in entries]
    groups = np.array([int(e["group"]) for e in entries]) if all("group" in e for e in entries) else None
    return SynthDataset(spec, mats, labels, backbones, manifest.get("checks", {}), groups)
