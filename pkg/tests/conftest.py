import itertools

import numpy as np
import pytest

from cyctop.graph import make_graph

K4_EDGES = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def triangle(signals=(0.9, 0.5, 0.1)):
    return make_graph(3, [(0, 1), (0, 2), (1, 2)], signals)


def k4_star():
    """K4 whose maximum spanning tree is the star at node 0."""
    return make_graph(4, K4_EDGES, [0.9, 0.9, 0.9, 0.5, 0.5, 0.5])


def two_triangles():
    """Triangles 0-1-2 and 1-2-3 sharing edge (1, 2); the basis is the two triangles."""
    edges = [(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)]
    return make_graph(4, edges, [0.8, 0.3, 0.9, 0.7, 0.2])


def ladder(m):
    """2 x m ladder; bottom rail and rungs are heavy so the basis is the m-1 squares."""
    edges, sig = [], []
    for i in range(m):
        edges.append((i, m + i))  # rung: bottom i, top m+i
        sig.append(0.9)
    for i in range(m - 1):
        edges.append((i, i + 1))
        sig.append(0.9)
        edges.append((m + i, m + i + 1))
        sig.append(0.5)
    return make_graph(2 * m, edges, sig)


def random_graph(rng, n, p, connected=False, signed=True):
    while True:
        pairs = [pr for pr in itertools.combinations(range(n), 2) if rng.random() < p]
        if connected:
            # add a random spanning path first so the graph is connected
            perm = rng.permutation(n)
            pairs = sorted(set(pairs) | {tuple(sorted((int(a), int(b)))) for a, b in zip(perm[:-1], perm[1:])})
        if pairs:
            break
    sig = rng.uniform(0.05, 1.0, len(pairs))
    if signed:
        sig *= rng.choice([-1.0, 1.0], len(pairs))
    return make_graph(n, pairs, sig)


def random_symmetric(rng, n, lo=-1.0, hi=1.0):
    m = rng.uniform(lo, hi, (n, n))
    return (m + m.T) / 2


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
