"""Cycle graph attention network.

Edge features are filtered over the cycle adjacency: every edge attends to
the edges it shares both a node and a basis cycle with, and the attention
logits see the difference of the two edges' positional encodings. A stack of
multi-head layers is followed by a single-head sigmoid readout (the saliency
map), which is scattered into the upper triangle of the N x N matrix and fed
to a fully connected head.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError
from .pipeline import EdgeBatch


@dataclass
class CycGATConfig:
    n_nodes: int = 268
    n_layers: int = 8
    n_filters: int = 16
    n_heads: int = 4
    epec_k: int = 8
    leaky_slope: float = 0.2
    mlp_hidden: list[int] = field(default_factory=lambda: [64])
    input_dim: int = 1
    use_epec: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    dtype: str = "float64"

    def __post_init__(self):
        self.mlp_hidden = [int(h) for h in self.mlp_hidden]
        ints = [self.n_nodes, self.n_filters, self.n_heads, self.epec_k, self.input_dim]
        if min(ints) < 1 or self.n_layers < 0 or any(h < 1 for h in self.mlp_hidden):
            raise ValidationError(f"invalid model configuration: {self}")
        if self.n_nodes < 2:
            raise ValidationError("model needs at least two nodes")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"unsupported dtype {self.dtype!r}")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    @property
    def n_slots(self) -> int:
        return self.n_nodes * (self.n_nodes - 1) // 2


def _glorot_(t: torch.Tensor, fan_in: int, fan_out: int, gen: torch.Generator):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=gen, dtype=t.dtype) * 2 * bound - bound)


def attention(x, p, src, dst, n_edges, W1, W2, W3, h, slope):
    """Attention weights on the (src, dst) pairs, one column per head.

    Logit of pair (i, j) is ``LeakyReLU(h . [W1 x_i || W2 x_j || W3 (p_i - p_j)])``;
    weights are softmax-normalised over all pairs sharing the same ``i``.
    """
    n_heads, d_out = W1.shape[0], W1.shape[1]
    s1 = torch.einsum("ed,hod,ho->eh", x, W1, h[:, :d_out])
    s2 = torch.einsum("ed,hod,ho->eh", x, W2, h[:, d_out:2 * d_out])
    z = s1[src] + s2[dst]
    if W3 is not None:
        z = z + torch.einsum("pk,hok,ho->ph", p[src] - p[dst], W3, h[:, 2 * d_out:])
    z = F.leaky_relu(z, slope)
    zmax = torch.full((n_edges, n_heads), -math.inf, dtype=z.dtype)
    zmax = zmax.scatter_reduce(0, src[:, None].expand_as(z), z.detach(), reduce="amax")
    ez = torch.exp(z - zmax[src])
    den = torch.zeros((n_edges, n_heads), dtype=z.dtype).index_add(0, src, ez)
    return ez / den[src]


def cycle_conv(x, p, src, dst, W, W1, W2, W3, h, slope, activation="leaky"):
    """One multi-head cycle convolution; heads are concatenated.

    Edges with no neighbours receive no messages, so their pre-activation is 0.
    """
    n_edges = x.shape[0]
    n_heads, d_out = W.shape[0], W.shape[1]
    alpha = attention(x, p, src, dst, n_edges, W1, W2, W3, h, slope)
    wx = torch.einsum("ed,hod->eho", x, W)
    msg = wx.index_select(0, dst) * alpha[:, :, None]
    out = torch.zeros((n_edges, n_heads, d_out), dtype=x.dtype).index_add_(0, src, msg)
    if activation == "leaky":
        out = F.leaky_relu(out, slope)
    elif activation == "sigmoid":
        out = torch.sigmoid(out)
    elif activation is not None:
        raise ValueError(f"unknown activation {activation!r}")
    return out.reshape(n_edges, n_heads * d_out)


class CycleConv(nn.Module):
    def __init__(self, d_in, d_out, n_heads, k, use_epec, slope, activation, gen, dt=torch.float64):
        super().__init__()
        self.slope = slope
        self.activation = activation
        self.W = nn.Parameter(torch.empty(n_heads, d_out, d_in, dtype=dt))
        self.W1 = nn.Parameter(torch.empty(n_heads, d_out, d_in, dtype=dt))
        self.W2 = nn.Parameter(torch.empty(n_heads, d_out, d_in, dtype=dt))
        self.W3 = nn.Parameter(torch.empty(n_heads, d_out, k, dtype=dt)) if use_epec else None
        self.h = nn.Parameter(torch.empty(n_heads, 3 * d_out, dtype=dt))
        for w in (self.W, self.W1, self.W2):
            _glorot_(w, d_in, d_out, gen)
        if self.W3 is not None:
            _glorot_(self.W3, k, d_out, gen)
        _glorot_(self.h, 3 * d_out, 1, gen)

    def attention(self, batch: EdgeBatch, x=None):
        x = batch.x if x is None else x
        return attention(x, batch.p, batch.src, batch.dst, x.shape[0],
                         self.W1, self.W2, self.W3, self.h, self.slope)

    def forward(self, x, batch: EdgeBatch):
        return cycle_conv(x, batch.p, batch.src, batch.dst, self.W, self.W1, self.W2,
                          self.W3, self.h, self.slope, self.activation)


class CycGAT(nn.Module):
    def __init__(self, config: CycGATConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        c = config
        dt = c.torch_dtype
        width = c.n_heads * c.n_filters
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        d = c.input_dim
        for _ in range(c.n_layers):
            self.convs.append(CycleConv(d, c.n_filters, c.n_heads, c.epec_k, c.use_epec,
                                        c.leaky_slope, "leaky", gen, dt))
            self.norms.append(nn.BatchNorm1d(width, eps=c.bn_eps, momentum=c.bn_momentum, dtype=dt))
            d = width
        self.readout = CycleConv(d, 1, 1, c.epec_k, c.use_epec, c.leaky_slope, "sigmoid", gen, dt)
        self.mlp = nn.ModuleList()
        d = c.n_slots
        for hdim in c.mlp_hidden + [1]:
            lin = nn.Linear(d, hdim, dtype=dt)
            _glorot_(lin.weight, d, hdim, gen)
            nn.init.zeros_(lin.bias)
            self.mlp.append(lin)
            d = hdim

    def saliency(self, batch: EdgeBatch) -> torch.Tensor:
        x = batch.x
        active = batch.active
        for conv, norm in zip(self.convs, self.norms):
            x = conv(x, batch)
            # inactive edges keep an exact zero and stay out of the statistics
            if self.training and int(active.sum()) < 2:
                continue
            y = torch.zeros_like(x)
            y[active] = norm(x[active])
            x = y
        return self.readout(x, batch).reshape(-1)

    def head(self, saliency: torch.Tensor, batch: EdgeBatch) -> torch.Tensor:
        if batch.n_slots != self.config.n_slots:
            raise ValidationError(
                f"batch has {batch.n_slots} slots but the model expects {self.config.n_slots}"
            )
        flat = torch.zeros(batch.n_graphs * batch.n_slots, dtype=saliency.dtype)
        flat = flat.index_put((batch.graph_id * batch.n_slots + batch.slot,), saliency)
        z = flat.reshape(batch.n_graphs, batch.n_slots)
        for i, lin in enumerate(self.mlp):
            z = lin(z)
            if i < len(self.mlp) - 1:
                z = F.leaky_relu(z, self.config.leaky_slope)
        return z.reshape(-1)

    def forward(self, batch: EdgeBatch):
        if batch.x.shape[1] != self.config.input_dim:
            raise ValidationError(f"edge features have width {batch.x.shape[1]}, expected {self.config.input_dim}")
        if self.config.use_epec and batch.p.shape[1] != self.config.epec_k:
            raise ValidationError(f"encodings have width {batch.p.shape[1]}, expected {self.config.epec_k}")
        s = self.saliency(batch)
        return self.head(s, batch), s


def forward(model: CycGAT, batch: EdgeBatch, mode: str = "eval"):
    """Logits (one per graph) and saliency (one per edge)."""
    model.train(mode == "train")
    return model(batch)


def backward(model: CycGAT, batch: EdgeBatch, grad_logits, grad_saliency=None, mode: str = "train"):
    """Reverse-mode gradients of ``<grad_logits, logits> + <grad_saliency, saliency>``.

    Returns a dict keyed by parameter name; parameters that do not influence
    the outputs get zero gradients.
    """
    logits, sal = forward(model, batch, mode)
    outputs, grads = [logits], [torch.as_tensor(grad_logits, dtype=logits.dtype).reshape(logits.shape)]
    if grad_saliency is not None:
        outputs.append(sal)
        grads.append(torch.as_tensor(grad_saliency, dtype=sal.dtype).reshape(sal.shape))
    names, params = zip(*model.named_parameters())
    g = torch.autograd.grad(outputs, params, grads, allow_unused=True)
    return {n: (torch.zeros_like(p) if gi is None else gi) for n, p, gi in zip(names, params, g)}


def simulate_localization(a_e, pulse_edge: int, n_layers: int):
    """Push a unit pulse through ``n_layers`` uniform-attention convolutions.

    Uses unit filters, zero attention vector (hence uniform weights over each
    neighbourhood) and no normalisation, so the support after layer ``l`` is
    the ``l``-hop ball of the pulse in the cycle adjacency. Returns the list of
    supports (layer 0 first) and a flag telling whether the pulse edge lies on
    no cycle.
    """
    coo = a_e.tocoo()
    e = a_e.shape[0]
    if not 0 <= pulse_edge < e:
        raise ValidationError(f"pulse edge {pulse_edge} outside 0..{e - 1}")
    order = np.lexsort((coo.col, coo.row))
    src = torch.as_tensor(coo.row[order].astype(np.int64))
    dst = torch.as_tensor(coo.col[order].astype(np.int64))
    x = torch.zeros((e, 1), dtype=torch.float64)
    x[pulse_edge] = 1.0
    one = torch.ones((1, 1, 1), dtype=torch.float64)
    h = torch.zeros((1, 3), dtype=torch.float64)
    p = torch.zeros((e, 1), dtype=torch.float64)
    supports = [[int(pulse_edge)]]
    with torch.no_grad():
        for _ in range(n_layers):
            x = cycle_conv(x, p, src, dst, one, one, one, None, h, 0.2)
            supports.append(torch.nonzero(x[:, 0]).reshape(-1).tolist())
    isolated = a_e[pulse_edge, pulse_edge] == 0
    return supports, bool(isolated)


# -- checkpoints ------------------------------------------------------------

_LEN = struct.Struct("<Q")


def state_items(model: CycGAT):
    """Every tensor of the model (parameters, running statistics, batch counters) in a fixed order."""
    return list(model.state_dict().items())


def save_checkpoint(model: CycGAT, path, step: int = 0, seed: int | None = None):
    items = state_items(model)
    header = {
        "format": "cycgat-checkpoint",
        "version": 1,
        "config": asdict(model.config),
        "step": int(step),
        "seed": seed,
        "tensors": [[k, list(v.shape)] for k, v in items],
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(v.detach().numpy().astype("<f8").tobytes() for _, v in items)
    Path(path).write_bytes(_LEN.pack(len(head)) + head + body)


def load_checkpoint(path) -> tuple[CycGAT, dict]:
    raw = Path(path).read_bytes()
    try:
        (n,) = _LEN.unpack_from(raw)
        header = json.loads(raw[_LEN.size:_LEN.size + n])
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path}: not a checkpoint ({exc})") from None
    model = CycGAT(CycGATConfig(**header["config"]))
    state = model.state_dict()
    pos = _LEN.size + n
    for name, shape in header["tensors"]:
        size = int(np.prod(shape))
        vals = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape)
        # integer counters are stored as exact f8 values
        state[name].copy_(torch.from_numpy(vals.copy()).to(state[name].dtype))
        pos += 8 * size
    if pos != len(raw):
        raise ValidationError(f"{path}: trailing bytes after tensor data")
    return model, header
