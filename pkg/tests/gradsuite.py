"""Finite-difference gradient checks over every differentiable layer, on small random instances."""

import numpy as np
import torch

from hiertsc.gradcheck import check_gradients
from hiertsc.neural import LSTMLayer, Linear, MultiHeadSelfAttention, TransformerEncoderLayer
from hiertsc.subpolicy import Actor, Critic, GraphAttentionConcat, SharedHead, SubPolicy

DT = torch.float64
STEP = 1e-5


def _proj(shape, g):
    return torch.randn(shape, generator=g, dtype=DT)


def case_linear(g):
    layer = Linear(5, 3)
    x = torch.randn(4, 5, generator=g, dtype=DT, requires_grad=True)
    w = _proj((4, 3), g)
    return lambda: (layer(x) * w).sum(), [x, layer.weight, layer.bias]


def case_attention(g):
    layer = MultiHeadSelfAttention(4, 2)
    x = torch.randn(5, 4, generator=g, dtype=DT, requires_grad=True)
    w = _proj((5, 4), g)
    return lambda: (layer(x) * w).sum(), [x] + list(layer.parameters())


def case_encoder_layer(g):
    layer = TransformerEncoderLayer(4, 2, 12)
    x = torch.randn(5, 4, generator=g, dtype=DT, requires_grad=True)
    w = _proj((5, 4), g)
    return lambda: (layer(x) * w).sum(), [x] + list(layer.parameters())


def case_lstm_cell(g):
    layer = LSTMLayer(3, 4)
    x = torch.randn(2, 3, generator=g, dtype=DT, requires_grad=True)
    h = torch.randn(2, 4, generator=g, dtype=DT, requires_grad=True)
    c = torch.randn(2, 4, generator=g, dtype=DT, requires_grad=True)
    wh, wc = _proj((2, 4), g), _proj((2, 4), g)

    def fn():
        h1, c1 = layer.cell(x, h, c)
        return (h1 * wh).sum() + (c1 * wc).sum()
    return fn, [x, h, c, layer.w_ih, layer.w_hh, layer.bias]


def case_lstm_sequence(g):
    layer = LSTMLayer(3, 4)
    x = torch.randn(4, 2, 3, generator=g, dtype=DT, requires_grad=True)
    w = _proj((4, 2, 4), g)
    return lambda: (layer(x)[0] * w).sum(), [x, layer.w_ih, layer.w_hh, layer.bias]


def case_gac(g):
    layer = GraphAttentionConcat(width=5)
    H = torch.randn(5, 5, generator=g, dtype=DT, requires_grad=True)
    table = np.array([[1, 2, -1, -1], [0, 3, 4, -1], [0, -1, -1, -1], [1, 4, 2, 0], [-1, -1, -1, -1]])
    w = _proj((5, 25), g)
    return lambda: (layer(H, table) * w).sum(), [H, layer.attn]


def case_shared_head(g):
    head = SharedHead((8, 6, 4), dropout=0.0)
    x = torch.randn(3, 8, generator=g, dtype=DT, requires_grad=True)
    w = _proj((3, 4), g)
    return lambda: (head(x) * w).sum(), [x] + list(head.parameters())


def case_actor(g):
    actor = Actor(width=8, actions=5)
    x = torch.randn(3, 8, generator=g, dtype=DT, requires_grad=True)
    w = _proj((3, 5), g)
    return lambda: (torch.log_softmax(actor(x), -1) * w).sum(), [x] + list(actor.parameters())


def case_critic(g):
    critic = Critic(width=8, latent=3)
    x = torch.randn(3, 8, generator=g, dtype=DT, requires_grad=True)
    wv, wl = _proj((3, 1), g), _proj((3, 3), g)

    def fn():
        v, lat = critic(x)
        return (v * wv).sum() + (lat * wl).sum()
    return fn, [x] + list(critic.parameters())


def case_local_encoder(g):
    pol = SubPolicy(obs_dim=6, global_dim=2, dropout=0.0)
    x = torch.randn(3, 6, generator=g, dtype=DT, requires_grad=True)
    w = _proj((3, 6), g)
    return lambda: (pol.encode_local(x) * w).sum(), [x, pol.local.weight, pol.local.bias]


CASES = {
    "linear": case_linear, "attention": case_attention, "encoder_layer": case_encoder_layer,
    "lstm_cell": case_lstm_cell, "lstm_sequence": case_lstm_sequence, "gac": case_gac,
    "shared_head": case_shared_head, "actor": case_actor, "critic": case_critic,
    "local_encoder": case_local_encoder,
}


def run_case(name: str, instance: int) -> float:
    torch.manual_seed(1000 * instance + 17)
    g = torch.Generator().manual_seed(instance)
    fn, tensors = CASES[name](g)
    return check_gradients(fn, tensors, STEP)


def run_suite(instances: int = 10) -> dict[str, float]:
    return {name: max(run_case(name, k) for k in range(instances)) for name in CASES}
