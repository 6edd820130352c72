"""Message passing for state refinement on both graphs.

The scene graph runs an edge-aware network: direction-aware edge
messages d_{i->j} built from the incident node pair, node messages that
mix neighbor-node and incoming-edge sums, and gated recurrent updates
for both node and edge states.  The image graph runs a plain gated
graph network over node states only (it has no edge features).

Everything is expressed through autodiff ops on flattened edge tables:
edge (i->j) lives in row i*n+j of an (n*n, h) matrix, and constant
selector matrices turn neighborhood sums into matmuls.  Diagonal rows
(self edges) are forced to zero after every update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graphs import ImageGraph, SceneGraphState


@dataclass
class GateParams:
    """Gated recurrent update: z and r gates plus candidate state."""

    w_z: ad.Tensor
    u_z: ad.Tensor
    b_z: ad.Tensor
    w_r: ad.Tensor
    u_r: ad.Tensor
    b_r: ad.Tensor
    w_c: ad.Tensor
    u_c: ad.Tensor
    b_c: ad.Tensor


@dataclass
class EGNNParams:
    in_node_w: ad.Tensor  # (d, h)
    in_node_b: ad.Tensor
    in_edge_w: ad.Tensor  # (d', h)
    in_edge_b: ad.Tensor
    w_nn: ad.Tensor  # (h, h) neighbor-node kernel
    w_en: ad.Tensor  # (h, h) incoming-edge kernel
    w_ee: ad.Tensor  # (2h, h) node-pair-to-edge kernel
    node_gate: GateParams
    edge_gate: GateParams
    alpha: float = 0.5
    iterations: int = 3

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        h = self.w_nn.value.shape[0]
        if self.w_ee.value.shape != (2 * h, h):
            raise ValueError("w_ee must map 2h -> h")

    @property
    def hidden(self) -> int:
        return self.w_nn.value.shape[0]


@dataclass
class GGNNParams:
    in_w: ad.Tensor  # (f, h)
    in_b: ad.Tensor
    w_msg: ad.Tensor  # (h, h)
    node_gate: GateParams
    iterations: int = 3

    @property
    def hidden(self) -> int:
        return self.w_msg.value.shape[0]


def _kernel(rng, fan_in: int, *shape) -> ad.Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return ad.tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_gate(rng, h: int) -> GateParams:
    return GateParams(
        w_z=_kernel(rng, h, h, h), u_z=_kernel(rng, h, h, h), b_z=_kernel(rng, h, h),
        w_r=_kernel(rng, h, h, h), u_r=_kernel(rng, h, h, h), b_r=_kernel(rng, h, h),
        w_c=_kernel(rng, h, h, h), u_c=_kernel(rng, h, h, h), b_c=_kernel(rng, h, h),
    )


def init_egnn(rng, d: int, d_prime: int, h: int, alpha: float = 0.5,
              iterations: int = 3) -> EGNNParams:
    return EGNNParams(
        in_node_w=_kernel(rng, d, d, h), in_node_b=_kernel(rng, d, h),
        in_edge_w=_kernel(rng, d_prime, d_prime, h), in_edge_b=_kernel(rng, d_prime, h),
        w_nn=_kernel(rng, h, h, h), w_en=_kernel(rng, h, h, h),
        w_ee=_kernel(rng, 2 * h, 2 * h, h),
        node_gate=init_gate(rng, h), edge_gate=init_gate(rng, h),
        alpha=alpha, iterations=iterations,
    )


def init_ggnn(rng, f: int, h: int, iterations: int = 3) -> GGNNParams:
    return GGNNParams(
        in_w=_kernel(rng, f, f, h), in_b=_kernel(rng, f, h),
        w_msg=_kernel(rng, h, h, h),
        node_gate=init_gate(rng, h), iterations=iterations,
    )


# ---------------------------------------------------------------------------
# constant structure matrices, cached per node count


_STRUCTURE_CACHE: dict = {}


def structure(n: int) -> dict:
    """Selector constants for n nodes (shared across records and threads).

    adjacency: (n, n) ones off the diagonal.
    incoming:  (n, n*n) sums rows of the flat edge table whose edge points
               at node i, i.e. entry [i, j*n + i] = 1 for every j != i.
    src, dst:  (n*n, n) pick the source / destination node state for each
               flat edge row.
    offdiag:   (n*n, 1) zero on self-edge rows, one elsewhere.
    """
    cached = _STRUCTURE_CACHE.get(n)
    if cached is not None:
        return cached
    eye = np.eye(n)
    adjacency = np.ones((n, n)) - eye
    incoming = np.zeros((n, n * n))
    src = np.zeros((n * n, n))
    dst = np.zeros((n * n, n))
    offdiag = np.ones((n * n, 1))
    for i in range(n):
        for j in range(n):
            row = i * n + j
            src[row, i] = 1.0
            dst[row, j] = 1.0
            if i == j:
                offdiag[row, 0] = 0.0
            else:
                incoming[j, row] = 1.0
    cached = {
        "adjacency": ad.constant(adjacency),
        "incoming": ad.constant(incoming),
        "src": ad.constant(src),
        "dst": ad.constant(dst),
        "offdiag": ad.constant(offdiag),
    }
    _STRUCTURE_CACHE[n] = cached
    return cached


def _mask_self_edges(edges_flat: ad.Tensor, n: int, h: int) -> ad.Tensor:
    mask = ad.broadcast_to(structure(n)["offdiag"], (n * n, h))
    return ad.elementwise_mul(edges_flat, mask)


def _node_message_flat(states: ad.Tensor, edges_flat: ad.Tensor,
                       params: EGNNParams, n: int) -> ad.Tensor:
    consts = structure(n)
    node_sum = ad.matmul(consts["adjacency"], states)
    edge_sum = ad.matmul(consts["incoming"], edges_flat)
    return ad.add(
        ad.scalar_scale(ad.matmul(node_sum, params.w_nn), params.alpha),
        ad.scalar_scale(ad.matmul(edge_sum, params.w_en), 1.0 - params.alpha),
    )


def _edge_message_flat(states: ad.Tensor, params: EGNNParams, n: int) -> ad.Tensor:
    consts = structure(n)
    pair = ad.concat([ad.matmul(consts["src"], states),
                      ad.matmul(consts["dst"], states)], axis=1)
    return _mask_self_edges(ad.matmul(pair, params.w_ee), n, params.hidden)


def node_message(states: ad.Tensor, edge_states: ad.Tensor,
                 params: EGNNParams) -> ad.Tensor:
    """m_i = alpha * W_nn(sum_j n_j) + (1 - alpha) * W_en(sum_j e_{j->i})."""
    n, h = states.value.shape
    if edge_states.value.shape != (n, n, h):
        raise ValueError(f"edge states shape {edge_states.value.shape} != ({n},{n},{h})")
    return _node_message_flat(states, ad.reshape(edge_states, (n * n, h)), params, n)


def edge_message(states: ad.Tensor, params: EGNNParams) -> ad.Tensor:
    """Direction-aware d_{i->j} = W_ee [n_i || n_j]; diagonal zero."""
    n, h = states.value.shape
    return ad.reshape(_edge_message_flat(states, params, n), (n, n, h))


def gated_update(states: ad.Tensor, messages: ad.Tensor,
                 gate: GateParams) -> ad.Tensor:
    """new = (1 - z) * state + z * candidate, computed as s + z * (c - s)."""
    if states.value.shape != messages.value.shape:
        raise ValueError(f"state/message shapes {states.value.shape} "
                         f"vs {messages.value.shape}")
    z = ad.sigmoid(ad.add(ad.affine(messages, gate.w_z, gate.b_z),
                          ad.matmul(states, gate.u_z)))
    r = ad.sigmoid(ad.add(ad.affine(messages, gate.w_r, gate.b_r),
                          ad.matmul(states, gate.u_r)))
    cand = ad.tanh(ad.add(ad.affine(messages, gate.w_c, gate.b_c),
                          ad.matmul(ad.elementwise_mul(r, states), gate.u_c)))
    return ad.add(states, ad.elementwise_mul(
        z, ad.add(cand, ad.scalar_scale(states, -1.0))))


def egnn_forward(sg: SceneGraphState, params: EGNNParams) -> tuple:
    """Refined (node_states (n, h), edge_states (n, n, h)).

    Per round: edge messages and the gated edge update first, then node
    messages computed from the fresh edge states, then the gated node
    update.  Self-edge rows are re-zeroed after projection and after
    every edge update.
    """
    n = sg.n
    h = params.hidden
    d_prime = sg.R.value.shape[2]
    nodes = ad.affine(sg.O, params.in_node_w, params.in_node_b)
    edges = ad.affine(ad.reshape(sg.R, (n * n, d_prime)),
                      params.in_edge_w, params.in_edge_b)
    edges = _mask_self_edges(edges, n, h)
    for _ in range(params.iterations):
        d_msg = _edge_message_flat(nodes, params, n)
        edges = _mask_self_edges(gated_update(edges, d_msg, params.edge_gate), n, h)
        m_msg = _node_message_flat(nodes, edges, params, n)
        nodes = gated_update(nodes, m_msg, params.node_gate)
    return nodes, ad.reshape(edges, (n, n, h))


def ggnn_forward(ig: ImageGraph, params: GGNNParams) -> ad.Tensor:
    """Refined node states (n, h) of the image graph."""
    n = ig.n
    nodes = ad.affine(ig.node_features, params.in_w, params.in_b)
    for _ in range(params.iterations):
        msg = ad.matmul(ad.matmul(structure(n)["adjacency"], nodes), params.w_msg)
        nodes = gated_update(nodes, msg, params.node_gate)
    return nodes
