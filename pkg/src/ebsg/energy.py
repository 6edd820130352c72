"""Joint energy of an (image graph, scene graph) pair.

Both graphs are refined by message passing, pooled to fixed-size
vectors with gated sums, and scored by a small MLP head.  The scene
graph contributes a combined node/edge vector, the image graph its
pooled node vector only.  Lower energy means the labeling is more
compatible with the input.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .graphs import ImageGraph, SceneGraphState
from .message_passing import (EGNNParams, GGNNParams, _kernel, egnn_forward,
                              ggnn_forward, init_egnn, init_ggnn, structure)


@dataclass
class PoolParams:
    """Gated readout: scalar sigmoid gate per state row, then a sum."""

    gate_w: ad.Tensor  # (h, 1)
    gate_b: ad.Tensor  # (1,)


@dataclass
class EnergyHeadParams:
    """Two tanh hidden layers, then a scalar output."""

    w1: ad.Tensor  # (2h, h)
    b1: ad.Tensor
    w2: ad.Tensor  # (h, h)
    b2: ad.Tensor
    w3: ad.Tensor  # (h, 1)
    b3: ad.Tensor


@dataclass
class EnergyModelParams:
    egnn: EGNNParams
    ggnn: GGNNParams
    pool_sg_nodes: PoolParams
    pool_sg_edges: PoolParams
    pool_ig: PoolParams
    combine_w: ad.Tensor  # (2h, h) mixes pooled scene-graph nodes and edges
    combine_b: ad.Tensor
    head: EnergyHeadParams

    def __post_init__(self):
        if self.egnn.hidden != self.ggnn.hidden:
            raise ValueError("hidden widths of the two networks must agree")

    @property
    def hidden(self) -> int:
        return self.egnn.hidden


def init_pool(rng, h: int) -> PoolParams:
    return PoolParams(gate_w=_kernel(rng, h, h, 1), gate_b=_kernel(rng, h, 1))


def init_energy_model(rng, d: int, d_prime: int, f: int, h: int,
                      alpha: float = 0.5, iterations: int = 3) -> EnergyModelParams:
    return EnergyModelParams(
        egnn=init_egnn(rng, d, d_prime, h, alpha, iterations),
        ggnn=init_ggnn(rng, f, h, iterations),
        pool_sg_nodes=init_pool(rng, h),
        pool_sg_edges=init_pool(rng, h),
        pool_ig=init_pool(rng, h),
        combine_w=_kernel(rng, 2 * h, 2 * h, h),
        combine_b=_kernel(rng, 2 * h, h),
        head=EnergyHeadParams(
            w1=_kernel(rng, 2 * h, 2 * h, h), b1=_kernel(rng, 2 * h, h),
            w2=_kernel(rng, h, h, h), b2=_kernel(rng, h, h),
            w3=_kernel(rng, h, h, 1), b3=_kernel(rng, h, 1),
        ),
    )


def _gated_sum(states_flat: ad.Tensor, pool: PoolParams) -> ad.Tensor:
    """(rows, h) -> (1, h): sum of rows weighted by their sigmoid gates."""
    rows, h = states_flat.value.shape
    gates = ad.sigmoid(ad.affine(states_flat, pool.gate_w, pool.gate_b))
    gated = ad.elementwise_mul(states_flat, ad.broadcast_to(gates, (rows, h)))
    return ad.reshape(ad.sum_over_axis(gated, 0), (1, h))


def gated_pool_nodes(node_states: ad.Tensor, pool: PoolParams) -> ad.Tensor:
    """N = sum_k f_gate(n_k) * n_k, shape (1, h)."""
    if node_states.value.ndim != 2 or node_states.value.shape[0] == 0:
        raise ValueError(f"node states shape {node_states.value.shape}")
    return _gated_sum(node_states, pool)


def gated_pool_edges(edge_states: ad.Tensor, pool: PoolParams) -> ad.Tensor:
    """E = sum_{i != j} g_gate(e_{i->j}) * e_{i->j}, shape (1, h).

    Self-edge rows are zero states, so their gated contribution is zero;
    with a single node the result is the zero vector.
    """
    n, n2, h = edge_states.value.shape
    if n != n2:
        raise ValueError(f"edge states shape {edge_states.value.shape}")
    flat = ad.reshape(edge_states, (n * n, h))
    # Mask defensively: callers must pass zero diagonals, but a sloppy
    # input would otherwise leak self-edge energy into the pool.
    mask = ad.broadcast_to(structure(n)["offdiag"], (n * n, h))
    return _gated_sum(ad.elementwise_mul(flat, mask), pool)


def _image_vector(ig: ImageGraph, theta: EnergyModelParams) -> ad.Tensor:
    # The image branch never depends on the scene graph state, so across
    # the repeated energy evaluations of a refinement run it is computed
    # once per record and the pooled vector is shared.
    rec = ad._active()
    key = ("image_vector", id(ig.node_features), id(theta))
    if rec is not None:
        hit = rec._memo.get(key)
        if hit is not None and hit[0] is ig.node_features and hit[1] is theta:
            return hit[2]
    ig_vec = gated_pool_nodes(ggnn_forward(ig, theta.ggnn), theta.pool_ig)
    if rec is not None:
        rec._memo[key] = (ig.node_features, theta, ig_vec)
    return ig_vec


def energy_forward(ig: ImageGraph, sg: SceneGraphState,
                   theta: EnergyModelParams) -> ad.Tensor:
    """Scalar joint energy, shape (); differentiable in states and theta."""
    if ig.n != sg.n:
        raise ValueError(f"node count mismatch: image {ig.n} vs scene {sg.n}")
    sg_nodes, sg_edges = egnn_forward(sg, theta.egnn)

    pooled_nodes = gated_pool_nodes(sg_nodes, theta.pool_sg_nodes)
    pooled_edges = gated_pool_edges(sg_edges, theta.pool_sg_edges)
    sg_vec = ad.affine(ad.concat([pooled_nodes, pooled_edges], axis=1),
                       theta.combine_w, theta.combine_b)
    ig_vec = _image_vector(ig, theta)

    x = ad.concat([sg_vec, ig_vec], axis=1)
    x = ad.tanh(ad.affine(x, theta.head.w1, theta.head.b1))
    x = ad.tanh(ad.affine(x, theta.head.w2, theta.head.b2))
    x = ad.affine(x, theta.head.w3, theta.head.b3)
    return ad.reshape(x, ())
