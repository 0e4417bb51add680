"""Binary masks that impose Bayesian-network sparsity on residual-flow blocks
and on the decoder's parameter network.

Each hidden unit is labelled with a node id; a unit labelled j reads only
from {j} | parents(j) and writes only to output j, so the composed
connectivity of a two-layer block is exactly the node-plus-parents pattern.
Coordinates follow the owning graph's declaration order: latents give the z
coordinates, observed nodes the x coordinates, and the encoder input is the
concatenation z (+) x.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sirenvae.graph import BayesNet, GraphError, InverseGraph

__all__ = [
    "MaskError",
    "MaskSet",
    "decoder_flow_masks",
    "encoder_flow_masks",
    "decoder_nn_masks",
]


class MaskError(GraphError):
    """Graph is not maskable (e.g. empty latent set)."""


@dataclass(frozen=True)
class MaskSet:
    """First-layer and second-layer masks of a two-layer masked network.

    m1 has shape (hidden, inputs), m2 (outputs, hidden); entries are 0.0/1.0
    float64 so they multiply directly into weight matrices.
    """

    m1: np.ndarray
    m2: np.ndarray
    hidden_labels: tuple[str, ...]
    per_node_hidden: int

    def __post_init__(self):
        if self.m1.shape[0] != len(self.hidden_labels):
            raise MaskError("m1 rows must match hidden_labels")
        if self.m2.shape[1] != self.m1.shape[0]:
            raise MaskError("m2 columns must match m1 rows")
        if not (self.m2.sum(axis=1) >= 1).all():
            raise MaskError("every output must own at least one hidden unit")

    @property
    def n_inputs(self) -> int:
        return self.m1.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.m1.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.m2.shape[0]

    def composite_pattern(self) -> np.ndarray:
        """Boolean (outputs, inputs) reachability pattern of m2 . m1."""
        return (self.m2 @ self.m1) > 0


def _hidden_layout(owner_ids: tuple[str, ...], m: int) -> tuple[str, ...]:
    return tuple(i for i in owner_ids for _ in range(m))


def decoder_flow_masks(latent_graph: BayesNet, m: int) -> MaskSet:
    """Masks for one prior-flow residual block over the K latents.

    Output j (and the hidden units labelled j) may read input i only when
    i is j itself or a parent of j in the latent graph.
    """
    if m < 1:
        raise MaskError("per-node hidden multiplier must be >= 1")
    latents = latent_graph.latent_ids
    if not latents:
        raise MaskError("graph has no latent nodes")
    k = len(latents)
    col = {v: i for i, v in enumerate(latents)}
    labels = _hidden_layout(latents, m)
    m1 = np.zeros((m * k, k))
    m2 = np.zeros((k, m * k))
    for h, lab in enumerate(labels):
        m1[h, col[lab]] = 1.0
        for p in latent_graph.parents(lab):
            if p in col:  # latent-latent edges only
                m1[h, col[p]] = 1.0
        m2[col[lab], h] = 1.0
    return MaskSet(m1, m2, labels, m)


def encoder_flow_masks(inv: InverseGraph, m: int) -> MaskSet:
    """Masks for one encoder-flow residual block on the concatenated z (+) x.

    Inputs are the K latents followed by the D observed coordinates; outputs
    are the K latents.  A unit labelled j reads j itself plus j's parents in
    the inverse graph (which may be latent or observed); observed coordinates
    never appear as outputs.
    """
    if m < 1:
        raise MaskError("per-node hidden multiplier must be >= 1")
    latents = inv.latent_ids
    observed = inv.observed_ids
    if not latents:
        raise MaskError("inverse graph has no latent nodes")
    k, d = len(latents), len(observed)
    col = {v: i for i, v in enumerate(latents)}
    col.update({v: k + i for i, v in enumerate(observed)})
    labels = _hidden_layout(latents, m)
    m1 = np.zeros((m * k, k + d))
    m2 = np.zeros((k, m * k))
    for h, lab in enumerate(labels):
        m1[h, col[lab]] = 1.0
        for p in inv.parents(lab):
            m1[h, col[p]] = 1.0
        m2[col[lab], h] = 1.0
    return MaskSet(m1, m2, labels, m)


def decoder_nn_masks(g: BayesNet, m: int) -> MaskSet:
    """Masks for the decoder network z -> (mu, log sigma) over the D observed.

    The hidden units owned by observed node x_i read only from pa(x_i) among
    the latents, and both output heads for x_i read only from x_i's own
    units, so perturbing z_j can move (mu_i, sigma_i) only when z_j is a
    parent of x_i.  An observed node with no latent parents cannot be
    modelled and is rejected here.
    """
    if m < 1:
        raise MaskError("per-node hidden multiplier must be >= 1")
    latents = g.latent_ids
    observed = g.observed_ids
    if not observed:
        raise MaskError("graph has no observed nodes")
    if not latents:
        raise MaskError("graph has no latent nodes")
    zcol = {v: i for i, v in enumerate(latents)}
    xrow = {v: i for i, v in enumerate(observed)}
    labels = _hidden_layout(observed, m)
    m1 = np.zeros((m * len(observed), len(latents)))
    m2 = np.zeros((len(observed), m * len(observed)))
    for x in observed:
        if not any(p in zcol for p in g.parents(x)):
            raise MaskError(f"observed node {x!r} has no latent parents")
    for h, lab in enumerate(labels):
        for p in g.parents(lab):
            if p in zcol:
                m1[h, zcol[p]] = 1.0
        m2[xrow[lab], h] = 1.0
    return MaskSet(m1, m2, labels, m)
