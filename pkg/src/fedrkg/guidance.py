"""Server aggregation, knowledge guidance and the adaptive gate.

Knowledge guidance pulls each client's item table towards the aggregate,
``P_u <- beta * P_u + (1 - beta) * P_g``. The adaptive variant replaces
``P_g`` by a per-(user, item) guidance vector ``2 * g_ui * P_g[i]`` whose gate
is trained with the recommender parameters frozen, then committed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedrkg.dataset import InteractionDataset, TrainingBatch
from fedrkg.model import ClientState, GateParams, HyperParams, NonFiniteGradientError, bce_loss, sigmoid


@dataclass
class GlobalState:
    """Server-side item table.

    Reads of the table go through :meth:`items` so that regimes which must
    never consume global knowledge can be audited.
    """

    item_emb: np.ndarray
    round: int = 0
    weights: np.ndarray | None = None
    reads: int = field(default=0, repr=False)

    def items(self) -> np.ndarray:
        self.reads += 1
        return self.item_emb


def aggregate_global(item_tables, weights=None) -> np.ndarray:
    """Weighted sum of client item tables, accumulated in user-id order.

    ``item_tables`` is a sequence (or an (n, m, d) array) of per-client tables;
    ``weights`` default to 1/n.
    """
    n = len(item_tables)
    if n == 0:
        raise ValueError("no client tables to aggregate")
    shape = item_tables[0].shape
    if weights is None:
        weights = np.full(n, 1.0 / n)
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != n:
        raise ValueError(f"{len(weights)} weights for {n} clients")
    if not np.isclose(weights.sum(), 1.0, rtol=0, atol=1e-9):
        raise ValueError(f"aggregation weights sum to {weights.sum()}, expected 1")
    acc = np.zeros(shape, dtype=np.float64)
    for w, table in zip(weights, item_tables):
        if table.shape != shape:
            raise ValueError(f"client table shape {table.shape} differs from {shape}")
        acc += w * table
    return acc


def knowledge_guidance(P_u: np.ndarray, P_g: np.ndarray, beta: float) -> np.ndarray:
    return beta * P_u + (1.0 - beta) * P_g


def regularized_step(P: np.ndarray, P_g: np.ndarray, lam: float, eta: float) -> np.ndarray:
    """One gradient step on ``lam/2 * ||P - P_g||^2``."""
    return P - eta * lam * (P - P_g)


def gate_inputs(P_rows: np.ndarray, G_rows: np.ndarray) -> np.ndarray:
    return np.concatenate([P_rows, G_rows, P_rows - G_rows], axis=-1)


def gate_logits(gate: GateParams, P_rows: np.ndarray, G_rows: np.ndarray) -> np.ndarray:
    return gate_inputs(P_rows, G_rows) @ gate.weight + gate.bias


def gate_forward(gate: GateParams, P_ui: np.ndarray, P_gi: np.ndarray):
    return sigmoid(gate_logits(gate, P_ui, P_gi))


def guidance_vector(g_ui, P_gi: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(g_ui)[..., None] * P_gi


def fuse(P_rows: np.ndarray, G_rows: np.ndarray, gates: np.ndarray, beta: float) -> np.ndarray:
    return beta * P_rows + (1.0 - beta) * guidance_vector(gates, G_rows)


def gate_gradients(
    client: ClientState, P_g: np.ndarray, batch: TrainingBatch, beta: float
) -> tuple[np.ndarray, float]:
    """Gradient of the batch BCE w.r.t. gate weight and bias, with fused item rows."""
    p = client.item_emb[batch.items]
    pg = P_g[batch.items]
    x = gate_inputs(p, pg)
    g = sigmoid(x @ client.gate.weight + client.gate.bias)
    fused = beta * p + 2.0 * (1.0 - beta) * g[:, None] * pg
    delta = sigmoid(fused @ client.user_emb) - batch.labels
    # chain rule through the fused row: dz/da = 2(1-beta) (e . pg) g (1-g)
    s = delta * 2.0 * (1.0 - beta) * (pg @ client.user_emb) * g * (1.0 - g)
    return s @ x, float(s.sum())


def fused_batch_loss(client: ClientState, P_g: np.ndarray, batch: TrainingBatch, beta: float) -> float:
    p = client.item_emb[batch.items]
    pg = P_g[batch.items]
    g = gate_forward(client.gate, p, pg)
    fused = fuse(p, pg, g, beta)
    return bce_loss(sigmoid(fused @ client.user_emb), batch.labels)


def local_train_gate(
    client: ClientState,
    P_g: np.ndarray,
    dataset: InteractionDataset,
    hp: HyperParams,
    rng: np.random.Generator,
) -> GateParams:
    """Fit only the gate on fused temporary embeddings; item and user tables stay frozen."""
    gate = client.gate
    for _ in range(hp.E_gate):
        for batch in dataset.build_batches(client.user_id, hp.batch_size, hp.neg_per_pos, rng, hp.negative_pool):
            gw, gb = gate_gradients(client, P_g, batch, hp.beta)
            if not (np.isfinite(gw).all() and np.isfinite(gb)):
                raise NonFiniteGradientError(f"non-finite gate gradient for user {client.user_id}")
            gate.weight -= hp.eta_gate * gw
            gate.bias -= hp.eta_gate * gb
    return gate


def apply_adaptive_guidance(client: ClientState, P_g: np.ndarray, beta: float) -> ClientState:
    """Commit the gated fusion to every item row; gates come from pre-update rows."""
    g = sigmoid(gate_logits(client.gate, client.item_emb, P_g))
    client.item_emb[...] = fuse(client.item_emb, P_g, g, beta)
    return client
