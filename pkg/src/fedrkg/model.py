"""FedMF backbone: per-client parameters, scoring, BCE loss and local SGD."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from fedrkg.dataset import InteractionDataset, TrainingBatch
from fedrkg.privacy import PrivacyConfig, sanitize_item_gradient

EPS_CLIP = 1e-7
INIT_STD = 0.01


class NonFiniteGradientError(FloatingPointError):
    pass


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class HyperParams:
    d: int = 32
    eta: float = 0.1
    eta_gate: float = 0.01
    E: int = 1
    E_gate: int = 5
    beta: float = 0.99
    T: int = 1000
    T_int: int = 100
    n_s: int | None = None  # None = every client
    batch_size: int = 256
    neg_per_pos: int = 4
    negative_pool: str = "train"  # "train" or "all" (also excludes held-out items)

    def problems(self, n_users: int | None = None) -> list[str]:
        out = []
        if self.d < 1:
            out.append(f"d must be >= 1, got {self.d}")
        if not 0.0 <= self.beta <= 1.0:
            out.append(f"beta must be in [0, 1], got {self.beta}")
        if self.T_int < 1:
            out.append(f"T_int must be >= 1, got {self.T_int}")
        if self.T < 0:
            out.append(f"T must be >= 0, got {self.T}")
        if self.E < 0 or self.E_gate < 0:
            out.append(f"E and E_gate must be >= 0, got {self.E}, {self.E_gate}")
        if self.eta < 0:
            out.append(f"eta must be >= 0, got {self.eta}")
        if self.eta_gate < 0:
            out.append(f"eta_gate must be >= 0, got {self.eta_gate}")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.neg_per_pos < 1:
            out.append(f"neg_per_pos must be >= 1, got {self.neg_per_pos}")
        if self.negative_pool not in ("train", "all"):
            out.append(f"negative_pool must be 'train' or 'all', got {self.negative_pool!r}")
        if self.n_s is not None:
            upper = n_users if n_users is not None else self.n_s
            if not 1 <= self.n_s <= upper:
                out.append(f"n_s must be in [1, {upper}], got {self.n_s}")
        return out

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GateParams:
    weight: np.ndarray  # (3d,) over [P_ui | P_gi | P_ui - P_gi]
    bias: np.ndarray  # 0-d array so views into a population stay writable

    @classmethod
    def zeros(cls, d: int) -> "GateParams":
        return cls(np.zeros(3 * d), np.zeros(()))


@dataclass
class ClientState:
    user_id: int
    item_emb: np.ndarray  # (m, d) personalized item embeddings
    user_emb: np.ndarray  # (d,)
    gate: GateParams
    scorer: str = "identity"

    @property
    def m(self) -> int:
        return self.item_emb.shape[0]

    @property
    def d(self) -> int:
        return self.item_emb.shape[1]

    def copy(self) -> "ClientState":
        return ClientState(
            self.user_id,
            self.item_emb.copy(),
            self.user_emb.copy(),
            GateParams(self.gate.weight.copy(), self.gate.bias.copy()),
            self.scorer,
        )


class Population:
    """Contiguous storage for every client's parameters.

    ``client(u)`` hands out a :class:`ClientState` whose arrays are views, so
    in-place training updates land directly in the population tensors.
    """

    def __init__(self, n: int, m: int, d: int, dtype=np.float64):
        self.item_emb = np.zeros((n, m, d), dtype=dtype)
        self.user_emb = np.zeros((n, d), dtype=dtype)
        self.gate_weight = np.zeros((n, 3 * d), dtype=dtype)
        self.gate_bias = np.zeros(n, dtype=dtype)

    @property
    def n(self) -> int:
        return self.item_emb.shape[0]

    def client(self, u: int) -> ClientState:
        return ClientState(
            u, self.item_emb[u], self.user_emb[u], GateParams(self.gate_weight[u], self.gate_bias[u, ...])
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "item_emb": self.item_emb,
            "user_emb": self.user_emb,
            "gate_weight": self.gate_weight,
            "gate_bias": self.gate_bias,
        }


def init_client(m: int, d: int, rng: np.random.Generator, global_items: np.ndarray, user_id: int = 0) -> ClientState:
    """Fresh client: item embeddings copied from the server, small Gaussian elsewhere."""
    if global_items.shape != (m, d):
        raise ValueError(f"global embeddings have shape {global_items.shape}, expected {(m, d)}")
    return ClientState(
        user_id,
        np.array(global_items, dtype=np.float64, copy=True),
        rng.normal(0.0, INIT_STD, size=d),
        GateParams(rng.normal(0.0, INIT_STD, size=3 * d), np.zeros(())),
    )


def logits(client: ClientState, items=None) -> np.ndarray:
    emb = client.item_emb if items is None else client.item_emb[items]
    return emb @ client.user_emb


def predict(client: ClientState, item: int) -> float:
    return float(sigmoid(client.item_emb[item] @ client.user_emb))


def bce_loss(scores, labels, eps: float = EPS_CLIP) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.shape} vs {labels.shape}")
    s = np.clip(scores, eps, 1.0 - eps)
    return float(-(labels * np.log(s) + (1.0 - labels) * np.log1p(-s)).sum())


def batch_loss(client: ClientState, batch: TrainingBatch) -> float:
    return bce_loss(sigmoid(logits(client, batch.items)), batch.labels)


def rec_gradients(client: ClientState, batch: TrainingBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the summed BCE on one batch.

    Returns ``(grad_user, rows, grad_rows)`` where ``rows`` are the distinct
    item ids in the batch and ``grad_rows[k]`` is the gradient for ``rows[k]``.
    """
    emb = client.item_emb[batch.items]
    delta = sigmoid(emb @ client.user_emb) - batch.labels
    grad_user = delta @ emb
    rows, inverse = np.unique(batch.items, return_inverse=True)
    grad_rows = np.zeros((len(rows), client.d))
    np.add.at(grad_rows, inverse, delta[:, None] * client.user_emb[None, :])
    return grad_user, rows, grad_rows


def sgd_step(
    client: ClientState,
    batch: TrainingBatch,
    eta: float,
    privacy: PrivacyConfig | None = None,
    rng: np.random.Generator | None = None,
) -> None:
    grad_user, rows, grad_rows = rec_gradients(client, batch)
    if not (np.isfinite(grad_user).all() and np.isfinite(grad_rows).all()):
        raise NonFiniteGradientError(f"non-finite gradient for user {client.user_id}")
    noise = None
    if privacy is not None and privacy.enabled:
        grad_rows, noise = sanitize_item_gradient(grad_rows, client.m, privacy, rng)
    # both updates use pre-step values: grads were computed above
    client.user_emb -= eta * grad_user
    client.item_emb[rows] -= eta * grad_rows
    if noise is not None:
        client.item_emb -= eta * noise


def local_train_rec(
    client: ClientState,
    dataset: InteractionDataset,
    hp: HyperParams,
    rng: np.random.Generator,
    privacy: PrivacyConfig | None = None,
) -> ClientState:
    """E epochs of mini-batch SGD on the client's own data, negatives redrawn per epoch."""
    for _ in range(hp.E):
        for batch in dataset.build_batches(client.user_id, hp.batch_size, hp.neg_per_pos, rng, hp.negative_pool):
            sgd_step(client, batch, hp.eta, privacy, rng)
    return client


def count_parameters(m: int, d: int, phase: str = "steady") -> int:
    """Client-side parameter count for a training phase.

    During guidance the client also holds the downloaded global item table.
    """
    base = m * d + 4 * d + 1
    if phase in ("steady", "inference"):
        return base
    if phase == "guidance_peak":
        return base + m * d
    raise ValueError(f"unknown phase {phase!r}")
