"""Full-ranking evaluation and the per-group analyses.

Each user's held-out item is ranked against every item the user did not train
on. Ties in score are broken by item id, smaller ids first. Metrics are
percentages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fedrkg.dataset import InteractionDataset
from fedrkg.guidance import gate_logits
from fedrkg.model import ClientState, sigmoid


@dataclass
class MetricsRecord:
    round: int
    split: str
    recall: dict[int, float]
    ndcg: dict[int, float]
    ranks: np.ndarray | None = field(default=None, repr=False)

    def rows(self):
        for k in sorted(self.recall):
            yield (self.round, self.split, "recall", k, self.recall[k])
        for k in sorted(self.ndcg):
            yield (self.round, self.split, "ndcg", k, self.ndcg[k])


@dataclass
class UserGroup:
    label: str
    members: np.ndarray

    def __len__(self) -> int:
        return len(self.members)


def candidate_mask(dataset: InteractionDataset, user: int, split: str) -> np.ndarray:
    mask = np.ones(dataset.m, dtype=bool)
    mask[dataset.train[user]] = False
    if split == "test":
        mask[dataset.val[user]] = False
    return mask


def rank_from_scores(scores: np.ndarray, heldout: int, mask: np.ndarray) -> int:
    target = scores[heldout]
    ids = np.arange(len(scores))
    ahead = mask & ((scores > target) | ((scores == target) & (ids < heldout)))
    return 1 + int(ahead.sum())


def rank_test_item(client: ClientState, heldout: int, dataset: InteractionDataset, split: str = "test") -> int:
    """1-based rank of ``heldout`` among the client's candidate items."""
    if heldout in dataset.train_items(client.user_id):
        raise ValueError(f"item {heldout} is a training item of user {client.user_id}")
    scores = client.item_emb @ client.user_emb
    return rank_from_scores(scores, heldout, candidate_mask(dataset, client.user_id, split))


def rank_population(item_emb: np.ndarray, user_emb: np.ndarray, dataset: InteractionDataset, split: str) -> np.ndarray:
    """Ranks of every user's held-out item for ``split`` in {"val", "test"}."""
    heldout = dataset.test if split == "test" else dataset.val
    ranks = np.empty(dataset.n, dtype=np.int64)
    ids = np.arange(dataset.m)
    for u in range(dataset.n):
        scores = item_emb[u] @ user_emb[u]
        target = scores[heldout[u]]
        ahead = (scores > target) | ((scores == target) & (ids < heldout[u]))
        ahead[dataset.train[u]] = False
        if split == "test":
            ahead[dataset.val[u]] = False
        ranks[u] = 1 + int(ahead.sum())
    return ranks


def recall_at_k(ranks, k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no users to evaluate")
    return 100.0 * float(np.mean(ranks <= k))


def ndcg_at_k(ranks, k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no users to evaluate")
    gains = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return 100.0 * float(np.mean(gains))


def metrics_from_ranks(ranks: np.ndarray, ks, round: int = 0, split: str = "test") -> MetricsRecord:
    return MetricsRecord(
        round=round,
        split=split,
        recall={k: recall_at_k(ranks, k) for k in ks},
        ndcg={k: ndcg_at_k(ranks, k) for k in ks},
        ranks=np.asarray(ranks),
    )


def group_by_activity(dataset: InteractionDataset, fraction: float = 0.3) -> tuple[UserGroup, UserGroup]:
    """Warm = top ``fraction`` of users by training count, cold = bottom ``fraction``."""
    if not 0 < fraction < 0.5:
        raise ValueError(f"fraction must be in (0, 0.5), got {fraction}")
    counts = dataset.train_counts()
    order = sorted(range(dataset.n), key=lambda u: (-counts[u], u))
    size = int(math.floor(fraction * dataset.n))
    warm = np.array(order[:size], dtype=np.int64)
    cold = np.array(order[dataset.n - size :], dtype=np.int64) if size else np.array([], dtype=np.int64)
    return UserGroup("warm", warm), UserGroup("cold", cold)


def popular_items(dataset: InteractionDataset, item_fraction: float = 0.3) -> np.ndarray:
    counts = dataset.item_train_counts()
    order = sorted(range(dataset.m), key=lambda i: (-counts[i], i))
    return np.array(order[: int(math.floor(item_fraction * dataset.m))], dtype=np.int64)


def popularity_share(dataset: InteractionDataset, popular: np.ndarray) -> np.ndarray:
    is_pop = np.zeros(dataset.m, dtype=bool)
    is_pop[popular] = True
    return np.array([is_pop[t].mean() for t in dataset.train])


def group_by_popularity_affinity(
    dataset: InteractionDataset,
    item_fraction: float = 0.3,
    user_fraction: float = 0.3,
    sample_size: int | None = 100,
    seed: int = 0,
) -> tuple[UserGroup, UserGroup]:
    """Followers (high share of popular items) vs. distinct users (low share).

    The top and bottom ``user_fraction`` of users by share form the two
    segments; when ``sample_size`` is set, that many users are drawn from each
    segment without replacement.
    """
    for name, frac in (("item_fraction", item_fraction), ("user_fraction", user_fraction)):
        if not 0 < frac <= 0.5:
            raise ValueError(f"{name} must be in (0, 0.5], got {frac}")
    share = popularity_share(dataset, popular_items(dataset, item_fraction))
    order = sorted(range(dataset.n), key=lambda u: (-share[u], u))
    size = int(math.floor(user_fraction * dataset.n))
    followers = np.array(order[:size], dtype=np.int64)
    distinct = np.array(order[dataset.n - size :], dtype=np.int64) if size else np.array([], dtype=np.int64)
    if sample_size is not None:
        rng = np.random.default_rng(seed)
        if len(followers) > sample_size:
            followers = np.sort(rng.choice(followers, size=sample_size, replace=False))
        if len(distinct) > sample_size:
            distinct = np.sort(rng.choice(distinct, size=sample_size, replace=False))
    return UserGroup("follower", followers), UserGroup("distinct", distinct)


def relative_change(before: float, after: float) -> float | None:
    """100 * (after - before) / before, or ``None`` when ``before`` is zero."""
    if before == 0:
        return None
    return 100.0 * (after - before) / before


def _per_user_score(ranks: np.ndarray, ks) -> np.ndarray:
    total = np.zeros(len(ranks))
    for k in ks:
        hit = ranks <= k
        total += hit + np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
    return total


def guidance_effect(before: MetricsRecord, after: MetricsRecord, group: UserGroup, ks=(5, 10)) -> dict:
    """Relative metric change for one group across a guidance round.

    Users are counted as improved / declined by the sum of their per-user
    recall and ndcg contributions over ``ks``; unchanged users are reported
    separately and left out of the improved fraction.
    """
    if before.ranks is None or after.ranks is None:
        raise ValueError("guidance_effect needs per-user ranks on both records")
    if before.split != after.split:
        raise ValueError(f"records come from different splits: {before.split} vs {after.split}")
    rb, ra = before.ranks[group.members], after.ranks[group.members]
    out: dict = {"group": group.label, "size": len(group)}
    for k in ks:
        out[f"recall@{k}"] = relative_change(recall_at_k(rb, k), recall_at_k(ra, k))
        out[f"ndcg@{k}"] = relative_change(ndcg_at_k(rb, k), ndcg_at_k(ra, k))
    sb, sa = _per_user_score(rb, ks), _per_user_score(ra, ks)
    improved, declined = int((sa > sb).sum()), int((sa < sb).sum())
    out["improved"] = improved
    out["declined"] = declined
    out["unchanged"] = len(group) - improved - declined
    moved = improved + declined
    out["improved_fraction"] = improved / moved if moved else None
    return out


def gate_statistics(
    clients, P_g: np.ndarray, item_set: np.ndarray, group: UserGroup
) -> tuple[float, float]:
    """Mean gate value and mean gate logit over ``group`` x ``item_set``.

    ``clients`` maps user id to a :class:`ClientState` (a list works).
    """
    if len(group) == 0:
        raise ValueError(f"group {group.label!r} is empty")
    items = np.asarray(item_set)
    values, logit_vals = [], []
    for u in group.members:
        c = clients[int(u)]
        a = gate_logits(c.gate, c.item_emb[items], P_g[items])
        logit_vals.append(a)
        values.append(sigmoid(a))
    return float(np.mean(np.concatenate(values))), float(np.mean(np.concatenate(logit_vals)))
