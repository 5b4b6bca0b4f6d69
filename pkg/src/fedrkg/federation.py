"""Round loop for the four training regimes.

* ``full_replacement`` aggregates every round and overwrites every client table.
* ``local_only`` never talks to the server after initialisation.
* ``knowledge_guidance`` fuses the aggregate with a fixed retention ``beta``
  every ``T_int`` rounds.
* ``adaptive_guidance`` trains each client's gate on the fused embeddings,
  then commits the gated fusion, every ``T_int`` rounds.

Every random draw comes from a generator keyed by (seed, stream, round, user),
so results do not depend on worker count or on resuming from a snapshot.
"""

from __future__ import annotations

import enum
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable

import numpy as np

from fedrkg.dataset import InteractionDataset
from fedrkg.evaluation import MetricsRecord, metrics_from_ranks, rank_population
from fedrkg.guidance import (
    GlobalState,
    aggregate_global,
    fuse,
    gate_logits,
    knowledge_guidance,
    local_train_gate,
)
from fedrkg.model import INIT_STD, Population, local_train_rec, sigmoid

if TYPE_CHECKING:
    from fedrkg.config import ExperimentConfig

log = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1


class Regime(str, enum.Enum):
    FULL_REPLACEMENT = "full_replacement"
    LOCAL_ONLY = "local_only"
    KNOWLEDGE_GUIDANCE = "knowledge_guidance"
    ADAPTIVE_GUIDANCE = "adaptive_guidance"

    @property
    def guided(self) -> bool:
        return self in (Regime.KNOWLEDGE_GUIDANCE, Regime.ADAPTIVE_GUIDANCE)


class Stream(enum.IntEnum):
    INIT = 1
    SAMPLE = 2
    TRAIN = 3
    GATE = 4
    SERVER_INIT = 5


@dataclass
class RoundLog:
    round: int
    regime: Regime
    participants: np.ndarray
    guidance_applied: bool = False
    aggregated: bool = False
    eval: MetricsRecord | None = None
    wall_time: float = 0.0


@dataclass
class MetricsHistory:
    records: list[MetricsRecord] = field(default_factory=list)
    probes: list[tuple[str, MetricsRecord]] = field(default_factory=list)
    gate_rows: list[tuple[int, int, float, float]] = field(default_factory=list)
    best_round: int = 0
    best_val: float = -1.0
    best_test: MetricsRecord | None = None
    since_best: int = 0
    stopped_early: bool = False
    last_round: int = 0

    def validation(self) -> list[MetricsRecord]:
        return [r for r in self.records if r.split == "val"]

    def probe(self, tag: str, round: int) -> MetricsRecord | None:
        for t, rec in self.probes:
            if t == tag and rec.round == round:
                return rec
        return None


class Simulation:
    def __init__(self, dataset: InteractionDataset, config: "ExperimentConfig"):
        self.dataset = dataset
        self.config = config
        self.hp = config.hp
        self.regime = Regime(config.regime)
        self.seed = config.seed
        self.n_s = self.hp.n_s or dataset.n
        if not 1 <= self.n_s <= dataset.n:
            raise ValueError(f"n_s={self.n_s} outside [1, {dataset.n}]")
        self.ks = sorted(set(config.eval_ks))
        self.headline_k = 10 if 10 in self.ks else self.ks[-1]
        self.history = MetricsHistory()
        self.round = 0
        self.round_logs: list[RoundLog] = []
        self._init_state(np.dtype(config.dtype))

    # -- randomness -------------------------------------------------------

    def rng(self, stream: Stream, round: int = 0, user: int = 0) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, int(stream), round, user]))

    def _init_state(self, dtype) -> None:
        n, m, d = self.dataset.n, self.dataset.m, self.hp.d
        init_items = self.rng(Stream.SERVER_INIT).normal(0.0, INIT_STD, size=(m, d))
        self.global_state = GlobalState(init_items.copy(), round=0, weights=np.full(n, 1.0 / n))
        self.population = Population(n, m, d, dtype=dtype)
        self.population.item_emb[:] = init_items
        for u in range(n):
            r = self.rng(Stream.INIT, 0, u)
            self.population.user_emb[u] = r.normal(0.0, INIT_STD, size=d)
            self.population.gate_weight[u] = r.normal(0.0, INIT_STD, size=3 * d)
        self.global_state.reads = 0

    def select_clients(self, t: int) -> np.ndarray:
        if self.n_s == self.dataset.n:
            return np.arange(self.dataset.n)
        chosen = self.rng(Stream.SAMPLE, t).choice(self.dataset.n, size=self.n_s, replace=False)
        return np.sort(chosen)

    def _for_each(self, fn: Callable[[int], object], users) -> list:
        users = [int(u) for u in users]
        if self.config.workers > 1 and len(users) > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                return list(pool.map(fn, users))
        return [fn(u) for u in users]

    # -- rounds -----------------------------------------------------------

    def _train_client(self, t: int, u: int) -> None:
        privacy = self.config.privacy if self.config.privacy.enabled else None
        local_train_rec(self.population.client(u), self.dataset, self.hp, self.rng(Stream.TRAIN, t, u), privacy)

    def aggregate(self, t: int) -> np.ndarray:
        self.global_state.item_emb = aggregate_global(self.population.item_emb, self.global_state.weights)
        self.global_state.round = t
        return self.global_state.item_emb

    def run_round(self, t: int, before_guidance: Callable[[int], None] | None = None) -> RoundLog:
        if t < 1:
            raise ValueError(f"rounds are numbered from 1, got {t}")
        start = time.perf_counter()
        participants = self.select_clients(t)
        self._for_each(lambda u: self._train_client(t, u), participants)
        entry = RoundLog(t, self.regime, participants)
        if self.regime is Regime.FULL_REPLACEMENT:
            self.aggregate(t)
            self.population.item_emb[:] = self.global_state.items()
            entry.aggregated = True
        elif self.regime.guided and t % self.hp.T_int == 0:
            if before_guidance is not None:
                before_guidance(t)
            self.run_guidance_round(t)
            entry.aggregated = entry.guidance_applied = True
        self.round = t
        entry.wall_time = time.perf_counter() - start
        self.round_logs.append(entry)
        return entry

    def run_guidance_round(self, t: int) -> None:
        """Aggregate over all clients, then fuse the aggregate into every client."""
        self.aggregate(t)
        P_g = self.global_state.items()
        beta = self.hp.beta
        if self.regime is Regime.KNOWLEDGE_GUIDANCE:

            def apply(u: int) -> None:
                items = self.population.item_emb[u]
                items[...] = knowledge_guidance(items, P_g, beta)

            self._for_each(apply, range(self.dataset.n))
        elif self.regime is Regime.ADAPTIVE_GUIDANCE:

            def apply(u: int) -> tuple[int, int, float, float]:
                client = self.population.client(u)
                local_train_gate(client, P_g, self.dataset, self.hp, self.rng(Stream.GATE, t, u))
                a = gate_logits(client.gate, client.item_emb, P_g)
                g = sigmoid(a)
                client.item_emb[...] = fuse(client.item_emb, P_g, g, beta)
                return (t, u, float(g.mean()), float(a.mean()))

            self.history.gate_rows.extend(self._for_each(apply, range(self.dataset.n)))
        else:
            raise ValueError(f"regime {self.regime.value} has no guidance round")

    # -- evaluation -------------------------------------------------------

    def evaluate(self, split: str, round: int | None = None) -> MetricsRecord:
        ranks = rank_population(self.population.item_emb, self.population.user_emb, self.dataset, split)
        return metrics_from_ranks(ranks, self.ks, self.round if round is None else round, split)

    def _checkpoint_eval(self) -> bool:
        """Validation pass; returns False when patience is exhausted."""
        h = self.history
        val = self.evaluate("val")
        h.records.append(val)
        score = val.ndcg[self.headline_k]
        if score > h.best_val:
            h.best_val, h.best_round, h.since_best = score, self.round, 0
            h.best_test = self.evaluate("test")
        else:
            h.since_best += 1
        return h.since_best < self.config.patience

    def run(self, snapshot_dir: Path | None = None) -> MetricsHistory:
        h = self.history
        if self.round == 0 and not h.records:
            self._checkpoint_eval()
        probing = self.config.probe_guidance
        T_int = self.hp.T_int

        def pre_guidance(t: int) -> None:
            h.probes.append(("pre", self.evaluate("test", t)))

        for t in range(self.round + 1, self.hp.T + 1):
            self.run_round(t, pre_guidance if probing else None)
            if probing and (t + 1) % T_int == 0:
                h.probes.append(("prev", self.evaluate("test", t)))
            if probing and t % T_int == 0:
                h.probes.append(("post", self.evaluate("test", t)))
            keep_going = True
            if t % self.config.eval_interval == 0 or t == self.hp.T:
                keep_going = self._checkpoint_eval()
            h.last_round = t
            if snapshot_dir is not None and self.config.snapshot_interval and t % self.config.snapshot_interval == 0:
                self.save_snapshot(snapshot_dir / "snapshot.npz")
            if not keep_going:
                h.stopped_early = True
                log.info("early stop at round %d (best round %d)", t, h.best_round)
                break
        return h

    # -- snapshots --------------------------------------------------------

    def save_snapshot(self, path: Path) -> None:
        """Write every client, the server table and loop state to ``path`` (npz).

        Arrays: ``item_emb`` (n, m, d), ``user_emb`` (n, d), ``gate_weight``
        (n, 3d), ``gate_bias`` (n,), ``global_items`` (m, d). ``meta`` holds a
        JSON document with the snapshot version, round, config and history.
        """
        meta = {
            "version": SNAPSHOT_VERSION,
            "round": self.round,
            "global_round": self.global_state.round,
            "config": self.config.to_dict(),
            "history": _history_to_json(self.history),
        }
        tmp = path.with_suffix(".tmp.npz")
        np.savez(
            tmp,
            meta=np.array(json.dumps(meta)),
            global_items=self.global_state.item_emb,
            **self.population.arrays(),
        )
        tmp.replace(path)

    def load_snapshot(self, path: Path) -> None:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("version") != SNAPSHOT_VERSION:
                raise ValueError(f"{path}: unsupported snapshot version {meta.get('version')}")
            saved = dict(meta["config"])
            mine = self.config.to_dict()
            for key in ("hp", "regime", "seed", "dataset", "privacy", "eval_ks"):
                if saved.get(key) != mine.get(key) and not (key == "hp" and _same_but_T(saved[key], mine[key])):
                    raise ValueError(f"{path}: snapshot was taken with a different {key}")
            for name, arr in self.population.arrays().items():
                if data[name].shape != arr.shape:
                    raise ValueError(f"{path}: {name} has shape {data[name].shape}, expected {arr.shape}")
                arr[...] = data[name]
            self.global_state.item_emb = np.array(data["global_items"])
        self.global_state.round = meta["global_round"]
        self.round = meta["round"]
        self.history = _history_from_json(meta["history"])


def _same_but_T(a: dict, b: dict) -> bool:
    return {k: v for k, v in a.items() if k != "T"} == {k: v for k, v in b.items() if k != "T"}


def _record_to_json(rec: MetricsRecord | None):
    if rec is None:
        return None
    return {
        "round": rec.round,
        "split": rec.split,
        "recall": {str(k): v for k, v in rec.recall.items()},
        "ndcg": {str(k): v for k, v in rec.ndcg.items()},
        "ranks": None if rec.ranks is None else rec.ranks.tolist(),
    }


def _record_from_json(obj) -> MetricsRecord | None:
    if obj is None:
        return None
    return MetricsRecord(
        obj["round"],
        obj["split"],
        {int(k): v for k, v in obj["recall"].items()},
        {int(k): v for k, v in obj["ndcg"].items()},
        None if obj["ranks"] is None else np.array(obj["ranks"], dtype=np.int64),
    )


def _history_to_json(h: MetricsHistory) -> dict:
    return {
        "records": [_record_to_json(r) for r in h.records],
        "probes": [[tag, _record_to_json(r)] for tag, r in h.probes],
        "gate_rows": [list(r) for r in h.gate_rows],
        "best_round": h.best_round,
        "best_val": h.best_val,
        "best_test": _record_to_json(h.best_test),
        "since_best": h.since_best,
        "stopped_early": h.stopped_early,
        "last_round": h.last_round,
    }


def _history_from_json(obj: dict) -> MetricsHistory:
    return MetricsHistory(
        records=[_record_from_json(r) for r in obj["records"]],
        probes=[(tag, _record_from_json(r)) for tag, r in obj["probes"]],
        gate_rows=[tuple(r) for r in obj["gate_rows"]],
        best_round=obj["best_round"],
        best_val=obj["best_val"],
        best_test=_record_from_json(obj["best_test"]),
        since_best=obj["since_best"],
        stopped_early=obj["stopped_early"],
        last_round=obj["last_round"],
    )
