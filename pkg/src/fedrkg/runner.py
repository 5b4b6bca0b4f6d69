"""Running experiments and sweeps, and writing their output directories.

A run directory contains:

``manifest.json``  resolved config, dataset statistics, versions, timings, file list
``metrics.tsv``    round, split, metric, K, value (validation curve)
``report.tsv``     test metrics at the best validation checkpoint
``probes.tsv``     test metrics around guidance rounds (tag in {prev, pre, post})
``gates.tsv``      per-user mean gate value / logit at each adaptive guidance round
``analysis.json``  group analyses (only with ``analysis`` enabled)
``snapshot.npz``   resumable state (only with ``snapshot_interval`` > 0)

Metric files carry no timestamps, so identical configs produce identical bytes.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from fedrkg import __version__
from fedrkg.config import SWEEP_AXES, ConfigError, ExperimentConfig
from fedrkg.dataset import CACHE_MAGIC, InteractionDataset, load_cache, load_raw, preprocess, synthetic_raw
from fedrkg.evaluation import (
    UserGroup,
    gate_statistics,
    group_by_activity,
    group_by_popularity_affinity,
    guidance_effect,
    metrics_from_ranks,
    popular_items,
    relative_change,
)
from fedrkg.federation import MetricsHistory, Regime, Simulation
from fedrkg.model import count_parameters
from fedrkg.privacy import sensitivity_bound

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


@dataclass
class RunManifest:
    run_id: str
    config: dict
    dataset: dict
    version: str
    build_id: str
    started: str
    finished: str = ""
    wall_times: dict = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def build_id() -> str:
    """Short hash over the package sources, in the spirit of a git revision."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def run_id_for(config: ExperimentConfig) -> str:
    if config.run_id:
        return config.run_id
    data = config.to_dict()
    for volatile in ("output_dir", "run_id", "workers", "snapshot_interval"):
        data.pop(volatile)
    digest = hashlib.sha1(json.dumps(data, sort_keys=True).encode()).hexdigest()[:8]
    return f"{config.dataset.name}-{config.regime}-s{config.seed}-{digest}"


def load_dataset(config: ExperimentConfig) -> InteractionDataset:
    spec = config.dataset
    threshold = spec.min_interactions or 10
    path = spec.resolved_path()
    if path is None:
        raw = synthetic_raw(
            n_users=spec.synthetic_users,
            n_items=spec.synthetic_items,
            mean_interactions=spec.synthetic_mean_interactions,
            seed=config.seed,
        )
        return preprocess(raw, threshold, name="synthetic")
    with open(path, encoding="utf-8", errors="replace") as fh:
        first = fh.readline()
    if first.startswith(CACHE_MAGIC):
        return load_cache(path)
    return preprocess(load_raw(path, spec.format or spec.name), threshold, name=spec.name)


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_tsv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def report_row(history: MetricsHistory, ks) -> dict:
    rec = history.best_test
    row = {"best_round": history.best_round}
    for k in sorted(ks):
        row[f"N@{k}"] = rec.ndcg[k] if rec else float("nan")
        row[f"R@{k}"] = rec.recall[k] if rec else float("nan")
    return row


def analyse(sim: Simulation) -> dict:
    """Cold/warm and follower/distinct breakdowns, gate statistics, guidance effects."""
    ds, h, ks = sim.dataset, sim.history, sim.ks
    out: dict = {}
    warm, cold = group_by_activity(ds, 0.3)
    followers, distinct = group_by_popularity_affinity(ds, 0.3, 0.3, sample_size=100, seed=sim.seed)
    full_followers, full_distinct = group_by_popularity_affinity(ds, 0.3, 0.3, sample_size=None)
    groups = [warm, cold, followers, distinct]
    if h.best_test is not None:
        out["best_test_by_group"] = {
            g.label: _record_summary(metrics_from_ranks(h.best_test.ranks[g.members], ks)) for g in groups if len(g)
        }
    effects = []
    for tag_round in sorted({rec.round for tag, rec in h.probes if tag == "post"}):
        before, after = h.probe("pre", tag_round), h.probe("post", tag_round)
        if before is None or after is None:
            continue
        entry = {"round": tag_round}
        named = [
            ("follower", followers),
            ("distinct", distinct),
            ("follower_all", full_followers),
            ("distinct_all", full_distinct),
            ("all", UserGroup("all", np.arange(ds.n))),
        ]
        for key, g in named:
            if len(g):
                entry[key] = guidance_effect(before, after, g, ks)
        effects.append(entry)
    out["guidance_effect"] = effects
    if sim.regime is Regime.ADAPTIVE_GUIDANCE and sim.global_state.round > 0:
        P_g = sim.global_state.item_emb
        clients = [sim.population.client(u) for u in range(ds.n)]
        pop = popular_items(ds, 0.3)
        all_items = np.arange(ds.m)
        gates = {}
        for label, (a, b, items) in {
            "follower_vs_distinct": (followers, distinct, pop),
            "warm_vs_cold": (warm, cold, all_items),
        }.items():
            if not (len(a) and len(b)):
                continue
            va, la = gate_statistics(clients, P_g, items, a)
            vb, lb = gate_statistics(clients, P_g, items, b)
            gates[label] = {
                f"{a.label}_mean_gate": va,
                f"{b.label}_mean_gate": vb,
                f"{a.label}_mean_logit": la,
                f"{b.label}_mean_logit": lb,
                "gate_delta_pct": relative_change(vb, va),
                "logit_delta_pct": relative_change(lb, la),
            }
        out["gate_statistics"] = gates
    return out


def _record_summary(rec) -> dict:
    summary = {}
    for k in sorted(rec.recall):
        summary[f"R@{k}"] = rec.recall[k]
        summary[f"N@{k}"] = rec.ndcg[k]
    return summary


def run_experiment(
    config: ExperimentConfig,
    dataset: InteractionDataset | None = None,
    resume: str | Path | None = None,
    write: bool = True,
) -> tuple[MetricsHistory, RunManifest]:
    """Run one configuration end to end and (optionally) write its run directory."""
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    if dataset is None:
        dataset = load_dataset(config)
    t_load = time.perf_counter() - t0
    problems = config.hp.problems(dataset.n)
    if problems:
        raise ConfigError([f"hp.{p}" for p in problems])

    run_id = run_id_for(config)
    out_dir = Path(config.output_dir) / run_id
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
    sim = Simulation(dataset, config)
    if resume is not None:
        sim.load_snapshot(Path(resume))
        log.info("resumed %s at round %d", run_id, sim.round)
    t1 = time.perf_counter()
    history = sim.run(out_dir if write else None)
    t_sim = time.perf_counter() - t1

    hp = config.hp
    batches_per_epoch = max(
        -(-(len(t) * (1 + hp.neg_per_pos)) // hp.batch_size) for t in dataset.train
    )
    manifest = RunManifest(
        run_id=run_id,
        config=config.to_dict(),
        dataset=dataset.stats(),
        version=__version__,
        build_id=build_id(),
        started=started,
        summary={
            "report": report_row(history, sim.ks),
            "rounds_run": history.last_round,
            "stopped_early": history.stopped_early,
            "parameters": {
                phase: count_parameters(dataset.m, hp.d, phase) for phase in ("steady", "guidance_peak", "inference")
            },
            "privacy": {
                **config.privacy.to_dict(),
                "max_steps_per_round": hp.E * batches_per_epoch,
                "sensitivity_bound": sensitivity_bound(hp.eta, hp.T_int, hp.E * batches_per_epoch, config.privacy.clip),
            }
            if config.privacy.enabled
            else None,
        },
    )
    if write:
        t2 = time.perf_counter()
        analysis = analyse(sim) if config.analysis else None
        manifest.outputs = write_outputs(out_dir, sim, history, analysis)
        manifest.wall_times = {
            "load": t_load,
            "simulate": t_sim,
            "write": time.perf_counter() - t2,
        }
    else:
        manifest.wall_times = {"load": t_load, "simulate": t_sim}
    manifest.finished = datetime.now(timezone.utc).isoformat(timespec="seconds")
    if write:
        (out_dir / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, default=_json_default))
    return history, manifest


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    raise TypeError(type(obj))


def write_outputs(out_dir: Path, sim: Simulation, history: MetricsHistory, analysis: dict | None) -> list[str]:
    files = ["manifest.json"]
    _write_tsv(out_dir / "metrics.tsv", ["round", "split", "metric", "K", "value"],
               (row for rec in history.records for row in rec.rows()))
    files.append("metrics.tsv")
    row = report_row(history, sim.ks)
    _write_tsv(out_dir / "report.tsv", ["dataset", "regime", *row], [[sim.dataset.name, sim.regime.value, *row.values()]])
    files.append("report.tsv")
    if history.probes:
        _write_tsv(out_dir / "probes.tsv", ["tag", "round", "split", "metric", "K", "value"],
                   ((tag, *r) for tag, rec in history.probes for r in rec.rows()))
        files.append("probes.tsv")
    if history.gate_rows:
        _write_tsv(out_dir / "gates.tsv", ["round", "user", "mean_gate", "mean_logit"], history.gate_rows)
        files.append("gates.tsv")
    if analysis is not None:
        (out_dir / "analysis.json").write_text(json.dumps(analysis, indent=2, default=_json_default))
        files.append("analysis.json")
    if (out_dir / "snapshot.npz").exists():
        files.append("snapshot.npz")
    return files


def run(config: ExperimentConfig, resume: str | Path | None = None) -> int:
    try:
        history, manifest = run_experiment(config, resume=resume)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surfaced as exit status
        log.exception("run failed: %s", exc)
        return EXIT_RUNTIME
    log.info("run %s finished: %s", manifest.run_id, manifest.summary["report"])
    return EXIT_OK


_AXIS_KEYS = {"regime": None, "T_int": "T_int", "beta": "beta", "eta_gate": "eta_gate", "eta": "eta"}


def sweep_configs(base: ExperimentConfig, axis: str, values) -> list[tuple[object, ExperimentConfig]]:
    if axis not in SWEEP_AXES:
        raise ConfigError([f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}"])
    values = list(values)
    if not values:
        raise ConfigError([f"sweep over {axis} needs at least one value"])
    out, problems = [], []
    base_id = run_id_for(base)
    for value in values:
        cfg = copy.deepcopy(base)
        if axis == "regime":
            cfg.regime = str(value)
        elif axis == "T_int":
            cfg.hp.T_int = int(value)
        else:
            setattr(cfg.hp, _AXIS_KEYS[axis], float(value))
        cfg.run_id = f"{base_id}-{axis}={value}"
        problems += cfg.problems(check_paths=False)
        out.append((value, cfg))
    if problems:
        raise ConfigError(problems)
    return out


def sweep(base: ExperimentConfig, axis: str, values, dataset: InteractionDataset | None = None) -> list[dict]:
    """One run per value with the shared seed; failures are recorded, not fatal."""
    runs = sweep_configs(base, axis, values)
    if dataset is None:
        dataset = load_dataset(base)
    results, curves = [], []
    for value, cfg in runs:
        entry = {"axis": axis, "value": value, "run_id": cfg.run_id}
        try:
            history, manifest = run_experiment(cfg, dataset=dataset)
            entry.update(status="ok", **manifest.summary["report"])
            curves.extend((value, *row) for rec in history.records for row in rec.rows())
        except Exception as exc:  # noqa: BLE001 - sweep continues past failures
            log.exception("sweep run %s failed", cfg.run_id)
            entry.update(status=f"failed: {exc}")
        results.append(entry)
    out_dir = Path(base.output_dir) / f"{run_id_for(base)}-sweep-{axis}"
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for r in results for k in r} - {"axis", "value", "run_id", "status"})
    _write_tsv(out_dir / "sweep_summary.tsv", ["axis", "value", "run_id", "status", *keys],
               [[r["axis"], r["value"], r["run_id"], r["status"], *(r.get(k, "") for k in keys)] for r in results])
    _write_tsv(out_dir / "sweep_curves.tsv", [axis, "round", "split", "metric", "K", "value"], curves)
    return results
