"""Two-stage training: uniform-negative pretraining, one-shot clustering, sampler-swapped fine-tuning."""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ingest
from .community import CommunityModel, build_community_model
from .config import RunConfig
from .data import DatasetBundle
from .encoder import (EmbeddingState, ModelConfig, Recommender, adam_step, bpr_gradients,
                      build_graph_operator, init_embeddings, load_checkpoint, save_checkpoint, sigmoid)
from .metrics import (RecentNegatives, UndefinedMetricError, calinski_harabasz, evaluate,
                      exposure_realness, hardness, holdout_hit, silhouette)
from .sampler import NegativeSampler, SamplerSpec, make_sampler

log = logging.getLogger(__name__)

ARTIFACT_CHOICES = {
    "n_layers_default": 2,
    "reg_default": 1e-4,
    "init": "normal(0, init_scale^2)",
    "hardness": "mean sigmoid score of sampled negatives",
    "holdout_window": "10 most recent distinct negatives per user over the fine-tuning run",
    "exclusion": "val excludes train; test excludes train and val",
    "stage2_optimizer": "Adam moments reset at the stage boundary",
    "clustering_input": "propagated user embeddings (lightgcn) or base user rows (mf)",
}


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    seconds: float
    val_ndcg: float | None = None
    best: bool = False
    hardness: float | None = None


@dataclass
class TrainTrace:
    stage: str
    records: list = field(default_factory=list)

    def add(self, rec: EpochRecord):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(rec)

    def mean_epoch_seconds(self) -> float:
        times = [r.seconds for r in self.records if r.epoch > 0]
        return float(np.mean(times)) if times else 0.0

    def to_rows(self) -> list[dict]:
        return [{"stage": self.stage, **r.__dict__} for r in self.records]

    def deterministic(self) -> list[dict]:
        return [{k: v for k, v in r.__dict__.items() if k != "seconds"} for r in self.records]


@dataclass
class NegativeLog:
    """Negatives from the last fine-tuning epoch plus per-user recent sets over the whole run."""

    users: np.ndarray
    items: np.ndarray
    recent: RecentNegatives


def model_config(cfg: RunConfig) -> ModelConfig:
    m = cfg.model
    return ModelConfig(m.backbone, m.dim, m.n_layers,
                       tuple(m.layer_weights) if m.layer_weights is not None else None,
                       m.reg, m.lr, m.init_scale)


def sampler_spec(stage) -> SamplerSpec:
    return SamplerSpec(stage.strategy, stage.alpha, stage.candidates, stage.retry_cap)


def load_data(cfg: RunConfig):
    """Return ``(bundle, exposure_or_None)`` for the configured data source."""
    d = cfg.data
    if d.source == "synthetic":
        s = d.synthetic
        return ingest.generate_synthetic_exposure(s.users, s.items, s.communities, s.exposure_rate,
                                                  s.click_rate, cfg.seeds.split, tuple(d.ratios))
    if d.path is None:
        raise TrainingError("data.path is required for raw and bundle sources")
    if d.source == "bundle":
        bundle = DatasetBundle.load(d.path)
        exp_path = Path(d.path) / "exposure.log"
        exposure = None
        if exp_path.exists():
            comm_path = Path(d.path) / "communities.tsv"
            community = None
            if comm_path.exists():
                community = [int(line.split("\t")[1]) for line in comm_path.read_text().splitlines()]
            exposure = ingest.ExposureLog.load(exp_path, community)
        return bundle, exposure
    bundle = ingest.prepare(d.path, d.format, d.k_user, d.k_item, cfg.seeds.split, tuple(d.ratios))
    return bundle, None


def make_model(mcfg: ModelConfig, state: EmbeddingState, bundle: DatasetBundle) -> Recommender:
    graph = build_graph_operator(bundle.train) if mcfg.backbone == "lightgcn" else None
    return Recommender(mcfg, state, graph)


def train_epoch(model: Recommender, bundle: DatasetBundle, sampler: NegativeSampler,
                rng: np.random.Generator, batch_size: int, epoch: int = 0, sink=None):
    """One shuffled pass over all training positives, one negative per positive.

    ``sink(users, negatives)`` receives every batch's draws. Returns
    ``(mean loss per triplet, mean sigmoid score of the drawn negatives)``.
    """
    users, items = bundle.train.pairs()
    perm = rng.permutation(users.size)
    mcfg = model.config
    weights = mcfg.weights()
    total_loss = 0.0
    total_hard = 0.0
    n_users = model.n_users
    for b, start in enumerate(range(0, perm.size, batch_size)):
        idx = perm[start:start + batch_size]
        bu, bi = users[idx], items[idx]
        final = model.final_embeddings()

        def scorer(us, its, final=final):
            return np.einsum("ij,ij->i", final[us], final[n_users + its])

        neg = sampler.sample(bu, rng, scorer)
        grad, loss = bpr_gradients(model.state, model.graph, bu, bi, neg, mcfg.reg, mcfg.n_layers,
                                   weights, final=final)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
        total_hard += float(sigmoid(scorer(bu, neg)).sum())
        adam_step(model.state, grad, mcfg.lr)
        model.invalidate()
        total_loss += loss
        if sink is not None:
            sink(bu, neg)
    return total_loss / max(users.size, 1), total_hard / max(users.size, 1)


@dataclass
class Checkpoint:
    state: EmbeddingState
    best_state: EmbeddingState
    config: ModelConfig
    seed: int | None = None

    def model(self, bundle: DatasetBundle, best: bool = False) -> Recommender:
        st = (self.best_state if best else self.state).copy()
        return make_model(self.config, st, bundle)


def pretrain(cfg: RunConfig, bundle: DatasetBundle | None = None) -> tuple[Checkpoint, TrainTrace]:
    """Stage 1: train with the stage-1 sampler for a fixed epoch budget, no early stopping."""
    if bundle is None:
        bundle, _ = load_data(cfg)
    mcfg = model_config(cfg)
    state = init_embeddings(bundle.n_users, bundle.n_items, mcfg.dim, cfg.seeds.init, mcfg.init_scale)
    model = make_model(mcfg, state, bundle)
    sampler = make_sampler(sampler_spec(cfg.sampler.stage1), bundle.train)
    rng = np.random.default_rng([cfg.seeds.sampler, 1])
    trace = TrainTrace("stage1")
    best_state, best_ndcg = state.copy(), -np.inf
    for epoch in range(1, cfg.train.stage1_epochs + 1):
        t0 = time.perf_counter()
        loss, hard = train_epoch(model, bundle, sampler, rng, cfg.train.batch_size, epoch)
        rec = EpochRecord(epoch, loss, time.perf_counter() - t0, hardness=hard)
        if epoch % cfg.train.eval_every == 0 or epoch == cfg.train.stage1_epochs:
            rec.val_ndcg = evaluate(model, bundle, "val", cfg.train.k).ndcg
            if rec.val_ndcg > best_ndcg:
                best_ndcg, best_state, rec.best = rec.val_ndcg, model.state.copy(), True
        trace.add(rec)
        log.info("stage1 epoch %d loss %.4f val_ndcg %s", epoch, loss, rec.val_ndcg)
    return Checkpoint(model.state, best_state, mcfg, cfg.seeds.init), trace


def clustering_input(model: Recommender) -> np.ndarray:
    return model.user_embeddings()


def finetune(cfg: RunConfig, checkpoint: Checkpoint, bundle: DatasetBundle,
             community: CommunityModel | None = None, negatives_path=None):
    """Stage 2: fine-tune from ``checkpoint`` with the stage-2 sampler and early stopping.

    Returns ``(best model, trace, NegativeLog, community model)``. The community
    model is built once from the checkpoint and never updated.
    """
    if checkpoint.state.table.shape != (bundle.n_users + bundle.n_items, cfg.model.dim):
        raise TrainingError("checkpoint shape does not match the dataset and model dimension")
    state = checkpoint.state.copy()
    state.reset_moments()
    model = make_model(model_config(cfg), state, bundle)
    spec = sampler_spec(cfg.sampler.stage2)
    if community is None:
        community = build_community_model(clustering_input(model), bundle.train, cfg.community.p,
                                          spec.alpha, cfg.seeds.clustering, cfg.community.max_iter,
                                          cfg.community.tol)
    sampler = make_sampler(spec, bundle.train, community)
    rng = np.random.default_rng([cfg.seeds.sampler, 2])
    k = cfg.train.k

    trace = TrainTrace(f"stage2-{spec.strategy}")
    best_ndcg = evaluate(model, bundle, "val", k).ndcg
    best_state = model.state.copy()
    trace.add(EpochRecord(0, None, 0.0, best_ndcg, True))
    recent = RecentNegatives(bundle.n_users, k)
    last = {"users": [], "items": []}
    fh = open(negatives_path, "w") if negatives_path else None

    def sink(u, i):
        last["users"].append(u)
        last["items"].append(i)
        recent.update(u, i)
        if fh is not None:
            fh.write("".join(f"{a}\t{b}\n" for a, b in zip(u.tolist(), i.tolist())))

    stale = 0
    try:
        for epoch in range(1, cfg.train.stage2_epochs + 1):
            last["users"].clear()
            last["items"].clear()
            if fh is not None:
                fh.write(f"# epoch {epoch}\n")
            t0 = time.perf_counter()
            loss, hard = train_epoch(model, bundle, sampler, rng, cfg.train.batch_size, epoch, sink)
            seconds = time.perf_counter() - t0
            ndcg = evaluate(model, bundle, "val", k).ndcg
            rec = EpochRecord(epoch, loss, seconds, ndcg, hardness=hard)
            if ndcg > best_ndcg:
                best_ndcg, best_state, rec.best, stale = ndcg, model.state.copy(), True, 0
            else:
                stale += 1
            trace.add(rec)
            log.info("stage2[%s] epoch %d loss %.4f val_ndcg %.4f", spec.strategy, epoch, loss, ndcg)
            if stale > cfg.train.patience:
                break
    finally:
        if fh is not None:
            fh.close()
    best = make_model(model.config, best_state, bundle)
    users = np.concatenate(last["users"]) if last["users"] else np.zeros(0, np.int64)
    items = np.concatenate(last["items"]) if last["items"] else np.zeros(0, np.int64)
    return best, trace, NegativeLog(users, items, recent), community, sampler


def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


def diagnostics(stage1_model: Recommender, model: Recommender, bundle: DatasetBundle,
                negs: NegativeLog, community: CommunityModel, k: int, exposure=None) -> dict:
    before = clustering_input(stage1_model)
    after = clustering_input(model)
    out = {
        "holdout_hit": _safe(holdout_hit, negs.recent.sets(), bundle.val, k),
        "hardness_final_model": _safe(hardness, model, negs.users, negs.items),
        "hardness_stage1_model": _safe(hardness, stage1_model, negs.users, negs.items),
        "logged_negatives": int(negs.users.size),
        "silhouette_before": _safe(silhouette, before, community.assignment),
        "silhouette_after": _safe(silhouette, after, community.assignment),
        "calinski_harabasz_before": _safe(calinski_harabasz, before, community.assignment),
        "calinski_harabasz_after": _safe(calinski_harabasz, after, community.assignment),
        "communities_flagged": community.flagged,
    }
    for name in ("silhouette", "calinski_harabasz"):
        b, a = out[f"{name}_before"], out[f"{name}_after"]
        out[f"{name}_delta"] = None if a is None or b is None else a - b
    if exposure is not None and negs.users.size:
        out["exposure_realness"] = exposure_realness(negs.users, negs.items, exposure)
    return out


@dataclass
class ExperimentReport:
    """Everything a run produces. ``timing`` holds wall-clock data and is left out of the canonical form."""

    config: dict
    dataset: dict
    rows: list
    stage1: dict
    traces: dict
    artifact_choices: dict
    timing: dict

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "dataset": self.dataset,
            "rows": self.rows,
            "stage1": self.stage1,
            "traces": self.traces,
            "artifact_choices": self.artifact_choices,
            "timing": self.timing,
        }

    def canonical(self) -> str:
        obj = self.to_json()
        obj.pop("timing")
        obj["config"] = {k: v for k, v in obj["config"].items() if k != "output"}
        return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"), allow_nan=True)

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentReport":
        return cls(obj["config"], obj["dataset"], obj["rows"], obj["stage1"], obj["traces"],
                   obj["artifact_choices"], obj["timing"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _dataset_summary(bundle: DatasetBundle) -> dict:
    return {"n_users": bundle.n_users, "n_items": bundle.n_items,
            "nnz": {s: bundle.split(s).nnz for s in ("train", "val", "test")},
            "split_seed": bundle.split_seed}


@dataclass
class ComparisonRow:
    strategy: str
    metrics: dict
    diagnostics: dict
    best_epoch: int
    epochs_run: int
    mean_epoch_seconds: float


def _run_stage2(cfg: RunConfig, ckpt: Checkpoint, bundle, exposure, stage1_model, out_dir, k):
    negatives_path = Path(out_dir) / f"negatives.{cfg.sampler.stage2.strategy}.log" \
        if cfg.train.log_negatives and out_dir else None
    model, trace, negs, community, sampler = finetune(cfg, ckpt, bundle, negatives_path=negatives_path)
    test = evaluate(model, bundle, "test", k)
    diag = diagnostics(stage1_model, model, bundle, negs, community, k, exposure)
    diag["sampler_fallbacks"] = dict(sampler.stats)
    best_epoch = max((r.epoch for r in trace.records if r.best), default=0)
    row = ComparisonRow(cfg.sampler.stage2.strategy, test.values() | {"n_users": test.n_users},
                        diag, best_epoch, trace.records[-1].epoch, trace.mean_epoch_seconds())
    return row, model, trace, community


def run_compare(cfg: RunConfig, strategies, out_dir=None, bundle=None, exposure=None,
                checkpoint: Checkpoint | None = None) -> ExperimentReport:
    """Shared Stage-1 checkpoint, then one Stage-2 run per strategy, all from that checkpoint."""
    t_start = time.perf_counter()
    if bundle is None:
        bundle, exposure = load_data(cfg)
    out = Path(out_dir) if out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(cfg.dump())
    k = cfg.train.k
    trace1 = None
    t0 = time.perf_counter()
    if checkpoint is None:
        checkpoint, trace1 = pretrain(cfg, bundle)
    stage1_seconds = time.perf_counter() - t0
    stage1_model = checkpoint.model(bundle)
    stage1_test = evaluate(stage1_model, bundle, "test", k)
    if out is not None:
        save_checkpoint(out / "stage1.ckpt", checkpoint.state, checkpoint.config, cfg.seeds.init)

    rows, traces, timing = [], {}, {"stage1_seconds": stage1_seconds, "stage2_epoch_seconds": {},
                                 "stage2_seconds": {}}
    if trace1 is not None:
        traces["stage1"] = trace1.deterministic()
        timing["stage1_epoch_seconds"] = trace1.mean_epoch_seconds()
    for strategy in strategies:
        scfg = cfg.replace(**{"sampler.stage2.strategy": strategy})
        t2 = time.perf_counter()
        row, model, trace, community = _run_stage2(scfg, checkpoint, bundle, exposure, stage1_model, out, k)
        key = strategy if strategy not in traces else f"{strategy}#{len(rows)}"
        traces[key] = trace.deterministic()
        timing["stage2_epoch_seconds"][key] = row.mean_epoch_seconds
        timing["stage2_seconds"][key] = time.perf_counter() - t2
        rows.append({"strategy": strategy, "metrics": row.metrics, "diagnostics": row.diagnostics,
                     "best_epoch": row.best_epoch, "epochs_run": row.epochs_run})
        if out is not None:
            suffix = "" if len(strategies) == 1 else f".{key}"
            community.save(out / f"community{suffix}.model")
            save_checkpoint(out / f"stage2{suffix}.best.ckpt", model.state, model.config, cfg.seeds.init)
            with open(out / "trace.csv", "a" if rows[:-1] else "w") as fh:
                if not rows[:-1]:
                    fh.write("stage,epoch,loss,seconds,val_ndcg,best,hardness\n")
                    if trace1 is not None:
                        for r in trace1.records:
                            fh.write(_trace_line("stage1", r))
                for r in trace.records:
                    fh.write(_trace_line(f"stage2-{key}", r))
    timing["total_seconds"] = time.perf_counter() - t_start
    stage1 = {"test": stage1_test.values() | {"n_users": stage1_test.n_users}}
    report = ExperimentReport(
        config=cfg.to_dict(), dataset=_dataset_summary(bundle), rows=rows, stage1=stage1,
        traces=traces, artifact_choices=dict(ARTIFACT_CHOICES), timing=timing)
    if out is not None:
        write_report(report, out)
    return report


def _trace_line(stage: str, r: EpochRecord) -> str:
    fmt = lambda v: "" if v is None else repr(v)
    return f"{stage},{r.epoch},{fmt(r.loss)},{fmt(r.seconds)},{fmt(r.val_ndcg)},{int(r.best)},{fmt(r.hardness)}\n"


def run_experiment(cfg: RunConfig, out_dir=None, **kwargs) -> ExperimentReport:
    """Prep, pretrain, fine-tune with the configured Stage-2 sampler, and evaluate on test."""
    return run_compare(cfg, [cfg.sampler.stage2.strategy], out_dir, **kwargs)


def compare_strategies(cfg: RunConfig, strategies, out_dir=None, **kwargs) -> ExperimentReport:
    if len(strategies) < 2:
        raise ValueError("compare needs at least two strategies")
    return run_compare(cfg, list(strategies), out_dir, **kwargs)


def write_report(report: ExperimentReport, out_dir) -> None:
    from .report import emit_report

    emit_report(report, out_dir, formats=("json", "csv"))


def load_checkpoint_for(cfg: RunConfig, path) -> Checkpoint:
    state, header = load_checkpoint(path)
    mcfg = model_config(cfg)
    if header["backbone"] != mcfg.backbone or header["dim"] != mcfg.dim:
        raise TrainingError("checkpoint backbone/dimension disagree with the config")
    return Checkpoint(state, state.copy(), mcfg, header.get("seed"))
