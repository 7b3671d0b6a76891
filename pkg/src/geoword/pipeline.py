"""End-to-end index construction: estimator fitting, bottom clustering,
level packing, and final assembly, with per-stage wall timings, artifacts
written after every completed stage, and deterministic outputs for a fixed
seed and config.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Any

from .cdfs import (
    ExactCountEstimator,
    ModelEstimator,
    build_keyword_models,
    save_models,
)
from .config import RunConfig, config_hash
from .core import (
    Dataset,
    Workload,
    generate_workload,
    load_dataset,
    load_workload,
    stratified_sample,
)
from .index import (
    GeoWordIndex,
    RetrainConfig,
    assemble_index,
    select_hierarchy_depth,
    serialize_index,
    structural_hash,
)
from .itemsets import mine_frequent_itemsets
from .packing import build_hierarchy
from .partition import generate_bottom_clusters, save_clusters

log = logging.getLogger(__name__)

STAGES = ("models", "clusters", "hierarchy", "index")


class StageFailure(RuntimeError):
    """A pipeline stage died; earlier stages' artifacts remain on disk."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"build stage {stage!r} failed: {cause}")
        self.stage = stage


def load_inputs(cfg: RunConfig) -> tuple[Dataset, Workload]:
    """Dataset from ``cfg.dataset``; workload from ``cfg.workload`` if set,
    otherwise generated from ``cfg.workload_spec``."""
    if not cfg.dataset:
        raise ValueError("config has no dataset path")
    fmt = "jsonl" if cfg.dataset.endswith((".jsonl", ".ndjson")) else "csv"
    ds = load_dataset(cfg.dataset, fmt=fmt)
    if cfg.workload:
        w = load_workload(cfg.workload, ds)
    else:
        w = generate_workload(ds, cfg.workload_spec)
    return ds, w


def make_estimator_factory(cfg: RunConfig):
    """How retrains rebuild their estimator for a (possibly grown) dataset."""
    if cfg.estimator == "exact":
        return ExactCountEstimator

    def factory(ds: Dataset) -> ModelEstimator:
        table = mine_frequent_itemsets(ds, cfg.cdf.min_support,
                                       cfg.cdf.max_itemset_size)
        return ModelEstimator(build_keyword_models(ds, cfg.cdf, table), table)

    return factory


def build_index(cfg: RunConfig, ds: Dataset, w: Workload,
                out_dir: str | Path | None = None,
                ) -> tuple[GeoWordIndex, dict[str, Any]]:
    """Run the four build stages and return the index plus build metrics.

    Stages: fit the selectivity estimator, learn bottom clusters (on a
    stratified workload sample when ``sampling_ratio`` < 1), pack and select
    hierarchy levels (pre-grouped when ``clustering_ratio`` < 1), assemble
    and serialize.  With ``out_dir`` set, each stage's artifact is written
    as soon as the stage completes — models.json, clusters.json, index.json,
    and build_metrics.json — so a failing stage (raised as StageFailure,
    naming the stage) leaves everything before it on disk.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics: dict[str, Any] = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "stages": {},
    }

    def run_stage(name: str, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            metrics["failed_stage"] = name
            _write_metrics(out, metrics)
            raise StageFailure(name, exc) from exc
        metrics["stages"][name] = time.perf_counter() - t0
        return result

    def stage_models():
        cdf = replace(cfg.cdf, seed=cfg.seed)
        if cfg.estimator == "models":
            table = mine_frequent_itemsets(ds, cdf.min_support,
                                           cdf.max_itemset_size)
            models = build_keyword_models(ds, cdf, table)
            if out is not None:
                save_models(models, table, str(out / "models.json"))
            return ModelEstimator(models, table)
        return ExactCountEstimator(ds)

    est = run_stage("models", stage_models)

    def stage_clusters():
        train = w
        if cfg.sampling_ratio < 1.0:
            train = stratified_sample(w, cfg.sampling_ratio, seed=cfg.seed)
        clusters = generate_bottom_clusters(
            ds, train, est, cfg.weights, cfg.limits,
            replace(cfg.sgd, seed=cfg.seed))
        if out is not None:
            save_clusters(clusters, str(out / "clusters.json"))
        return train, clusters

    train_w, clusters = run_stage("clusters", stage_clusters)
    metrics["n_clusters"] = len(clusters)
    metrics["sampled_queries"] = len(train_w.queries)

    def stage_hierarchy():
        rl = replace(cfg.rl, group_ratio=cfg.clustering_ratio)
        levels = build_hierarchy(clusters, train_w, rl, seed=cfg.seed)
        return select_hierarchy_depth(clusters, levels, ds, w)

    levels = run_stage("hierarchy", stage_hierarchy)
    metrics["levels"] = [len(l) for l in levels]

    def stage_index():
        retrain = RetrainConfig(
            weights=cfg.weights, limits=cfg.limits, sgd=cfg.sgd,
            rl=replace(cfg.rl, group_ratio=cfg.clustering_ratio),
            seed=cfg.seed, estimator_factory=make_estimator_factory(cfg))
        idx = assemble_index(clusters, levels, ds, workload=w,
                             buffer_capacity=cfg.buffer_capacity,
                             retrain=retrain)
        if out is not None:
            serialize_index(idx, str(out / "index.json"))
        return idx

    idx = run_stage("index", stage_index)
    metrics["total_seconds"] = sum(metrics["stages"].values())
    metrics["structural_hash"] = structural_hash(idx)
    _write_metrics(out, metrics)
    return idx, metrics


def _write_metrics(out: Path | None, metrics: dict[str, Any]) -> None:
    if out is not None:
        with open(out / "build_metrics.json", "w") as f:
            json.dump(metrics, f, indent=2, sort_keys=True)
