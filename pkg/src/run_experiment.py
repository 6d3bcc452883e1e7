"""
Sweep runner and artifact writers.

Layout under the output directory:

    metadata.json
    cell_M{M}_T{T}/run_seed{seed}.csv     one per seed
    cell_M{M}_T{T}/aggregate.csv          mean / stderr of the normalized gap per iteration

Cells run in separate processes when workers > 1; each cell writes only its own directory
and the aggregate files are written by the coordinator after all cells return.
"""

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from config import KALGRAD_VERSION, WORKERS
from filtering import steady_state_gain
from learner import gd_run, initial_gain, sgd_run
from objective import cost_J

logger = logging.getLogger(__name__)

RUN_COLUMNS = ["iter", "J", "J_gap", "J_gap_normalized", "grad_norm", "rho",
               "eta_effective", "safeguard_flag", "wall_ms"]
AGGREGATE_COLUMNS = ["iter", "mean_gap_normalized", "stderr_gap_normalized", "runs"]


@dataclass(frozen=True)
class CellResult:
    batch_size: int
    horizon: int
    directory: str
    run_files: tuple
    normalized_gaps: tuple
    safeguard_events: int


@dataclass(frozen=True)
class ExperimentResult:
    directory: str
    metadata_path: str
    cells: tuple


# ==========================================
# 🧾 WRITERS
# ==========================================

def _num(value):
    return repr(float(value))


def write_json(path, payload):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def write_run_csv(path, record):
    gaps = record.gaps if record.j_star is not None else np.full(len(record), np.nan)
    normalized = record.normalized_gaps if record.j_star is not None else gaps
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(RUN_COLUMNS)
        for k in range(len(record)):
            writer.writerow([
                k,
                _num(record.costs[k]),
                _num(gaps[k]),
                _num(normalized[k]),
                _num(record.grad_norms[k]),
                _num(record.rhos[k]),
                _num(record.step_sizes[k]),
                record.rejections[k],
                _num(1000.0 * record.wall_times[k]),
            ])
    return path


def aggregate_gaps(curves):
    """Per-iteration mean and standard error over equally long curves."""
    stack = np.asarray(curves, dtype=float)
    mean = stack.mean(axis=0)
    if stack.shape[0] > 1:
        stderr = stack.std(axis=0, ddof=1) / np.sqrt(stack.shape[0])
    else:
        stderr = np.zeros_like(mean)
    return mean, stderr


def write_aggregate_csv(path, mean, stderr, runs):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(AGGREGATE_COLUMNS)
        for k, (m, s) in enumerate(zip(mean, stderr)):
            writer.writerow([k, _num(m), _num(s), runs])
    return path


# ==========================================
# 🎯 ORACLE + START
# ==========================================

def oracle_summary(model):
    gain, P_inf = steady_state_gain(model)
    return {
        "L_star": gain.L.tolist(),
        "P_inf": P_inf.tolist(),
        "rho": gain.rho,
        "J_star": cost_J(model, gain),
    }


def start_gain(cfg):
    return initial_gain(
        cfg.model.A, cfg.model.H, cfg.init.strategy, cfg.init.gain,
        cfg.init.surrogate_q, cfg.init.surrogate_r,
    )


# ==========================================
# 🏃 SINGLE RUN
# ==========================================

def run_learn(cfg, method=None):
    """One sgd or gd run from the config. Returns (record, written paths)."""
    method = method or cfg.method
    L0 = start_gain(cfg)
    timing = cfg.output.record_timing
    if method == "gd":
        record = gd_run(cfg.model, L0, tol=cfg.tol, max_iters=cfg.sgd.max_iters,
                        record_timing=timing)
    else:
        record = sgd_run(cfg.model, cfg.noise, L0, cfg.sgd, oracle=cfg.model,
                         record_timing=timing)

    stem = f"learn_{method}_seed{cfg.sgd.seed}"
    paths = []
    if "csv" in cfg.output.formats:
        paths.append(write_run_csv(os.path.join(cfg.output.directory, f"{stem}.csv"), record))
    if "json" in cfg.output.formats:
        summary = {
            "method": method,
            "seed": cfg.sgd.seed,
            "iterations": len(record) - 1,
            "stop_reason": record.stop_reason,
            "L0": L0.L.tolist(),
            "L_final": record.final.L.tolist(),
            "J_final": record.costs[-1],
            "J_star": record.j_star,
            "normalized_gap_final": float(record.normalized_gaps[-1]),
            "safeguard_events": len(record.safeguard_events),
            "config_hash": cfg.config_hash,
            "version": KALGRAD_VERSION,
        }
        paths.append(write_json(os.path.join(cfg.output.directory, f"{stem}.json"), summary))
    return record, paths


# ==========================================
# 🧪 SWEEP
# ==========================================

def _cell_dir(root, M, T):
    return os.path.join(root, f"cell_M{M}_T{T}")


def _run_cell(task):
    cfg, L0, M, T = task
    directory = _cell_dir(cfg.output.directory, M, T)
    os.makedirs(directory, exist_ok=True)

    files, curves, events = [], [], 0
    for seed in cfg.sweep.seeds:
        sgd_cfg = replace(cfg.sgd, batch_size=M, horizon=T, seed=seed)
        record = sgd_run(cfg.model, cfg.noise, L0, sgd_cfg, oracle=cfg.model,
                         record_timing=cfg.output.record_timing)
        if "csv" in cfg.output.formats:
            files.append(write_run_csv(os.path.join(directory, f"run_seed{seed}.csv"), record))
        curves.append(tuple(float(v) for v in record.normalized_gaps))
        events += len(record.safeguard_events)
    logger.info("cell M=%d T=%d done (%d seeds)", M, T, len(cfg.sweep.seeds))
    return CellResult(M, T, directory, tuple(files), tuple(curves), events)


def run_experiment(cfg, workers=None):
    """
    sgd_run for every (M, T) cell and seed of the sweep, then per-cell aggregates and a
    metadata JSON. Output is a pure function of the config and seeds unless record_timing
    is on.
    """
    workers = workers or cfg.sgd.workers or WORKERS
    root = cfg.output.directory
    os.makedirs(root, exist_ok=True)

    L0 = start_gain(cfg)
    oracle = oracle_summary(cfg.model)
    tasks = [(cfg, L0, M, T) for M in cfg.sweep.batch_sizes for T in cfg.sweep.horizons]
    logger.info("running %d cells x %d seeds in %s", len(tasks), len(cfg.sweep.seeds), root)

    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell, tasks))
    else:
        cells = [_run_cell(task) for task in tasks]

    cell_meta = []
    for cell in cells:
        mean, stderr = aggregate_gaps(cell.normalized_gaps)
        entry = {
            "batch_size": cell.batch_size,
            "horizon": cell.horizon,
            "runs": [os.path.relpath(p, root) for p in cell.run_files],
            "final_mean_gap_normalized": float(mean[-1]),
            "safeguard_events": cell.safeguard_events,
        }
        if "csv" in cfg.output.formats:
            path = write_aggregate_csv(os.path.join(cell.directory, "aggregate.csv"),
                                       mean, stderr, len(cell.normalized_gaps))
            entry["aggregate"] = os.path.relpath(path, root)
        cell_meta.append(entry)

    metadata = {
        "version": KALGRAD_VERSION,
        "config_hash": cfg.config_hash,
        "config": cfg.raw,
        "seeds": list(cfg.sweep.seeds),
        "L0": L0.L.tolist(),
        "L_star": oracle["L_star"],
        "J_star": oracle["J_star"],
        "J0": cost_J(cfg.model, L0),
        "normalized_gap": "(J(L_k) - J(L*)) / (J(L_0) - J(L*))",
        "cells": cell_meta,
    }
    meta_path = write_json(os.path.join(root, "metadata.json"), metadata)
    return ExperimentResult(directory=root, metadata_path=meta_path, cells=tuple(cells))
