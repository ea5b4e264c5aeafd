"""End-to-end run: ingest, search (optionally staged), ensemble, reports, manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import sys
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import __version__
from .bma import Ensemble, averaged_occurrence, coclustering
from .config import RunConfig
from .data import ColumnRoles, Dataset, ingest
from .glm import Problem
from .metrics import default_search, evaluate
from .partition import Partition, PartitionSpace, log10_space_size
from .search import Evaluator, SearchResult, exhaustive_search, ga_search, sa_search, top_k

Progress = Callable[[dict], None]


class PipelineError(RuntimeError):
    def __init__(self, message: str, stage: str, manifest: dict):
        super().__init__(message)
        self.stage = stage
        self.manifest = manifest


def derive_seed(seed: int, name: str) -> int:
    """Stable 32-bit seed for a named sub-stream of the run seed."""
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def stderr_progress(event: dict) -> None:
    sys.stderr.write(json.dumps(event, sort_keys=True, default=float) + "\n")
    sys.stderr.flush()


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_data(cfg: RunConfig) -> Dataset:
    numeric = tuple(c for c in (cfg.response, cfg.weight, cfg.offset) if c)
    if cfg.severity_from:
        numeric = tuple(c for c in numeric if c != cfg.response)
    roles = ColumnRoles(
        factors=cfg.factor_names,
        numeric=numeric,
        exposure=cfg.exposure,
        vocabularies={f.name: f.levels for f in cfg.factors if f.levels is not None},
        severity_from=cfg.severity_from,
        severity_name=cfg.response,
        delimiter=cfg.delimiter,
    )
    return ingest(cfg.resolve(cfg.input), roles)


def _resolve_method(method: str, spaces: Mapping[str, PartitionSpace], ceiling: int) -> str:
    if method == "auto":
        return "exhaustive" if _space_size(spaces) <= ceiling else "sa"
    return method


def _search(ev: Evaluator, spaces: Mapping[str, PartitionSpace], method: str, cfg: RunConfig,
            name: str, progress: Progress | None, seeds: dict) -> SearchResult:
    method = _resolve_method(method, spaces, cfg.search.ceiling)
    if progress:
        progress({"event": "search_start", "stage": name, "method": method,
                  "log10_space": round(log10_space_size(list(spaces.values())), 4)})
    if method == "exhaustive":
        return exhaustive_search(ev, spaces, cfg.search.ceiling, progress)
    seed = seeds[f"{name}/{method}"] = derive_seed(cfg.seed, f"{name}/{method}")
    if method == "sa":
        return sa_search(ev, spaces, replace(cfg.search.sa, rng_seed=seed), progress)
    return ga_search(ev, spaces, replace(cfg.search.ga, rng_seed=seed), progress)


def staged_spaces(ev: Evaluator, cfg: RunConfig, progress: Progress | None,
                  seeds: dict) -> dict[str, PartitionSpace]:
    """Run each stage and pool the partitions it ranks best into per-factor shortlists.

    Every other factor sits at its identity partition while a stage runs.
    """
    full = ev.problem.spaces(cfg.collapsed)
    shortlist: dict[str, list[Partition]] = {}
    for i, stage in enumerate(cfg.stages):
        spaces = ev.problem.spaces([f for f in stage.factors if f in cfg.collapsed])
        ranked = _search(ev, spaces, stage.method, cfg, f"stage{i}", progress, seeds).ranked()
        for f in stage.factors:
            kept = shortlist.setdefault(f, [])
            fresh = []
            for m in ranked:
                if len(fresh) == stage.keep:
                    break
                if m.scheme[f] not in kept and m.scheme[f] not in fresh:
                    fresh.append(m.scheme[f])
            kept.extend(fresh)
    out = {}
    for f, space in full.items():
        if f in shortlist:
            out[f] = PartitionSpace(space.n, space.constraints, tuple(shortlist[f]))
        else:
            out[f] = space
    return out


def write_ranked(path: Path, ens: Ensemble, cfg: RunConfig) -> None:
    factors = list(cfg.collapsed)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", *factors, "graycode", "bic", "log_likelihood", "n_parameters", "weight"])
        for r, (m, wt) in enumerate(zip(ens.models, ens.weights), 1):
            parts = [m.scheme[f].set_notation(m.levels[f]) for f in factors]
            gray = "||".join(m.scheme[f].graycode() for f in factors)
            w.writerow([r, *parts, gray, f"{m.bic:.6f}", f"{m.log_likelihood:.6f}", m.p, f"{wt:.12g}"])


def write_coefficients(path: Path, ens: Ensemble, n_models: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "factor", "block", "levels", "estimate"])
        for r, m in enumerate(ens.models[:n_models], 1):
            for row in m.coefficient_table():
                w.writerow([r, row["factor"], row["block"], row["levels"], f"{row['estimate']:.10g}"])


def write_predictions(path: Path, ens: Ensemble, data: Dataset) -> None:
    frame = data.to_frame()
    frame["best_model"] = ens.best.predict(data)
    frame["ensemble"] = ens.predict(data)
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


@contextmanager
def _timed(timings: dict, name: str, state: dict):
    state["stage"] = name
    t0 = time.perf_counter()
    yield
    timings[name] = round(time.perf_counter() - t0, 6)


def run(cfg: RunConfig, output_dir: str | Path | None = None, progress: Progress | None = stderr_progress) -> dict:
    """Execute a configured run and return its manifest (also written to disk)."""
    out = Path(output_dir) if output_dir is not None else cfg.resolve(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    timings: dict[str, float] = {}
    state = {"stage": "ingest"}
    seeds = {"run": cfg.seed}
    outputs: list[Path] = []
    manifest = {
        "config_sha256": cfg.digest(),
        "library_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "started_unix": started,
        "seeds": seeds,
        "timings_seconds": timings,
        "status": "running",
    }

    def finish(status: str, error: str | None = None) -> dict:
        manifest["status"] = status
        manifest["wall_clock_seconds"] = round(time.time() - started, 6)
        if error is not None:
            manifest["failed_stage"] = state["stage"]
            manifest["error"] = error
        manifest["outputs"] = {p.name: sha256_file(p) for p in outputs}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return manifest

    try:
        with _timed(timings, "ingest", state):
            data = load_data(cfg)
            template = cfg.template(dict(data.levels))
            problem = Problem(data, template)
            ev = Evaluator(problem, cfg.threads)
        manifest["n_rows"] = data.n_rows
        if progress:
            progress({"event": "ingested", "rows": data.n_rows,
                      "levels": {f: len(v) for f, v in problem.levels.items()}})

        if cfg.stages:
            with _timed(timings, "stages", state):
                spaces = staged_spaces(ev, cfg, progress, seeds)
        else:
            spaces = problem.spaces(cfg.collapsed)
        with _timed(timings, "search", state):
            result = _search(ev, spaces, cfg.search.method, cfg, "search", progress, seeds)
        manifest["fits"] = ev.n_fits
        manifest["visited"] = len(result.visited)

        with _timed(timings, "ensemble", state):
            e = cfg.ensemble
            ens = Ensemble.from_models(top_k(result, k=e.k, mass=e.mass, window=e.window))
        manifest["ensemble_size"] = len(ens)

        with _timed(timings, "reports", state):
            p = out / "ranked_models.csv"
            write_ranked(p, ens, cfg)
            outputs.append(p)
            p = out / "coefficients.csv"
            write_coefficients(p, ens, cfg.coefficient_models)
            outputs.append(p)
            occurrence = {}
            for f in cfg.collapsed:
                sim = coclustering(ens, f)
                p = out / f"coclustering_{f}.csv"
                sim.to_csv(p)
                outputs.append(p)
                occurrence[f] = averaged_occurrence(ens, f)
            p = out / "coclustering_long.csv"
            with open(p, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["factor", "level_a", "level_b", "probability"])
                for f in cfg.collapsed:
                    for r in coclustering(ens, f).records():
                        w.writerow([r["factor"], r["level_a"], r["level_b"], f"{r['probability']:.10g}"])
            outputs.append(p)
            manifest["factor_inclusion_probability"] = occurrence
            if cfg.scoring:
                roles_cfg = replace(cfg, input=cfg.scoring, severity_from=None)
                score = _load_scoring(roles_cfg)
                p = out / "predictions.csv"
                write_predictions(p, ens, score)
                outputs.append(p)

        if cfg.evaluation is not None:
            with _timed(timings, "evaluation", state):
                ev_cfg = cfg.evaluation
                eseed = derive_seed(cfg.seed, "evaluation")
                seeds["evaluation"] = eseed
                method = _resolve_method(cfg.search.method, problem.spaces(cfg.collapsed), cfg.search.ceiling)
                search = default_search(
                    method,
                    replace(cfg.search.sa, rng_seed=derive_seed(cfg.seed, "evaluation/sa")),
                    replace(cfg.search.ga, rng_seed=derive_seed(cfg.seed, "evaluation/ga")),
                    cfg.collapsed,
                )
                report = evaluate(data, template, ev_cfg.methods, ev_cfg.reps, ev_cfg.fraction, eseed,
                                  search, ev_cfg.bins, ev_cfg.smoothing)
                p = out / "eval_report.csv"
                report.to_csv(p)
                outputs.append(p)
                manifest["evaluation_reps"] = report.reps
    except Exception as exc:
        m = finish("failed", f"{type(exc).__name__}: {exc}")
        raise PipelineError(str(exc), state["stage"], m) from exc
    return finish("ok")


def _space_size(spaces: Mapping[str, PartitionSpace]) -> int:
    size = 1
    for s in spaces.values():
        size *= s.size
    return size


def _load_scoring(cfg: RunConfig) -> Dataset:
    roles = ColumnRoles(
        factors=cfg.factor_names,
        numeric=tuple(c for c in (cfg.offset,) if c),
        exposure=cfg.exposure if cfg.family == "poisson" else None,
        vocabularies={f.name: f.levels for f in cfg.factors if f.levels is not None},
        delimiter=cfg.delimiter,
    )
    return ingest(cfg.resolve(cfg.input), roles)
