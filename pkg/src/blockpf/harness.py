"""Workflow driver: simulate, evaluate, search, refine, and sweep.

Each command is a pure function of its inputs and a seed, records a JSON
manifest with input digests, and writes plain CSV traces so runs can be
diffed and reproduced.  Replicated searches fan out over deterministic
per-replicate seed streams; refinement rounds restart from the top
quantile of evaluated parameter vectors.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .core import Model, PanelData, TimeGrid, simulate_panel, stream
from .filtering import bpf_run
from .params import (
    BlockPartition,
    ParameterLayout,
    expand_shared,
    save_params,
    theta_from_estimation,
    theta_to_estimation,
)
from .search import IbpfConfig, ibpf_run

__all__ = [
    "RunManifest",
    "EvalResult",
    "SearchRound",
    "cmd_simulate",
    "cmd_filter",
    "cmd_eval",
    "cmd_search",
    "cmd_refine",
    "spatreg_sweep",
]


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """What a command ran with; identical manifests reproduce identical outputs
    (timing fields aside)."""

    command: str
    seed: int
    args: dict
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: list = field(default_factory=list)
    wall_seconds: float = 0.0

    def add_inputs(self, *paths) -> None:
        for p in paths:
            if p is not None and Path(p).is_file():
                self.inputs[str(p)] = _digest(p)

    def save(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=2, default=str)
            fh.write("\n")
        return path


def _jitter_start(theta, layout: ParameterLayout, width: float, rng) -> np.ndarray:
    """Uniform +/- width shift of every flat coordinate on the estimation scale."""
    est = theta_to_estimation(theta, layout)
    est = est + rng.uniform(-width, width, size=est.shape)
    return theta_from_estimation(est, layout)


@dataclass
class EvalResult:
    """Mean and standard error of replicated fixed-parameter likelihoods."""

    loglik: float
    se: float
    replicates: np.ndarray

    def __iter__(self):
        return iter((self.loglik, self.se))


def cmd_eval(
    model: Model,
    data,
    theta,
    layout: ParameterLayout,
    n_particles: int,
    reps: int,
    seed=0,
    grid: TimeGrid | None = None,
    blocks: BlockPartition | None = None,
) -> EvalResult:
    """Replicated block-filter evaluation at fixed parameters."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    vals = np.array(
        [
            bpf_run(
                model,
                data,
                grid=grid,
                params=theta,
                layout=layout,
                n_particles=n_particles,
                blocks=blocks,
                seed=(seed, r),
            ).loglik
            for r in range(reps)
        ]
    )
    se = float(vals.std(ddof=1) / np.sqrt(reps)) if reps > 1 else 0.0
    return EvalResult(float(vals.mean()), se, vals)


def cmd_simulate(
    model: Model,
    layout: ParameterLayout,
    theta,
    grid: TimeGrid,
    seed: int,
    out_dir,
    units: tuple[str, ...] | None = None,
) -> PanelData:
    """Simulate a case panel, writing cases.csv, truth_params.json, manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    pm = expand_shared(theta, layout)
    panel = simulate_panel(model, pm, grid, seed=seed, units=units)
    panel.save_csv(out_dir / "cases.csv")
    save_params(out_dir / "truth_params.json", pm)
    manifest = RunManifest(
        command="simulate",
        seed=int(seed),
        args={"t0": grid.t0, "n_obs": grid.n_obs, "dt": grid.dt},
        outputs=["cases.csv", "truth_params.json"],
        wall_seconds=time.perf_counter() - start,
    )
    manifest.save(out_dir)
    return panel


def cmd_filter(
    model: Model,
    data,
    theta,
    layout: ParameterLayout,
    n_particles: int,
    seed: int,
    out_dir,
    grid: TimeGrid | None = None,
    blocks: BlockPartition | None = None,
):
    """One block-filter run at fixed parameters; writes the (n, block) trace."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    result = bpf_run(
        model,
        data,
        grid=grid,
        params=theta,
        layout=layout,
        n_particles=n_particles,
        blocks=blocks,
        seed=seed,
    )
    result.save_csv(out_dir / "filter_trace.csv")
    (out_dir / "filter_result.json").write_text(result.to_json() + "\n")
    manifest = RunManifest(
        command="filter",
        seed=int(seed),
        args={"n_particles": n_particles, "loglik": result.loglik},
        outputs=["filter_trace.csv", "filter_result.json"],
        wall_seconds=time.perf_counter() - start,
    )
    manifest.save(out_dir)
    return result


@dataclass
class ReplicateRecord:
    index: int
    start_theta: list
    final_theta: list
    start_loglik: float
    start_se: float
    eval_loglik: float
    eval_se: float
    failed: bool = False
    error: str = ""


@dataclass
class SearchRound:
    """One round of replicated searches with evaluated final parameters."""

    round_index: int
    replicates: list
    config: dict
    parent_rule: dict = field(default_factory=dict)

    def completed(self) -> list:
        return [r for r in self.replicates if not r.failed]

    def best(self) -> ReplicateRecord:
        done = self.completed()
        if not done:
            raise ValueError("round has no completed replicates")
        return max(done, key=lambda r: r.eval_loglik)

    def top_fraction(self, q: float) -> list:
        done = sorted(self.completed(), key=lambda r: -r.eval_loglik)
        if not done:
            raise ValueError("round has no completed replicates")
        keep = max(1, int(np.ceil(q * len(done))))
        return done[:keep]

    def save(self, path) -> None:
        doc = {
            "round_index": self.round_index,
            "config": self.config,
            "parent_rule": self.parent_rule,
            "replicates": [r.__dict__ for r in self.replicates],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SearchRound":
        with open(path) as fh:
            doc = json.load(fh)
        reps = [ReplicateRecord(**r) for r in doc["replicates"]]
        return cls(doc["round_index"], reps, doc["config"], doc.get("parent_rule", {}))


def _replicate_worker(task) -> ReplicateRecord:
    """Run one search replicate end to end; failures are recorded, not raised."""
    (model, data, grid, config, layout, start_theta, seed_key, eval_particles,
     eval_reps, out_dir, rep_index) = task
    try:
        start = time.perf_counter()
        result = ibpf_run(
            model, data, grid=grid, config=config, theta=start_theta, layout=layout,
            seed=seed_key,
        )
        wall = time.perf_counter() - start
        final_theta = result.final_estimate

        M = len(result.logliks)
        trace = pd.DataFrame(
            {
                "iteration": np.arange(1, M + 1),
                "loglik": result.logliks,
                "wall_seconds": np.full(M, wall / M),
            }
        )
        trace.to_csv(out_dir / f"trace_{rep_index:03d}.csv", index=False)
        ptrace = pd.DataFrame(result.estimates, columns=layout.flat_names())
        ptrace.insert(0, "iteration", np.arange(1, M + 1))
        ptrace.to_csv(out_dir / f"params_{rep_index:03d}.csv", index=False)
        shared_names = [layout.entries[d].name for d in layout.shared_cols]
        strace = pd.DataFrame(result.shared_spread, columns=shared_names)
        strace.insert(0, "iteration", np.arange(1, M + 1))
        strace.to_csv(out_dir / f"spread_{rep_index:03d}.csv", index=False)
        save_params(out_dir / f"swarm_{rep_index:03d}.json", result.swarm.mean_matrix())

        start_eval = cmd_eval(
            model, data, start_theta, layout, eval_particles, eval_reps,
            seed=(*seed_key, 1, 0), grid=grid, blocks=config.blocks,
        )
        final_eval = cmd_eval(
            model, data, final_theta, layout, eval_particles, eval_reps,
            seed=(*seed_key, 1, 1), grid=grid, blocks=config.blocks,
        )
        return ReplicateRecord(
            index=rep_index,
            start_theta=[float(v) for v in start_theta],
            final_theta=[float(v) for v in final_theta],
            start_loglik=start_eval.loglik,
            start_se=start_eval.se,
            eval_loglik=final_eval.loglik,
            eval_se=final_eval.se,
        )
    except Exception as exc:
        return ReplicateRecord(
            index=rep_index,
            start_theta=[float(v) for v in start_theta],
            final_theta=[],
            start_loglik=float("nan"),
            start_se=float("nan"),
            eval_loglik=float("-inf"),
            eval_se=float("nan"),
            failed=True,
            error=f"{type(exc).__name__}: {exc}",
        )


def cmd_search(
    model: Model,
    data,
    layout: ParameterLayout,
    config: IbpfConfig,
    theta0=None,
    start_thetas=None,
    n_replicates: int | None = None,
    seed: int = 0,
    out_dir=None,
    grid: TimeGrid | None = None,
    jitter: float = 0.1,
    eval_particles: int | None = None,
    eval_reps: int = 5,
    round_index: int = 1,
    workers: int = 1,
) -> SearchRound:
    """Replicated searches from jittered (or explicitly given) starting points.

    Each replicate gets its own seed stream; starting points are ``theta0``
    shifted by uniform(-jitter, jitter) on the estimation scale, unless
    ``start_thetas`` supplies them directly.  Every replicate's start and
    final parameters are re-evaluated with the fixed-parameter filter, and
    those evaluated likelihoods (not the perturbed-model search trace)
    rank the round.  ``workers > 1`` fans replicates over processes;
    results are identical either way because each replicate is a pure
    function of its seed.
    """
    out_dir = Path(out_dir if out_dir is not None else ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    begin = time.perf_counter()
    if start_thetas is None:
        if theta0 is None or n_replicates is None:
            raise ValueError("need theta0 and n_replicates, or explicit start_thetas")
        start_thetas = [
            theta0 if jitter == 0 else _jitter_start(
                theta0, layout, jitter, stream(seed, 2, r)
            )
            for r in range(n_replicates)
        ]
    n_replicates = len(start_thetas)
    if eval_particles is None:
        eval_particles = 2 * config.n_particles

    tasks = [
        (model, data, grid, config, layout, np.asarray(start_theta, dtype=float),
         (seed, 0, r), eval_particles, eval_reps, out_dir, r)
        for r, start_theta in enumerate(start_thetas)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_replicate_worker, tasks))
    else:
        records = [_replicate_worker(t) for t in tasks]

    sigma = config.sigma if not hasattr(config.sigma, "sigma") else "schedule"
    round_ = SearchRound(
        round_index=round_index,
        replicates=records,
        config={
            "n_particles": config.n_particles,
            "n_iterations": config.n_iterations,
            "sigma": sigma,
            "cooling_rate": config.cooling_rate,
            "spat_reg": config.spat_reg,
            "eval_particles": eval_particles,
            "eval_reps": eval_reps,
            "jitter": jitter,
        },
    )
    round_.save(out_dir / "round.json")
    manifest = RunManifest(
        command="search",
        seed=int(seed),
        args={"n_replicates": n_replicates, "round_index": round_index},
        outputs=sorted(p.name for p in out_dir.iterdir()),
        wall_seconds=time.perf_counter() - begin,
    )
    manifest.save(out_dir)
    return round_


def cmd_refine(
    previous: SearchRound,
    model: Model,
    data,
    layout: ParameterLayout,
    config: IbpfConfig,
    q: float = 0.25,
    k: int = 4,
    seed: int = 0,
    out_dir=None,
    grid: TimeGrid | None = None,
    eval_particles: int | None = None,
    eval_reps: int = 5,
    workers: int = 1,
) -> SearchRound:
    """Spawn k fresh-seeded copies of each top-q parent from the last round."""
    if len(previous.completed()) < 1.0 / q:
        raise ValueError(
            f"refinement needs at least {int(np.ceil(1 / q))} completed replicates"
        )
    parents = previous.top_fraction(q)
    starts = [np.asarray(p.final_theta, dtype=float) for p in parents for _ in range(k)]
    round_ = cmd_search(
        model,
        data,
        layout,
        config,
        start_thetas=starts,
        seed=seed,
        out_dir=out_dir,
        grid=grid,
        jitter=0.0,
        eval_particles=eval_particles,
        eval_reps=eval_reps,
        round_index=previous.round_index + 1,
        workers=workers,
    )
    round_.parent_rule = {
        "q": q,
        "k": k,
        "parents": [p.index for p in parents],
        "previous_round": previous.round_index,
    }
    if out_dir is not None:
        round_.save(Path(out_dir) / "round.json")
    return round_


def spatreg_sweep(
    model: Model,
    data,
    layout: ParameterLayout,
    config: IbpfConfig,
    theta0,
    spat_reg_values,
    reps_per_value: int,
    seed: int = 0,
    out_dir=None,
    grid: TimeGrid | None = None,
    jitter: float = 0.1,
) -> pd.DataFrame:
    """Sensitivity grid over the spatial autoregression coefficient.

    Runs ``reps_per_value`` independent searches at each coefficient and
    reports the final perturbed-model log-likelihood of each.
    """
    rows = []
    for i, s in enumerate(spat_reg_values):
        cfg = replace(config, spat_reg=float(s))
        for r in range(reps_per_value):
            start = (
                theta0
                if jitter == 0
                else _jitter_start(theta0, layout, jitter, stream(seed, 3, i, r))
            )
            result = ibpf_run(
                model, data, grid=grid, config=cfg, theta=start, layout=layout,
                seed=(seed, i, r),
            )
            rows.append(
                {"spat_reg": float(s), "replicate": r, "loglik": result.logliks[-1]}
            )
    frame = pd.DataFrame(rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out_dir / "spatreg_sweep.csv", index=False)
    return frame
