"""Stage orchestration, persistence and run manifests.

A run directory holds CSV data files and JSON reports, each stamped with
the schema version and the manifest hash.  The hash covers the config
snapshot, the seed set and the library versions, but not timestamps, so a
replay of the same manifest produces byte-identical outputs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import scipy

from . import __version__
from .base import NoisePath, _distinct_seeds
from .cocycle import BlowUpError, CylinderState, trajectory
from .config import STAGES, ConfigError, load_config, model_params, validate
from .curves import (
    ExtractionError,
    extract_curves,
    verify_period_shift_invariance,
    verify_random_periodicity,
)
from .invariant import cluster_labels, pullback_attractor
from .lyapunov import (
    estimate_spectrum,
    extremal_exponent,
    fit_adjusted_variable,
    semiuniform_records,
)
from .models import zoo_entry

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEPENDS = {"curves": ("attractor",), "verify": ("attractor", "curves"), "lyapunov": (), "attractor": (), "simulate": ()}


class IncompatibleRunsError(ValueError):
    pass


def _versions() -> dict:
    return {
        "randperiodic": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def manifest_hash(config: Mapping, seeds, versions: Mapping) -> str:
    payload = {"config": dict(config), "seeds": list(seeds), "versions": dict(versions)}
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunManifest:
    config: dict
    seeds: list
    versions: dict
    hash: str
    run_dir: str = ""
    started: str = ""
    finished: str = ""
    outputs: dict = field(default_factory=dict)
    acceptance: dict = field(default_factory=dict)
    resolved: dict = field(default_factory=dict)
    completed: list = field(default_factory=list)
    failed_stage: Optional[str] = None
    error: Optional[str] = None
    crashed: bool = False
    results: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.failed_stage is None and all(self.acceptance.values())

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "manifest_hash": self.hash,
            "config": self.config,
            "seeds": self.seeds,
            "versions": self.versions,
            "timestamps": {"started": self.started, "finished": self.finished},
            "outputs": self.outputs,
            "acceptance": self.acceptance,
            "resolved": self.resolved,
            "completed": self.completed,
            "failed_stage": self.failed_stage,
            "error": self.error,
            "crashed": self.crashed,
            "results": self.results,
        }

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as fh:
            d = json.load(fh)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError("manifest", f"unsupported schema version {d.get('schema_version')}")
        m = cls(d["config"], d["seeds"], d["versions"], d["manifest_hash"])
        m.run_dir = str(Path(path).parent)
        m.started = d["timestamps"]["started"]
        m.finished = d["timestamps"]["finished"]
        m.outputs = d["outputs"]
        m.acceptance = d["acceptance"]
        m.resolved = d["resolved"]
        m.completed = d["completed"]
        m.failed_stage = d["failed_stage"]
        m.error = d["error"]
        m.crashed = d.get("crashed", False)
        m.results = d["results"]
        return m


# --- writers ----------------------------------------------------------------


class RunWriter:
    def __init__(self, run_dir: Path, manifest: RunManifest):
        self.dir = run_dir
        self.manifest = manifest

    def csv(self, name: str, header, rows) -> None:
        buf = io.StringIO()
        buf.write(f"# schema_version={SCHEMA_VERSION} manifest_hash={self.manifest.hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        self._write(name, buf.getvalue())

    def json(self, name: str, obj) -> None:
        body = {"schema_version": SCHEMA_VERSION, "manifest_hash": self.manifest.hash, **obj}
        self._write(name, json.dumps(body, indent=2, sort_keys=True) + "\n")

    def _write(self, name: str, text: str) -> None:
        path = self.dir / name
        path.write_text(text)
        self.manifest.outputs[name] = _sha(path)


def new_run_dir(out: Path) -> Path:
    """Next free ``run-NNN`` directory under ``out``; existing runs are never touched."""
    out.mkdir(parents=True, exist_ok=True)
    i = 1
    while True:
        cand = out / f"run-{i:03d}"
        try:
            cand.mkdir()
            return cand
        except FileExistsError:
            i += 1


# --- stages -----------------------------------------------------------------


def _system(cfg):
    try:
        entry = zoo_entry(cfg["model.name"])
    except KeyError as exc:
        raise ConfigError("model.name", str(exc)) from exc
    try:
        return entry.system(**model_params(cfg))
    except TypeError as exc:
        raise ConfigError("model.param", str(exc)) from exc


def _cloud_task(task):
    cfg, seed, shift_periods = task
    sys = _system(cfg)
    path = NoisePath(seed, sys.h, sys.noise_dim).shift_slots(shift_periods * sys.steps_per_period)
    return pullback_attractor(
        sys,
        path,
        (cfg["attractor.box_lower"], cfg["attractor.box_upper"]),
        cfg["attractor.grid"],
        cfg["attractor.horizon"],
        nbins=cfg["attractor.nbins"],
        tol_K=cfg["attractor.tol_K"],
    )


def _clouds(cfg, tasks):
    tasks = [(cfg, s, k) for s, k in tasks]
    if cfg["run.workers"] > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(cfg["run.workers"]) as pool:
            return list(pool.map(_cloud_task, tasks))
    return [_cloud_task(t) for t in tasks]


class Pipeline:
    def __init__(self, cfg: dict, writer: RunWriter):
        self.cfg = cfg
        self.w = writer
        self.m = writer.manifest
        self.sys = _system(cfg)
        self.seed = self.m.seeds[0]
        self.path = NoisePath(self.seed, self.sys.h, self.sys.noise_dim)
        self.cloud = None
        self.curve_set = None

    def simulate(self):
        c = self.cfg
        x0 = np.asarray(c["simulate.x0"], dtype=float)
        if x0.shape != (self.sys.dim,):
            raise ConfigError("simulate.x0", f"expected {self.sys.dim} components")
        rows = trajectory(self.sys, c["simulate.horizon"], self.path, CylinderState(c["simulate.s0"], x0), c["simulate.every"])
        if c["output.trajectory"]:
            head = ["t", "s"] + [f"x{i + 1}" for i in range(self.sys.dim)]
            self.w.csv("trajectory.csv", head, rows.tolist())
        final = rows[-1]
        res = {"t": float(final[0]), "s": float(final[1]), "x": final[2:].tolist()}
        self.w.json("simulate.json", {"final": res, "steps": int(len(rows) - 1) * c["simulate.every"]})
        self.m.results["simulate"] = res
        return True

    def attractor(self):
        self.cloud = _clouds(self.cfg, [(self.seed, 0)])[0]
        cl = self.cloud
        self.m.resolved["attractor.tol_K"] = cl.tol_K
        gap = self._gap()
        ids = np.zeros(len(cl), dtype=int)
        idx = cl.bin_index
        for j in range(cl.nbins):
            rows = np.flatnonzero(idx == j)
            ids[rows] = cluster_labels(cl.x[rows], gap)
        head = ["s_bin"] + [f"x{i + 1}" for i in range(cl.dim)] + ["cluster_id"]
        self.w.csv("cloud.csv", head, ([int(b), *map(float, x), int(k)] for b, x, k in zip(idx, cl.x, ids)))
        info = {
            "seed": self.seed,
            "T": cl.horizon,
            "bin_width": cl.bin_width,
            "tol_K": cl.tol_K,
            "convergence_gap": cl.convergence_gap,
            "accepted": cl.accepted,
        }
        self.w.json("attractor.json", info)
        self.m.results["attractor"] = info
        return cl.accepted

    def _gap(self):
        gap = self.cfg["curves.gap"]
        gap = self.cloud.tol_K if gap is None else gap
        self.m.resolved["curves.gap"] = gap
        return gap

    def lyapunov(self):
        c = self.cfg
        sys = self.sys
        seeds = self.m.seeds[: c["lyapunov.paths"]]
        paths = [NoisePath(s, sys.h, sys.noise_dim) for s in seeds]
        z = CylinderState(c["simulate.s0"], np.zeros(sys.dim) if self.cloud is None else self.cloud.x[0])
        n_steps = sys.steps(c["lyapunov.horizon"])
        spec = estimate_spectrum(sys, paths, z, n_steps, c["lyapunov.qr_stride"], check_pre=False)
        lam_p = c["lyapunov.lambda_prime"]
        lam = c["lyapunov.lambda"]
        lam = max(0.0, lam_p + 1.0) if lam is None else lam
        self.m.resolved["lyapunov.lambda"] = lam
        cloud_seeds = self.m.seeds[: c["lyapunov.cloud_paths"]]
        clouds = _clouds(c, [(s, 0) for s in cloud_seeds])
        grid = c["lyapunov.n_grid"]
        ext = extremal_exponent(sys, clouds, grid, per_bin=c["lyapunov.per_bin"], bins=c["lyapunov.bins"])
        recs = semiuniform_records(sys, clouds, grid, per_bin=c["lyapunov.per_bin"], bins=c["lyapunov.bins"])
        rep = fit_adjusted_variable(recs, lam_p, lam)
        self.m.resolved["lyapunov.semiuniform_slack"] = rep.slack
        out = {
            "model": c["model.name"],
            "seed_set": seeds,
            "exponents": spec.exponents.tolist(),
            "stderr": spec.stderr.tolist(),
            "extremal": ext.value,
            "extremal_rates": ext.rates.tolist(),
            "semiuniform": rep.to_dict(),
            "note": "exponents are time averages along sampled orbits; other invariant measures on K are not visited",
        }
        self.w.json("lyapunov.json", out)
        self.m.results["lyapunov"] = {"exponents": out["exponents"], "stderr": out["stderr"], "extremal": ext.value, "vacuous": rep.vacuous}
        return rep.passed

    def _extract(self, cloud):
        c = self.cfg
        return extract_curves(
            cloud,
            c["curves.strips"],
            gap=self._gap(),
            jump_threshold=c["curves.jump_threshold"],
            tol_match=c["curves.tol_match"],
        )

    def curves(self):
        self.curve_set = self._extract(self.cloud)
        cs = self.curve_set
        self.m.resolved["curves.jump_threshold"] = cs.jump_threshold
        self.m.resolved["curves.tol_match"] = cs.tol_match
        head = ["curve_id", "s_lift"] + [f"x{i + 1}" for i in range(self.cloud.dim)]
        self.w.csv("curves.csv", head, cs.rows())
        info = {**cs.summary(), "merged_bins": list(cs.merged_bins)}
        self.w.json("curves.json", info)
        self.m.results["curves"] = info
        return True

    def verify(self):
        c = self.cfg
        k = c["verify.k"]
        if k < 1:
            raise ConfigError("verify.k", "must be >= 1")
        # every j <= k is checked so the smallest passing multiple of the period is known
        shifts = list(range(1, k + 1)) + [k + i for i in range(1, c["verify.shifts"] + 1)]
        clouds = _clouds(c, [(self.seed, -s) for s in shifts])
        prev_sets = dict(zip(shifts, (self._extract(cl) for cl in clouds)))
        tol = c["verify.tol_period"]
        reports = {j: verify_random_periodicity(self.sys, self.curve_set, prev_sets[j], j, tol) for j in range(1, k + 1)}
        rep = reports[k]
        self.m.resolved["verify.tol_period"] = rep.tol_period
        smallest = next((j for j, r in reports.items() if r.passed), None)
        inv = [verify_period_shift_invariance(self.curve_set, cs) for cs in prev_sets.values()]
        out = {
            **rep.to_dict(),
            "shift_invariance": [bool(r) for r in inv],
            "shifts": shifts,
            "smallest_passing_k": smallest,
            "smallest_k_note": "depends on tol_period; checked only at whole periods",
        }
        self.w.json("verify.json", out)
        self.m.results["verify"] = {
            "pass": rep.passed,
            "residuals": out["residuals"],
            "shift_invariance": out["shift_invariance"],
            "smallest_passing_k": smallest,
        }
        return rep.passed and all(inv)


def _plan(stages) -> list:
    want = set(stages)
    for s in list(want):
        want.update(DEPENDS[s])
    return [s for s in STAGES if s in want]


def run_pipeline(config, out_dir, *, seed: Optional[int] = None, workers: Optional[int] = None, stages=None) -> RunManifest:
    """Validate ``config`` (path or mapping), run the requested stages, write a run directory."""
    if isinstance(config, Mapping):
        cfg = validate(config)
    else:
        cfg = load_config(config)
    if seed is not None:
        cfg["run.seed"] = int(seed)
    if workers is not None:
        cfg["run.workers"] = int(workers)
    if stages is not None:
        cfg["run.stages"] = list(stages)
    cfg = validate(cfg)
    plan = _plan(cfg["run.stages"])
    seeds = _distinct_seeds(cfg["run.seed"], max(cfg["lyapunov.paths"], cfg["lyapunov.cloud_paths"], 1))
    # workers only change scheduling, never results
    hashed = {k: v for k, v in cfg.items() if k != "run.workers"}
    versions = _versions()
    man = RunManifest(cfg, seeds, versions, manifest_hash(hashed, seeds, versions))
    run_dir = new_run_dir(Path(out_dir))
    man.run_dir = str(run_dir)
    man.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    writer = RunWriter(run_dir, man)
    try:
        pipe = Pipeline(cfg, writer)
        man.resolved["attractor.tol_K"] = cfg["attractor.tol_K"]
        for stage in plan:
            try:
                ok = bool(getattr(pipe, stage)())
            except ExtractionError as exc:
                ok = False
                man.error = f"{type(exc).__name__}: {exc}"
            man.acceptance[stage] = ok
            man.completed.append(stage)
            if not ok and any(stage in DEPENDS[s] for s in plan):
                man.failed_stage = stage
                break
    except ConfigError:
        raise
    except (BlowUpError, FloatingPointError, ValueError, RuntimeError) as exc:
        man.failed_stage = plan[len(man.completed)] if len(man.completed) < len(plan) else None
        man.error = f"{type(exc).__name__}: {exc}"
        man.crashed = True
        log.error("stage %s failed: %s", man.failed_stage, exc)
    finally:
        man.finished = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        (run_dir / "manifest.json").write_text(json.dumps(man.to_dict(), indent=2, sort_keys=True) + "\n")
    return man


def replay(manifest_path, out_dir) -> tuple[RunManifest, dict]:
    """Re-run a manifest's config into a new directory; returns the new manifest and per-file equality."""
    old = RunManifest.load(manifest_path)
    new = run_pipeline(old.config, out_dir)
    if new.hash != old.hash:
        log.warning("manifest hash differs (library versions changed?)")
    same = {name: new.outputs.get(name) == digest for name, digest in old.outputs.items()}
    return new, same


# --- comparison -------------------------------------------------------------


def compare_runs(a: RunManifest, b: RunManifest) -> dict:
    """Structural diff of acceptance, periods and exponents; empty dict when runs agree."""
    if a.failed_stage is not None or b.failed_stage is not None:
        raise IncompatibleRunsError("both runs must be complete")
    dim_a, dim_b = len(a.config["attractor.box_lower"]), len(b.config["attractor.box_lower"])
    if dim_a != dim_b:
        raise IncompatibleRunsError(f"state dimensions differ: {dim_a} vs {dim_b}")
    diff = {}
    acc = {k: (a.acceptance.get(k), b.acceptance.get(k)) for k in sorted(set(a.acceptance) | set(b.acceptance))}
    acc = {k: v for k, v in acc.items() if v[0] != v[1]}
    if acc:
        diff["acceptance"] = acc
    pa = sorted(a.results.get("curves", {}).get("periods", []))
    pb = sorted(b.results.get("curves", {}).get("periods", []))
    if pa != pb:
        diff["periods"] = (pa, pb)
    la, lb = a.results.get("lyapunov"), b.results.get("lyapunov")
    if la and lb:
        ea, eb = np.array(la["exponents"]), np.array(lb["exponents"])
        if ea.shape != eb.shape:
            diff["exponents"] = {"a": ea.tolist(), "b": eb.tolist()}
        else:
            comb = np.hypot(la["stderr"], lb["stderr"])
            far = np.abs(ea - eb) > 2 * comb
            if np.any(far):
                diff["exponents"] = {"a": ea.tolist(), "b": eb.tolist(), "combined_stderr": comb.tolist()}
    return diff
