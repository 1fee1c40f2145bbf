"""Staged batch pipeline over persistent archives.

Stages: generate -> pod -> assemble -> fit -> solve -> evaluate.  Each
stage writes one archive under the configured output directory and
records a hash of the config sections it depends on (chained through
its parent stage) in state.json; a rerun with an unchanged hash loads
the stored artifact instead of recomputing, and --force invalidates the
stage and everything downstream.

The model-matrix runner replays every comparison-table row (both
formulations, all correction-flag combinations) against the shared
snapshot/basis/operator artifacts, records per-row metrics, selected
ranks, wall time and divergence, and writes the table as CSV plus a
row archive.  Plot export only reads archives; it never recomputes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import shutil
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import closure, metrics
from .archive import ArchiveError, load_archive, save_archive
from .fom import FomConfig, SnapshotSet, run_fom
from .grid import Grid
from .operators import (ReducedOperators, assemble_data_rank,
                        assemble_ppe_operators, assemble_sup_operators)
from .pod import (EnrichedBasis, PodBasis, compute_pod,
                  enrich_with_supremizers, snapshot_coefficients,
                  supremizer_snapshots)
from .rom import RomModelSpec, RomTrajectory, solve_rom

__all__ = ["ConfigError", "NumericalError", "load_config", "Pipeline",
           "MATRIX_ROWS", "STAGES"]

STAGES = ("generate", "pod", "assemble", "fit", "solve", "evaluate")


class ConfigError(ValueError):
    """Bad or inconsistent run configuration."""


class NumericalError(RuntimeError):
    """Divergence or solver failure in a required stage."""


# ---------------------------------------------------------------------------
# configuration

_DEFAULTS = {
    "fom": {
        "scenario": "channel-obstacle",
        "nx": 64, "ny": 32, "nu": 2.5e-3, "dt": 5e-3,
        "n_steps": 2400, "save_every": 8, "spinup_steps": 2000,
        "inlet_speed": 1.0,
    },
    "pod": {"n_u": 3, "n_p": 3, "n_sup": 3, "d": 20, "d_p": 12},
    "fit": {
        "train_time": None,          # seconds; default: half the window
        "constrained": False,
        "sup_pressure": "joint",     # or "separate"
        "ppe_pressure": "separate",  # or "case1" / "case2"
        "ppe_full": "case3",         # or "separate"
        "rank_grid": None,           # explicit list; default grid otherwise
    },
    "rom": {
        "formulation": "SUP",
        "scheme": "bdf2",
        "tau_pen": 1000.0,
        "dt": None,                  # default: snapshot cadence
        "horizon": None,             # seconds; default: full window
        "c_u": 0, "c_p1": 0, "c_p2": 0, "c_D": 0, "c_G": 0,
    },
    "output": {"directory": "runs/out"},
}

_FOM_KEYS = ("scenario", "nx", "ny", "nu", "dt", "n_steps", "save_every",
             "spinup_steps", "inlet_speed", "obstacle", "lx", "ly")


def load_config(path):
    """Parse and validate a TOML run configuration."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc

    cfg = {}
    for section, defaults in _DEFAULTS.items():
        got = raw.get(section, {})
        if not isinstance(got, dict):
            raise ConfigError(f"[{section}] must be a table")
        unknown = set(got) - set(defaults) - ({"obstacle", "lx", "ly"}
                                              if section == "fom" else set())
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
        cfg[section] = {**defaults, **got}
    unknown_sections = set(raw) - set(_DEFAULTS)
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")

    try:
        fom_cfg = _fom_config(cfg["fom"])
    except ValueError as exc:
        raise ConfigError(f"[fom] {exc}") from exc

    pod = cfg["pod"]
    for key in ("n_u", "n_p", "n_sup", "d", "d_p"):
        if not isinstance(pod[key], int) or pod[key] < 1:
            raise ConfigError(f"[pod] {key} must be a positive integer")
    if pod["n_u"] > pod["d"]:
        raise ConfigError("[pod] n_u must not exceed d")
    if pod["n_p"] > pod["d_p"]:
        raise ConfigError("[pod] n_p must not exceed d_p")

    rom = cfg["rom"]
    if rom["formulation"] not in ("SUP", "PPE"):
        raise ConfigError("[rom] formulation must be 'SUP' or 'PPE'")
    if rom["scheme"] not in ("implicit-euler", "bdf2"):
        raise ConfigError("[rom] scheme must be 'implicit-euler' or 'bdf2'")
    for flag in ("c_u", "c_p1", "c_p2", "c_D", "c_G"):
        if rom[flag] not in (0, 1):
            raise ConfigError(f"[rom] {flag} must be 0 or 1")
    if rom["tau_pen"] < 0:
        raise ConfigError("[rom] tau_pen must be nonnegative")

    fit = cfg["fit"]
    if fit["sup_pressure"] not in ("joint", "separate"):
        raise ConfigError("[fit] sup_pressure must be 'joint' or 'separate'")
    if fit["ppe_pressure"] not in ("separate", "case1", "case2"):
        raise ConfigError("[fit] ppe_pressure must be 'separate', 'case1' or 'case2'")
    if fit["ppe_full"] not in ("case3", "separate"):
        raise ConfigError("[fit] ppe_full must be 'case3' or 'separate'")
    if fit["rank_grid"] is not None:
        grid_ = fit["rank_grid"]
        if (not isinstance(grid_, list) or not grid_
                or any((not isinstance(v, int)) or v < 0 for v in grid_)):
            raise ConfigError("[fit] rank_grid must be a list of ints >= 0")

    # window containment: training <= online horizon <= snapshot window
    cadence = fom_cfg.dt * fom_cfg.save_every
    window = fom_cfg.n_steps * fom_cfg.dt
    horizon = rom["horizon"] if rom["horizon"] is not None else window
    train = fit["train_time"] if fit["train_time"] is not None else horizon / 2
    if not 0 < train <= horizon + 1e-9:
        raise ConfigError("[fit] train_time must lie inside the online window")
    if horizon > window + 1e-9:
        raise ConfigError("[rom] horizon exceeds the snapshot window")
    dt_rom = rom["dt"] if rom["dt"] is not None else cadence
    stride = dt_rom / cadence
    if abs(stride - round(stride)) > 1e-9 or round(stride) < 1:
        raise ConfigError("[rom] dt must be a positive multiple of the snapshot cadence")

    cfg["_derived"] = {
        "cadence": cadence, "window": window, "horizon": horizon,
        "train_time": train, "dt_rom": dt_rom, "stride": int(round(stride)),
    }
    return cfg


def _fom_config(section):
    kwargs = {k: section[k] for k in _FOM_KEYS if k in section and section[k] is not None}
    if "obstacle" in kwargs:
        kwargs["obstacle"] = tuple(kwargs["obstacle"])
    return FomConfig(**kwargs)


def _hash(payload, parent=""):
    blob = json.dumps(payload, sort_keys=True, default=str) + "|" + parent
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _warn(msg):
    print(f"warning: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# operator (de)serialization

def _ops_entries(prefix, ops):
    ent = {
        f"{prefix}_M": ops.M, f"{prefix}_B": ops.B, f"{prefix}_BT": ops.B_T,
        f"{prefix}_C": ops.C, f"{prefix}_H": ops.H, f"{prefix}_P": ops.P,
    }
    pen = []
    for edge, u_bc, E_k, D_k in ops.penalty_edges:
        ent[f"{prefix}_E_{edge}"] = E_k
        ent[f"{prefix}_Dvec_{edge}"] = D_k
        pen.append({"edge": edge, "u_bc": u_bc})
    if ops.D is not None:
        ent.update({f"{prefix}_D": ops.D, f"{prefix}_G": ops.G,
                    f"{prefix}_N": ops.N, f"{prefix}_L": ops.L})
    meta = {"formulation": ops.formulation, "nu": ops.nu, "tau_pen": ops.tau_pen,
            "n_u": ops.n_u, "n_sup": ops.n_sup, "q": ops.q, "penalty": pen}
    return ent, meta


def _ops_restore(prefix, entries, meta):
    pen = [(p["edge"], p["u_bc"], entries[f"{prefix}_E_{p['edge']}"],
            entries[f"{prefix}_Dvec_{p['edge']}"]) for p in meta["penalty"]]
    kwargs = {}
    if f"{prefix}_D" in entries:
        kwargs = {"D": entries[f"{prefix}_D"], "G": entries[f"{prefix}_G"],
                  "N": entries[f"{prefix}_N"], "L": entries[f"{prefix}_L"]}
    return ReducedOperators(
        formulation=meta["formulation"], nu=meta["nu"], tau_pen=meta["tau_pen"],
        n_u=meta["n_u"], n_sup=meta["n_sup"], q=meta["q"],
        M=entries[f"{prefix}_M"], B=entries[f"{prefix}_B"],
        B_T=entries[f"{prefix}_BT"], C=entries[f"{prefix}_C"],
        H=entries[f"{prefix}_H"], P=entries[f"{prefix}_P"],
        penalty_edges=pen, **kwargs)


def _table_array(table):
    """Rank table as a storable (k, 2) array.

    Candidates whose scoring run diverged carry an inf score; they have
    no plottable metric, so their rows are dropped here (the selection
    itself already skipped them).
    """
    rows = [(rank, score) for rank, score in table if np.isfinite(score)]
    return np.array(rows, dtype=float).reshape(-1, 2)


def _model_entries(key, model):
    ent = {f"model_{key}_linear": model.linear}
    if model.quadratic is not None:
        ent[f"model_{key}_quadratic"] = model.quadratic
    meta = {"input_spec": model.input_spec, "rank": model.rank,
            "quadratic": model.quadratic is not None}
    return ent, meta


def _model_restore(key, entries, meta):
    quad = entries.get(f"model_{key}_quadratic") if meta["quadratic"] else None
    return closure.CorrectionModel(
        linear=entries[f"model_{key}_linear"], quadratic=quad,
        input_spec=meta["input_spec"], rank=meta["rank"])


# ---------------------------------------------------------------------------
# the comparison-table rows

MATRIX_ROWS = (
    ("SUP", "SUP", {}),
    ("SUP-U", "SUP", {"c_u": 1}),
    ("SUP-P1P2", "SUP", {"c_p1": 1, "c_p2": 1}),
    ("SUP-P1", "SUP", {"c_p1": 1}),
    ("SUP-P2", "SUP", {"c_p2": 1}),
    ("PPE", "PPE", {}),
    ("PPE-DG", "PPE", {"c_D": 1, "c_G": 1}),
    ("PPE-D", "PPE", {"c_D": 1}),
    ("PPE-G", "PPE", {"c_G": 1}),
    ("PPE-UDG", "PPE", {"c_u": 1, "c_D": 1, "c_G": 1}),
)


class Pipeline:
    """Stage orchestrator bound to one config and output directory."""

    def __init__(self, config, force=False, jobs=None, log=print):
        self.cfg = config
        self.root = config["output"]["directory"]
        self.force = set()
        if force:
            self.force = set(STAGES)
        self.jobs = jobs if jobs else _default_jobs()
        self.log = log
        self._cache = {}
        self._lock = threading.Lock()
        os.makedirs(self.root, exist_ok=True)

    # -- state bookkeeping

    def _state_path(self):
        return os.path.join(self.root, "state.json")

    def _state(self):
        try:
            with open(self._state_path(), encoding="utf-8") as fh:
                return json.load(fh)
        except (FileNotFoundError, json.JSONDecodeError):
            return {}

    def _mark(self, stage, digest):
        state = self._state()
        state[stage] = digest
        # anything downstream is stale now
        for later in STAGES[STAGES.index(stage) + 1:]:
            state.pop(later, None)
        with open(self._state_path(), "w", encoding="utf-8") as fh:
            json.dump(state, fh, indent=1, sort_keys=True)

    def _fresh(self, stage, digest, path):
        if stage in self.force:
            return False
        return self._state().get(stage) == digest and os.path.isdir(path)

    def _stage_dir(self, stage):
        return os.path.join(self.root, f"{stage}.rom")

    # -- hashes

    def _hashes(self):
        cfg = self.cfg
        h = {}
        h["generate"] = _hash(cfg["fom"])
        h["pod"] = _hash(cfg["pod"], h["generate"])
        h["assemble"] = _hash({"tau_pen": cfg["rom"]["tau_pen"]}, h["pod"])
        h["fit"] = _hash({"fit": cfg["fit"], "flags": _flags(cfg),
                          "formulation": cfg["rom"]["formulation"],
                          "dt": cfg["_derived"]["dt_rom"],
                          "train": cfg["_derived"]["train_time"],
                          "scheme": cfg["rom"]["scheme"]}, h["assemble"])
        h["solve"] = _hash(cfg["rom"], h["fit"])
        h["evaluate"] = _hash({}, h["solve"])
        return h

    # -- stages

    def generate(self):
        """Run the flow solver and persist the snapshot set."""
        if "generate" in self._cache:
            return self._cache["generate"]
        digest = self._hashes()["generate"]
        path = self._stage_dir("generate")
        fom_cfg = _fom_config(self.cfg["fom"])
        if self._fresh("generate", digest, path):
            entries, meta = load_archive(path)
            grid = Grid.from_meta(meta["grid"],
                                  mask=entries["mask"].astype(bool))
            snaps = SnapshotSet(grid=grid, times=entries["times"].ravel(),
                                velocity=entries["velocity"],
                                pressure=entries["pressure"],
                                meta=meta.get("fom", {}))
            self.log(f"[skip] generate ({snaps.n_snapshots} snapshots, up to date)")
        else:
            t0 = time.time()
            snaps = run_fom(fom_cfg)
            save_archive(path, {
                "times": snaps.times, "velocity": snaps.velocity,
                "pressure": snaps.pressure,
                "mask": snaps.grid.mask.astype(float),
            }, metadata={"grid": snaps.grid.to_meta(), "fom": fom_cfg.meta(),
                         "stage_hash": digest})
            self._mark("generate", digest)
            self.log(f"[done] generate: {snaps.n_snapshots} snapshots "
                     f"({time.time() - t0:.1f}s)")
        self._cache["generate"] = snaps
        return snaps

    def pod(self):
        """Velocity, pressure, and supremizer bases from the snapshots."""
        if "pod" in self._cache:
            return self._cache["pod"]
        snaps = self.generate()
        digest = self._hashes()["pod"]
        path = self._stage_dir("pod")
        grid = snaps.grid
        if self._fresh("pod", digest, path):
            entries, meta = load_archive(path)
            bases = {
                name: PodBasis(entries[f"{name}_modes"],
                               entries[f"{name}_eigenvalues"].ravel(),
                               grid.vector_weights if name != "chi" else grid.weights,
                               meta[f"{name}_total_energy"])
                for name in ("vel", "chi", "sup")
            }
            self.log("[skip] pod (up to date)")
        else:
            t0 = time.time()
            pcfg = self.cfg["pod"]
            V = snaps.velocity_matrix()
            Pm = snaps.pressure_matrix()
            vel_full = compute_pod(V, grid.vector_weights)
            chi_full = compute_pod(Pm, grid.weights)
            d = _clip_modes("d", pcfg["d"], vel_full.n_modes, self.log)
            d_p = _clip_modes("d_p", pcfg["d_p"], chi_full.n_modes, self.log)
            sup_full = compute_pod(supremizer_snapshots(Pm, grid),
                                   grid.vector_weights)
            n_sup = _clip_modes("n_sup", pcfg["n_sup"], sup_full.n_modes, self.log)
            bases = {"vel": vel_full.leading(d), "chi": chi_full.leading(d_p),
                     "sup": sup_full.leading(n_sup)}
            ent = {}
            meta = {"stage_hash": digest}
            for name, basis in bases.items():
                ent[f"{name}_modes"] = basis.modes
                ent[f"{name}_eigenvalues"] = basis.eigenvalues
                meta[f"{name}_total_energy"] = basis.total_energy
            save_archive(path, ent, metadata=meta)
            self._mark("pod", digest)
            self.log(f"[done] pod: d={bases['vel'].n_modes} "
                     f"d_p={bases['chi'].n_modes} n_sup={bases['sup'].n_modes} "
                     f"({time.time() - t0:.1f}s)")
        self._cache["pod"] = bases
        return bases

    def _dims(self, bases):
        pcfg = self.cfg["pod"]
        n_u = min(pcfg["n_u"], bases["vel"].n_modes)
        n_p = min(pcfg["n_p"], bases["chi"].n_modes)
        n_sup = bases["sup"].n_modes
        if n_u < pcfg["n_u"] or n_p < pcfg["n_p"]:
            _warn(f"mode counts clipped to available rank: n_u={n_u}, n_p={n_p}")
        if self.cfg["rom"]["formulation"] == "SUP" and n_sup < n_p:
            _warn(f"N_sup={n_sup} < N_p={n_p}: the constrained formulation "
                  "may be unstable; proceeding")
        return n_u, n_p, n_sup

    def assemble(self):
        """Working-rank operators for both formulations plus data-rank blocks."""
        if "assemble" in self._cache:
            return self._cache["assemble"]
        snaps = self.generate()
        bases = self.pod()
        digest = self._hashes()["assemble"]
        path = self._stage_dir("assemble")
        if self._fresh("assemble", digest, path):
            entries, meta = load_archive(path)
            ops = {
                "sup": _ops_restore("sup", entries, meta["sup"]),
                "ppe": _ops_restore("ppe", entries, meta["ppe"]),
                "data": closure.DataRankOperators(
                    r=meta["data"]["r"], q=meta["data"]["q"],
                    d=meta["data"]["d"], d_p=meta["data"]["d_p"],
                    C_d=entries["data_C"], H_d=entries["data_H"],
                    P_d=entries["data_P"], D_d=entries["data_D"],
                    G_d=entries["data_G"]),
            }
            self.log("[skip] assemble (up to date)")
        else:
            t0 = time.time()
            n_u, n_p, n_sup = self._dims(bases)
            grid = snaps.grid
            nu = self.cfg["fom"]["nu"]
            tau = self.cfg["rom"]["tau_pen"]
            enriched = enrich_with_supremizers(bases["vel"].leading(n_u),
                                               bases["sup"])
            chi_q = bases["chi"].leading(n_p)
            sup_ops = assemble_sup_operators(enriched, chi_q, grid, nu, tau)
            ppe_ops = assemble_ppe_operators(bases["vel"].leading(n_u), chi_q,
                                             grid, nu, tau)
            data_ops = assemble_data_rank(bases["vel"], bases["chi"], grid,
                                          r=n_u, q=n_p)
            ops = {"sup": sup_ops, "ppe": ppe_ops, "data": data_ops}
            ent_s, meta_s = _ops_entries("sup", sup_ops)
            ent_p, meta_p = _ops_entries("ppe", ppe_ops)
            ent = {**ent_s, **ent_p,
                   "data_C": data_ops.C_d, "data_H": data_ops.H_d,
                   "data_P": data_ops.P_d, "data_D": data_ops.D_d,
                   "data_G": data_ops.G_d}
            meta = {"sup": meta_s, "ppe": meta_p,
                    "data": {"r": data_ops.r, "q": data_ops.q,
                             "d": data_ops.d, "d_p": data_ops.d_p},
                    "stage_hash": digest}
            save_archive(path, ent, metadata=meta)
            self._mark("assemble", digest)
            self.log(f"[done] assemble ({time.time() - t0:.1f}s)")
        self._cache["assemble"] = ops
        return ops

    # -- shared reduced-run helpers

    def _run_setup(self, formulation):
        """Initial conditions, step counts and bases for one formulation."""
        snaps = self.generate()
        bases = self.pod()
        ops = self.assemble()
        der = self.cfg["_derived"]
        n_u = ops["data"].r
        n_p = ops["data"].q
        chi_q = bases["chi"].leading(n_p)
        if formulation == "SUP":
            basis_u = enrich_with_supremizers(bases["vel"].leading(n_u),
                                              bases["sup"])
            red_ops = ops["sup"]
        else:
            basis_u = bases["vel"].leading(n_u)
            red_ops = ops["ppe"]
        V = snaps.velocity_matrix()
        Pm = snaps.pressure_matrix()
        a0 = basis_u.project(V[:, 0])
        b0 = chi_q.project(Pm[:, 0])
        stride = der["stride"]
        n_train = max(1, int(round(der["train_time"] / der["dt_rom"])))
        n_solve = max(1, int(round(der["horizon"] / der["dt_rom"])))
        max_steps = (snaps.n_snapshots - 1) // stride
        n_train = min(n_train, max_steps)
        n_solve = min(n_solve, max_steps)
        return {
            "snaps": snaps, "ops": red_ops, "basis_u": basis_u, "chi_q": chi_q,
            "a0": a0, "b0": b0, "t0": float(snaps.times[0]),
            "dt": der["dt_rom"], "stride": stride,
            "n_train": n_train, "n_solve": n_solve,
            "scheme": self.cfg["rom"]["scheme"],
        }

    def _histories(self):
        """Data-rank coefficient histories at the solver cadence."""
        snaps = self.generate()
        bases = self.pod()
        stride = self.cfg["_derived"]["stride"]
        a_d = snapshot_coefficients(bases["vel"], snaps.velocity_matrix())
        b_dp = snapshot_coefficients(bases["chi"], snaps.pressure_matrix())
        return a_d[::stride], b_dp[::stride]

    def fit(self):
        """Exact correction series plus fitted models for the active flags."""
        if "fit" in self._cache:
            return self._cache["fit"]
        ops = self.assemble()
        digest = self._hashes()["fit"]
        path = self._stage_dir("fit")
        if self._fresh("fit", digest, path):
            entries, meta = load_archive(path)
            series = {k: entries[f"exact_tau_{k}"]
                      for k in ("u", "p1", "p2", "D", "G")}
            models = {k: _model_restore(k, entries, m)
                      for k, m in meta["models"].items()}
            tables = {k: [(int(rk), float(sc)) for rk, sc in entries[f"ranktable_{k}"]]
                      for k in meta["models"]}
            fits = {"series": series, "models": models, "tables": tables}
            self.log("[skip] fit (up to date)")
        else:
            t0 = time.time()
            fits = self._compute_fits()
            ent = {f"exact_tau_{k}": v for k, v in fits["series"].items()}
            meta_models = {}
            for key, model in fits["models"].items():
                m_ent, m_meta = _model_entries(key, model)
                ent.update(m_ent)
                meta_models[key] = m_meta
                ent[f"ranktable_{key}"] = _table_array(fits["tables"][key])
            save_archive(path, ent, metadata={"models": meta_models,
                                              "stage_hash": digest})
            self._mark("fit", digest)
            ranks = {k: m.rank for k, m in fits["models"].items()}
            self.log(f"[done] fit: ranks {ranks} ({time.time() - t0:.1f}s)")
        self._cache["fit"] = fits
        return fits

    def _exact_series(self, data_ops, a_d, b_dp):
        tau_u = closure.exact_velocity_correction(data_ops, a_d)
        tau_p1, tau_p2 = closure.exact_pressure_corrections_sup(data_ops, a_d, b_dp)
        tau_D, tau_G = closure.exact_pressure_corrections_ppe(data_ops, a_d, b_dp)
        return {"u": tau_u, "p1": tau_p1, "p2": tau_p2, "D": tau_D, "G": tau_G}

    def _compute_fits(self, formulation=None, flags=None):
        """Fit every model group needed by the given flag set (defaults to
        the configured solve)."""
        cfg = self.cfg
        formulation = formulation or cfg["rom"]["formulation"]
        flags = flags if flags is not None else _flags(cfg)
        ops = self.assemble()
        a_d, b_dp = self._histories()
        series = self._exact_series(ops["data"], a_d, b_dp)
        setup = self._run_setup(formulation)
        models, tables = self._fit_models(formulation, flags, series,
                                          a_d, b_dp, setup)
        return {"series": series, "models": models, "tables": tables}

    def _fit_models(self, formulation, flags, series, a_d, b_dp, setup):
        """Rank-searched models for each active correction group."""
        cfg_fit = self.cfg["fit"]
        r = setup["ops"].n_u
        q = setup["ops"].q
        nt = setup["n_train"] + 1
        Ar = a_d[:nt, :r]
        Bq = b_dp[:nt, :q]
        AB_full = a_d[:nt]
        BB_full = b_dp[:nt]
        models, tables = {}, {}

        def search(n_cols, fit_fn, score_key, spec_builder):
            grid_ = cfg_fit["rank_grid"] or closure.default_rank_grid(n_cols)
            grid_ = sorted(set(list(grid_) + [0]))

            def score(built):
                spec = spec_builder(built)
                traj = solve_rom(setup["ops"], spec, setup["a0"], setup["b0"],
                                 setup["dt"], setup["n_train"],
                                 scheme=setup["scheme"], t0=setup["t0"])
                if traj.diverged:
                    return np.inf
                if score_key == "u":
                    return metrics.error_metric_u(traj, setup["snaps"],
                                                  setup["basis_u"])
                if score_key == "p":
                    return metrics.error_metric_p(traj, setup["snaps"],
                                                  setup["chi_q"])
                return (metrics.error_metric_u(traj, setup["snaps"], setup["basis_u"])
                        + metrics.error_metric_p(traj, setup["snaps"], setup["chi_q"]))

            return closure.select_rank(grid_, fit_fn, score, jobs=self.jobs)

        if formulation == "SUP":
            if flags.get("c_u"):
                n_cols = r + r * (r + 1) // 2

                def fit_u(rank):
                    return closure.fit_velocity_correction(
                        Ar, series["u"][:nt], rank,
                        constrained=cfg_fit["constrained"])

                rank, model, table = search(
                    n_cols, fit_u, "u",
                    lambda m: RomModelSpec("SUP", flags={"c_u": 1}, models={"u": m}))
                models["u"] = model
                tables["u"] = table
            if flags.get("c_p1") or flags.get("c_p2"):
                mode = cfg_fit["sup_pressure"]
                n_cols = (q + r) if mode == "joint" else max(q, r)
                active = {k: flags.get(k, 0) for k in ("c_p1", "c_p2")}

                def fit_p(rank):
                    return closure.fit_pressure_sup(Bq, Ar, series["p1"][:nt],
                                                    series["p2"][:nt], rank,
                                                    mode=mode)

                def build_p(built):
                    m1, m2 = built
                    used = {}
                    if active["c_p1"]:
                        used["p1"] = m1
                    if active["c_p2"]:
                        used["p2"] = m2
                    return RomModelSpec("SUP", flags=active, models=used)

                rank, built, table = search(n_cols, fit_p, "p", build_p)
                m1, m2 = built
                if active["c_p1"]:
                    models["p1"] = m1
                    tables["p1"] = table
                if active["c_p2"]:
                    models["p2"] = m2
                    tables["p2"] = table
            return models, tables

        # PPE
        all_on = flags.get("c_u") and flags.get("c_D") and flags.get("c_G")
        if all_on and cfg_fit["ppe_full"] == "case3":
            n_ab = r + q
            n_cols = n_ab + n_ab * (n_ab + 1) // 2

            def fit_j(rank):
                return closure.fit_ppe_joint(3, Ar, Bq, series["u"][:nt],
                                             series["D"][:nt], series["G"][:nt],
                                             rank)

            rank, model, table = search(
                n_cols, fit_j, "up",
                lambda m: RomModelSpec("PPE", flags={"c_u": 1, "c_D": 1, "c_G": 1},
                                       models={"uDG": m}))
            models["uDG"] = model
            tables["uDG"] = table
            return models, tables

        if flags.get("c_u"):
            n_cols = r + r * (r + 1) // 2

            def fit_u(rank):
                return closure.fit_velocity_correction(
                    Ar, series["u"][:nt], rank, constrained=cfg_fit["constrained"])

            rank, model, table = search(
                n_cols, fit_u, "u",
                lambda m: RomModelSpec("PPE", flags={"c_u": 1}, models={"u": m}))
            models["u"] = model
            tables["u"] = table

        want_D, want_G = flags.get("c_D"), flags.get("c_G")
        if want_D or want_G:
            joint_mode = self.cfg["fit"]["ppe_pressure"]
            if joint_mode in ("case1", "case2") and want_D and want_G:
                case = 1 if joint_mode == "case1" else 2
                n_ab = r + q
                n_cols = ((q + r * (r + 1) // 2) if case == 1
                          else n_ab + n_ab * (n_ab + 1) // 2)

                def fit_dg(rank):
                    return closure.fit_ppe_joint(case, Ar, Bq, None,
                                                 series["D"][:nt],
                                                 series["G"][:nt], rank)

                rank, model, table = search(
                    n_cols, fit_dg, "p",
                    lambda m: RomModelSpec("PPE", flags={"c_D": 1, "c_G": 1},
                                           models={"DG": m}))
                models["DG"] = model
                tables["DG"] = table
            else:
                n_cols = max(q + q * (q + 1) // 2, r + r * (r + 1) // 2)
                active = {"c_D": int(bool(want_D)), "c_G": int(bool(want_G))}

                def fit_sep(rank):
                    return closure.fit_ppe_separate(Bq, Ar, series["D"][:nt],
                                                    series["G"][:nt], rank, rank)

                def build_sep(built):
                    mD, mG = built
                    used = {}
                    if active["c_D"]:
                        used["D"] = mD
                    if active["c_G"]:
                        used["G"] = mG
                    return RomModelSpec("PPE", flags=active, models=used)

                rank, built, table = search(n_cols, fit_sep, "p", build_sep)
                mD, mG = built
                if active["c_D"]:
                    models["D"] = mD
                    tables["D"] = table
                if active["c_G"]:
                    models["G"] = mG
                    tables["G"] = table
        return models, tables

    def solve(self):
        """Integrate the configured reduced model over the online window."""
        if "solve" in self._cache:
            return self._cache["solve"]
        fits = self.fit()
        digest = self._hashes()["solve"]
        path = self._stage_dir("solve")
        formulation = self.cfg["rom"]["formulation"]
        if self._fresh("solve", digest, path):
            entries, meta = load_archive(path)
            traj = RomTrajectory(
                times=entries["times"].ravel(), a=entries["a"], b=entries["b"],
                newton_iters=entries["newton_iters"].ravel().astype(int),
                scheme=meta["scheme"], dt=meta["dt"],
                diverged=meta["diverged"],
                diverged_step=meta.get("diverged_step"))
            self.log("[skip] solve (up to date)")
        else:
            t0 = time.time()
            setup = self._run_setup(formulation)
            spec = RomModelSpec(formulation, flags=_flags(self.cfg),
                                models=fits["models"])
            traj = solve_rom(setup["ops"], spec, setup["a0"], setup["b0"],
                             setup["dt"], setup["n_solve"],
                             scheme=setup["scheme"], t0=setup["t0"])
            save_archive(path, {
                "times": traj.times, "a": traj.a, "b": traj.b,
                "newton_iters": traj.newton_iters.astype(float),
            }, metadata={"scheme": traj.scheme, "dt": traj.dt,
                         "formulation": formulation, "flags": _flags(self.cfg),
                         "diverged": traj.diverged,
                         "diverged_step": traj.diverged_step,
                         "stage_hash": digest})
            self._mark("solve", digest)
            self.log(f"[done] solve: {traj.n_steps} steps, diverged={traj.diverged} "
                     f"({time.time() - t0:.1f}s)")
            if traj.diverged:
                raise NumericalError(
                    f"reduced model diverged at step {traj.diverged_step}")
        self._cache["solve"] = traj
        return traj

    def evaluate(self):
        """Error series and summary metrics of the solved trajectory."""
        if "evaluate" in self._cache:
            return self._cache["evaluate"]
        traj = self.solve()
        digest = self._hashes()["evaluate"]
        path = self._stage_dir("evaluate")
        if self._fresh("evaluate", digest, path):
            entries, meta = load_archive(path)
            result = {"errors": {"times": entries["err_times"].ravel(),
                                 "eps_u": entries["err_eps_u"].ravel(),
                                 "eps_p": entries["err_eps_p"].ravel()},
                      "reconstruction": {"times": entries["rec_times"].ravel(),
                                         "eps_u": entries["rec_eps_u"].ravel(),
                                         "eps_p": entries["rec_eps_p"].ravel()},
                      "metrics": meta["metrics"]}
            self.log("[skip] evaluate (up to date)")
        else:
            t0 = time.time()
            formulation = self.cfg["rom"]["formulation"]
            setup = self._run_setup(formulation)
            bases = self.pod()
            err = metrics.relative_error_series(traj, setup["snaps"],
                                                setup["basis_u"], bases["vel"],
                                                bases["chi"])
            rec = metrics.reconstruction_error_series(
                setup["snaps"], bases["vel"], bases["chi"],
                setup["ops"].n_u, setup["ops"].q)
            summary = {
                "error_metric_u": metrics.error_metric_u(traj, setup["snaps"],
                                                         setup["basis_u"]),
                "error_metric_p": metrics.error_metric_p(traj, setup["snaps"],
                                                         setup["chi_q"]),
                "eps_u_final": float(err["eps_u"][-1]),
                "eps_p_final": float(err["eps_p"][-1]),
            }
            save_archive(path, {
                "err_times": err["times"], "err_eps_u": err["eps_u"],
                "err_eps_p": err["eps_p"],
                "rec_times": rec["times"], "rec_eps_u": rec["eps_u"],
                "rec_eps_p": rec["eps_p"],
            }, metadata={"metrics": summary, "stage_hash": digest})
            _write_csv(os.path.join(self.root, "errors.csv"),
                       ["t", "eps_u", "eps_p"],
                       zip(err["times"], err["eps_u"], err["eps_p"]))
            _write_csv(os.path.join(self.root, "reconstruction.csv"),
                       ["t", "eps_u", "eps_p"],
                       zip(rec["times"], rec["eps_u"], rec["eps_p"]))
            with open(os.path.join(self.root, "metrics.json"), "w",
                      encoding="utf-8") as fh:
                json.dump(summary, fh, indent=1, sort_keys=True)
            result = {"errors": err, "reconstruction": rec, "metrics": summary}
            self._mark("evaluate", digest)
            self.log(f"[done] evaluate: eps_u={summary['error_metric_u']:.4g} "
                     f"eps_p={summary['error_metric_p']:.4g} "
                     f"({time.time() - t0:.1f}s)")
        self._cache["evaluate"] = result
        return result

    def run_all(self):
        self.evaluate()

    # -- the model matrix

    def matrix(self):
        """Run every comparison-table row and emit the table."""
        self.fit()  # ensures snapshots/bases/operators/series are current
        ops = self.assemble()
        a_d, b_dp = self._histories()
        series = self._exact_series(ops["data"], a_d, b_dp)

        def run_row(row):
            name, formulation, flags = row
            t0 = time.time()
            setup = self._run_setup(formulation)
            full = {f: 0 for f in (("c_u", "c_p1", "c_p2")
                                   if formulation == "SUP"
                                   else ("c_u", "c_D", "c_G"))}
            full.update(flags)
            try:
                models, tables = self._fit_models(formulation, full, series,
                                                  a_d, b_dp, setup)
                spec = RomModelSpec(formulation, flags=full, models=models)
                traj = solve_rom(setup["ops"], spec, setup["a0"], setup["b0"],
                                 setup["dt"], setup["n_solve"],
                                 scheme=setup["scheme"], t0=setup["t0"])
                if traj.diverged:
                    return {"name": name, "formulation": formulation,
                            "flags": full, "diverged": True,
                            "diverged_step": traj.diverged_step,
                            "ranks": {k: m.rank for k, m in models.items()},
                            "eps_u": None, "eps_p": None, "tables": tables,
                            "wall_s": time.time() - t0, "traj": traj}
                eps_u = metrics.error_metric_u(traj, setup["snaps"],
                                               setup["basis_u"])
                eps_p = metrics.error_metric_p(traj, setup["snaps"],
                                               setup["chi_q"])
                return {"name": name, "formulation": formulation,
                        "flags": full, "diverged": False,
                        "ranks": {k: m.rank for k, m in models.items()},
                        "eps_u": eps_u, "eps_p": eps_p, "tables": tables,
                        "wall_s": time.time() - t0, "traj": traj}
            except Exception as exc:  # row failure must not kill the table
                return {"name": name, "formulation": formulation,
                        "flags": full, "diverged": True, "error": str(exc),
                        "ranks": {}, "eps_u": None, "eps_p": None,
                        "tables": {}, "wall_s": time.time() - t0, "traj": None}

        t_all = time.time()
        if self.jobs > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as ex:
                rows = list(ex.map(run_row, MATRIX_ROWS))
        else:
            rows = [run_row(row) for row in MATRIX_ROWS]

        # persist: table CSV + one archive with trajectories and rank tables
        table_path = os.path.join(self.root, "matrix.csv")
        _write_csv(table_path,
                   ["model", "formulation", "flags", "ranks", "eps_u", "eps_p",
                    "diverged", "wall_s"],
                   [[row["name"], row["formulation"],
                     _flag_string(row["flags"]),
                     ";".join(f"{k}={v}" for k, v in sorted(row["ranks"].items()))
                     or "-",
                     "" if row["eps_u"] is None else f"{row['eps_u']:.8g}",
                     "" if row["eps_p"] is None else f"{row['eps_p']:.8g}",
                     int(row["diverged"]), f"{row['wall_s']:.2f}"]
                    for row in rows])
        ent = {}
        meta_rows = []
        for i, row in enumerate(rows):
            meta_rows.append({k: row[k] for k in
                              ("name", "formulation", "flags", "diverged",
                               "ranks", "eps_u", "eps_p", "wall_s")})
            if row["traj"] is not None:
                ent[f"row{i}_a"] = row["traj"].a
                ent[f"row{i}_b"] = row["traj"].b
                ent[f"row{i}_times"] = row["traj"].times
            for key, table in row["tables"].items():
                ent[f"row{i}_ranktable_{key}"] = _table_array(table)
        save_archive(os.path.join(self.root, "matrix.rom"), ent,
                     metadata={"rows": meta_rows})
        self.log(f"[done] matrix: {len(rows)} rows ({time.time() - t_all:.1f}s) "
                 f"-> {table_path}")
        return rows

    # -- plot export (reads archives only)

    def export(self, which="all"):
        choices = {"errors", "eigen", "ranks"}
        wanted = choices if which == "all" else {which}
        if not wanted <= choices:
            raise ConfigError(f"unknown export selection {which!r}")
        out = os.path.join(self.root, "plots")
        os.makedirs(out, exist_ok=True)
        written = []
        if "errors" in wanted:
            entries, _ = load_archive(self._stage_dir("evaluate"),
                                      names=["err_times", "err_eps_u",
                                             "err_eps_p"])
            dat = os.path.join(out, "error_vs_time.dat")
            _write_dat(dat, ["t", "eps_u", "eps_p"],
                       np.column_stack([entries["err_times"].ravel(),
                                        entries["err_eps_u"].ravel(),
                                        entries["err_eps_p"].ravel()]))
            _write_gp(os.path.join(out, "error_vs_time.gp"),
                      "error_vs_time", "t", "relative error",
                      [("error_vs_time.dat", 2, "velocity"),
                       ("error_vs_time.dat", 3, "pressure")], logy=True)
            written += [dat]
        if "eigen" in wanted:
            entries, _ = load_archive(self._stage_dir("pod"),
                                      names=["vel_eigenvalues",
                                             "chi_eigenvalues"])
            for tag, name in (("u", "vel_eigenvalues"), ("p", "chi_eigenvalues")):
                lam = entries[name].ravel()
                dat = os.path.join(out, f"eigen_decay_{tag}.dat")
                _write_dat(dat, ["mode", "eigenvalue"],
                           np.column_stack([np.arange(1, lam.size + 1), lam]))
                written += [dat]
            _write_gp(os.path.join(out, "eigen_decay.gp"),
                      "eigen_decay", "mode", "eigenvalue",
                      [("eigen_decay_u.dat", 2, "velocity"),
                       ("eigen_decay_p.dat", 2, "pressure")], logy=True)
        if "ranks" in wanted:
            entries, meta = load_archive(self._stage_dir("fit"))
            plots = []
            for key in sorted(meta.get("models", {})):
                table = entries[f"ranktable_{key}"]
                dat = os.path.join(out, f"metric_vs_rank_{key}.dat")
                _write_dat(dat, ["rank", "metric"], table)
                plots.append((f"metric_vs_rank_{key}.dat", 2, key))
                written += [dat]
            if plots:
                _write_gp(os.path.join(out, "metric_vs_rank.gp"),
                          "metric_vs_rank", "rank", "training error",
                          plots)
        self.log(f"[done] export: {len(written)} data files -> {out}")
        return written


def _flags(cfg):
    rom = cfg["rom"]
    names = (("c_u", "c_p1", "c_p2") if rom["formulation"] == "SUP"
             else ("c_u", "c_D", "c_G"))
    return {k: rom[k] for k in names}


def _flag_string(flags):
    return ";".join(f"{k}={v}" for k, v in sorted(flags.items()))


def _clip_modes(name, requested, available, log):
    if requested > available:
        _warn(f"{name}={requested} exceeds the numerical rank {available}; clipped")
        return available
    return requested


def _default_jobs():
    env = os.environ.get("ROMLAB_JOBS", "")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(list(row))


def _write_dat(path, columns, data):
    data = np.atleast_2d(np.asarray(data, dtype=float))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + " ".join(columns) + "\n")
        for row in data:
            fh.write(" ".join(f"{v:.16g}" for v in row) + "\n")


def _write_gp(path, title, xlabel, ylabel, plots, logy=False):
    lines = [
        f'set terminal pngcairo size 900,600',
        f'set output "{title}.png"',
        f'set title "{title}"',
        f'set xlabel "{xlabel}"',
        f'set ylabel "{ylabel}"',
        "set key outside" ,
    ]
    if logy:
        lines.append("set logscale y")
    spec = ", \\\n  ".join(
        f'"{dat}" using 1:{col} with linespoints title "{label}"'
        for dat, col, label in plots)
    lines.append("plot " + spec)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
