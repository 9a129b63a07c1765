"""Config-driven toy experiments: the three-arm guidance comparison and window sweeps.

Every run is keyed by a hash of its config (seeds and output location
excluded), so per-seed records from different configs never mix.
"""

import copy
import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .guidance import GuidanceSpec, Schedule
from .kernel import KernelConfig
from .metrics import EvalReport, mmd_to_target, unsafe_rate, w2_squared
from .mixture import MixtureModel
from .network import TrainConfig, load_checkpoint, save_checkpoint, train_velocity
from .sampler import AnalyticVelocity, SamplerConfig, TrainedVelocity, sample

log = logging.getLogger(__name__)

OUTPUT_ENV = "SAFEFLOW_OUTPUT"
FIG2_ARMS = {"unguided": None, "full": (1.0, 0.0), "early": (1.0, 0.5)}
DEFAULT_WINDOWS = {
    "equal_strength": [(1.0, 0.8), (1.0, 0.6), (1.0, 0.4), (1.0, 0.2), (1.0, 0.05)],
    "equal_budget": [(1.0, 0.8), (1.0, 0.6), (1.0, 0.4), (1.0, 0.2), (1.0, 0.05)],
    "shifted_window": [(1.0, 0.8), (0.8, 0.6), (0.6, 0.4), (0.4, 0.2), (0.2, 0.0)],
}
# equal_budget reference: a 0.2-long window at this strength carries the same
# integral of lambda as the early-stop arm (0.002 over [1.0, 0.5])
ABLATION_LAMBDA = 0.005
SUMMARY_FIELDS = ["config_hash", "experiment", "arm", "t_start", "t_end", "lambda", "budget",
                  "seed", "w2_squared", "unsafe_rate", "mmd_to_target", "n_points"]


class ConfigError(ValueError):
    pass


class HashMismatch(RuntimeError):
    pass


def _default(section: str) -> dict:
    return copy.deepcopy(DEFAULTS[section])


DEFAULTS = {
    "data": {"num_clusters": 8, "ring_radius": 4.0, "cluster_std": 0.4,
             "negative_cluster_index": 0, "n_negatives": 2048},
    "model": {"kind": "analytic", "batch": 512, "steps": 2000, "lr": 1e-3,
              "optimizer": "adam", "hidden": [512, 512, 512, 512], "seed": 0},
    "sampler": {"steps": 50, "integrator": "midpoint", "midpoint_guidance_only": True,
                "guidance_space": "x0"},
    "guidance": {"field": "mmd", "lambda": 0.002, "mode": "equal_strength",
                 "mmd_scale": "kernel_sum", "gamma": -1.0, "top_k": 3, "eps": 0.05,
                 "r": 1.0, "alpha": 1.0, "eta": 1.0, "beta_min": 0.0},
    "eval": {"n_eval": 2048, "target_excludes_negative": True, "unsafe_radius": 1.2},
}


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=lambda: _default("data"))
    model: dict = field(default_factory=lambda: _default("model"))
    sampler: dict = field(default_factory=lambda: _default("sampler"))
    guidance: dict = field(default_factory=lambda: _default("guidance"))
    eval: dict = field(default_factory=lambda: _default("eval"))
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs"

    def __post_init__(self):
        for name in DEFAULTS:
            given = getattr(self, name) or {}
            unknown = set(given) - set(DEFAULTS[name])
            if unknown:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
            merged = _default(name)
            merged.update(given)
            setattr(self, name, merged)
        d, e = self.data, self.eval
        if not 0 <= d["negative_cluster_index"] < d["num_clusters"]:
            raise ConfigError("negative_cluster_index must be < num_clusters")
        if d["n_negatives"] < 2:
            raise ConfigError("n_negatives must be >= 2")
        if e["n_eval"] < 2:
            raise ConfigError("n_eval must be >= 2")
        if self.model["kind"] not in ("analytic", "trained"):
            raise ConfigError(f"model.kind must be 'analytic' or 'trained', got {self.model['kind']!r}")
        if not self.seeds:
            raise ConfigError("at least one seed required")
        self.seeds = [int(s) for s in self.seeds]
        # surface invalid sampler/guidance settings now, not mid-run
        self.sampler_config(0)
        self.guidance_spec((1.0, 0.0))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"data", "model", "sampler", "guidance", "eval", "seeds", "output_dir"}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("seeds")
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)

    def sampler_config(self, seed: int, guidance: GuidanceSpec | None = None) -> SamplerConfig:
        s = self.sampler
        return SamplerConfig(steps=int(s["steps"]), integrator=s["integrator"], seed=seed,
                             guidance=guidance, midpoint_guidance_only=bool(s["midpoint_guidance_only"]),
                             guidance_space=s["guidance_space"])

    def guidance_spec(self, window, base_lambda: float | None = None, mode: str | None = None,
                      reference_window_length: float | None = None) -> GuidanceSpec:
        g = self.guidance
        mode = mode or g["mode"]
        lam = g["lambda"] if base_lambda is None else base_lambda
        if mode == "equal_budget" and reference_window_length is None:
            reference_window_length = window[0] - window[1]
        sched = Schedule(window[0], window[1], lam, mode,
                         reference_window_length if mode == "equal_budget" else None)
        kern = KernelConfig(g["gamma"], int(g["top_k"]), g["eps"])
        return GuidanceSpec(g["field"], sched, kern, g["r"], g["alpha"], g["eta"], g["beta_min"],
                            g["mmd_scale"])


def ring_points(n: int, gen: np.random.Generator, num_clusters: int, radius: float, std: float,
                clusters=None) -> np.ndarray:
    """Cluster ids first, then x jitter, then y jitter.

    ``clusters`` restricts the ids to a list (uniform over it); a single
    int fixes every point to that cluster.
    """
    if clusters is None:
        ids = gen.integers(0, num_clusters, n)
    elif np.isscalar(clusters):
        ids = np.full(n, int(clusters))
    else:
        pool = np.asarray(clusters)
        ids = pool[gen.integers(0, len(pool), n)]
    ang = 2 * np.pi * ids / num_clusters
    x = radius * np.cos(ang) + std * gen.standard_normal(n)
    y = radius * np.sin(ang) + std * gen.standard_normal(n)
    return np.stack([x, y], axis=1)


def _ring_args(cfg):
    d = cfg.data
    return int(d["num_clusters"]), float(d["ring_radius"]), float(d["cluster_std"])


def generate_ring(cfg: ExperimentConfig, seed: int, n: int | None = None) -> np.ndarray:
    return ring_points(n or cfg.eval["n_eval"], rng.generator(seed, 2, rng.DATA), *_ring_args(cfg))


def generate_negatives(cfg: ExperimentConfig, seed: int) -> np.ndarray:
    return ring_points(int(cfg.data["n_negatives"]), rng.generator(seed, 0, rng.DATA), *_ring_args(cfg),
                       clusters=int(cfg.data["negative_cluster_index"]))


def generate_target(cfg: ExperimentConfig, seed: int) -> np.ndarray:
    """Reference sample for W2: the ring, minus the negative cluster if configured."""
    k = int(cfg.data["num_clusters"])
    keep = list(range(k))
    if cfg.eval["target_excludes_negative"]:
        keep.remove(int(cfg.data["negative_cluster_index"]))
    return ring_points(int(cfg.eval["n_eval"]), rng.generator(seed, 1, rng.DATA), *_ring_args(cfg),
                       clusters=keep)


def unsafe_center(cfg: ExperimentConfig) -> np.ndarray:
    k, r, _ = _ring_args(cfg)
    ang = 2 * np.pi * int(cfg.data["negative_cluster_index"]) / k
    return np.array([r * np.cos(ang), r * np.sin(ang)])


def ring_mixture(cfg: ExperimentConfig) -> MixtureModel:
    k, r, s = _ring_args(cfg)
    return MixtureModel.ring(k, r, s)


class RingData:
    """Training stream drawn exactly like the toy ring generator."""

    dim = 2

    def __init__(self, cfg: ExperimentConfig):
        self.args = _ring_args(cfg)

    def sample(self, n, gen):
        return ring_points(n, gen, *self.args)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    m = cfg.model
    return TrainConfig(batch=int(m["batch"]), steps=int(m["steps"]), lr=float(m["lr"]),
                       optimizer=m["optimizer"], hidden=tuple(m["hidden"]), seed=int(m["seed"]))


def build_model(cfg: ExperimentConfig, cache_dir: Path | None = None):
    """Analytic mixture velocity, or an MLP trained (or loaded from cache) per the config."""
    if cfg.model["kind"] == "analytic":
        return AnalyticVelocity(ring_mixture(cfg))
    blob = json.dumps({"data": cfg.data, "model": cfg.model}, sort_keys=True)
    key = hashlib.sha256(blob.encode()).hexdigest()[:16]
    path = None if cache_dir is None else Path(cache_dir) / f"mlp_{key}.bin"
    if path is not None and path.exists():
        return TrainedVelocity(load_checkpoint(path))
    result = train_velocity(RingData(cfg), train_config(cfg))
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.model, path)
    return TrainedVelocity(result.model)


def evaluate(cfg: ExperimentConfig, points, target, seed: int) -> EvalReport:
    gamma = 1.0 / (2.0 * float(cfg.data["cluster_std"]) ** 2)
    return EvalReport(
        w2_squared=w2_squared(points, target),
        unsafe_rate=unsafe_rate(points, unsafe_center(cfg), float(cfg.eval["unsafe_radius"])),
        mmd_to_target=mmd_to_target(points, target, gamma),
        n_points=len(points),
        seed=seed,
    )


@dataclass
class RunRecord:
    experiment: str
    config_hash: str
    rows: list = field(default_factory=list)
    medians: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values())

    def as_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d

    def failures(self) -> list:
        return [f"{name}: {c['detail']}" for name, c in self.checks.items() if not c["passed"]]


def _row(experiment, h, arm, window, spec, rep: EvalReport):
    sched = None if spec is None else spec.schedule
    return {
        "config_hash": h, "experiment": experiment, "arm": arm,
        "t_start": "" if window is None else window[0],
        "t_end": "" if window is None else window[1],
        "lambda": 0.0 if sched is None else sched.strength,
        "budget": 0.0 if sched is None else sched.budget,
        "seed": rep.seed, "w2_squared": rep.w2_squared, "unsafe_rate": rep.unsafe_rate,
        "mmd_to_target": rep.mmd_to_target, "n_points": rep.n_points,
    }


def _medians(rows, arms):
    out = {}
    for arm in arms:
        sel = [r for r in rows if r["arm"] == arm]
        out[arm] = {k: float(np.median([r[k] for r in sel]))
                    for k in ("w2_squared", "unsafe_rate", "mmd_to_target")}
    return out


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class RunStore:
    """Per-(seed, arm) JSON records plus one appendable CSV summary per experiment."""

    def __init__(self, cfg: ExperimentConfig, experiment: str):
        self.cfg = cfg
        self.hash = cfg.config_hash()
        self.dir = cfg.output_root() / experiment
        self.experiment = experiment
        self.summary = self.dir / "summary.csv"
        self.existing = self._load_existing()

    def _load_existing(self) -> dict:
        if not self.summary.exists():
            return {}
        with open(self.summary, newline="") as f:
            rows = list(csv.DictReader(f))
        hashes = {r["config_hash"] for r in rows}
        if hashes - {self.hash}:
            raise HashMismatch(
                f"{self.summary} holds results for config hash {sorted(hashes)}, current config is "
                f"{self.hash}; refusing to append (use a fresh output directory)"
            )
        return {(r["arm"], int(r["seed"])): r for r in rows}

    def record_path(self, arm: str, seed: int) -> Path:
        return self.dir / f"{self.hash}_{arm}_seed{seed}.json"

    def has(self, arm: str, seed: int) -> bool:
        return (arm, seed) in self.existing

    def cached_row(self, arm: str, seed: int) -> dict:
        r = dict(self.existing[(arm, seed)])
        for k in ("lambda", "budget", "w2_squared", "unsafe_rate", "mmd_to_target"):
            r[k] = float(r[k])
        for k in ("t_start", "t_end"):
            r[k] = float(r[k]) if r[k] != "" else ""
        r["seed"], r["n_points"] = int(r["seed"]), int(r["n_points"])
        return r

    def write(self, row: dict, extra: dict, points=None):
        self.dir.mkdir(parents=True, exist_ok=True)
        rec = {"config_hash": self.hash, "config": self.cfg.to_dict(), **row, **extra}
        with open(self.record_path(row["arm"], row["seed"]), "w") as f:
            json.dump(rec, f, indent=2, sort_keys=True)
        new = not self.summary.exists()
        with open(self.summary, "a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(SUMMARY_FIELDS)
            w.writerow([_fmt(row[k]) for k in SUMMARY_FIELDS])
        self.existing[(row["arm"], row["seed"])] = {k: _fmt(row[k]) for k in SUMMARY_FIELDS}
        if points is not None:
            np.savetxt(self.dir / f"{self.hash}_{row['arm']}_seed{row['seed']}_points.csv",
                       points, delimiter=",", header="x0,x1", comments="", fmt="%.17g")

    def write_record(self, record: RunRecord):
        self.dir.mkdir(parents=True, exist_ok=True)
        with open(self.dir / f"{self.hash}_record.json", "w") as f:
            json.dump(record.as_dict(), f, indent=2, sort_keys=True)


def _run_arms(cfg, experiment, arms, store: RunStore | None, model=None, dump_points=False):
    """Sample every (seed, arm), paired on the same initial noise per seed."""
    h = cfg.config_hash()
    clock = {"model": 0.0, "sample": 0.0, "eval": 0.0}
    t0 = time.perf_counter()
    if model is None:
        model = build_model(cfg, None if store is None else store.dir.parent / "checkpoints")
    clock["model"] = time.perf_counter() - t0
    rows = []
    n = int(cfg.eval["n_eval"])
    for seed in cfg.seeds:
        negatives = target = None
        for arm, (window, spec) in arms.items():
            if store is not None and store.has(arm, seed):
                rows.append(store.cached_row(arm, seed))
                continue
            if negatives is None:
                negatives = generate_negatives(cfg, seed)
                target = generate_target(cfg, seed)
            t0 = time.perf_counter()
            res = sample(model, cfg.sampler_config(seed, spec), negatives, n, 2)
            t1 = time.perf_counter()
            rep = evaluate(cfg, res.points, target, seed)
            t2 = time.perf_counter()
            clock["sample"] += t1 - t0
            clock["eval"] += t2 - t1
            row = _row(experiment, h, arm, window, spec, rep)
            rows.append(row)
            log.info("%s seed=%d arm=%s W2=%.4f unsafe=%.4f", experiment, seed, arm,
                     rep.w2_squared, rep.unsafe_rate)
            if store is not None:
                store.write(row, {"model": model.kind, "wall_clock": {"sample": t1 - t0, "eval": t2 - t1}},
                            res.points if dump_points else None)
    return rows, clock


def _check(passed: bool, detail: str) -> dict:
    return {"passed": bool(passed), "detail": detail}


def run_fig2(cfg: ExperimentConfig, write: bool = True, model=None, dump_points: bool = False) -> RunRecord:
    """Unguided vs full-window vs early-stop guidance on the ring."""
    arms = {arm: (win, None if win is None else cfg.guidance_spec(win, mode="equal_strength"))
            for arm, win in FIG2_ARMS.items()}
    store = RunStore(cfg, "fig2") if write else None
    rows, clock = _run_arms(cfg, "fig2", arms, store, model, dump_points)
    med = _medians(rows, arms)
    rec = RunRecord("fig2", cfg.config_hash(), rows, med, wall_clock=clock)
    w_e, w_f = med["early"]["w2_squared"], med["full"]["w2_squared"]
    u_n = med["unguided"]["unsafe_rate"]
    rec.checks["w2_early_below_full"] = _check(w_e < w_f, f"median W2 early={w_e:.4f} full={w_f:.4f}")
    for arm in ("full", "early"):
        u = med[arm]["unsafe_rate"]
        rec.checks[f"unsafe_{arm}_below_unguided"] = _check(
            u < u_n, f"median unsafe_rate {arm}={u:.4f} unguided={u_n:.4f}")
    if store is not None:
        store.write_record(rec)
    return rec


def window_arm(window) -> str:
    return f"w{window[0]:.2f}-{window[1]:.2f}"


def run_window_ablation(cfg: ExperimentConfig, windows=None, mode: str = "equal_budget",
                        write: bool = True, model=None, base_lambda: float | None = None) -> RunRecord:
    """Sweep guidance windows; the earliest should do no worse on unsafe mass.

    Under ``equal_budget`` the reference length is that of the first window,
    so the first window runs at ``base_lambda`` and later ones are rescaled.
    """
    windows = [tuple(map(float, w)) for w in (windows or DEFAULT_WINDOWS[mode])]
    base_lambda = ABLATION_LAMBDA if base_lambda is None else base_lambda
    if not windows:
        raise ConfigError("need at least one window")
    ref = windows[0][0] - windows[0][1]
    arms = {window_arm(w): (w, cfg.guidance_spec(w, base_lambda, mode, ref if mode == "equal_budget" else None))
            for w in windows}
    sub = f"ablation_{mode}"
    store = RunStore(cfg, sub) if write else None
    rows, clock = _run_arms(cfg, sub, arms, store, model)
    med = _medians(rows, arms)
    rec = RunRecord(sub, cfg.config_hash(), rows, med, wall_clock=clock)
    names = list(arms)
    first = med[names[0]]["unsafe_rate"]
    worse = [n for n in names[1:] if first > med[n]["unsafe_rate"]]
    rec.checks["earliest_no_worse_than_later"] = _check(
        not worse, f"earliest {names[0]} unsafe={first:.4f}; later windows beating it: "
                   + (", ".join(f"{n}={med[n]['unsafe_rate']:.4f}" for n in worse) or "none"))
    if len(names) > 1:
        last = med[names[-1]]["unsafe_rate"]
        rec.checks["earliest_no_worse_than_latest"] = _check(
            first <= last, f"earliest={first:.4f} latest {names[-1]}={last:.4f}")
    if store is not None:
        store.write_record(rec)
    return rec


def format_record(rec: RunRecord) -> str:
    lines = [f"{rec.experiment}  config {rec.config_hash}",
             f"{'arm':<14} {'W2 median':>10} {'unsafe median':>14} {'MMD median':>11}"]
    for arm, m in rec.medians.items():
        lines.append(f"{arm:<14} {m['w2_squared']:>10.4f} {m['unsafe_rate']:>14.4f} {m['mmd_to_target']:>11.5f}")
    for name, c in rec.checks.items():
        lines.append(f"[{'PASS' if c['passed'] else 'FAIL'}] {name}: {c['detail']}")
    return "\n".join(lines)


def report(directory) -> str:
    """Summarize every ``*_record.json`` below ``directory``."""
    directory = Path(directory)
    paths = sorted(directory.rglob("*_record.json"))
    if not paths:
        raise FileNotFoundError(f"no run records under {directory}")
    out = []
    for p in paths:
        with open(p) as f:
            d = json.load(f)
        rec = RunRecord(d["experiment"], d["config_hash"], d["rows"], d["medians"], d["checks"], d["wall_clock"])
        out.append(format_record(rec))
    return "\n\n".join(out)
