"""Experiment driver: scenarios, baseline schedulers, seeded run matrices.

Device 0 is always the master with a loss-free link; workers carry the
configured packet loss on their uplinks. Compute power maps from a frequency
grid to work units through a single calibration constant so scheduler costs
and runtime timings share one scale.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelSpec, init_model
from .runtime import OutOfMemoryError, RuntimeConfig, generate
from .sap import collect_calibration, synthetic_prompts, train
from .scheduler import (CostModel, DeviceProfile, InsufficientMemoryError,
                        Schedule, check_ratios, comp_greedy, min_max, plr_map)
from .transport import ChannelConfig, TimeoutPolicy

UNITS_PER_GHZ = 1.0e6

SCHEDULERS = ("min_max", "comp_greedy", "vanilla_even", "galaxy_two_step")


def desk_model_spec(seed: int = 0) -> ModelSpec:
    """Default desk-scale model: every code path exercised in milliseconds."""
    return ModelSpec(num_layers=4, hidden_dim=64, num_heads=8, num_kv_heads=4,
                     mlp_groups=16, vocab_groups=16, group_size=8, seed=seed)


@dataclass(frozen=True)
class ScenarioParams:
    """Random heterogeneous device configurations on the reference grids.

    Frequencies walk a 0.6-1.8 GHz grid in 0.1 steps with the cluster mean
    pinned; memory walks a coarse grid expressed as fractions of the model's
    demand. Only two constraints filter the draw: the budgets jointly hold the
    model and the mean frequency matches the target.
    """

    n: int = 4
    freq_min: float = 0.6
    freq_max: float = 1.8
    freq_step: float = 0.1
    mean_freq: float = 1.2
    mean_tol: float = 0.05
    mem_frac_min: float = 0.067   # 300 MB on a 4.5 GB model
    mem_frac_max: float = 1.4     # 6300 MB likewise
    mem_frac_step: float = 0.0444
    worker_plr: float = 0.05
    max_attempts: int = 100000


class ScenarioError(RuntimeError):
    pass


def generate_scenarios(params: ScenarioParams, count: int, seed: int,
                       total_memory: float) -> list[list[DeviceProfile]]:
    """Rejection-sample device sets satisfying both scenario constraints."""
    rng = np.random.default_rng(seed)
    freqs = np.round(np.arange(params.freq_min, params.freq_max + 1e-9,
                               params.freq_step), 10)
    fracs = np.arange(params.mem_frac_min, params.mem_frac_max + 1e-12,
                      params.mem_frac_step)
    out = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > params.max_attempts:
            raise ScenarioError("scenario constraints unsatisfiable within attempt budget")
        f = rng.choice(freqs, size=params.n)
        m = rng.choice(fracs, size=params.n) * total_memory
        if m.sum() < total_memory:
            continue
        if abs(float(f.mean()) - params.mean_freq) > params.mean_tol:
            continue
        out.append([DeviceProfile(i, float(m[i]), float(f[i]) * UNITS_PER_GHZ,
                                  plr=0.0 if i == 0 else params.worker_plr)
                    for i in range(params.n)])
    return out


def homogeneous_scenario(n: int, total_memory: float, freq: float = 1.8,
                         worker_plr: float = 0.05,
                         mem_margin: float = 1.5) -> list[DeviceProfile]:
    share = total_memory * mem_margin / n
    return [DeviceProfile(i, share, freq * UNITS_PER_GHZ,
                          plr=0.0 if i == 0 else worker_plr) for i in range(n)]


def baseline_vanilla_even(n: int) -> np.ndarray:
    """Even split, feasibility deliberately unchecked: OOM surfaces downstream."""
    return np.full(n, 1.0 / n)


def baseline_galaxy_two_step(profiles: list[DeviceProfile],
                             total_memory: float) -> np.ndarray:
    """Allocate by compute power, then drain over-budget devices' excess.

    Each iteration clamps over-budget devices to their memory and hands the
    excess to the rest in proportion to compute-weighted spare capacity.
    """
    m = np.array([p.memory_mb for p in profiles])
    c = np.array([p.compute for p in profiles])
    if m.sum() < total_memory:
        raise InsufficientMemoryError(
            f"total memory {m.sum():.3f} MB < model demand {total_memory:.3f} MB")
    u = total_memory * c / c.sum()
    for _ in range(len(profiles) + 1):
        over = u > m
        if not over.any():
            break
        excess = float((u[over] - m[over]).sum())
        u[over] = m[over]
        spare = np.where(over, 0.0, m - u)
        weight = spare * c
        if weight.sum() <= 0:
            raise InsufficientMemoryError("no spare capacity to absorb excess")
        grant = np.minimum(spare, excess * weight / weight.sum())
        # Cap-limited devices may strand some excess for the next iteration.
        u = u + grant
        short = excess - float(grant.sum())
        if short > 1e-9:
            room = np.where(u < m, m - u, 0.0)
            fill = np.minimum(room, short * (room > 0) / max((room > 0).sum(), 1))
            u = u + fill
    return check_ratios(u / u.sum())


def build_schedule(scheduler: str, spec: ModelSpec, profiles: list[DeviceProfile],
                   cost: CostModel) -> Schedule:
    """Ratios by the chosen policy, then PLR-aware index mapping.

    The two load-balancing schedulers get the memory-aware integer balance;
    the baselines keep plain largest-remainder rounding of their ratios
    (vanilla even must be able to blow the memory budget, and the two-step
    baseline is reproduced as described, rounding included).
    """
    plrs = [p.plr for p in profiles]
    n = len(profiles)
    if scheduler == "min_max":
        ratios = min_max(profiles, cost.total_memory)
        return plr_map(spec, n, ratios, plrs, profiles, cost)
    if scheduler == "comp_greedy":
        ratios = comp_greedy(profiles, cost.total_memory)
        return plr_map(spec, n, ratios, plrs, profiles, cost)
    if scheduler == "galaxy_two_step":
        ratios = baseline_galaxy_two_step(profiles, cost.total_memory)
        return plr_map(spec, n, ratios, plrs, profiles, cost,
                       conversion="remainder")
    if scheduler == "vanilla_even":
        return plr_map(spec, n, baseline_vanilla_even(n), plrs)
    raise ValueError(f"unknown scheduler {scheduler!r}")


@dataclass
class ExperimentConfig:
    """One experiment cell grid; list-valued fields are crossed by run_matrix."""

    model: dict = field(default_factory=lambda: asdict(desk_model_spec()))
    n_devices: int = 4
    scenario: dict | None = None          # ScenarioParams fields, or None
    devices: list | None = None           # explicit profile dicts, or None
    scheduler: list = field(default_factory=lambda: ["min_max"])
    mapping: list = field(default_factory=lambda: ["halo"])
    sync_mode: list = field(default_factory=lambda: ["relaxed"])
    overlap: list = field(default_factory=lambda: [[True, True]])
    plr_grid: list = field(default_factory=lambda: [0.05])
    seeds: list = field(default_factory=lambda: [0])
    one_way_latency: float = 0.0002
    bandwidth: float = 125e6
    gather_timeout: float = 0.010
    retry_interval: float = 0.100
    io_bytes_per_sec: float = 50e6
    predict_seconds: float = 0.0002
    prompt_len: int = 8
    num_tokens: int = 8
    calib_prompts: int = 40
    calib_len: int = 24
    sap_epochs: int = 300
    sap_hidden: int = 64
    sap_lr: float = 0.08
    train_seed: int = 0

    def model_spec(self) -> ModelSpec:
        return ModelSpec(**self.model)

    def policy(self) -> TimeoutPolicy:
        return TimeoutPolicy(gather_timeout=self.gather_timeout,
                             reliable_retry_interval=self.retry_interval)

    @classmethod
    def from_file(cls, path: str, **overrides) -> "ExperimentConfig":
        with open(path) as fh:
            data = json.load(fh)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


def config_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


class TrainedModel:
    """Model weights plus trained predictors, shared across matrix cells."""

    def __init__(self, spec: ModelSpec, config: ExperimentConfig):
        self.spec = spec
        self.store = init_model(spec)
        self.cost = CostModel.from_model_spec(
            spec, bandwidth_bps=config.bandwidth * 8)
        prompts = synthetic_prompts(spec, config.calib_prompts, config.calib_len,
                                    seed=config.train_seed)
        calib = collect_calibration(self.store, prompts)
        self.pset, self.val_losses = train(
            calib, hidden_p=config.sap_hidden, epochs=config.sap_epochs,
            learning_rate=config.sap_lr, seed=config.train_seed)


def profiles_for(config: ExperimentConfig, seed: int,
                 cost: CostModel) -> list[DeviceProfile]:
    if config.devices:
        return [DeviceProfile(**d) for d in config.devices]
    params = ScenarioParams(n=config.n_devices, **(config.scenario or {}))
    return generate_scenarios(params, 1, seed, cost.total_memory)[0]


def uplinks_for(profiles: list[DeviceProfile], config: ExperimentConfig,
                plr: float, seed: int) -> list[ChannelConfig]:
    """Workers carry ``plr`` on their uplink; the master link is clean."""
    return [ChannelConfig(plr=0.0 if p.device_id == 0 else plr,
                          one_way_latency=config.one_way_latency,
                          bandwidth=config.bandwidth,
                          seed=seed * 1009 + p.device_id)
            for p in profiles]


def run_cell(trained: TrainedModel, config: ExperimentConfig, scheduler: str,
             mapping: str, sync_mode: str, overlap: list, plr: float,
             seed: int) -> dict:
    """One (scheduler, mapping, sync, overlap, plr, seed) cell; errors reported."""
    spec, cost = trained.spec, trained.cost
    cell = {"scheduler": scheduler, "mapping": mapping, "sync_mode": sync_mode,
            "overlap_load_comp": bool(overlap[0]), "overlap_pred_comm": bool(overlap[1]),
            "plr": plr, "seed": seed, "model": asdict(spec),
            "prompt_len": config.prompt_len, "num_tokens": config.num_tokens}
    row = {"kind": "run", "config_hash": config_hash(cell), **cell}
    try:
        profiles = profiles_for(config, seed, cost)
        schedule = build_schedule(scheduler, spec, profiles, cost)
        rcfg = RuntimeConfig(sync_mode=sync_mode, mapping=mapping,
                             overlap_load_comp=bool(overlap[0]),
                             overlap_pred_comm=bool(overlap[1]),
                             policy=config.policy(),
                             io_bytes_per_sec=config.io_bytes_per_sec,
                             predict_seconds=config.predict_seconds)
        prompt = synthetic_prompts(spec, 1, config.prompt_len,
                                   seed=seed + 10_000)[0]
        uplinks = uplinks_for(profiles, config, plr, seed)
        result = generate(trained.store, schedule, profiles, trained.pset,
                          uplinks, rcfg, prompt, config.num_tokens,
                          cost=cost, seed=seed)
        row.update(tpt=result.tpt, mean_deviation=result.mean_deviation,
                   lost_groups=result.lost_groups, setup_time=result.setup_time,
                   total_time=result.total_time, steps=result.steps,
                   error=None)
    except (OutOfMemoryError, InsufficientMemoryError, ScenarioError) as exc:
        row.update(tpt=None, mean_deviation=None, lost_groups=None,
                   setup_time=None, total_time=None, steps=None,
                   error=f"{type(exc).__name__}: {exc}")
    return row


def run_matrix(config: ExperimentConfig, trained: TrainedModel | None = None,
               progress=None) -> list[dict]:
    """Cross product of the grid fields; one row per run, errors included."""
    trained = trained or TrainedModel(config.model_spec(), config)
    rows = []
    cells = list(itertools.product(config.scheduler, config.mapping,
                                   config.sync_mode, config.overlap,
                                   config.plr_grid, config.seeds))
    for idx, (scheduler, mapping, sync_mode, overlap, plr, seed) in enumerate(cells):
        row = run_cell(trained, config, scheduler, mapping, sync_mode, overlap,
                       plr, seed)
        rows.append(row)
        if progress is not None:
            progress(idx + 1, len(cells), row)
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """Mean TPT / deviation per cell across seeds; error counts preserved."""
    groups: dict = {}
    for row in rows:
        if row.get("kind") != "run":
            continue
        key = (row["scheduler"], row["mapping"], row["sync_mode"],
               row["overlap_load_comp"], row["overlap_pred_comm"], row["plr"])
        groups.setdefault(key, []).append(row)
    out = []
    for key, group in sorted(groups.items(), key=lambda kv: str(kv[0])):
        ok = [r for r in group if r["error"] is None]
        summary = {"kind": "summary", "scheduler": key[0], "mapping": key[1],
                   "sync_mode": key[2], "overlap_load_comp": key[3],
                   "overlap_pred_comm": key[4], "plr": key[5],
                   "runs": len(group), "errors": len(group) - len(ok)}
        if ok:
            summary["mean_tpt"] = float(np.mean([r["tpt"] for r in ok]))
            summary["mean_deviation"] = float(np.mean([r["mean_deviation"]
                                                       for r in ok]))
            summary["mean_lost_groups"] = float(np.mean([r["lost_groups"]
                                                         for r in ok]))
        out.append(summary)
    return out


# ---------------------------------------------------------------------------
# The synchronization-trend experiment: a deeper, narrower model where the
# reliable/relaxed asymmetry dominates, mirroring the protocol comparison.
# ---------------------------------------------------------------------------

def trend_model_spec(seed: int = 0) -> ModelSpec:
    return ModelSpec(num_layers=24, hidden_dim=32, num_heads=4, num_kv_heads=2,
                     mlp_groups=4, vocab_groups=4, group_size=8, seed=seed)


# Calibrated so one token's compute sits between the timeout stalls it must
# dwarf (relaxed mode) and the retransmission stalls that must dwarf it
# (reliable mode): token compute ~0.45 s against ~0.12 s of timeout overhead
# and ~0.8 s of retransmission overhead at 5% loss.
TREND_COMPUTE_UNITS = 159e3
TREND_RETRY_INTERVAL = 0.110


def trend_config(seeds: list[int] | None = None) -> ExperimentConfig:
    spec = trend_model_spec()
    total_memory = CostModel.from_model_spec(spec).total_memory
    devices = [asdict(DeviceProfile(i, total_memory * 0.5, TREND_COMPUTE_UNITS,
                                    plr=0.0)) for i in range(4)]
    return ExperimentConfig(
        model=asdict(spec),
        n_devices=4,
        devices=devices,
        scheduler=["min_max"], mapping=["random"],
        sync_mode=["relaxed", "reliable"],
        plr_grid=[0.0, 0.01, 0.02, 0.05],
        seeds=seeds if seeds is not None else list(range(100)),
        prompt_len=2, num_tokens=3,
        retry_interval=TREND_RETRY_INTERVAL,
        calib_prompts=4, calib_len=8, sap_epochs=10)
