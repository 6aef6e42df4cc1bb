"""Monte Carlo experiments: BER/BMI/MSE over SNR and estimation error over iterations.

Every block draws its channel, symbols, noise, pilots and initializer
perturbation from its own substream ``SeedSequence(seed, spawn_key=(snr_index,
block_index))``. Blocks are processed in fixed-size chunks and merged in
order, so results do not depend on the number of workers.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .algorithm import InitStrategy, initialize, run_embp
from .baselines import PilotConfig, pilot_log_prior, pilot_ls_estimate, trellis_map_detect
from .bp import detect, run_bp
from .em import Schedule, make_schedule
from .model import (
    ChannelParams,
    Constellation,
    build_matched_stats,
    complex_noise,
    convolve,
    get_constellation,
    sample_channel,
    snr_to_sigma2,
)
from .training import BELIEF_FLOOR, sign_resolved_flip, squared_error

logger = logging.getLogger(__name__)

DETECTORS = ("embp", "bp_coherent", "bp_with_embp_estimate", "map_coherent", "map_pilot")
REFERENCE_BLOCKS = 10**7


@dataclass(frozen=True)
class ExperimentConfig:
    N: int = 100
    L: int = 2
    constellation: str = "bpsk"
    snr_db: tuple = (0.0, 3.0, 6.0, 9.0, 12.0)
    blocks: int = 10_000
    detectors: tuple = ("embp", "bp_coherent", "bp_with_embp_estimate", "map_coherent")
    schedule: str = "serial"
    T: int | None = None
    beta_bp: str = "1.0"
    bp_iterations: int | None = None
    init: str = "impulse_power:0.1"
    seed: int = 0
    workers: int = 1
    chunk_size: int = 500

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError("block count must be at least 1")
        if len(self.snr_db) == 0:
            raise ValueError("snr grid must be nonempty")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        for d in self.detectors:
            if d.split(":")[0] not in DETECTORS:
                raise ValueError(f"unknown detector {d!r}")
            if d.startswith("map_pilot"):
                PilotConfig(float(d.split(":")[1]) if ":" in d else 0.05).count(self.N, self.L)
        InitStrategy.parse(self.init)

    @property
    def T_resolved(self) -> int:
        return self.T if self.T is not None else 3 * (self.L + 2)

    def resolve_schedule(self) -> Schedule:
        """Named schedule (``serial``/``parallel``) or a schedule file path."""
        if self.schedule in ("serial", "parallel"):
            sched = make_schedule(self.schedule, self.T_resolved, self.L)
        else:
            sched = Schedule.load(self.schedule)
            if sched.L != self.L:
                raise ValueError(f"schedule file is for L={sched.L}, experiment has L={self.L}")
        if self.beta_bp not in ("", "schedule"):
            try:
                value = float(self.beta_bp)
            except ValueError:
                value = Schedule.load(self.beta_bp).beta_bp
            sched = sched.with_beta_bp(value)
        return sched

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_db"] = list(self.snr_db)
        d["detectors"] = list(self.detectors)
        return d


_INT_FIELDS = {"N", "L", "blocks", "T", "bp_iterations", "seed", "workers", "chunk_size"}


def _coerce(key: str, value: str):
    value = value.strip()
    if key in ("snr_db", "detectors"):
        items = [v.strip() for v in value.replace(";", ",").split(",") if v.strip()]
        return tuple(float(v) for v in items) if key == "snr_db" else tuple(items)
    if key in _INT_FIELDS:
        return None if value.lower() in ("", "none") else int(value, 0)
    return value


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read ``[experiment]`` from an INI file and apply ``key -> string`` overrides."""
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(path)
        if "experiment" in parser:
            values.update({k.lower(): v for k, v in parser["experiment"].items()})
    values.update({k.lower(): str(v) for k, v in (overrides or {}).items() if v is not None})
    # INI keys arrive lowercased
    known = {k.lower(): k for k in ExperimentConfig.__dataclass_fields__}
    unknown = {k for k in values if k.lower() not in known}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    fields = {known[k.lower()]: v for k, v in values.items()}
    return ExperimentConfig(**{k: _coerce(k, v) for k, v in fields.items()})


def block_rng(seed: int, snr_index: int, block_index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(snr_index, block_index, stream)))


@dataclass
class ChunkData:
    symbol_indices: np.ndarray
    h: np.ndarray
    sigma2: np.ndarray
    noise: np.ndarray
    pilots: dict
    init_rngs: list


def draw_chunk(config: ExperimentConfig, constellation: Constellation, snr_index: int, start: int, stop: int) -> ChunkData:
    snr = config.snr_db[snr_index]
    N, L = config.N, config.L
    idx, hs, s2, noise, init_rngs = [], [], [], [], []
    pilot_fracs = [float(d.split(":")[1]) if ":" in d else 0.05 for d in config.detectors if d.startswith("map_pilot")]
    pilots = {f: [] for f in pilot_fracs}
    for b in range(start, stop):
        rng = block_rng(config.seed, snr_index, b)
        h = sample_channel(L, rng)
        sigma2 = float(snr_to_sigma2(snr, h, constellation, N))
        idx.append(constellation.sample_indices(rng, N))
        noise.append(complex_noise(rng, sigma2, (N + L,)))
        hs.append(h)
        s2.append(sigma2)
        init_rngs.append(block_rng(config.seed, snr_index, b, stream=1))
        prng = block_rng(config.seed, snr_index, b, stream=2)
        for f in pilot_fracs:
            pilots[f].append(PilotConfig(f).pilot_indices(N, L, constellation, rng=prng))
    return ChunkData(np.array(idx), np.array(hs), np.array(s2), np.array(noise),
                     {f: np.array(v) for f, v in pilots.items()}, init_rngs)


def _bit_errors(decisions, truth, M: int) -> np.ndarray:
    x = np.bitwise_xor(np.asarray(decisions), np.asarray(truth))
    bits = np.zeros(x.shape, dtype=int)
    for k in range(max(1, int(np.ceil(np.log2(M))))):
        bits += (x >> k) & 1
    return bits


def _log2_true(log_beliefs, truth) -> np.ndarray:
    lp = np.take_along_axis(log_beliefs, truth[..., None], axis=-1)[..., 0]
    return np.maximum(lp, np.log(BELIEF_FLOOR)) / np.log(2.0)


def _initial(config, init: InitStrategy, y, truth: ChannelParams, constellation, rngs):
    if init.kind == "genie_perturbed" and init.scale > 0:
        # one draw per block from its own stream keeps the init independent of chunking
        per_block = [initialize(init, y[i], config.L, constellation, truth=truth[i], rng=rngs[i]) for i in range(len(rngs))]
        return ChannelParams(np.stack([p.h for p in per_block]), np.stack([p.sigma2 for p in per_block]))
    return initialize(init, y, config.L, constellation, truth=truth)


def _run_detectors(config: ExperimentConfig, schedule: Schedule, data: ChunkData, constellation: Constellation):
    """Per-block metrics for one chunk: dict of name -> (bit_errors, log2_sum, sq_err, bits)."""
    N, L, M = config.N, config.L, constellation.M
    symbols = constellation.points[data.symbol_indices]
    truth = ChannelParams(data.h, data.sigma2)
    y = convolve(data.h, symbols) + data.noise
    init = InitStrategy.parse(config.init)
    T_bp = config.bp_iterations or schedule.T
    nan = np.full(len(y), np.nan)
    neg = constellation.negation_index()
    out = {}
    embp_result = None

    def record(name, log_b, positions=slice(None), flip=None, sq=nan):
        dec = detect(log_b)
        lb = log_b
        if flip is not None:
            dec = np.where(flip[:, None], neg[dec], dec)
            lb = np.where(flip[:, None, None], log_b[..., neg], log_b)
        errs = _bit_errors(dec[:, positions], data.symbol_indices[:, positions], M).sum(axis=-1)
        l2 = _log2_true(lb[:, positions], data.symbol_indices[:, positions]).sum(axis=-1)
        n_sym = dec[:, positions].shape[-1]
        out[name] = (errs, l2, sq, np.full(len(y), n_sym))

    for det in config.detectors:
        kind = det.split(":")[0]
        if kind in ("embp", "bp_with_embp_estimate") and embp_result is None:
            theta0 = _initial(config, init, y, truth, constellation, data.init_rngs)
            embp_result = run_embp(y, constellation, L, schedule, theta0)
            embp_flip = sign_resolved_flip(embp_result.final_params.h, data.h)
            embp_sq = squared_error(embp_result.final_params.h, data.h)
        if kind == "embp":
            record(det, embp_result.final_beliefs, flip=embp_flip, sq=embp_sq)
        elif kind == "bp_with_embp_estimate":
            lb = run_bp(build_matched_stats(embp_result.final_params, y), constellation, T_bp)
            record(det, lb, flip=embp_flip, sq=embp_sq)
        elif kind == "bp_coherent":
            lb = run_bp(build_matched_stats(truth, y), constellation, T_bp, beta_bp=schedule.beta_bp
                        if T_bp == schedule.T else None)
            record(det, lb)
        elif kind == "map_coherent":
            marg = trellis_map_detect(y, truth, constellation)
            record(det, np.log(np.maximum(marg, BELIEF_FLOOR)))
        elif kind == "map_pilot":
            frac = float(det.split(":")[1]) if ":" in det else 0.05
            pil = data.pilots[frac]
            P = pil.shape[-1]
            tx = data.symbol_indices.copy()
            tx[:, :P] = pil
            y_p = convolve(data.h, constellation.points[tx]) + data.noise
            est = pilot_ls_estimate(y_p, constellation.points[pil], L, constellation)
            prior = pilot_log_prior(pil, N, M, batch_shape=(len(y),))
            marg = trellis_map_detect(y_p, est, constellation, log_prior=prior)
            lb = np.log(np.maximum(marg, BELIEF_FLOOR))
            saved = data.symbol_indices
            data.symbol_indices = tx
            record(det, lb, positions=slice(P, None), sq=np.sum(np.abs(est.h - data.h) ** 2, axis=-1))
            data.symbol_indices = saved
    return out


def _chunk_task(args):
    t0 = time.perf_counter()
    out, failures = _chunk_metrics(*args)
    return out, failures, time.perf_counter() - t0


def _chunk_metrics(config, snr_index, start, stop):
    constellation = get_constellation(config.constellation)
    schedule = config.resolve_schedule()
    data = draw_chunk(config, constellation, snr_index, start, stop)
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            return _run_detectors(config, schedule, data, constellation), 0
        except (FloatingPointError, np.linalg.LinAlgError, ValueError):
            pass
        # isolate failing blocks
        merged, failures = {}, 0
        for i in range(stop - start):
            sub = ChunkData(data.symbol_indices[i : i + 1], data.h[i : i + 1], data.sigma2[i : i + 1],
                            data.noise[i : i + 1], {f: v[i : i + 1] for f, v in data.pilots.items()},
                            data.init_rngs[i : i + 1])
            try:
                res = _run_detectors(config, schedule, sub, constellation)
            except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
                logger.warning("block %d at snr index %d failed: %s", start + i, snr_index, exc)
                failures += 1
                continue
            for k, v in res.items():
                merged.setdefault(k, []).append(v)
        return {k: tuple(np.concatenate(parts) for parts in zip(*v)) for k, v in merged.items()}, failures


def _chunks(config: ExperimentConfig, snr_index: int):
    return [(config, snr_index, s, min(s + config.chunk_size, config.blocks))
            for s in range(0, config.blocks, config.chunk_size)]


def _map_ordered(tasks, fn, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


@dataclass
class ResultRow:
    snr_db: float
    blocks: int
    failures: int
    wall_time: float = 0.0
    ber: dict = field(default_factory=dict)
    bmi: dict = field(default_factory=dict)
    mse: dict = field(default_factory=dict)
    records: list = field(default_factory=list)


def run_ber_sweep(config: ExperimentConfig, dump_blocks: bool = False) -> list[ResultRow]:
    constellation = get_constellation(config.constellation)
    config.resolve_schedule()  # validate early
    bits_per_symbol = max(1, int(np.ceil(np.log2(constellation.M))))
    tasks = [t for j in range(len(config.snr_db)) for t in _chunks(config, j)]
    results = _map_ordered(tasks, _chunk_task, config.workers)
    rows = []
    for j, snr in enumerate(config.snr_db):
        parts = [r for t, r in zip(tasks, results) if t[1] == j]
        failures = sum(p[1] for p in parts)
        row = ResultRow(float(snr), config.blocks, failures, wall_time=sum(p[2] for p in parts))
        for det in config.detectors:
            cols = [p[0][det] for p in parts if det in p[0]]
            if not cols:
                row.ber[det], row.bmi[det], row.mse[det] = np.nan, np.nan, np.nan
                continue
            errs, l2, sq, nsym = (np.concatenate(c) for c in zip(*cols))
            row.ber[det] = float(errs.sum() / (nsym.sum() * bits_per_symbol))
            value = np.log2(constellation.M) + l2.sum() / nsym.sum()
            row.bmi[det] = float(np.clip(value, 0.0, np.log2(constellation.M)))
            row.mse[det] = float(np.mean(sq)) if np.all(np.isfinite(sq)) else np.nan
            if dump_blocks:
                for i in range(len(errs)):
                    if len(row.records) <= i:
                        row.records.append({"snr_db": float(snr), "block": i})
                    row.records[i][f"errors_{column_name(det)}"] = int(errs[i])
                    row.records[i][f"sq_err_{column_name(det)}"] = None if np.isnan(sq[i]) else float(sq[i])
        rows.append(row)
    return rows


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return "nan"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.8g}"


def column_name(detector: str) -> str:
    return detector.replace(":", "_")


def sweep_columns(detectors) -> list[str]:
    cols = ["snr_db", "blocks", "failures"]
    for d in map(column_name, detectors):
        cols += [f"ber_{d}", f"bmi_{d}", f"mse_{d}"]
    return cols


def sweep_csv(rows: list[ResultRow], detectors) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(sweep_columns(detectors))
    for r in rows:
        line = [_fmt(r.snr_db), _fmt(r.blocks), _fmt(r.failures)]
        for d in detectors:
            line += [_fmt(r.ber.get(d)), _fmt(r.bmi.get(d)), _fmt(r.mse.get(d))]
        w.writerow(line)
    return buf.getvalue()


def dump_records(rows: list[ResultRow], path) -> None:
    with open(path, "w") as fh:
        for r in rows:
            for rec in r.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------- iterations


def _iters_task(args):
    config, schedules, snr_index, start, stop = args
    constellation = get_constellation(config.constellation)
    data = draw_chunk(config, constellation, snr_index, start, stop)
    symbols = constellation.points[data.symbol_indices]
    truth = ChannelParams(data.h, data.sigma2)
    y = convolve(data.h, symbols) + data.noise
    init = InitStrategy.parse(config.init)
    out = {}
    with np.errstate(over="ignore", invalid="ignore"):
        for name, sched in schedules.items():
            # fresh generators per schedule so every schedule starts from the same estimate
            rngs = [block_rng(config.seed, snr_index, b, stream=1) for b in range(start, stop)]
            theta0 = _initial(config, init, y, truth, constellation, rngs)
            try:
                res = run_embp(y, constellation, config.L, sched, theta0)
                out[name] = np.stack([squared_error(p.h, data.h) for p in res.trajectory], axis=-1)
            except FloatingPointError:
                rows = []
                for i in range(stop - start):
                    try:
                        r = run_embp(y[i : i + 1], constellation, config.L, sched, theta0[i : i + 1])
                        rows.append(np.stack([squared_error(p.h, data.h[i : i + 1]) for p in r.trajectory], -1))
                    except FloatingPointError:
                        rows.append(np.full((1, sched.T + 1), np.inf))
                out[name] = np.concatenate(rows)
    return out


def run_mse_over_iters(config: ExperimentConfig, schedules: dict, snr_index: int = 0) -> dict:
    """Per-block sign-resolved squared error after every iteration ``t = 0..T`` of each schedule.

    Returns ``name -> array (blocks, T+1)``; use :func:`iters_csv` for the mean trace.
    """
    Ls = {s.L for s in schedules.values()}
    if Ls != {config.L}:
        raise ValueError("all schedules must share the experiment's L")
    tasks = [(config, schedules, snr_index, s, min(s + config.chunk_size, config.blocks))
             for s in range(0, config.blocks, config.chunk_size)]
    parts = _map_ordered(tasks, _iters_task, config.workers)
    return {name: np.concatenate([p[name] for p in parts]) for name in schedules}


def iters_csv(errors: dict) -> str:
    T_max = max(e.shape[1] for e in errors.values()) - 1
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"mse_{name}" for name in errors])
    for t in range(T_max + 1):
        w.writerow([t] + [_fmt(float(np.mean(e[:, t]))) if t < e.shape[1] else "nan" for e in errors.values()])
    return buf.getvalue()


# ---------------------------------------------------------------- adversarial channels


def belief_oscillation(h, sigma2, constellation: Constellation, N: int, rng, T: int = 50) -> np.ndarray:
    """Max belief change between BP iterations ``T-1`` and ``T`` on a random block per channel."""
    h = np.atleast_2d(h)
    idx = constellation.sample_indices(rng, (h.shape[0], N))
    y = convolve(h, constellation.points[idx])
    y = y + complex_noise(rng, sigma2, y.shape)
    _, hist = run_bp(build_matched_stats(ChannelParams(h, sigma2), y), constellation, T, return_history=True)
    return np.max(np.abs(np.exp(hist[-1]) - np.exp(hist[-2])), axis=(-2, -1))


def select_oscillating_channels(L: int, snr_db: float, count: int, N: int = 100, seed: int = 0,
                                constellation: Constellation | None = None, T: int = 50, tol: float = 1e-3,
                                candidates: int = 2000) -> np.ndarray:
    """Channels on which coherent BP has not converged after ``T`` iterations."""
    constellation = constellation or get_constellation("bpsk")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xAD,)))
    picked = []
    while sum(len(p) for p in picked) < count:
        h = sample_channel(L, rng, candidates)
        sigma2 = snr_to_sigma2(snr_db, h, constellation, N)
        osc = belief_oscillation(h, sigma2, constellation, N, rng, T=T)
        picked.append(h[osc > tol])
    return np.concatenate(picked)[:count]


def scale_note(config: ExperimentConfig) -> str:
    return f"{config.blocks} blocks per point (reference scale {REFERENCE_BLOCKS}); Monte Carlo error scales as 1/sqrt(blocks)"


def with_overrides(config: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(config, **changes)






def save_channels(path, h) -> None:
    """One channel per line: ``re_0 im_0 re_1 im_1 ...``."""
    h = np.atleast_2d(h)
    flat = np.stack([h.real, h.imag], axis=-1).reshape(len(h), -1)
    np.savetxt(path, flat, fmt="%.17g", header=f"channel taps, L={h.shape[-1] - 1}, re/im interleaved")


def load_channels(path) -> np.ndarray:
    flat = np.atleast_2d(np.loadtxt(path, comments="#"))
    return flat[:, 0::2] + 1j * flat[:, 1::2]
