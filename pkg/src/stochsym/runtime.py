"""Controller refinement and Monte Carlo validation on the concrete network.

The abstract controller is refined through an affine interface: between
sampling instants the concrete input is

    nu(t) = K (xi(t) - P xih(k)) - Q xih(k) + (xi(k tau) - P xih(k))
            + H (w(k tau) - wh(k)) - H w(t)

with all step-k quantities latched at the sampling instant.  The coupled
SDE is integrated with Euler-Maruyama substeps while the abstraction runs
in lockstep, and the sampled output mismatch is recorded per trial.

Trials are independent; each draws its Gaussian increments from its own
counter-based stream split off the master seed, so results are bitwise
reproducible regardless of chunking or worker count.  The empirical
violation frequency is reported with an exact one-sided Clopper-Pearson
upper confidence bound for comparison against the theoretical guarantee.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.stats

from .abstraction import FiniteAbstraction
from .certificates import StorageCertificate
from .errors import (
    AbstractStateLost,
    ConvergenceError,
    DimensionMismatch,
    StaleLatch,
)
from .model import AffineSystem, InterconnectionSpec, as_matrix, as_vector
from .synthesis import Controller

logger = logging.getLogger(__name__)

#: tolerated drift of the headline violation frequency when substeps double
_CONVERGENCE_TOL = 0.01


@dataclass(eq=False)
class InterfaceState:
    """Per-subsystem refinement data for one sampling interval."""

    K: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    tau: float
    step: int
    xi_latch: np.ndarray   # xi(k tau)
    xi_hat: np.ndarray     # abstract representative at step k
    w_hat: np.ndarray      # abstract internal input at step k
    w_latch: np.ndarray    # w(k tau)

    def __post_init__(self):
        for name in ("K", "P", "Q", "H"):
            setattr(self, name, as_matrix(getattr(self, name)))
        for name in ("xi_latch", "xi_hat", "w_hat", "w_latch"):
            setattr(self, name, as_vector(getattr(self, name)))


def interface_terms(state: InterfaceState, xi_t, w_t) -> dict:
    """The five addends of the refinement law, for term-level inspection."""
    xi_t = as_vector(xi_t)
    w_t = as_vector(w_t)
    p_xh = state.P @ state.xi_hat
    return {
        "feedback": state.K @ (xi_t - p_xh),
        "drift_match": -(state.Q @ state.xi_hat),
        "offset": state.xi_latch - p_xh,
        "internal_latched": state.H @ (state.w_latch - state.w_hat),
        "internal_current": -(state.H @ w_t),
    }


def interface_input(state: InterfaceState, xi_t, w_t, t: float) -> np.ndarray:
    """Concrete input at time t inside the latched sampling interval.

    Raises StaleLatch when t does not fall in [k tau, (k+1) tau) for the
    latched step k, and requires a square gain structure (the offset term
    adds a state-space vector to the input).
    """
    k = int(math.floor(t / state.tau + 1e-9))
    if k != state.step:
        raise StaleLatch(state.step, k)
    if state.K.shape[0] != state.K.shape[1]:
        raise DimensionMismatch("K", "refinement needs external input dim == state dim")
    terms = interface_terms(state, xi_t, w_t)
    return (terms["feedback"] + terms["drift_match"] + terms["offset"]
            + terms["internal_latched"] + terms["internal_current"])


def em_step(sys: AffineSystem, x, nu, w, dt: float, z) -> np.ndarray:
    """One Euler-Maruyama step: x + (A x + B nu + D w + b) dt + G sqrt(dt) z."""
    x = as_vector(x)
    z = as_vector(z)
    drift = sys.A @ x + sys.B @ as_vector(nu) + sys.b
    if sys.p:
        drift = drift + sys.D @ as_vector(w)
    return x + dt * drift + math.sqrt(dt) * (sys.G @ z)


def clopper_pearson_upper(violations: int, trials: int, confidence: float = 0.95) -> float:
    """Exact one-sided upper confidence bound on a binomial proportion."""
    if not 0 <= violations <= trials or trials < 1:
        raise DimensionMismatch("violations", "need 0 <= violations <= trials")
    if violations == trials:
        return 1.0
    return float(scipy.stats.beta.ppf(confidence, violations + 1, trials - violations))


@dataclass
class SimConfig:
    """Monte Carlo settings; one Brownian path per trial per master seed."""

    n_trials: int
    horizon: int
    epsilon: float
    n_substeps: int = 20
    rng_seed: int = 0
    chunk_size: int = 128
    check_convergence: bool = False
    record_outputs: bool = False
    max_workers: int | None = None

    def __post_init__(self):
        if self.n_substeps < 1 or self.n_trials < 1 or self.horizon < 1:
            raise DimensionMismatch("config", "n_substeps, n_trials, horizon must be >= 1")

    def workers(self) -> int:
        if self.max_workers is not None:
            return max(1, self.max_workers)
        env = os.environ.get("STOCHSYM_THREADS", "")
        return max(1, int(env)) if env.isdigit() and env else 1


@dataclass(eq=False)
class TrajectoryRecord:
    trial: int
    step_errors: np.ndarray  # sampled output mismatch, k = 0 .. horizon
    sup_error: float
    violation: bool
    output_min: float
    output_max: float
    outputs: np.ndarray | None = None
    abstract_outputs: np.ndarray | None = None


@dataclass
class SimulationSummary:
    n_trials: int
    n_violations: int
    violation_frequency: float
    cp95_upper: float
    epsilon: float
    horizon: int
    n_substeps: int
    rng_seed: int
    mean_sup_error: float
    max_sup_error: float
    output_min: float
    output_max: float
    violation_free_output_min: float
    violation_free_output_max: float
    convergence: dict | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(eq=False)
class SimulationResult:
    records: list
    summary: SimulationSummary
    step_errors: np.ndarray  # (n_trials, horizon + 1)


@dataclass(eq=False)
class _Op:
    """Batched linear map: rows of X are vectors, diagonal fast path when possible."""

    dense_t: np.ndarray
    diag: np.ndarray | None

    @classmethod
    def stack(cls, mats: list) -> "_Op":
        mats = [as_matrix(m) for m in mats]
        full = scipy.linalg.block_diag(*mats) if mats else np.zeros((0, 0))
        if full.ndim != 2:  # block_diag of empties degenerates
            full = np.zeros((0, 0))
        diag = None
        if full.shape[0] == full.shape[1] and full.size:
            off = full - np.diag(np.diag(full))
            if not np.any(off):
                diag = np.diag(full).copy()
        return cls(dense_t=full.T.copy(), diag=diag)

    @property
    def out_dim(self) -> int:
        return self.dense_t.shape[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.diag is not None:
            return x * self.diag
        return x @ self.dense_t


class _Coupling:
    """Batched w = (M zeta2) over rows; sparse matvec for sparse couplings."""

    def __init__(self, m: np.ndarray):
        self.dense_t = m.T.copy()
        nnz = int(np.count_nonzero(m))
        self.sparse = None
        if m.size >= 2500 and nnz < 0.25 * m.size:
            self.sparse = scipy.sparse.csr_matrix(m)

    def __call__(self, z2: np.ndarray) -> np.ndarray:
        if self.sparse is not None:
            return np.ascontiguousarray((self.sparse @ z2.T).T)
        return z2 @ self.dense_t


class _Network:
    """Stacked operators and per-subsystem lookup data for batched simulation."""

    def __init__(self, systems, ic, discs, abstractions, controllers, certs):
        if not (len(systems) == len(discs) == len(abstractions)
                == len(controllers) == len(certs) == ic.n_subsystems):
            raise DimensionMismatch("network", "per-subsystem argument lists disagree")
        taus = {d.tau for d in discs}
        if len(taus) != 1:
            raise DimensionMismatch("tau", "all subsystems must share one sampling time")
        self.tau = discs[0].tau
        self.n_subsystems = len(systems)
        self.systems = systems
        self.abstractions = abstractions
        self.controllers = controllers

        dims = [s.n for s in systems]
        self.state_slices = []
        off = 0
        for n in dims:
            self.state_slices.append(slice(off, off + n))
            off += n
        self.n_total = off

        self.A = _Op.stack([s.A for s in systems])
        self.B = _Op.stack([s.B for s in systems])
        self.D = _Op.stack([s.D for s in systems])
        self.G = _Op.stack([s.G for s in systems])
        self.C1 = _Op.stack([s.C1 for s in systems])
        self.C2 = _Op.stack([s.C2 for s in systems])
        self.K = _Op.stack([c.K for c in certs])
        self.P = _Op.stack([c.P for c in certs])
        self.Q = _Op.stack([c.Q for c in certs])
        self.H = _Op.stack([c.H for c in certs])
        self.C1P = _Op.stack([s.C1 @ c.P for s, c in zip(systems, certs)])
        self.C2P = _Op.stack([s.C2 @ c.P for s, c in zip(systems, certs)])
        self.D_tilde = _Op.stack([d.D_tilde for d in discs])
        self.R_tilde = _Op.stack([d.R_tilde for d in discs])
        self.stochastic = any(not d.noise_free for d in discs)
        self.b = np.concatenate([s.b for s in systems])
        self.coupling = _Coupling(ic.M)
        self.noise_dim = sum(s.noise_dim for s in systems)
        self.abs_noise_dim = sum(d.R_tilde.shape[1] for d in discs)

        for i, (s, a) in enumerate(zip(systems, abstractions)):
            if s.m != s.n:
                raise DimensionMismatch("B", f"subsystem {i}: refinement needs m == n")
            if a.grid.state.dim != s.n:
                raise DimensionMismatch("grid", f"subsystem {i}: state grid dim mismatch")
        self.state_grids = [a.grid.state for a in abstractions]
        self.input_centers = [a.grid.input.centers() for a in abstractions]
        # controller tables padded so the sink index resolves to "undefined"
        self.tables = []
        for c in controllers:
            t = c.table if c.table.ndim == 2 else c.table[None, :]
            self.tables.append(np.hstack([t, -np.ones((t.shape[0], 1), dtype=np.int64)]))

    def controller_actions(self, idx: np.ndarray, i: int, step: int) -> np.ndarray:
        table = self.tables[i]
        return table[min(step, table.shape[0] - 1)][idx]


def _simulate_chunk(net: _Network, horizon: int, n_substeps: int,
                    x0: np.ndarray, streams, trial_offset: int,
                    record_outputs: bool):
    C = len(streams)
    gens = [np.random.Generator(np.random.Philox(s)) for s in streams]
    noise = np.stack([g.standard_normal((horizon, n_substeps, net.noise_dim))
                      for g in gens])
    abs_noise = None
    if net.stochastic:
        abs_noise = np.stack([g.standard_normal((horizon, net.abs_noise_dim))
                              for g in gens])
    dt = net.tau / n_substeps
    sqrt_dt = math.sqrt(dt)

    X = np.tile(x0, (C, 1))
    idx = np.empty((C, net.n_subsystems), dtype=np.int64)
    Xhat = np.empty_like(X)
    for i, sl in enumerate(net.state_slices):
        idx[:, i] = net.state_grids[i].locate_many(X[:, sl])
        lost = np.flatnonzero(idx[:, i] == net.state_grids[i].n_points)
        if lost.size:
            raise AbstractStateLost(trial_offset + int(lost[0]), 0)
        Xhat[:, sl] = net.state_grids[i].centers()[idx[:, i]]

    errors = np.empty((C, horizon + 1))
    out_min = np.full(C, np.inf)
    out_max = np.full(C, -np.inf)
    out_rec = np.empty((C, horizon + 1, net.C1.out_dim)) if record_outputs else None
    out_hat_rec = np.empty_like(out_rec) if record_outputs else None

    def record(k):
        z = net.C1(X)
        zh = net.C1P(Xhat)
        errors[:, k] = np.linalg.norm(z - zh, axis=1)
        np.minimum(out_min, z.min(axis=1), out=out_min)
        np.maximum(out_max, z.max(axis=1), out=out_max)
        if record_outputs:
            out_rec[:, k] = z
            out_hat_rec[:, k] = zh

    record(0)
    for k in range(horizon):
        w_hat = net.coupling(net.C2P(Xhat))
        v_hat = np.empty_like(X)
        for i, sl in enumerate(net.state_slices):
            actions = net.controller_actions(idx[:, i], i, k)
            lost = np.flatnonzero(actions < 0)
            if lost.size:
                raise AbstractStateLost(trial_offset + int(lost[0]), k)
            v_hat[:, sl] = net.input_centers[i][actions]

        x_latch = X.copy()
        w_latch = net.coupling(net.C2(X))
        p_xhat = net.P(Xhat)
        q_term = net.Q(Xhat)
        for j in range(n_substeps):
            w_t = net.coupling(net.C2(X))
            nu = (net.K(X - p_xhat) - q_term + (x_latch - p_xhat)
                  + net.H(w_latch - w_hat) - net.H(w_t))
            drift = net.A(X) + net.B(nu) + net.D(w_t) + net.b
            X = X + dt * drift + sqrt_dt * net.G(noise[:, k, j])
            z = net.C1(X)
            np.minimum(out_min, z.min(axis=1), out=out_min)
            np.maximum(out_max, z.max(axis=1), out=out_max)

        target = Xhat + v_hat + net.D_tilde(w_hat)
        if net.stochastic:
            target = target + net.R_tilde(abs_noise[:, k])
        for i, sl in enumerate(net.state_slices):
            idx[:, i] = net.state_grids[i].locate_many(target[:, sl])
            lost = np.flatnonzero(idx[:, i] == net.state_grids[i].n_points)
            if lost.size:
                raise AbstractStateLost(trial_offset + int(lost[0]), k + 1)
            Xhat[:, sl] = net.state_grids[i].centers()[idx[:, i]]
        record(k + 1)

    return errors, out_min, out_max, out_rec, out_hat_rec


def _run_batch(net, config: SimConfig, x0, streams, n_substeps: int,
               record_outputs: bool):
    chunks = []
    for start in range(0, config.n_trials, config.chunk_size):
        stop = min(start + config.chunk_size, config.n_trials)
        chunks.append((start, streams[start:stop]))
    results = [None] * len(chunks)

    def work(pos):
        start, sub = chunks[pos]
        return _simulate_chunk(net, config.horizon, n_substeps, x0, sub,
                               start, record_outputs)

    workers = config.workers()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for pos, res in enumerate(pool.map(work, range(len(chunks)))):
                results[pos] = res
    else:
        for pos in range(len(chunks)):
            results[pos] = work(pos)

    errors = np.concatenate([r[0] for r in results])
    out_min = np.concatenate([r[1] for r in results])
    out_max = np.concatenate([r[2] for r in results])
    out_rec = (np.concatenate([r[3] for r in results]) if record_outputs else None)
    out_hat_rec = (np.concatenate([r[4] for r in results]) if record_outputs else None)
    return errors, out_min, out_max, out_rec, out_hat_rec


def cosimulate(
    systems: list[AffineSystem],
    ic: InterconnectionSpec,
    discs: list,
    abstractions: list[FiniteAbstraction],
    controllers: list[Controller],
    certs: list[StorageCertificate],
    config: SimConfig,
    x0,
) -> SimulationResult:
    """Closed-loop Monte Carlo of the concrete network against its abstraction.

    Per trial: the abstract network starts at the quantized concrete initial
    state and both evolve in lockstep; the concrete internal input is
    recomputed continuously from current states through M, while the abstract
    one uses sampled abstract outputs.  The sampled output mismatch
    || zeta(k tau) - zeta_hat(k) || is recorded for k = 0 .. horizon and the
    violation flag marks trials whose supremum reaches config.epsilon.

    With `check_convergence`, the run is repeated at doubled substeps on a
    trial subsample (fresh streams) and accepted only when the headline
    violation frequency moves by less than one percentage point.
    """
    net = _Network(systems, ic, discs, abstractions, controllers, certs)
    x0 = as_vector(x0)
    if x0.size != net.n_total:
        raise DimensionMismatch("x0", f"expected {net.n_total} states")

    root = np.random.SeedSequence(config.rng_seed)
    main_ss, check_ss = root.spawn(2)
    errors, out_min, out_max, out_rec, out_hat_rec = _run_batch(
        net, config, x0, main_ss.spawn(config.n_trials), config.n_substeps,
        config.record_outputs,
    )

    sup = errors.max(axis=1)
    violation = sup >= config.epsilon
    n_viol = int(violation.sum())
    freq = n_viol / config.n_trials
    vf = ~violation
    summary = SimulationSummary(
        n_trials=config.n_trials,
        n_violations=n_viol,
        violation_frequency=freq,
        cp95_upper=clopper_pearson_upper(n_viol, config.n_trials),
        epsilon=config.epsilon,
        horizon=config.horizon,
        n_substeps=config.n_substeps,
        rng_seed=config.rng_seed,
        mean_sup_error=float(sup.mean()),
        max_sup_error=float(sup.max()),
        output_min=float(out_min.min()),
        output_max=float(out_max.max()),
        violation_free_output_min=float(out_min[vf].min()) if vf.any() else math.nan,
        violation_free_output_max=float(out_max[vf].max()) if vf.any() else math.nan,
    )

    if config.check_convergence:
        # Subsampled rerun at doubled substeps: the gate compares the headline
        # violation frequency, whose sampling error at the subsample size is
        # far below the 1e-2 drift threshold.
        n_check = min(config.n_trials, max(1000, config.n_trials // 5))
        check_cfg = SimConfig(
            n_trials=n_check, horizon=config.horizon, epsilon=config.epsilon,
            n_substeps=2 * config.n_substeps, rng_seed=config.rng_seed,
            chunk_size=config.chunk_size, max_workers=config.max_workers,
        )
        errors2, *_ = _run_batch(net, check_cfg, x0, check_ss.spawn(n_check),
                                 check_cfg.n_substeps, False)
        sup2 = errors2.max(axis=1)
        freq2 = float((sup2 >= config.epsilon).mean())
        drift = abs(freq2 - freq)
        mean2 = float(sup2.mean())
        summary.convergence = {
            "check_trials": n_check,
            "doubled_substeps": 2 * config.n_substeps,
            "violation_frequency_doubled": freq2,
            "violation_frequency_drift": drift,
            "mean_sup_error_doubled": mean2,
            "mean_sup_error_relative_drift":
                abs(mean2 - summary.mean_sup_error) / (abs(summary.mean_sup_error) + 1e-300),
        }
        if drift >= _CONVERGENCE_TOL:
            raise ConvergenceError(
                f"violation frequency moved by {drift:.4f} when substeps doubled"
            )

    records = []
    for t in range(config.n_trials):
        records.append(TrajectoryRecord(
            trial=t,
            step_errors=errors[t],
            sup_error=float(sup[t]),
            violation=bool(violation[t]),
            output_min=float(out_min[t]),
            output_max=float(out_max[t]),
            outputs=None if out_rec is None else out_rec[t],
            abstract_outputs=None if out_hat_rec is None else out_hat_rec[t],
        ))
    return SimulationResult(records=records, summary=summary, step_errors=errors)


def write_trajectories_csv(result: SimulationResult, path) -> None:
    """Long-format per-step rows (trial, k, err, sup_err) plus outputs when recorded."""
    with_outputs = result.records and result.records[0].outputs is not None
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        head = ["trial", "k", "err", "sup_err"]
        if with_outputs:
            q1 = result.records[0].outputs.shape[1]
            head += [f"out_{i}" for i in range(q1)] + [f"out_hat_{i}" for i in range(q1)]
        writer.writerow(head)
        for rec in result.records:
            running = np.maximum.accumulate(rec.step_errors)
            for k, err in enumerate(rec.step_errors):
                row = [rec.trial, k, repr(float(err)), repr(float(running[k]))]
                if with_outputs:
                    row += [repr(float(v)) for v in rec.outputs[k]]
                    row += [repr(float(v)) for v in rec.abstract_outputs[k]]
                writer.writerow(row)
