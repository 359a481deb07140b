"""Closed-loop simulation of the receding-horizon controller.

At each step the budget is refreshed from the measured state (after the
first step), the condensed problem is solved, the first nominal input is
applied and a disturbance is drawn. Ensembles of runs use one counter-based
random substream per run, so results do not depend on worker scheduling.
"""

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__, linalg
from .constraint import expected_next_epsilon, reconstruct_disturbance, update_epsilon
from .errors import Infeasible, NonConvergence, NotPositiveDefinite, SolverFailure
from .qcqp import build_problem, min_constraint_value, solve_mpc

log = logging.getLogger(__name__)

OMEGA_CHECK_TOL = 1e-12
MAX_INIT_DRAWS = 1000
_MASK64 = (1 << 64) - 1


class DisturbanceSampler:
    """I.i.d. zero-mean disturbances ``w = W_chol z``.

    Uniforms come from a Philox counter-based generator keyed by
    ``(seed, stream)``; Gaussian variates use the Box-Muller transform. A
    ``draw(rng, n)`` callable replaces the Gaussian kind, e.g. for
    heavy-tailed or deterministic test disturbances.
    """

    def __init__(self, W, seed=0, stream=0, draw=None, block=512):
        W = linalg.as_matrix(W)
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self.kind = "gaussian" if draw is None else "custom"
        self._draw = draw
        self.W_chol = _disturbance_factor(W)
        self.nx = W.shape[0]
        self._rng = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))
        self._block = int(block)
        self._buf = np.empty(0)
        self._pos = 0

    def standard_normal(self, n):
        out = np.empty(n)
        filled = 0
        while filled < n:
            if self._pos >= self._buf.size:
                self._refill()
            take = min(n - filled, self._buf.size - self._pos)
            out[filled:filled + take] = self._buf[self._pos:self._pos + take]
            self._pos += take
            filled += take
        return out

    def _refill(self):
        u = self._rng.random((2, self._block))
        r = np.sqrt(-2.0 * np.log1p(-u[0]))  # 1 - u in (0, 1]
        theta = 2.0 * np.pi * u[1]
        self._buf = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        self._pos = 0

    def sample(self):
        if self._draw is not None:
            return np.asarray(self._draw(self._rng, self.nx), dtype=float)
        return self.W_chol @ self.standard_normal(self.nx)


def _disturbance_factor(W):
    if not np.any(W):
        return np.zeros_like(W)
    try:
        return linalg.cholesky(W)
    except NotPositiveDefinite:
        return linalg.cholesky(W + 1e-12 * np.eye(W.shape[0]))


def zero_disturbance(rng, n):
    return np.zeros(n)


@dataclass
class MpcState:
    k: int
    x: np.ndarray
    eps: float
    prev: object = None
    prev_x: np.ndarray = None
    prev_u: np.ndarray = None
    prev_w: np.ndarray = None  # sampler draw, only used for the debug cross-check


@dataclass
class StepRecord:
    k: int
    x: np.ndarray
    u: np.ndarray
    eps: float
    stage_cost: float
    violation: int
    J_star: float
    lambda_star: float
    constraint_value: float
    budget_gap: float = math.nan


def stage_cost(x, u, model):
    dx = x - model.x_ref
    du = u - model.u_ref
    return float(dx @ model.Q @ dx + du @ model.R @ du)


def violated(x, model):
    return int(np.linalg.norm(model.C @ x) >= model.t)


def step(state, model, pre, sampler, debug=False, check=False):
    """Advance the closed loop by one sample.

    With ``check`` the record carries ``gamma E_k[eps_{k+1}] - eps_k +
    ||C x_k||^2 / t^2``, which must be non-positive.
    """
    x = state.x
    eps = state.eps
    if state.k > 0:
        if debug and state.prev_w is not None:
            w_rec = reconstruct_disturbance(x, state.prev, model)
            err = float(np.max(np.abs(w_rec - state.prev_w)))
            if err > OMEGA_CHECK_TOL:
                raise AssertionError(f"disturbance reconstruction off by {err:.3g} at k={state.k}")
        eps = update_epsilon(x, state.prev, pre, model)
    try:
        sol = solve_mpc(x, eps, pre, model)
    except NonConvergence as exc:
        raise SolverFailure(
            f"QCQP failed at k={state.k}: {exc}",
            context={"k": state.k, "x": x.tolist(), "eps": eps, "seed": sampler.seed, "stream": sampler.stream},
        ) from exc
    u = sol.m_star[: model.nu]
    gap = math.nan
    if check:
        cx2 = float(np.sum((model.C @ x) ** 2)) / model.t**2
        gap = model.gamma * expected_next_epsilon(sol, pre, model) - (eps - cx2)
    rec = StepRecord(
        k=state.k,
        x=x,
        u=u,
        eps=float(eps),
        stage_cost=stage_cost(x, u, model),
        violation=violated(x, model),
        J_star=sol.J_star,
        lambda_star=sol.lambda_star,
        constraint_value=sol.constraint_value,
        budget_gap=gap,
    )
    w = sampler.sample()
    x_next = model.A @ x + model.B @ u + w
    new = MpcState(k=state.k + 1, x=x_next, eps=float(eps), prev=sol, prev_x=x, prev_u=u, prev_w=w)
    return new, rec


@dataclass
class TrajectoryLog:
    k: np.ndarray
    x: np.ndarray
    u: np.ndarray
    eps: np.ndarray
    stage_cost: np.ndarray
    violation: np.ndarray
    J_star: np.ndarray
    lambda_star: np.ndarray
    constraint_value: np.ndarray
    budget_gap: np.ndarray
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, records, meta=None):
        return cls(
            k=np.array([r.k for r in records], dtype=int),
            x=np.array([r.x for r in records]),
            u=np.array([r.u for r in records]),
            eps=np.array([r.eps for r in records]),
            stage_cost=np.array([r.stage_cost for r in records]),
            violation=np.array([r.violation for r in records], dtype=int),
            J_star=np.array([r.J_star for r in records]),
            lambda_star=np.array([r.lambda_star for r in records]),
            constraint_value=np.array([r.constraint_value for r in records]),
            budget_gap=np.array([r.budget_gap for r in records]),
            meta=dict(meta or {}),
        )

    def __len__(self):
        return len(self.k)

    def running_average_cost(self):
        return np.cumsum(self.stage_cost) / np.arange(1, len(self) + 1)

    def discounted_violations(self, gamma):
        return float(np.sum(gamma ** self.k * self.violation))

    def to_csv(self, fh=None):
        """Write the log as CSV; returns the text when ``fh`` is None."""
        own = fh is None
        if own:
            fh = io.StringIO()
        nx, nu = self.x.shape[1], self.u.shape[1]
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["k"] + [f"x_{i + 1}" for i in range(nx)] + [f"u_{i + 1}" for i in range(nu)]
            + ["eps", "stage_cost", "violation", "J_star", "lambda_star", "constraint_value"]
        )
        for i in range(len(self)):
            row = [str(self.k[i])]
            row += [repr(float(v)) for v in self.x[i]]
            row += [repr(float(v)) for v in self.u[i]]
            row += [repr(float(self.eps[i])), repr(float(self.stage_cost[i])), str(self.violation[i])]
            row += [repr(float(self.J_star[i])), repr(float(self.lambda_star[i])), repr(float(self.constraint_value[i]))]
            w.writerow(row)
        return fh.getvalue() if own else None


def run(model, pre, x0, eps0, T, sampler, debug=False, check=False):
    """``T`` closed-loop steps from ``x0`` with initial budget ``eps0``."""
    if T < 1:
        raise ValueError("T must be at least 1")
    state = MpcState(k=0, x=np.asarray(x0, dtype=float).ravel().copy(), eps=float(eps0))
    records = []
    for _ in range(T):
        state, rec = step(state, model, pre, sampler, debug=debug, check=check)
        records.append(rec)
    meta = {
        "seed": sampler.seed,
        "stream": sampler.stream,
        "model_hash": model.digest(),
        "T": T,
        "eps0": float(eps0),
        "version": __version__,
    }
    return TrajectoryLog.from_records(records, meta)


# --------------------------------------------------------------------------
# ensembles


@dataclass
class RunSummary:
    run: int
    x0: list
    avg_cost: float
    discounted_violations: float
    discarded: int
    final_eps: float
    max_budget_gap: float
    steps: int


@dataclass
class EnsembleSummary:
    avg_cost: float
    avg_cost_stderr: float
    V_hat: float
    V_hat_stderr: float
    trWP: float
    e: float
    runs: int
    T: int
    seed: int
    discarded: int
    total_steps: int
    max_budget_gap: float
    per_run: list = field(default_factory=list)

    def to_json(self, per_run=False):
        d = asdict(self)
        if not per_run:
            d.pop("per_run")
        return json.dumps(d, indent=2)


def random_initial_state(model, pre, eps0, sampler, max_draws=MAX_INIT_DRAWS):
    """Standard-normal draw, redrawn while the first problem would be infeasible.

    Returns ``(x0, discarded)``.
    """
    for n in range(max_draws):
        x0 = sampler.standard_normal(model.nx)
        if min_constraint_value(build_problem(x0, eps0, pre, model)) <= eps0:
            if n:
                log.debug("stream %d: discarded %d infeasible initial draws", sampler.stream, n)
            return x0, n
    raise Infeasible(f"no feasible initial state in {max_draws} draws at eps0={eps0:g}")


def _one_run(args):
    model, pre, init, eps0, T, base_seed, idx, check, draw = args
    sampler = DisturbanceSampler(model.W, seed=base_seed, stream=idx, draw=draw)
    discarded = 0
    if isinstance(init, str):
        while True:
            x0, n = random_initial_state(model, pre, eps0, sampler)
            discarded += n
            try:
                traj = run(model, pre, x0, eps0, T, sampler, check=check)
                break
            except Infeasible as exc:
                # grazing case: passed the pre-test but not the solver's own check
                if getattr(exc, "min_value", None) is None:
                    raise
                discarded += 1
                if discarded >= MAX_INIT_DRAWS:
                    raise
    else:
        x0 = np.asarray(init, dtype=float)
        traj = run(model, pre, x0, eps0, T, sampler, check=check)
    gaps = traj.budget_gap
    return RunSummary(
        run=idx,
        x0=[float(v) for v in x0],
        avg_cost=float(np.mean(traj.stage_cost)),
        discounted_violations=traj.discounted_violations(model.gamma),
        discarded=discarded,
        final_eps=float(traj.eps[-1]),
        max_budget_gap=float(np.max(gaps)) if check else math.nan,
        steps=len(traj),
    )


def monte_carlo(model, pre, init, eps0, T, runs, base_seed, workers=1, check=False, draw=None):
    """Ensemble of independent closed-loop runs.

    Args:
        init: a fixed initial state, or ``"random"`` for standard-normal
            initial states with infeasible draws discarded.
        workers: process count; the summary is identical for any value.
        draw: optional custom disturbance callable (see DisturbanceSampler).
    """
    if runs < 1:
        raise ValueError("runs must be at least 1")
    if isinstance(init, str) and init != "random":
        raise ValueError(f"unknown init policy {init!r}")
    jobs = [(model, pre, init, eps0, T, base_seed, i, check, draw) for i in range(runs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            per_run = list(ex.map(_one_run, jobs, chunksize=max(1, runs // (4 * workers))))
    else:
        per_run = [_one_run(j) for j in jobs]
    per_run.sort(key=lambda r: r.run)

    costs = np.array([r.avg_cost for r in per_run])
    viol = np.array([r.discounted_violations for r in per_run])
    se = lambda v: float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else math.nan  # noqa: E731
    gaps = [r.max_budget_gap for r in per_run]
    return EnsembleSummary(
        avg_cost=float(costs.mean()),
        avg_cost_stderr=se(costs),
        V_hat=float(viol.mean()),
        V_hat_stderr=se(viol),
        trWP=pre.trWP,
        e=model.e,
        runs=runs,
        T=T,
        seed=int(base_seed),
        discarded=int(sum(r.discarded for r in per_run)),
        total_steps=int(sum(r.steps for r in per_run)),
        max_budget_gap=float(max(gaps)) if check else math.nan,
        per_run=per_run,
    )


def simulate_feedback(model, gain, x0, T, sampler):
    """States of the plant under ``u = gain (x - x_ref) + u_ref``, shape ``(T, nx)``."""
    x = np.asarray(x0, dtype=float).copy()
    xs = np.empty((T, model.nx))
    for k in range(T):
        xs[k] = x
        u = gain @ (x - model.x_ref) + model.u_ref
        x = model.A @ x + model.B @ u + sampler.sample()
    return xs
