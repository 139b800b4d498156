"""
Orthonormality-preserving linearized gradient flow.

One step solves

    (I + dt/2 A) U^{n+1} = (I - dt/2 A) U^n,   A V = g (U^T M V) - U (g^T M V)

where ``g = M^{-1} G`` are the Riesz representatives of the energy gradient
at ``U = U^n``.  ``A`` is skew in the ``M`` inner product and has rank at most
``2N``, so the implicit solve reduces to a dense ``2N x 2N`` system via the
Woodbury identity and the update is an exact Cayley transform: the Gram
matrix ``U^T M U`` is preserved up to round-off.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ksmodel import Evaluation, KSModel, grassmann_direction

logger = logging.getLogger(__name__)


class StepFailure(RuntimeError):
    """The reduced Woodbury system is numerically singular."""


class FlowStalled(RuntimeError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class RankDeficiency(ValueError):
    pass


@dataclass(frozen=True)
class FlowSettings:
    eps: float = 1e-6
    dt_max: float = 0.1
    max_halvings: int = 40
    max_steps: int = 200_000
    double_every: int = 200
    potential_lag: int = 1
    cond_max: float = 1e14
    check_skew: bool = False
    avoid_rejected_dt: bool = False  # never double back to a dt rejected on this level

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.dt_max <= 0 or self.max_halvings < 1 or self.max_steps < 1 or self.potential_lag < 1:
            raise ValueError("invalid flow settings")


@dataclass
class SkewApplication:
    """Low-rank factors of the skew operator at ``U``."""

    U: np.ndarray
    G: np.ndarray  # gradient load, used as M g so that A is exactly M-skew
    g: np.ndarray

    @property
    def W(self) -> np.ndarray:
        return np.hstack([self.g, self.U])

    def D(self, V: np.ndarray, M) -> np.ndarray:
        """``D V`` with ``D = [U^T M; -G^T]``."""
        MV = M @ V
        return np.vstack([self.U.T @ MV, -(self.g.T @ MV)])

    @classmethod
    def build(cls, model: KSModel, U, G, g=None, check: bool = False) -> "SkewApplication":
        if g is None:
            g = model.riesz(G)
        skew = cls(U, G, g)
        if check:
            rng = np.random.default_rng(0)
            V, Wt = rng.standard_normal((2,) + U.shape)
            M = model.M
            lhs = np.sum(apply_A(skew, V, M) * (M @ Wt)) + np.sum(V * (M @ apply_A(skew, Wt, M)))
            scale = np.linalg.norm(apply_A(skew, V, M)) * np.linalg.norm(M @ Wt) + 1e-300
            if abs(lhs) > 1e-12 * max(scale, 1.0):
                raise AssertionError(f"skew operator is not M-skew: {lhs:.3e}")
        return skew


def apply_A(skew: SkewApplication, V: np.ndarray, M) -> np.ndarray:
    MV = M @ V
    return skew.g @ (skew.U.T @ MV) - skew.U @ (skew.g.T @ MV)


def cayley_step(skew: SkewApplication, M, dt: float, cond_max: float = 1e14) -> np.ndarray:
    """Exact solution of ``(I + dt/2 A) X = (I - dt/2 A) U`` by Woodbury reduction."""
    U = skew.U
    if dt == 0:
        return U.copy()
    tau = 0.5 * dt
    W = skew.W
    rhs = U - tau * (W @ skew.D(U, M))
    small = np.eye(W.shape[1]) + tau * skew.D(W, M)
    if np.linalg.cond(small) > cond_max:
        raise StepFailure(f"reduced system is singular at dt={dt:.3e}")
    return rhs - tau * (W @ np.linalg.solve(small, skew.D(rhs, M)))


def gram_error(M, U) -> float:
    return float(np.linalg.norm(U.T @ (M @ U) - np.eye(U.shape[1])))


def orthonormalize(U: np.ndarray, M, tol: float = 1e-14) -> np.ndarray:
    """Loewdin orthonormalization ``U S^{-1/2}`` in the ``M`` inner product."""
    S = U.T @ (M @ U)
    S = 0.5 * (S + S.T)
    lam, Q = np.linalg.eigh(S)
    if lam[0] < tol:
        raise RankDeficiency(f"Gram matrix is singular (smallest eigenvalue {lam[0]:.3e})")
    return U @ ((Q / np.sqrt(lam)) @ Q.T)


def initial_orbitals(model: KSModel, width: float = 1.0, seed: int | None = None) -> np.ndarray:
    """Orthonormal starting orbitals.

    Gaussians ``exp(-|x-R|^2/width^2)`` on the nuclei, assigned round robin;
    an orbital landing on an already used centre gets a factor ``(x-R)_k``
    cycling through the axes.  With ``seed`` set, uniform random values are
    used instead.
    """
    x = model.mesh.vertices[model.dofs.interior]
    N = model.n_orbitals
    if seed is not None:
        U = np.random.default_rng(seed).random((len(x), N)) - 0.5
        return orthonormalize(U, model.M)
    centres = model.molecule.positions
    if len(centres) == 0:
        centres = np.zeros((1, 3))
    U = np.empty((len(x), N))
    for i in range(N):
        c, rep = centres[i % len(centres)], i // len(centres)
        d = x - c
        U[:, i] = np.exp(-(d * d).sum(axis=1) / width ** 2)
        if rep:
            U[:, i] *= d[:, (rep - 1) % 3]
    return orthonormalize(U, model.M)


@dataclass
class FlowState:
    U: np.ndarray
    t: float
    dt: float
    step_index: int
    evaluation: Evaluation
    g: np.ndarray
    residual: float
    level: int = 0
    history: list = field(default_factory=list)
    events: list = field(default_factory=list)
    halvings: int = 0
    status: str = "running"  # running | converged | budget_exhausted
    last_decrease_rate: float = float("inf")
    dt_ceiling: float = float("inf")
    _lag_potential: np.ndarray | None = None
    _lag_age: int = 0

    @property
    def energy(self):
        return self.evaluation.energy

    @property
    def G(self) -> np.ndarray:
        return self.evaluation.gradient


def _record(state: FlowState, model: KSModel, dt: float):
    e = state.energy
    state.history.append({
        "step": state.step_index, "t": state.t, "dt": dt,
        "E_total": e.total, "E_kin": e.kinetic, "E_ext": e.external, "E_har": e.hartree,
        "E_xc": e.xc, "E_nuc": e.nuclear, "grad_norm": state.residual,
        "gram_err": gram_error(model.M, state.U), "level": state.level,
    })


def _evaluate(model: KSModel, U, state: FlowState | None, settings: FlowSettings) -> Evaluation:
    lagged = None
    if state is not None and settings.potential_lag > 1 and state._lag_age < settings.potential_lag - 1:
        lagged = state._lag_potential
    return model.evaluate(U, gradient=True, v_eff_q=lagged)


def start(model: KSModel, U, dt: float, level: int = 0, settings: FlowSettings = FlowSettings(),
          history=None, events=None) -> FlowState:
    """Flow state at ``U`` (which must be M-orthonormal)."""
    ev = model.evaluate(U)
    g = model.riesz(ev.gradient)
    state = FlowState(U, 0.0, dt, 0, ev, g, _residual(model, U, ev.gradient, g), level,
                      history if history is not None else [], events if events is not None else [])
    state._lag_potential = ev.v_eff_q
    _record(state, model, 0.0)
    return state


def _residual(model, U, G, g) -> float:
    R = grassmann_direction(model.M, U, G, g)
    return float(np.sqrt(max(np.sum(R * (model.M @ R)), 0.0)))


def step_linearized(state: FlowState, model: KSModel, settings: FlowSettings = FlowSettings()) -> np.ndarray:
    skew = SkewApplication.build(model, state.U, state.G, state.g, check=settings.check_skew)
    return cayley_step(skew, model.M, state.dt, settings.cond_max)


def accept_or_halve(state: FlowState, model: KSModel, candidate: np.ndarray | None,
                    settings: FlowSettings = FlowSettings()) -> bool:
    """Accept ``candidate`` if it lowers the energy, else halve ``dt``.

    ``candidate=None`` stands for a failed step and is treated as a rejection.
    Returns whether the step was accepted; the state is updated in place.
    """
    ev = None
    if candidate is not None:
        ev = _evaluate(model, candidate, state, settings)
    if ev is not None and ev.energy.total < state.energy.total:
        dt = state.dt
        decrease = state.energy.total - ev.energy.total
        g = model.riesz(ev.gradient, x0=state.g)
        state.U, state.evaluation, state.g = candidate, ev, g
        state.t += dt
        state.step_index += 1
        state.halvings = 0
        state.residual = _residual(model, candidate, ev.gradient, g)
        state.last_decrease_rate = decrease / dt
        if settings.potential_lag > 1:
            if state._lag_age >= settings.potential_lag - 1:
                state._lag_potential, state._lag_age = ev.v_eff_q, 0
            else:
                state._lag_age += 1
        _record(state, model, dt)
        return True

    if ev is not None and state.residual ** 2 < settings.eps and _flat(state.energy, ev.energy):
        # no measurable change: the state is stationary to round-off
        state.status = "converged"
        return False
    state.halvings += 1
    old = state.dt
    state.dt = old / 2
    if settings.avoid_rejected_dt:
        state.dt_ceiling = min(state.dt_ceiling, old)
    state.events.append({"level": state.level, "step": state.step_index, "event": "halve",
                         "dt_old": old, "dt_new": state.dt,
                         "E_candidate": ev.energy.total if ev is not None else float("nan"),
                         "E_current": state.energy.total})
    if state.halvings > settings.max_halvings or state.dt < 1e-16:
        raise FlowStalled(f"dt underflow after {state.halvings} consecutive halvings "
                          f"(dt={state.dt:.3e})", state.residual)
    return False


def _flat(current, candidate, rel: float = 1e-12) -> bool:
    scale = abs(current.kinetic) + abs(current.external) + abs(current.hartree) + abs(current.xc)
    return candidate.total - current.total <= rel * max(scale, 1.0)


def maybe_double_dt(state: FlowState, settings: FlowSettings = FlowSettings()) -> FlowState:
    """Double ``dt`` every ``double_every`` accepted steps, capped at ``dt_max``.

    With ``avoid_rejected_dt`` a doubling that would reach a step size already
    rejected on this level is skipped and logged as a ``hold`` event.
    """
    if state.step_index == 0 or state.step_index % settings.double_every or state.dt >= settings.dt_max:
        return state
    old = state.dt
    new = min(2.0 * old, settings.dt_max)
    event = "double" if new < state.dt_ceiling else "hold"
    if event == "double":
        state.dt = new
    state.events.append({"level": state.level, "step": state.step_index, "event": event,
                         "dt_old": old, "dt_new": state.dt,
                         "E_candidate": float("nan"), "E_current": state.energy.total})
    return state


def inner_loop(state: FlowState, model: KSModel, settings: FlowSettings = FlowSettings(),
               callback=None) -> FlowState:
    """Run the flow on one mesh until ``(E_n - E_{n+1})/dt < eps`` or the step budget is spent."""
    while True:
        try:
            candidate = step_linearized(state, model, settings)
        except StepFailure:
            candidate = None
        if not accept_or_halve(state, model, candidate, settings):
            if state.status == "converged":
                return state
            continue
        if callback is not None:
            callback(state)
        if state.last_decrease_rate < settings.eps:
            state.status = "converged"
            return state
        if state.step_index >= settings.max_steps:
            state.status = "budget_exhausted"
            logger.warning("step budget of %d exhausted on level %d", settings.max_steps, state.level)
            return state
        maybe_double_dt(state, settings)
        if state.step_index % 500 == 0:
            logger.info("level %d step %d E=%.8f res=%.3e dt=%.3e", state.level, state.step_index,
                        state.energy.total, state.residual, state.dt)

