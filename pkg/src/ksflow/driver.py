"""
End-to-end adaptive runs, configuration files, outputs and the command line.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.linalg

from . import __version__, adapt, fem, flow
from . import mesh as meshmod
from .fem import SolverStagnation
from .flow import FlowSettings, FlowStalled, RankDeficiency
from .ksmodel import HartreeBC, KSModel, Molecule, harmonic_potential
from .mesh import LineageError, RefinementError

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["step", "t", "dt", "E_total", "E_kin", "E_ext", "E_har", "E_xc", "E_nuc",
                   "grad_norm", "gram_err", "level"]
EVENT_COLUMNS = ["level", "step", "event", "dt_old", "dt_new", "E_candidate", "E_current"]
SHIPPED = ("he", "h2", "h2_paper", "lih")
NUCLEUS_OFFSET = 1e-6  # bohr, keeps nuclei off mesh vertices when requested


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    name: str = "custom"
    nuclei: tuple = ()  # ((x, y, z, Z), ...)
    n_orbitals: int = 1
    occupations: tuple | None = None
    lo: tuple = (-10.0, -10.0, -10.0)
    hi: tuple = (10.0, 10.0, 10.0)
    n: int = 4
    prerefine: int = 0
    prerefine_radius: float = 0.0
    maxrefine: int = 6
    theta: float = 0.5
    epsilon: float = 1e-6
    dt_max: float = 0.1
    max_halvings: int = 40
    max_steps: int = 200_000
    potential_lag: int = 1
    avoid_rejected_dt: bool = False
    potential: str = "coulomb"  # coulomb | harmonic
    harmonic_strength: float = 1.0
    hartree: str = "zero"  # zero | multipole | off
    multipole_order: int = 0
    xc: bool = True
    indicator_mode: str = "literal"
    near_rule_degree: int = 4
    singular_order: int = 4
    mass_tol: float = 1e-12
    poisson_tol: float = 1e-12
    init_width: float = 1.0
    offset_nuclei_from_nodes: bool = False
    seed: int | None = None
    deterministic: bool = False
    export_density: bool = False
    export_indicators: bool = True
    output_dir: str | None = None

    def __post_init__(self):
        checks = [
            (self.maxrefine >= 0, "maxrefine must be >= 0"),
            (self.epsilon > 0, "epsilon must be positive"),
            (0 < self.theta < 1, "theta must lie in (0, 1)"),
            (min(self.mass_tol, self.poisson_tol, self.dt_max) > 0, "tolerances must be positive"),
            (self.n_orbitals >= 1, "n_orbitals must be >= 1"),
            (self.n >= 1 and self.prerefine >= 0, "invalid mesh parameters"),
            (self.potential in ("coulomb", "harmonic"), f"unknown potential {self.potential!r}"),
            (self.hartree in ("zero", "multipole", "off"), f"unknown hartree mode {self.hartree!r}"),
            (self.indicator_mode in adapt.MODES, f"unknown indicator mode {self.indicator_mode!r}"),
            (self.near_rule_degree in (2, 4), "near_rule_degree must be 2 or 4"),
            (self.potential == "harmonic" or len(self.nuclei) > 0, "a Coulomb run needs nuclei"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls(**parse_config(text))

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    @classmethod
    def load(cls, source: str) -> "RunConfig":
        """A config file path, or the name of a shipped config."""
        path = Path(source)
        if path.is_file():
            return cls.from_file(path)
        if source in SHIPPED:
            return cls.from_text(resources.files("ksflow").joinpath("configs", f"{source}.cfg").read_text())
        raise ConfigError(f"no config file or shipped config named {source!r}")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def molecule(self) -> Molecule:
        occ = self.occupations
        nuclei = np.array(self.nuclei, dtype=float).reshape(-1, 4)
        if self.offset_nuclei_from_nodes:
            nuclei[:, :3] += NUCLEUS_OFFSET
        return Molecule.create(nuclei, self.n_orbitals, None if occ is None else list(occ))

    def hartree_bc(self) -> HartreeBC | None:
        return None if self.hartree == "off" else HartreeBC(self.hartree, self.multipole_order)

    def flow_settings(self) -> FlowSettings:
        return FlowSettings(eps=self.epsilon, dt_max=self.dt_max, max_halvings=self.max_halvings,
                            max_steps=self.max_steps, potential_lag=self.potential_lag,
                            avoid_rejected_dt=self.avoid_rejected_dt)

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        d["nuclei"] = [list(n) for n in self.nuclei]
        return d


_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _TYPES[key]
    if key in ("lo", "hi"):
        vals = [float(v) for v in raw.split(",")]
        if len(vals) == 1:
            vals *= 3
        if len(vals) != 3:
            raise ConfigError(f"{key} needs 1 or 3 values")
        return tuple(vals)
    if key == "occupations":
        return tuple(float(v) for v in raw.split(","))
    if kind == "bool":
        if raw.lower() not in ("true", "false", "on", "off", "yes", "no", "1", "0"):
            raise ConfigError(f"{key} expects a boolean, got {raw!r}")
        return raw.lower() in ("true", "on", "yes", "1")
    if kind == "int" or kind == "int | None":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config(text: str) -> dict:
    """Parse flat ``key = value`` lines; ``nucleus = x,y,z,Z`` may repeat."""
    out: dict = {}
    nuclei = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "nucleus":
            vals = [float(v) for v in raw.split(",")]
            if len(vals) != 4:
                raise ConfigError(f"line {lineno}: nucleus needs x,y,z,Z")
            nuclei.append(tuple(vals))
            continue
        if key not in _TYPES or key == "nuclei":
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            out[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    if nuclei:
        out["nuclei"] = tuple(nuclei)
    return out


@dataclass
class LevelRecord:
    level: int
    n_dofs: int
    n_tets: int
    n_vertices: int
    h_min: float
    energy: dict
    residual: float
    gram_err: float
    steps: int
    rejections: int
    flow_time: float
    status: str
    wall_time: float


@dataclass
class RunSummary:
    levels: list
    final_energy: float | None
    termination: str
    config: RunConfig
    message: str = ""
    history: list = field(default_factory=list, repr=False)
    events: list = field(default_factory=list, repr=False)
    mesh: meshmod.Mesh | None = field(default=None, repr=False)
    model: KSModel | None = field(default=None, repr=False)
    U: np.ndarray | None = field(default=None, repr=False)
    indicators: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {
            "levels": [dataclasses.asdict(r) for r in self.levels],
            "final_energy": self.final_energy,
            "termination": self.termination,
            "message": self.message,
            "config_echo": self.config.echo(),
            "version": __version__,
        }

    @property
    def exit_code(self) -> int:
        return {"converged": 0, "budget_exhausted": 2}.get(self.termination, 1)


def build_initial_mesh(config: RunConfig) -> meshmod.Mesh:
    mesh = meshmod.build_box_mesh(config.lo, config.hi, config.n)
    if config.prerefine and config.nuclei:
        points = np.array(config.nuclei)[:, :3]
        mesh = meshmod.refine_near_points(mesh, points, config.prerefine, config.prerefine_radius)
    return mesh


def build_model(config: RunConfig, mesh: meshmod.Mesh, molecule: Molecule) -> KSModel:
    potential = harmonic_potential(config.harmonic_strength) if config.potential == "harmonic" else None
    return KSModel(mesh, molecule, hartree=config.hartree_bc(), xc=config.xc, potential=potential,
                   near_rule=fem.TET11 if config.near_rule_degree == 4 else fem.TET4,
                   singular_order=config.singular_order, mass_tol=config.mass_tol,
                   poisson_tol=config.poisson_tol)


def run(config: RunConfig, output_dir=None, callback=None) -> RunSummary:
    """Adaptive ground-state computation.

    On every level the flow runs to the stopping criterion starting from
    ``dt = min(h)^2``; between levels the density indicator drives Doerfler
    marking and bisection, and the orbitals are interpolated onto the new
    mesh and re-orthonormalized.  Known numerical failures end the run with
    the failure name as termination reason.
    """
    output_dir = output_dir or config.output_dir
    molecule = config.molecule()
    molecule.check_inside(config.lo, config.hi)
    settings = config.flow_settings()
    summary = RunSummary([], None, "running", config)
    history, events = summary.history, summary.events
    try:
        mesh = build_initial_mesh(config)
        model = build_model(config, mesh, molecule)
        U = flow.initial_orbitals(model, config.init_width, config.seed)
        for k in range(config.maxrefine + 1):
            tic = time.perf_counter()
            h_min = float(meshmod.element_sizes(mesh).h.min())
            state = flow.start(model, U, h_min ** 2, level=k, settings=settings, history=history, events=events)
            n_events = len(events)
            state = flow.inner_loop(state, model, settings, callback)
            summary.mesh, summary.model, summary.U = mesh, model, state.U
            summary.levels.append(LevelRecord(
                level=k, n_dofs=model.n, n_tets=mesh.n_tets, n_vertices=mesh.n_vertices, h_min=h_min,
                energy=state.energy.as_dict(), residual=state.residual,
                gram_err=flow.gram_error(model.M, state.U), steps=state.step_index,
                rejections=sum(e["event"] == "halve" for e in events[n_events:]), flow_time=state.t,
                status=state.status,
                wall_time=0.0 if config.deterministic else time.perf_counter() - tic))
            summary.final_energy = state.energy.total
            logger.info("level %d: %d dofs, E=%.8f, %d steps, %s", k, model.n, state.energy.total,
                        state.step_index, state.status)
            if state.status == "budget_exhausted":
                summary.termination = "budget_exhausted"
                break
            if output_dir and config.export_density:
                _write_density(Path(output_dir) / f"density_{k}.vtk", model, state.U)
            if k == config.maxrefine:
                break
            rho = model.density(state.U)
            eta = adapt.indicator(mesh, rho, config.indicator_mode)
            summary.indicators.append(eta)
            if output_dir and config.export_indicators:
                Path(output_dir).mkdir(parents=True, exist_ok=True)
                adapt.write_indicator_csv(Path(output_dir) / f"indicator_{k}.csv", mesh, eta)
            marked = adapt.mark(eta, config.theta)
            if len(marked.marked) == 0:
                logger.info("indicator vanished; no further refinement")
                break
            fine = meshmod.bisect(mesh, marked.marked)
            Uf = meshmod.transfer_nodal(model.nodal(state.U), mesh, fine)
            mesh = fine
            model = build_model(config, mesh, molecule)
            U = flow.orthonormalize(model.dofs.restrict(Uf), model.M)
        if summary.termination == "running":
            summary.termination = "converged"
    except (FlowStalled, RefinementError, SolverStagnation, RankDeficiency, LineageError) as exc:
        summary.termination = type(exc).__name__
        summary.message = str(exc)
        logger.error("run aborted: %s", exc)
    if output_dir:
        export_outputs(summary, output_dir)
    return summary


def _write_density(path, model: KSModel, U):
    path.parent.mkdir(parents=True, exist_ok=True)
    meshmod.write_vtk(path, model.mesh, {"rho": model.density(U).values}, title="electron density")


def export_outputs(summary: RunSummary, output_dir) -> Path:
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "history.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, HISTORY_COLUMNS)
            w.writeheader()
            for row in summary.history:
                w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})
        with open(out / "events.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, EVENT_COLUMNS)
            w.writeheader()
            w.writerows(summary.events)
        (out / "summary.json").write_text(json.dumps(summary.to_json(), indent=2))
        if summary.config.export_density and summary.model is not None:
            _write_density(out / "density_final.vtk", summary.model, summary.U)
    except OSError as exc:
        raise OSError(f"cannot write outputs to {out}: {exc}") from exc
    return out


@dataclass
class OracleReport:
    flow_energy: float
    eigen_energy: float
    relative_gap: float
    subspace_angle: float
    eigenvalues: np.ndarray
    n_dofs: int
    steps: int


def run_linear_oracle(config: RunConfig, epsilon: float = 1e-10, max_dofs: int = 3000,
                      degenerate_tol: float = 1e-8) -> OracleReport:
    """Flow to convergence on one mesh and compare with a dense generalized eigensolve.

    The subspace angle is measured against the span of all eigenvectors whose
    eigenvalue is within ``degenerate_tol`` (relative) of the N-th one.
    """
    if config.hartree != "off" or config.xc:
        raise ConfigError("the linear oracle needs hartree = off and xc = off")
    molecule = config.molecule()
    mesh = build_initial_mesh(config)
    model = build_model(config, mesh, molecule)
    n, N = model.n, model.n_orbitals
    if n > max_dofs:
        raise ConfigError(f"{n} dofs exceed the dense oracle cap of {max_dofs}")
    if N >= n:
        raise ConfigError("number of orbitals must be smaller than the number of dofs")

    settings = dataclasses.replace(config.flow_settings(), eps=epsilon)
    U = flow.initial_orbitals(model, config.init_width, config.seed)
    h_min = float(meshmod.element_sizes(mesh).h.min())
    state = flow.inner_loop(flow.start(model, U, h_min ** 2, settings=settings), model, settings)

    H = (0.5 * model.K + model.W_ext).toarray()
    lam, X = scipy.linalg.eigh(H, model.M.toarray(), subset_by_index=[0, min(N + 7, n) - 1])
    f = model.occupations
    e_eig = float(f @ lam[:N])
    e_flow = state.energy.total
    # compare with the whole eigenvalue cluster containing lambda_N: when it is
    # degenerate, any basis of the N lowest states is an equally valid answer
    n_span = int(np.sum(lam <= lam[N - 1] + degenerate_tol * max(abs(lam[N - 1]), 1.0)))
    # principal angles in the M inner product, both bases M-orthonormal
    sigma = np.linalg.svd(X[:, :n_span].T @ (model.M @ state.U), compute_uv=False)
    angle = float(np.arccos(np.clip(sigma.min(), -1.0, 1.0)))
    return OracleReport(e_flow, e_eig, abs(e_flow - e_eig) / abs(e_eig), angle, lam[:N], n, state.step_index)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ksflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run an adaptive ground-state calculation")
    p.add_argument("--config", required=True, help="config file or shipped name (he, h2, h2_paper, lih)")
    p.add_argument("--maxrefine", type=int)
    p.add_argument("--oracle-linear", action="store_true",
                   help="compare the flow with a dense eigensolver (hartree and xc must be off)")
    p.add_argument("--export-density", action="store_true")
    p.add_argument("--indicator-mode", choices=adapt.MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--output", "-o", help="output directory (default: config output_dir or ./ksflow_<name>)")
    p.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = RunConfig.load(args.config)
        changes = {k: v for k, v in (("maxrefine", args.maxrefine), ("indicator_mode", args.indicator_mode),
                                     ("seed", args.seed)) if v is not None}
        if args.export_density:
            changes["export_density"] = True
        if args.deterministic:
            changes["deterministic"] = True
        config = config.replace(**changes)
        if args.oracle_linear:
            rep = run_linear_oracle(config)
            print(f"flow energy     {rep.flow_energy:.12f}")
            print(f"eigen energy    {rep.eigen_energy:.12f}")
            print(f"relative gap    {rep.relative_gap:.3e}")
            print(f"subspace angle  {rep.subspace_angle:.3e}")
            return 0
        out = args.output or config.output_dir or f"ksflow_{config.name}"
        summary = run(config, out)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for rec in summary.levels:
        print(f"level {rec.level}: dofs={rec.n_dofs} E={rec.energy['total']:.8f} "
              f"steps={rec.steps} residual={rec.residual:.2e}")
    print(f"termination: {summary.termination}; outputs in {out}")
    return summary.exit_code
