"""Classical rigid-body optimisers over the shared contact energy.

Three variants are provided: gradient descent with a backtracking line
search, fixed-temperature Metropolis Monte Carlo and simulated annealing
with geometric cooling.  Every variant reports energies of the same
``MIN_HEAVY`` objective the agent is scored on, so results are directly
comparable.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .environment import InitialPose
from .errors import NonFiniteError
from .geometry import Pose, RigidTransform, bounding_radius, random_rotation, random_unit_vector
from .pdb_io import Structure
from .restraints import CB_UPPER_BOUND, ContactEnergy, ContactSet, DistanceKind, params_to_pose


class Variant(enum.Enum):
    GD = "gd"
    MC = "mc"
    SA = "sa"


@dataclass
class OptimizerConfig:
    """Settings for :func:`optimize`.

    Rotation proposals and gradient steps act about the posed ligand
    centre.  GD runs on Cβ distances (``ub`` raised to
    ``cb_upper_bound``) and, when ``refine`` is set, continues on the
    heavy-atom objective from the Cβ optimum.
    """

    variant: Variant = Variant.GD
    max_iterations: int = 20_000
    restarts: int = 8
    seed: int = 0
    learning_rate: float = 0.05
    backtrack: float = 0.5
    grad_tol: float = 1e-6
    temperature: float = 1.0
    translation_sigma: float = 0.5
    rotation_sigma: float = 2.0
    t_start: float = 10.0
    t_end: float = 1e-3
    initial_pose: InitialPose = InitialPose.RANDOM_SHELL
    shell_margin: float = 10.0
    cb_upper_bound: float = CB_UPPER_BOUND
    refine: bool = True
    prob_weight: bool = False

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.initial_pose = InitialPose(self.initial_pose)
        if self.max_iterations < 1 or self.restarts < 1:
            raise ValueError("max_iterations and restarts must be positive")
        positive = (self.learning_rate, self.temperature, self.translation_sigma, self.rotation_sigma, self.t_end)
        if min(positive) <= 0 or not 0 < self.backtrack < 1:
            raise ValueError("step sizes, temperatures and scales must be positive")
        if not self.t_end < self.t_start:
            raise ValueError("t_end must be below t_start")


@dataclass
class RestartResult:
    restart: int
    initial_energy: float
    final_energy: float
    best_energy: float
    best_pose: Pose
    iterations: int
    converged: bool
    status: str
    energies: np.ndarray = field(repr=False)
    accepted: np.ndarray = field(repr=False)

    @property
    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate(self.energies)

    def trace_lines(self):
        for i, (e, a) in enumerate(zip(self.energies, self.accepted)):
            yield json.dumps({"restart": self.restart, "iteration": i, "energy": float(e), "accepted": bool(a)})


@dataclass
class OptimizeResult:
    variant: Variant
    pose: Pose
    energy: float
    restarts: list[RestartResult]
    best_restart: int

    @property
    def trace(self) -> RestartResult:
        return self.restarts[self.best_restart]

    @property
    def iterations(self) -> int:
        return sum(r.iterations for r in self.restarts)

    def __iter__(self):
        yield self.pose
        yield self.energy
        yield self.trace

    def write_trace(self, sink) -> None:
        for r in self.restarts:
            for line in r.trace_lines():
                sink.write(line + "\n")


def metropolis_accept(delta_e: float, temperature: float, rng: np.random.Generator) -> bool:
    """Metropolis criterion; downhill moves are always accepted."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if delta_e <= 0:
        return True
    return bool(rng.random() < math.exp(-delta_e / temperature))


def starting_pose(
    receptor: Structure, ligand: Structure, kind: InitialPose, rng: np.random.Generator, margin: float = 10.0
) -> Pose:
    """Initial ligand pose drawn the same way the environment does."""
    c = ligand.coords.mean(axis=0)
    rc = receptor.coords.mean(axis=0)
    radius = bounding_radius(receptor.coords) + bounding_radius(ligand.coords) + margin
    if kind is InitialPose.IDENTITY:
        return Pose.identity(c)
    if kind is InitialPose.SEPARATED_AXIS:
        offset = c - rc
        norm = np.linalg.norm(offset)
        direction = offset / norm if norm > 1e-9 else np.array([1.0, 0.0, 0.0])
        return Pose(RigidTransform(np.eye(3), rc + radius * direction - c), c)
    rot = random_rotation(rng)
    return Pose(RigidTransform(rot, rc + radius * random_unit_vector(rng) - c), c)


def _checked(energy: float, where: str) -> float:
    if not math.isfinite(energy):
        raise NonFiniteError(f"non-finite energy during {where}")
    return energy


class _Run:
    """Bookkeeping for one restart: trace plus best-so-far pose."""

    def __init__(self, objective: ContactEnergy, pose: Pose):
        self.objective = objective
        e = _checked(objective.energy(pose), "initialisation")
        self.initial = e
        self.best_pose, self.best = pose, e
        self.energies = [e]
        self.accepted = [True]

    def record(self, pose: Pose, energy: float, accepted: bool) -> None:
        self.energies.append(energy)
        self.accepted.append(accepted)
        if energy < self.best:
            self.best, self.best_pose = energy, pose

    def result(self, restart: int, final: float, converged: bool, status: str) -> RestartResult:
        return RestartResult(
            restart=restart,
            initial_energy=self.initial,
            final_energy=final,
            best_energy=self.best,
            best_pose=self.best_pose,
            iterations=len(self.energies) - 1,
            converged=converged,
            status=status,
            energies=np.array(self.energies),
            accepted=np.array(self.accepted, dtype=bool),
        )


def _gd_stage(objective, run, pose, config, scale, budget):
    """Backtracking descent; returns ``(pose, iterations_used, converged, status)``."""
    step = config.learning_rate
    energy = objective.energy(pose)
    used = 0
    while used < budget:
        g = objective.gradient(np.zeros(6), pose)
        g_scaled = np.concatenate([g[:3], g[3:] / scale])
        gnorm = float(np.linalg.norm(g_scaled))
        if gnorm <= config.grad_tol:
            return pose, used, True, "converged"
        direction = -g_scaled / gnorm
        accepted = False
        while step * gnorm > 1e-12:
            trial_step = step * direction
            params = np.concatenate([trial_step[:3], trial_step[3:] / scale])
            trial = params_to_pose(params, pose)
            e_trial = _checked(objective.energy(trial), "gradient descent")
            if e_trial <= energy - 1e-4 * step * gnorm:
                accepted = True
                break
            step *= config.backtrack
        used += 1
        if not accepted:
            run.record(pose, run.objective.energy(pose), False)
            return pose, used, False, "line_search_stalled"
        pose, energy = trial, e_trial
        run.record(pose, run.objective.energy(pose), True)
        step = min(step / config.backtrack, 4.0)
    return pose, used, False, "max_iterations"


def _gradient_descent(receptor, ligand, contacts, config, pose, run) -> tuple[Pose, bool, str]:
    lig_scale = max(float(np.sqrt(np.mean(np.sum((ligand.coords - ligand.coords.mean(0)) ** 2, axis=1)))), 1.0)
    stages = [ContactEnergy(receptor, ligand, contacts, DistanceKind.CB, cb_upper_bound=config.cb_upper_bound, prob_weight=config.prob_weight)]
    if config.refine:
        stages.append(run.objective)
    budget = config.max_iterations
    converged, status = False, "max_iterations"
    for objective in stages:
        pose, used, converged, status = _gd_stage(objective, run, pose, config, lig_scale, budget)
        budget -= used
        if budget <= 0:
            break
    return pose, converged, status


def _metropolis(config, pose, run, rng, annealed: bool) -> tuple[Pose, bool, str]:
    objective = run.objective
    energy = run.initial
    sigma = np.array([config.translation_sigma] * 3 + [math.radians(config.rotation_sigma)] * 3)
    n = config.max_iterations
    ratio = config.t_end / config.t_start
    for k in range(n):
        temperature = config.t_start * ratio ** (k / max(n - 1, 1)) if annealed else config.temperature
        trial = params_to_pose(rng.normal(0.0, sigma), pose)
        e_trial = _checked(objective.energy(trial), "Monte Carlo")
        ok = metropolis_accept(e_trial - energy, temperature, rng)
        if ok:
            pose, energy = trial, e_trial
        run.record(pose, energy, ok)
    return pose, False, "max_iterations"


def optimize(
    config: OptimizerConfig,
    receptor: Structure,
    ligand: Structure,
    contacts: ContactSet,
    seed: int | None = None,
    initial_poses: list[Pose] | None = None,
) -> OptimizeResult:
    """Minimise the contact energy from ``config.restarts`` starting poses.

    Each restart draws its start from its own child of ``seed`` (default
    ``config.seed``), so restarts are independent and reproducible.  The
    returned pose is the lowest-energy pose met in any restart; ties go to
    the lower restart index.
    """
    contacts.require_nonempty()
    objective = ContactEnergy(receptor, ligand, contacts, DistanceKind.MIN_HEAVY, prob_weight=config.prob_weight)
    seed = config.seed if seed is None else seed
    children = np.random.SeedSequence(seed).spawn(config.restarts)
    results = []
    for r, child in enumerate(children):
        rng = np.random.default_rng(child)
        if initial_poses is not None:
            start = initial_poses[r % len(initial_poses)]
        else:
            start = starting_pose(receptor, ligand, config.initial_pose, rng, config.shell_margin)
        run = _Run(objective, start)
        if config.variant is Variant.GD:
            final, converged, status = _gradient_descent(receptor, ligand, contacts, config, start, run)
        else:
            final, converged, status = _metropolis(config, start, run, rng, config.variant is Variant.SA)
        results.append(run.result(r, _checked(objective.energy(final), "final evaluation"), converged, status))
    best = min(range(len(results)), key=lambda i: (results[i].best_energy, i))
    return OptimizeResult(config.variant, results[best].best_pose, results[best].best_energy, results, best)
