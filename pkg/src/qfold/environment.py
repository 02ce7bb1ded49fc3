"""Markov decision process for rigid-body dimer assembly.

The receptor stays fixed.  Every action is one fixed world-frame rigid
transform (a 1 A translation or a 1 degree rotation about the ligand
centroid captured at reset) applied to the ligand.  Observations are the
inter-chain Cβ distance map resampled to a fixed ``D x D`` image.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import EpisodeError
from .geometry import (
    Axis,
    Pose,
    RigidTransform,
    bounding_radius,
    kabsch_superpose,
    random_rotation,
    random_unit_vector,
    rotation_matrix,
)
from .pdb_io import Structure
from .restraints import ContactEnergy, ContactSet, DistanceKind, restraint_energy_array

MAX_MAP_DISTANCE = 100.0


class ActionKind(enum.Enum):
    TRANSLATE = "translate"
    ROTATE = "rotate"


class ActionMode(enum.Enum):
    SIX = "six"
    TWELVE = "twelve"


@dataclass(frozen=True)
class ActionSpec:
    kind: ActionKind
    axis: Axis
    direction: int = 1
    translation_step: float = 1.0
    rotation_step: float = 1.0

    def __post_init__(self):
        if self.direction not in (1, -1):
            raise ValueError("direction must be +1 or -1")
        if not (self.translation_step > 0 and self.rotation_step > 0):
            raise ValueError("step sizes must be positive")

    def transform(self, pivot) -> RigidTransform:
        """World-frame transform of this action for a given rotation pivot."""
        if self.kind is ActionKind.TRANSLATE:
            delta = np.zeros(3)
            delta[int(self.axis)] = self.direction * self.translation_step
            return RigidTransform(np.eye(3), delta)
        rot = rotation_matrix(self.axis, math.radians(self.direction * self.rotation_step))
        pivot = np.asarray(pivot, dtype=float)
        return RigidTransform(rot, pivot - rot @ pivot)

    def opposite(self) -> ActionSpec:
        return replace(self, direction=-self.direction)

    def label(self) -> str:
        sign = "+" if self.direction > 0 else "-"
        return f"{self.kind.value[0].upper()}{self.axis.name}{sign}"


def action_set(
    mode: ActionMode | str = ActionMode.TWELVE,
    translation_step: float = 1.0,
    rotation_step: float = 1.0,
) -> list[ActionSpec]:
    """Discrete action list.

    Order is fixed: translations along X, Y, Z, then rotations about X, Y,
    Z; within each axis ``+`` precedes ``-``.  ``SIX`` keeps only the
    positive directions.
    """
    mode = ActionMode(mode)
    signs = (1,) if mode is ActionMode.SIX else (1, -1)
    return [
        ActionSpec(kind, axis, sign, translation_step, rotation_step)
        for kind in (ActionKind.TRANSLATE, ActionKind.ROTATE)
        for axis in Axis
        for sign in signs
    ]


class RewardStrategy(enum.Enum):
    CONTACT_ENERGY = "contact_energy"
    RMSD_TO_NATIVE = "rmsd_to_native"


class InitialPose(enum.Enum):
    RANDOM_SHELL = "random_shell"
    SEPARATED_AXIS = "separated_axis"
    IDENTITY = "identity"


@dataclass
class EpisodeConfig:
    max_steps: int = 2000
    success_energy: float = 0.0
    initial_pose: InitialPose = InitialPose.RANDOM_SHELL
    seed: int = 0
    shell_margin: float = 10.0

    def __post_init__(self):
        self.initial_pose = InitialPose(self.initial_pose)
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")


@dataclass(frozen=True)
class EnvState:
    pose: Pose
    pivot: np.ndarray
    observation: np.ndarray = field(repr=False)
    energy: float
    quality: float
    step_count: int = 0
    done: bool = False


# ---------------------------------------------------------------- observation


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights mapping ``n_in`` samples onto ``n_out`` (corners aligned)."""
    w = np.zeros((n_out, n_in))
    if n_in == 1:
        w[:, 0] = 1.0
    else:
        src = np.arange(n_out) * (n_in - 1) / max(n_out - 1, 1) if n_out > 1 else np.zeros(1)
        lo = np.minimum(np.floor(src).astype(int), n_in - 2)
        frac = src - lo
        w[np.arange(n_out), lo] = 1.0 - frac
        w[np.arange(n_out), lo + 1] += frac
    w.setflags(write=False)
    return w


def resample_bilinear(matrix: np.ndarray, size: int) -> np.ndarray:
    m = np.asarray(matrix, dtype=float)
    return _interp_matrix(m.shape[0], size) @ m @ _interp_matrix(m.shape[1], size).T


def normalize_distance_map(dmap: np.ndarray, size: int) -> np.ndarray:
    if size < 8:
        raise ValueError("observation size must be at least 8")
    return resample_bilinear(np.clip(dmap, 0.0, MAX_MAP_DISTANCE) / MAX_MAP_DISTANCE, size)


def encode_observation(pose: Pose, receptor: Structure, ligand: Structure, size: int = 64) -> np.ndarray:
    """``size x size`` image of the clamped, normalised Cβ distance map."""
    lig = pose.apply(ligand.cb_coords)
    diff = lig[:, None, :] - receptor.cb_coords[None, :, :]
    return normalize_distance_map(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)), size)


# ---------------------------------------------------------------- environment


class DockingEnv:
    """Rigid-body docking environment for one receptor/ligand/contact triple.

    The environment object holds only immutable inputs; all episode state
    lives in :class:`EnvState`, so a single env can drive many rollouts.
    """

    def __init__(
        self,
        receptor: Structure,
        ligand: Structure,
        contacts: ContactSet,
        *,
        reward: RewardStrategy | str = RewardStrategy.CONTACT_ENERGY,
        native: tuple[Structure, Structure] | None = None,
        config: EpisodeConfig | None = None,
        action_mode: ActionMode | str = ActionMode.TWELVE,
        translation_step: float = 1.0,
        rotation_step: float = 1.0,
        obs_size: int = 64,
        distance_kind: DistanceKind = DistanceKind.MIN_HEAVY,
        prob_weight: bool = False,
    ):
        self.receptor, self.ligand = receptor, ligand
        self.contacts = contacts
        self.objective = ContactEnergy(receptor, ligand, contacts, distance_kind, prob_weight=prob_weight)
        self.reward_strategy = RewardStrategy(reward)
        if self.reward_strategy is RewardStrategy.RMSD_TO_NATIVE and native is None:
            raise ValueError("RMSD_TO_NATIVE rewards need the native (receptor, ligand) pair")
        self.native = native
        self.config = config or EpisodeConfig()
        self.actions = action_set(action_mode, translation_step, rotation_step)
        if obs_size < 8:
            raise ValueError("observation size must be at least 8")
        self.obs_size = obs_size
        self.ligand_center = ligand.coords.mean(axis=0)
        self.receptor_center = receptor.coords.mean(axis=0)
        self.shell_radius = bounding_radius(receptor.coords) + bounding_radius(ligand.coords) + self.config.shell_margin
        self._rows = _interp_matrix(ligand.length, obs_size)
        self._cols = _interp_matrix(receptor.length, obs_size).T.copy()
        self._rec_cb = np.asarray(receptor.cb_coords)
        if native is not None:
            self._native_ca = np.vstack([native[0].ca_coords, native[1].ca_coords])
            if len(self._native_ca) != receptor.length + ligand.length:
                raise ValueError("native complex does not match the input chains")

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def reward_unit(self) -> float:
        """Energy change from moving every restraint 1 A along its linear tail."""
        return float(np.sum(self.objective.weight / self.objective.sd))

    # -- pose helpers

    def initial_pose(self, rng: np.random.Generator) -> Pose:
        kind = self.config.initial_pose
        c = self.ligand_center
        if kind is InitialPose.IDENTITY:
            return Pose.identity(c)
        if kind is InitialPose.SEPARATED_AXIS:
            offset = c - self.receptor_center
            norm = np.linalg.norm(offset)
            direction = offset / norm if norm > 1e-9 else np.array([1.0, 0.0, 0.0])
            target = self.receptor_center + self.shell_radius * direction
            return Pose(RigidTransform(np.eye(3), target - c), c)
        rot = random_rotation(rng)
        target = self.receptor_center + self.shell_radius * random_unit_vector(rng)
        return Pose(RigidTransform(rot, target - c), c)

    def observe(self, pose: Pose) -> np.ndarray:
        lig = pose.apply(self.ligand.cb_coords)
        diff = lig[:, None, :] - self._rec_cb[None, :, :]
        dmap = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        return self._rows @ (np.clip(dmap, 0.0, MAX_MAP_DISTANCE) / MAX_MAP_DISTANCE) @ self._cols

    def energy(self, pose: Pose) -> float:
        return self.objective.energy(pose)

    def rmsd_to_native(self, pose: Pose) -> float:
        if self.native is None:
            return float("nan")
        model = np.vstack([self.receptor.ca_coords, pose.apply(self.ligand.ca_coords)])
        return kabsch_superpose(model, self._native_ca)[1]

    def quality(self, pose: Pose, energy: float | None = None) -> float:
        """Lower is better: contact energy or RMSD to the native complex."""
        if self.reward_strategy is RewardStrategy.RMSD_TO_NATIVE:
            return self.rmsd_to_native(pose)
        return self.energy(pose) if energy is None else energy

    def make_state(self, pose: Pose, pivot, step_count: int = 0) -> EnvState:
        energy = self.energy(pose)
        done = energy <= self.config.success_energy or step_count >= self.config.max_steps
        return EnvState(
            pose=pose,
            pivot=np.asarray(pivot, dtype=float),
            observation=self.observe(pose),
            energy=energy,
            quality=self.quality(pose, energy),
            step_count=step_count,
            done=done,
        )

    # -- MDP interface

    def reset(self, seed: int | np.random.Generator | None = None) -> EnvState:
        if isinstance(seed, np.random.Generator):
            rng = seed
        else:
            rng = np.random.default_rng(self.config.seed if seed is None else seed)
        pose = self.initial_pose(rng)
        state = self.make_state(pose, pose.center, 0)
        return replace(state, done=state.energy <= self.config.success_energy)

    def step(self, state: EnvState, action: ActionSpec | int) -> tuple[EnvState, float, bool]:
        if state.done:
            raise EpisodeError("episode already finished; call reset()")
        if state.step_count >= self.config.max_steps:
            raise EpisodeError("step budget exhausted")
        spec = self.actions[action] if isinstance(action, (int, np.integer)) else action
        pose = state.pose.followed_by(spec.transform(state.pivot))
        new = self.make_state(pose, state.pivot, state.step_count + 1)
        reward = state.quality - new.quality
        return new, reward, new.done


# ---------------------------------------------------------------- toy problem


@dataclass(frozen=True)
class LineState:
    position: int
    observation: np.ndarray = field(repr=False)
    energy: float
    step_count: int = 0
    done: bool = False

    @property
    def quality(self) -> float:
        return self.energy


class LineAlignmentEnv:
    """One-dimensional alignment MDP with a known optimal policy.

    Two ``n_sites``-residue chains lie on the x axis; the ligand sits at an
    integer offset in ``[-limit, limit]`` and every residue ``i`` is
    restrained to its partner ``i`` (``lb = ub = 0``, ``sd = 1``), so the
    energy is ``n_sites * |offset|``.  Actions move the ligand by -1 or +1
    (clamped at the ends); reward is the energy decrease.  Offset 0 is
    terminal.
    """

    n_actions = 2

    def __init__(self, limit: int = 50, n_sites: int = 8, obs_size: int = 8, max_steps: int = 200, seed: int = 0):
        self.limit, self.n_sites, self.obs_size = limit, n_sites, obs_size
        self.max_steps, self.seed = max_steps, seed
        self.positions = np.arange(-limit, limit + 1)
        self._obs_cache: dict[int, np.ndarray] = {}

    @property
    def reward_unit(self) -> float:
        return float(self.n_sites)

    def energy_at(self, position: int) -> float:
        x = np.full(self.n_sites, abs(float(position)))
        return float(np.sum(restraint_energy_array(x, 0.0, 0.0, 1.0)))

    def observe(self, position: int) -> np.ndarray:
        if position not in self._obs_cache:
            i = np.arange(self.n_sites, dtype=float)
            dmap = np.abs(i[:, None] + position - i[None, :])
            obs = normalize_distance_map(dmap, self.obs_size)
            obs.setflags(write=False)
            self._obs_cache[position] = obs
        return self._obs_cache[position]

    def state_at(self, position: int, step_count: int = 0) -> LineState:
        energy = self.energy_at(position)
        done = position == 0 or step_count >= self.max_steps
        return LineState(position, self.observe(position), energy, step_count, done)

    def reset(self, seed: int | np.random.Generator | None = None) -> LineState:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(self.seed if seed is None else seed)
        choices = self.positions[self.positions != 0]
        return self.state_at(int(rng.choice(choices)))

    def next_position(self, position: int, action: int) -> int:
        move = 1 if action == 0 else -1
        return int(np.clip(position + move, -self.limit, self.limit))

    def step(self, state: LineState, action: int) -> tuple[LineState, float, bool]:
        if state.done:
            raise EpisodeError("episode already finished; call reset()")
        new = self.state_at(self.next_position(state.position, int(action)), state.step_count + 1)
        return new, state.energy - new.energy, new.done

    def rmsd_to_native(self, state_or_pose) -> float:
        return float("nan")
