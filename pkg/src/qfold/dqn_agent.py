"""Deep Q-learning agent written directly in numpy.

The Q-network maps a ``(D, D)`` distance-map image to one value per
action.  Layers: three stride-2 convolutions with ReLU (16@3x3, 32@5x5,
64@3x3, zero padding ``k // 2``), a ReLU hidden layer and a linear output.
Feature maps are kept channels-last (``N, H, W, C``), so the flattened
conv output is ordered ``(h, w, c)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import NetworkShapeError, NonFiniteError

CONV_SPECS = ((16, 3), (32, 5), (64, 3))
CONV_STRIDE = 2
CHECKPOINT_MAGIC = b"QNET"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------- layers


def conv_output_size(size: int, kernel: int, stride: int = CONV_STRIDE) -> int:
    return (size + 2 * (kernel // 2) - kernel) // stride + 1


def _phase_split(x: np.ndarray, pad: int, stride: int) -> np.ndarray:
    """Zero-pad and regroup ``x`` by ``(row % stride, col % stride)``.

    Result has shape ``(N, stride, stride, Hp / stride, Wp / stride, C)`` so
    every strided window becomes a contiguous block slice.
    """
    n, h, w, c = x.shape
    hp = -(-(h + 2 * pad) // stride) * stride
    wp = -(-(w + 2 * pad) // stride) * stride
    xp = np.zeros((n, hp, wp, c), dtype=x.dtype)
    xp[:, pad : pad + h, pad : pad + w] = x
    return xp.reshape(n, hp // stride, stride, wp // stride, stride, c).transpose(0, 2, 4, 1, 3, 5).copy()


def _im2col(x: np.ndarray, kernel: int, stride: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Patch matrix with columns ordered ``(ki, kj, c)``."""
    n, h, w, c = x.shape
    ho, wo = conv_output_size(h, kernel, stride), conv_output_size(w, kernel, stride)
    phases = _phase_split(x, kernel // 2, stride)
    cols = np.empty((n, ho, wo, kernel, kernel, c), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            a, b = i // stride, j // stride
            cols[:, :, :, i, j, :] = phases[:, i % stride, j % stride, a : a + ho, b : b + wo, :]
    return cols.reshape(n * ho * wo, -1), (ho, wo)


def _col2im(dcols: np.ndarray, x_shape, kernel: int, stride: int, out_hw) -> np.ndarray:
    """Adjoint of :func:`_im2col`."""
    n, h, w, c = x_shape
    ho, wo = out_hw
    pad = kernel // 2
    hp = -(-(h + 2 * pad) // stride) * stride
    wp = -(-(w + 2 * pad) // stride) * stride
    d = dcols.reshape(n, ho, wo, kernel, kernel, c)
    phases = np.zeros((n, stride, stride, hp // stride, wp // stride, c), dtype=dcols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            a, b = i // stride, j // stride
            phases[:, i % stride, j % stride, a : a + ho, b : b + wo, :] += d[:, :, :, i, j, :]
    dxp = phases.transpose(0, 3, 1, 4, 2, 5).reshape(n, hp, wp, c)
    return dxp[:, pad : pad + h, pad : pad + w, :]


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    """``(F, C, k, k)`` kernel as an ``(F, k*k*C)`` matrix matching :func:`_im2col`."""
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- network


class QNetwork:
    """Convolutional Q-network with explicit forward and backward passes.

    Args:
        obs_size: side length ``D`` of the square input image (>= 8).
        n_actions: number of outputs.
        seed: seed for Xavier-uniform initialisation.
        hidden: width of the fully connected hidden layer.
        channels: output channels of the three conv layers.
        dtype: floating type used for parameters and activations.
    """

    def __init__(
        self,
        obs_size: int,
        n_actions: int,
        seed: int = 0,
        *,
        hidden: int = 256,
        channels: tuple[int, int, int] = (16, 32, 64),
        dtype=np.float64,
    ):
        if obs_size < 8:
            raise NetworkShapeError("observation size must be at least 8")
        if n_actions < 1:
            raise NetworkShapeError("need at least one action")
        self.obs_size, self.n_actions = int(obs_size), int(n_actions)
        self.hidden, self.channels = int(hidden), tuple(int(c) for c in channels)
        self.dtype = np.dtype(dtype)
        self.kernels = tuple(k for _, k in CONV_SPECS)
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        size, c_in = self.obs_size, 1
        for i, (c_out, k) in enumerate(zip(self.channels, self.kernels)):
            params[f"conv{i}.w"] = _xavier(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k)
            params[f"conv{i}.b"] = np.zeros(c_out)
            size, c_in = conv_output_size(size, k), c_out
        self.flat_size = size * size * c_in
        params["fc0.w"] = _xavier(rng, (self.hidden, self.flat_size), self.flat_size, self.hidden)
        params["fc0.b"] = np.zeros(self.hidden)
        params["fc1.w"] = _xavier(rng, (self.n_actions, self.hidden), self.hidden, self.n_actions)
        params["fc1.b"] = np.zeros(self.n_actions)
        self.params = {k: v.astype(self.dtype) for k, v in params.items()}

    # -- introspection

    @property
    def param_names(self) -> list[str]:
        return list(self.params)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def same_architecture(self, other: QNetwork) -> bool:
        return all(
            k in other.params and other.params[k].shape == v.shape for k, v in self.params.items()
        ) and len(self.params) == len(other.params)

    def copy(self) -> QNetwork:
        clone = object.__new__(QNetwork)
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def astype(self, dtype) -> QNetwork:
        clone = self.copy()
        clone.dtype = np.dtype(dtype)
        clone.params = {k: v.astype(clone.dtype) for k, v in self.params.items()}
        return clone

    # -- passes

    def _check_input(self, obs) -> np.ndarray:
        x = np.asarray(obs, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (self.obs_size, self.obs_size):
            raise NetworkShapeError(
                f"expected observations of shape (N, {self.obs_size}, {self.obs_size}), got {np.shape(obs)}"
            )
        return x

    def forward(self, obs, *, keep_cache: bool = False):
        """Q-values of shape ``(N, n_actions)``; 2-D input is treated as a batch of one."""
        x = self._check_input(obs)[..., None]
        cache: list[Any] = []
        for i, k in enumerate(self.kernels):
            w = self.params[f"conv{i}.w"]
            cols, hw = _im2col(x, k, CONV_STRIDE)
            z = cols @ _weight_matrix(w).T + self.params[f"conv{i}.b"]
            out = np.maximum(z, 0.0).reshape(x.shape[0], hw[0], hw[1], w.shape[0])
            if keep_cache:
                cache.append((cols, x.shape, hw, z > 0))
            x = out
        flat = x.reshape(x.shape[0], -1)
        z = flat @ self.params["fc0.w"].T + self.params["fc0.b"]
        h = np.maximum(z, 0.0)
        q = h @ self.params["fc1.w"].T + self.params["fc1.b"]
        if keep_cache:
            cache.append((flat, z > 0, h))
            return q, cache
        return q

    __call__ = forward

    def backward(self, cache, dq: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of ``sum(dq * Q)`` with respect to every parameter."""
        flat, mask0, h = cache[-1]
        dq = np.asarray(dq, dtype=self.dtype)
        grads = {"fc1.w": dq.T @ h, "fc1.b": dq.sum(axis=0)}
        dz = (dq @ self.params["fc1.w"]) * mask0
        grads["fc0.w"] = dz.T @ flat
        grads["fc0.b"] = dz.sum(axis=0)
        dx = (dz @ self.params["fc0.w"]).reshape(flat.shape[0], -1)
        for i in reversed(range(len(self.kernels))):
            cols, x_shape, hw, mask = cache[i]
            w = self.params[f"conv{i}.w"]
            dz = dx.reshape(-1, w.shape[0]) * mask
            f, c, k, _ = w.shape
            grads[f"conv{i}.w"] = (dz.T @ cols).reshape(f, k, k, c).transpose(0, 3, 1, 2)
            grads[f"conv{i}.b"] = dz.sum(axis=0)
            if i > 0:
                dx = _col2im(dz @ _weight_matrix(w), x_shape, self.kernels[i], CONV_STRIDE, hw)
        return grads

    # -- persistence

    def save(self, path) -> None:
        """Binary checkpoint: header then row-major little-endian float64 tensors."""
        header = struct.pack("<4sIIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self.obs_size, self.n_actions, len(self.params))
        chunks = [header]
        for name, value in self.params.items():
            encoded = name.encode("ascii")
            chunks.append(struct.pack("<I", len(encoded)) + encoded)
            chunks.append(struct.pack("<I", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
            chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path, dtype=np.float64) -> QNetwork:
        data = Path(path).read_bytes()
        try:
            magic, version, size, n_actions, count = struct.unpack_from("<4sIIII", data, 0)
        except struct.error as exc:
            raise NetworkShapeError(f"truncated checkpoint {path}") from exc
        if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
            raise NetworkShapeError(f"{path} is not a version-{CHECKPOINT_VERSION} Q-network checkpoint")
        offset = struct.calcsize("<4sIIII")
        tensors = {}
        try:
            for _ in range(count):
                (n,) = struct.unpack_from("<I", data, offset)
                name = data[offset + 4 : offset + 4 + n].decode("ascii")
                offset += 4 + n
                (ndim,) = struct.unpack_from("<I", data, offset)
                shape = struct.unpack_from(f"<{ndim}I", data, offset + 4)
                offset += 4 + 4 * ndim
                nbytes = 8 * int(np.prod(shape))
                if offset + nbytes > len(data):
                    raise NetworkShapeError(f"truncated checkpoint {path}")
                tensors[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape)
                offset += nbytes
        except struct.error as exc:
            raise NetworkShapeError(f"truncated checkpoint {path}") from exc
        try:
            channels = tuple(tensors[f"conv{i}.w"].shape[0] for i in range(3))
            hidden = tensors["fc0.w"].shape[0]
        except KeyError as exc:
            raise NetworkShapeError(f"checkpoint {path} lacks tensor {exc}") from exc
        net = cls(size, n_actions, hidden=hidden, channels=channels, dtype=dtype)
        for name, value in tensors.items():
            if name not in net.params or net.params[name].shape != value.shape:
                raise NetworkShapeError(f"checkpoint tensor {name} has unexpected shape {value.shape}")
            net.params[name] = value.astype(net.dtype)
        return net


# ---------------------------------------------------------------- DQN pieces


def q_forward(net: QNetwork, obs) -> np.ndarray:
    return net.forward(obs)


def q_backward(net: QNetwork, obs, actions, targets) -> tuple[dict[str, np.ndarray], float]:
    """Gradients and value of ``mean((Q(s, a) - target)^2)``."""
    q, cache = net.forward(obs, keep_cache=True)
    actions = np.asarray(actions, dtype=int)
    targets = np.asarray(targets, dtype=net.dtype)
    rows = np.arange(len(actions))
    err = q[rows, actions] - targets
    dq = np.zeros_like(q)
    dq[rows, actions] = 2.0 * err / len(actions)
    return net.backward(cache, dq), float(np.mean(err.astype(float) ** 2))


def q_targets(target_net: QNetwork, rewards, next_obs, dones, gamma: float) -> np.ndarray:
    """``r + gamma * max_a' Q_target(s', a')``, with no bootstrap on terminal steps."""
    rewards = np.asarray(rewards, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    best = np.max(target_net.forward(next_obs), axis=1).astype(float)
    return rewards + gamma * np.where(dones, 0.0, best)


def q_reference(reward: float, next_obs, done: bool, target_net: QNetwork, gamma: float) -> float:
    """Bellman target for a single transition."""
    return float(q_targets(target_net, [reward], np.asarray(next_obs)[None], [done], gamma)[0])


def select_action(net: QNetwork, obs, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy choice; greedy ties go to the lowest index."""
    if rng.random() < epsilon:
        return int(rng.integers(net.n_actions))
    return int(np.argmax(net.forward(obs)[0]))


def sync_target(net: QNetwork, target: QNetwork) -> None:
    if not net.same_architecture(target):
        raise NetworkShapeError("online and target networks differ in architecture")
    for k, v in net.params.items():
        target.params[k] = v.astype(target.dtype, copy=True)


class ReplayBuffer:
    """FIFO experience replay with uniform sampling.

    Observations are stored as ``float16`` (inputs lie in ``[0, 1]``) to
    keep a full buffer of 64x64 images within a few hundred megabytes.
    """

    def __init__(self, capacity: int, obs_size: int, obs_dtype=np.float16):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        shape = (self.capacity, obs_size, obs_size)
        self.obs = np.zeros(shape, dtype=obs_dtype)
        self.next_obs = np.zeros(shape, dtype=obs_dtype)
        self.actions = np.zeros(self.capacity, dtype=np.int64)
        self.rewards = np.zeros(self.capacity)
        self.dones = np.zeros(self.capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, obs, action: int, reward: float, next_obs, done: bool) -> None:
        i = self._next
        self.obs[i] = obs
        self.next_obs[i] = next_obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.dones[i] = done
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def oldest_index(self) -> int:
        return self._next if self._size == self.capacity else 0

    def ordered_indices(self) -> np.ndarray:
        """Slots from oldest to newest."""
        return (self.oldest_index() + np.arange(self._size)) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator):
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._size, size=batch_size)
        return self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx]


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    """Hyper-parameters for self-play training.

    ``epsilon_decay`` multiplies epsilon once per episode by default; set
    ``decay_per_step`` to apply it after every environment step instead.
    ``reward_scale=None`` divides rewards by ``env.reward_unit`` before
    they enter the Bellman targets; environment rewards stay unscaled.
    ``fixed_start`` resets every episode with ``seed`` so all episodes
    begin from the same initial pose; otherwise each reset draws a fresh
    pose from the training RNG.  ``train_every`` performs one SGD update
    every that many environment steps.
    """

    total_steps: int = 100_000
    batch_size: int = 64
    gamma: float = 0.99
    learning_rate: float = 1e-3
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    epsilon_decay: float = 0.99
    decay_per_step: bool = False
    target_sync_interval: int = 500
    seed: int = 0
    replay_capacity: int = 50_000
    learning_starts: int | None = None
    train_every: int = 1
    hidden: int = 256
    momentum: float = 0.0
    max_grad_norm: float | None = None
    reward_scale: float | None = None
    stop_on_success: bool = False
    fixed_start: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1 or self.target_sync_interval < 1:
            raise ValueError("steps, batch size and target period must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not (0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0 and 0.0 < self.epsilon_decay <= 1.0):
            raise ValueError("epsilon schedule is inconsistent")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**known)


@dataclass
class EpisodeRecord:
    episode: int
    steps: int
    total_reward: float
    initial_energy: float
    final_energy: float
    best_energy: float
    epsilon: float
    success: bool
    final_rmsd: float = float("nan")

    def to_json(self) -> str:
        return json.dumps({k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()})


@dataclass
class TrainResult:
    network: QNetwork
    log: list[EpisodeRecord]
    best_state: Any
    steps: int
    losses: list[float] = field(default_factory=list)

    def __iter__(self):
        yield self.network
        yield self.log


class _Optimizer:
    def __init__(self, net: QNetwork, lr: float, momentum: float, max_norm: float | None):
        self.lr, self.momentum, self.max_norm = lr, momentum, max_norm
        self.velocity = {k: np.zeros_like(v) for k, v in net.params.items()} if momentum else None

    def apply(self, net: QNetwork, grads: dict[str, np.ndarray]) -> None:
        scale = 1.0
        if self.max_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g.astype(float) ** 2)) for g in grads.values()))
            if norm > self.max_norm:
                scale = self.max_norm / norm
        for k, g in grads.items():
            if self.velocity is not None:
                self.velocity[k] = self.momentum * self.velocity[k] + scale * g
                g = self.velocity[k]
            else:
                g = scale * g
            net.params[k] -= (self.lr * g).astype(net.dtype)


def _state_rmsd(env, state) -> float:
    pose = getattr(state, "pose", None)
    return env.rmsd_to_native(pose if pose is not None else state)


def train_self_play(env, config: TrainConfig, network: QNetwork | None = None, log_path=None) -> TrainResult:
    """Train a Q-network by self-play in ``env``.

    ``env`` needs ``reset(rng)``, ``step(state, action)``, ``n_actions``,
    ``obs_size`` and ``reward_unit``; states expose ``observation``,
    ``energy``, ``quality`` and ``done``.  The best-energy state visited
    during training is kept in the result.
    """
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    net = network.astype(dtype) if network is not None else QNetwork(
        env.obs_size, env.n_actions, seed=config.seed, hidden=config.hidden, dtype=dtype
    )
    if net.n_actions != env.n_actions or net.obs_size != env.obs_size:
        raise NetworkShapeError("network does not match the environment")
    target = net.copy()
    buffer = ReplayBuffer(min(config.replay_capacity, config.total_steps), env.obs_size)
    opt = _Optimizer(net, config.learning_rate, config.momentum, config.max_grad_norm)
    scale = config.reward_scale if config.reward_scale is not None else 1.0 / max(env.reward_unit, 1e-12)
    learning_starts = config.batch_size if config.learning_starts is None else config.learning_starts

    epsilon = config.epsilon_start
    log: list[EpisodeRecord] = []
    losses: list[float] = []
    best_state = None
    steps = 0
    sink = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        while steps < config.total_steps:
            state = env.reset(config.seed if config.fixed_start else rng)
            start_energy, total, ep_best = state.energy, 0.0, state.energy
            if best_state is None or state.energy < best_state.energy:
                best_state = state
            ep_steps = 0
            while not state.done and steps < config.total_steps:
                action = select_action(net, state.observation, epsilon, rng)
                nxt, reward, done = env.step(state, action)
                if not math.isfinite(reward):
                    raise NonFiniteError(f"non-finite reward at step {steps}")
                buffer.push(state.observation, action, reward * scale, nxt.observation, done)
                total += reward
                state = nxt
                steps += 1
                ep_steps += 1
                ep_best = min(ep_best, state.energy)
                if state.energy < best_state.energy:
                    best_state = state
                if len(buffer) >= learning_starts and steps % config.train_every == 0:
                    s, a, r, s2, d = buffer.sample(config.batch_size, rng)
                    y = q_targets(target, r, s2, d, config.gamma)
                    grads, loss = q_backward(net, s, a, y)
                    if not math.isfinite(loss):
                        raise NonFiniteError(f"training loss became non-finite at step {steps}")
                    opt.apply(net, grads)
                    losses.append(loss)
                if steps % config.target_sync_interval == 0:
                    sync_target(net, target)
                if config.decay_per_step:
                    epsilon = max(config.epsilon_end, epsilon * config.epsilon_decay)
            success = state.energy <= getattr(getattr(env, "config", None), "success_energy", 0.0)
            record = EpisodeRecord(
                episode=len(log),
                steps=ep_steps,
                total_reward=total,
                initial_energy=start_energy,
                final_energy=state.energy,
                best_energy=ep_best,
                epsilon=epsilon,
                success=bool(success),
                final_rmsd=_state_rmsd(env, state),
            )
            log.append(record)
            if sink is not None:
                sink.write(record.to_json() + "\n")
            if not config.decay_per_step:
                epsilon = max(config.epsilon_end, epsilon * config.epsilon_decay)
            if config.stop_on_success and success:
                break
    finally:
        if sink is not None:
            sink.close()
    return TrainResult(net, log, best_state, steps, losses)


def greedy_rollout(net: QNetwork, env, max_steps: int | None = None, seed=0):
    """Run the greedy policy from a fresh reset.

    Returns ``(best_state, trajectory)``: the lowest-energy state met along
    the way (not necessarily the last) and ``(action, reward, energy)``
    per step.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    state = env.reset(rng)
    best = state
    trajectory = []
    limit = max_steps if max_steps is not None else getattr(getattr(env, "config", None), "max_steps", 2000)
    while not state.done and len(trajectory) < limit:
        action = int(np.argmax(net.forward(state.observation)[0]))
        state, reward, _ = env.step(state, action)
        trajectory.append((action, reward, state.energy))
        if state.energy < best.energy:
            best = state
    return best, trajectory
