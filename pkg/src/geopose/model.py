"""Small fully connected pose regressor with the 7-D pose head.

The head follows the standard construction for pose regression networks:
a final linear layer emits 7 values, split into a 3-D position and a raw
4-D quaternion which a normalization layer maps onto the unit sphere.
Gradients are exact reverse-mode; the trainer feeds upstream gradients
w.r.t. (position, raw quaternion) from the loss module.

Parameters live in one flat float64 vector (``state.theta``); weights and
biases are views into it, so the fused optimizer kernel can update
everything in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericsError

__all__ = [
    "RegressorConfig",
    "RegressorState",
    "Tape",
    "init",
    "forward",
    "backward",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1
_ACTIVATIONS = ("tanh", "relu")
DEGENERATE_HEAD_TOL = 1e-9


@dataclass(frozen=True)
class RegressorConfig:
    input_dim: int
    hidden_layers: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if len(self.hidden_layers) < 1 or any(h < 1 for h in self.hidden_layers):
            raise ConfigError("need at least one hidden layer of positive width")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"activation must be one of {_ACTIVATIONS}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_layers, 7)

    @property
    def n_params(self) -> int:
        dims = self.layer_dims
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


@dataclass
class RegressorState:
    config: RegressorConfig
    theta: np.ndarray
    _views: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.theta.shape != (self.config.n_params,):
            raise ConfigError(
                f"parameter vector has {self.theta.shape}, config wants ({self.config.n_params},)"
            )
        self._views = _layer_views(self.config, self.theta)

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(weight, bias) views into theta, one pair per layer."""
        return self._views

    def copy(self) -> "RegressorState":
        return RegressorState(self.config, self.theta.copy())


def _layer_views(config: RegressorConfig, flat: np.ndarray):
    views = []
    dims = config.layer_dims
    off = 0
    for i in range(len(dims) - 1):
        n_in, n_out = dims[i], dims[i + 1]
        w = flat[off : off + n_in * n_out].reshape(n_in, n_out)
        off += n_in * n_out
        b = flat[off : off + n_out]
        off += n_out
        views.append((w, b))
    return views


def init(config: RegressorConfig, position_bias=None) -> RegressorState:
    """Seeded initialization: weights ~ N(0, 1/fan_in), biases zero.

    position_bias optionally presets the first 3 entries of the head bias
    (the training-set mean position; zero once the frame is centered).
    """
    rng = np.random.default_rng(config.seed)
    theta = np.zeros(config.n_params)
    state = RegressorState(config, theta)
    for w, _ in state.layers:
        n_in = w.shape[0]
        w[:] = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=w.shape)
    if position_bias is not None:
        position_bias = np.asarray(position_bias, dtype=float)
        if position_bias.shape != (3,):
            raise ConfigError("position_bias must be a 3-vector")
        state.layers[-1][1][:3] = position_bias
    return state


@dataclass
class Tape:
    """Intermediates recorded by forward for the backward pass.

    Must be consumed by ``backward`` on the same (unmodified) state it was
    produced from.
    """

    state: RegressorState
    activations: list
    squeezed: bool


@dataclass
class ForwardResult:
    position: np.ndarray
    quat_raw: np.ndarray
    quat_unit: np.ndarray
    tape: Tape


def _as_batch(obs, input_dim: int):
    obs = np.asarray(obs, dtype=float)
    squeezed = obs.ndim == 1
    if squeezed:
        obs = obs[None, :]
    if obs.ndim != 2 or obs.shape[1] != input_dim:
        raise ValueError(f"observation shape {obs.shape} incompatible with input_dim {input_dim}")
    return obs, squeezed


def forward(state: RegressorState, observation) -> ForwardResult:
    """Run the regressor; accepts one observation vector or a batch.

    Raises ``NumericsError`` when the raw quaternion head collapses below
    norm 1e-9 (normalization would be unstable).
    """
    obs, squeezed = _as_batch(observation, state.config.input_dim)
    act = np.tanh if state.config.activation == "tanh" else lambda z: np.maximum(z, 0.0)
    h = obs
    activations = [obs]
    layers = state.layers
    for w, b in layers[:-1]:
        h = act(h @ w + b)
        activations.append(h)
    w, b = layers[-1]
    out = h @ w + b
    position = out[:, :3]
    quat_raw = out[:, 3:]
    with np.errstate(over="ignore", invalid="ignore"):
        norms = np.linalg.norm(quat_raw, axis=1)
    if not np.all(np.isfinite(norms)) or np.any(norms < DEGENERATE_HEAD_TOL):
        raise NumericsError("degenerate quaternion head output (norm < 1e-9 or non-finite)")
    quat_unit = quat_raw / norms[:, None]
    tape = Tape(state, activations, squeezed)
    if squeezed:
        return ForwardResult(position[0], quat_raw[0], quat_unit[0], tape)
    return ForwardResult(position, quat_raw, quat_unit, tape)


def backward(state: RegressorState, tape: Tape, grad_position, grad_quat_raw) -> np.ndarray:
    """Exact reverse-mode gradient of every parameter, as one flat vector.

    Upstream gradients are w.r.t. the position and the *raw* quaternion
    head output (the loss handles the normalization Jacobian).  Batched
    upstream gradients are summed over the batch; any averaging factor
    belongs to the caller.
    """
    if tape.state is not state:
        raise ValueError("tape does not belong to this regressor state")
    grad_position = np.asarray(grad_position, dtype=float)
    grad_quat_raw = np.asarray(grad_quat_raw, dtype=float)
    if tape.squeezed:
        grad_position = grad_position[None, :]
        grad_quat_raw = grad_quat_raw[None, :]
    b_n = tape.activations[0].shape[0]
    if grad_position.shape != (b_n, 3) or grad_quat_raw.shape != (b_n, 4):
        raise ValueError("upstream gradient shapes do not match the forward batch")

    grads = np.zeros_like(state.theta)
    grad_views = _layer_views(state.config, grads)
    layers = state.layers
    g = np.concatenate([grad_position, grad_quat_raw], axis=1)
    # Last layer is linear; hidden layers apply the activation derivative.
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = grad_views[i]
        h_in = tape.activations[i]
        gw += h_in.T @ g
        gb += g.sum(axis=0)
        if i > 0:
            g = g @ w.T
            h = tape.activations[i]
            if state.config.activation == "tanh":
                g = g * (1.0 - h * h)
            else:
                g = g * (h > 0.0)
    return grads


def save_checkpoint(state: RegressorState, path) -> None:
    """Versioned binary container; load() round-trips bit-identically."""
    np.savez(
        path,
        version=np.int64(CHECKPOINT_VERSION),
        input_dim=np.int64(state.config.input_dim),
        hidden_layers=np.asarray(state.config.hidden_layers, dtype=np.int64),
        activation=np.asarray(state.config.activation),
        seed=np.int64(state.config.seed),
        theta=state.theta,
    )


def load_checkpoint(path) -> RegressorState:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["version"])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        config = RegressorConfig(
            input_dim=int(z["input_dim"]),
            hidden_layers=tuple(int(h) for h in z["hidden_layers"]),
            activation=str(z["activation"]),
            seed=int(z["seed"]),
        )
        theta = np.array(z["theta"], dtype=float)
    return RegressorState(config, theta)
