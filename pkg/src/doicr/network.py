"""Fully connected trunk with a two-output head.

``head_mode="m_s"`` emits a point estimate ``m`` and a log-scale ``s`` with
``sigma = exp(clip(s, -15, 15))``.  ``head_mode="lower_upper"`` emits two raw
interval bounds for QD-soft; their ordering is not enforced.  ``"single"`` is
a one-output regressor used by the two-stage baseline.

The head is independent of the trunk; swapping the dense trunk for a
convolutional feature extractor would not change anything downstream.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from doicr import autodiff as ad
from doicr.errors import ContractError

HEAD_MODES = ("m_s", "lower_upper", "single")
S_CLAMP = 15.0
S_HEAD_INIT_SCALE = 0.1
BOUND_INIT = 3.0
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    hidden_layers: tuple[int, ...] = (20, 20)
    head_mode: str = "m_s"
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1:
            raise ContractError("input_dim must be positive")
        if any(w < 1 for w in self.hidden_layers):
            raise ContractError("hidden layer widths must be positive")
        if self.head_mode not in HEAD_MODES:
            raise ContractError(f"unknown head_mode {self.head_mode!r}")
        if self.activation != "relu":
            raise ContractError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "hidden_layers", tuple(int(w) for w in self.hidden_layers))

    @property
    def n_outputs(self) -> int:
        return 1 if self.head_mode == "single" else 2

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_layers, self.n_outputs]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_layers": list(self.hidden_layers),
            "head_mode": self.head_mode,
            "activation": self.activation,
        }


@dataclass
class ModelParams:
    """Weights ``W{i}`` (fan_in x fan_out) and biases ``b{i}`` (1 x fan_out).

    The trunk and both heads share these parameters.
    """

    config: NetConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        sizes = self.config.layer_sizes
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w, b = self.arrays.get(f"W{i}"), self.arrays.get(f"b{i}")
            if w is None or b is None:
                raise ContractError(f"missing parameters for layer {i}")
            if w.shape != (fan_in, fan_out) or b.shape != (1, fan_out):
                raise ContractError(f"layer {i} has shapes {w.shape}, {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ContractError(f"non-finite parameters in layer {i}")

    @property
    def n_layers(self) -> int:
        return len(self.config.layer_sizes) - 1

    def names(self) -> list[str]:
        out = []
        for i in range(self.n_layers):
            out += [f"W{i}", f"b{i}"]
        return out

    def count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in self.names()])

    def unflatten(self, flat) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64).ravel()
        if flat.size != self.count():
            raise ContractError(f"expected {self.count()} values, got {flat.size}")
        arrays, pos = {}, 0
        for k in self.names():
            shape = self.arrays[k].shape
            n = int(np.prod(shape))
            arrays[k] = flat[pos : pos + n].reshape(shape).copy()
            pos += n
        return ModelParams(self.config, arrays)


def init_params(config: NetConfig, seed: int) -> ModelParams:
    """He-uniform weights and a damped ``s`` column.

    Biases start at 0 except the lower/upper head, whose output biases start
    at -3 and +3 (targets are standardized).
    """
    rng = np.random.default_rng(seed)
    sizes = config.layer_sizes
    arrays = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / fan_in)
        arrays[f"W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        arrays[f"b{i}"] = np.zeros((1, fan_out))
    last = len(sizes) - 2
    if config.head_mode == "m_s":
        arrays[f"W{last}"][:, 1] *= S_HEAD_INIT_SCALE
    elif config.head_mode == "lower_upper":
        # start from wide, correctly ordered bounds; crossed bounds stall soft coverage
        arrays[f"b{last}"][0] = (-BOUND_INIT, BOUND_INIT)
    return ModelParams(config, arrays)


def zero_params(config: NetConfig) -> ModelParams:
    sizes = config.layer_sizes
    arrays = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        arrays[f"W{i}"] = np.zeros((fan_in, fan_out))
        arrays[f"b{i}"] = np.zeros((1, fan_out))
    return ModelParams(config, arrays)


@dataclass
class HeadOutputs:
    """Per-example network outputs on a tape, each an ``n x 1`` Value.

    In ``m_s`` mode ``first``/``second`` are ``m`` and ``s`` and ``sigma`` is
    ``exp`` of the clamped ``s``.  In ``lower_upper`` mode they are the bounds
    and ``sigma`` is ``None``.
    """

    head_mode: str
    first: ad.Value
    second: ad.Value | None
    sigma: ad.Value | None = None

    @property
    def m(self) -> ad.Value:
        if self.head_mode == "lower_upper":
            raise ContractError("lower_upper head has no point estimate")
        return self.first

    @property
    def s(self) -> ad.Value:
        if self.head_mode != "m_s":
            raise ContractError(f"{self.head_mode} head has no log-scale output")
        return self.second

    @property
    def lower(self) -> ad.Value:
        if self.head_mode != "lower_upper":
            raise ContractError("only the lower_upper head has bounds")
        return self.first

    @property
    def upper(self) -> ad.Value:
        if self.head_mode != "lower_upper":
            raise ContractError("only the lower_upper head has bounds")
        return self.second

    def __len__(self) -> int:
        return self.first.shape[0]


def bind(tape: ad.Tape, params: ModelParams) -> dict[str, ad.Value]:
    """Register every parameter array as a leaf on ``tape``."""
    return {k: tape.param(params.arrays[k], name=k) for k in params.names()}


def bind_flat(flat: ad.Value, params: ModelParams) -> dict[str, ad.Value]:
    """Leaves for :func:`mlp_forward` cut from one column vector.

    ``flat`` follows :meth:`ModelParams.flatten` ordering; used to
    differentiate with respect to all parameters as a single vector.
    """
    if flat.shape != (params.count(), 1):
        raise ContractError(f"expected a {params.count()} x 1 column, got {flat.shape}")
    leaves, pos = {}, 0
    for k in params.names():
        shape = params.arrays[k].shape
        n = shape[0] * shape[1]
        leaves[k] = ad.reshape(ad.rows(flat, pos, pos + n), shape)
        pos += n
    return leaves


def mlp_forward(
    params: ModelParams,
    X,
    tape: ad.Tape | None = None,
    leaves: dict[str, ad.Value] | None = None,
) -> HeadOutputs:
    """Forward a batch through the network.

    Pass ``leaves`` from :func:`bind` to differentiate with respect to the
    parameters; otherwise the parameters enter the tape as constants.
    """
    config = params.config
    if tape is None:
        tape = next(iter(leaves.values())).tape if leaves else ad.Tape()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != config.input_dim:
        raise ContractError(f"expected {config.input_dim} feature columns, got shape {X.shape}")
    if leaves is None:
        leaves = {k: tape.const(params.arrays[k]) for k in params.names()}
    ones = tape.const(np.ones((X.shape[0], 1)))
    h = tape.const(X)
    last = params.n_layers - 1
    for i in range(params.n_layers):
        h = h @ leaves[f"W{i}"] + ones @ leaves[f"b{i}"]
        if i < last:
            h = ad.relu(h)
    if config.head_mode == "single":
        return HeadOutputs("single", h, None)
    first = h @ tape.const(np.array([[1.0], [0.0]]))
    second = h @ tape.const(np.array([[0.0], [1.0]]))
    if config.head_mode == "lower_upper":
        return HeadOutputs("lower_upper", first, second)
    sigma = ad.exp(ad.clip(second, -S_CLAMP, S_CLAMP))
    return HeadOutputs("m_s", first, second, sigma)


def predict(params: ModelParams, X) -> dict[str, np.ndarray]:
    """Tape-free convenience returning flat numpy outputs."""
    out = mlp_forward(params, X)
    if out.head_mode == "single":
        return {"m": out.first.data.ravel()}
    if out.head_mode == "lower_upper":
        return {"lower": out.first.data.ravel(), "upper": out.second.data.ravel()}
    return {"m": out.first.data.ravel(), "s": out.second.data.ravel(), "sigma": out.sigma.data.ravel()}


# ---------------------------------------------------------------------------
# checkpoints
#
# Text format, version 1:
#   line 1: "# doicr-checkpoint v1"
#   line 2: JSON object {"config": NetConfig, "layers": [[name, rows, cols], ...]}
#   then one line per array, row-major values written with repr() so they
#   round-trip exactly.


def save_checkpoint(params: ModelParams, path) -> None:
    buf = io.StringIO()
    buf.write(f"# doicr-checkpoint v{CHECKPOINT_VERSION}\n")
    layers = [[k, *params.arrays[k].shape] for k in params.names()]
    buf.write(json.dumps({"config": params.config.to_dict(), "layers": layers}, sort_keys=True))
    buf.write("\n")
    for k in params.names():
        buf.write(" ".join(repr(float(v)) for v in params.arrays[k].ravel()))
        buf.write("\n")
    Path(path).write_text(buf.getvalue())


def load_checkpoint(path) -> ModelParams:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != f"# doicr-checkpoint v{CHECKPOINT_VERSION}":
        raise ContractError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    header = json.loads(lines[1])
    cfg = header["config"]
    config = NetConfig(
        input_dim=cfg["input_dim"],
        hidden_layers=tuple(cfg["hidden_layers"]),
        head_mode=cfg["head_mode"],
        activation=cfg["activation"],
    )
    arrays = {}
    for (name, rows, cols), line in zip(header["layers"], lines[2:]):
        values = np.array([float(v) for v in line.split()], dtype=np.float64)
        arrays[name] = values.reshape(rows, cols)
    return ModelParams(config, arrays)
