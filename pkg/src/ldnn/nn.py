"""Feed-forward networks with per-neuron activation specifications.

A hidden neuron's nonlinearity is either a builtin function, a small
trainable sub-network added on top of a base function, or a frozen
piecewise-linear interpolant extracted from a trained sub-network.
Sub-network parameters are shared by every neuron of the same type and
form the outer-loop parameter group, disjoint from the layer weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

BUILTINS = {
    "zero": lambda a: np.zeros_like(np.asarray(a, dtype=np.float64)),
    "identity": lambda a: np.asarray(a, dtype=np.float64).copy(),
    "sigmoid": ad.sigmoid_values,
    "tanh": np.tanh,
    "relu": lambda a: np.maximum(np.asarray(a, dtype=np.float64), 0.0),
    "sine": np.sin,
}

TASKS = ("classification", "regression")


@dataclass(frozen=True)
class ActivationSpec:
    """Description of one neuron nonlinearity.

    kind "builtin": the named fixed function.
    kind "subnet": base(a) plus a trainable tanh-hidden residual network,
    scalar in, scalar out.
    kind "tabulated": linear interpolation on a fixed grid, clamped to the
    endpoint values outside it.
    """

    kind: str
    name: str = ""
    hidden_width: int = 0
    grid: tuple = ()
    values: tuple = ()

    @staticmethod
    def builtin(name: str) -> "ActivationSpec":
        if name not in BUILTINS:
            raise ValueError(f"unknown builtin activation {name!r}")
        return ActivationSpec(kind="builtin", name=name)

    @staticmethod
    def subnet(base: str, hidden_width: int = 50) -> "ActivationSpec":
        if base not in BUILTINS:
            raise ValueError(f"unknown base activation {base!r}")
        if hidden_width < 1:
            raise ValueError("subnet hidden_width must be positive")
        return ActivationSpec(kind="subnet", name=base, hidden_width=int(hidden_width))

    @staticmethod
    def tabulated(grid, values) -> "ActivationSpec":
        grid = tuple(float(g) for g in grid)
        values = tuple(float(v) for v in values)
        if len(grid) < 2 or len(grid) != len(values):
            raise ValueError("tabulated spec needs matching grid/values of length >= 2")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("tabulated grid must be strictly ascending")
        return ActivationSpec(kind="tabulated", grid=grid, values=values)


@dataclass(frozen=True)
class LayerSpec:
    """Hidden layer width plus the per-neuron activation-type assignment."""

    width: int
    assignment: tuple

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("layer width must be positive")
        object.__setattr__(self, "assignment", tuple(int(i) for i in self.assignment))
        if len(self.assignment) != self.width:
            raise ValueError(f"assignment length {len(self.assignment)} != width {self.width}")


def mixed_assignment(width: int, type_indices) -> tuple:
    """Interleave the given activation types over a layer (equal split)."""
    types = [int(t) for t in type_indices]
    if not types:
        raise ValueError("need at least one activation type")
    return tuple(types[i % len(types)] for i in range(width))


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    layers: tuple
    output_dim: int
    activations: tuple
    task: str = "classification"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "activations", tuple(self.activations))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        for layer in self.layers:
            for idx in layer.assignment:
                if not 0 <= idx < len(self.activations):
                    raise ValueError(f"activation index {idx} not declared")


def mlp_config(input_dim, hidden_width, output_dim, activations, types=None,
               task="classification", seed=0) -> NetworkConfig:
    """Single-hidden-layer network with the given types interleaved."""
    activations = tuple(activations)
    if types is None:
        types = range(len(activations))
    layer = LayerSpec(hidden_width, mixed_assignment(hidden_width, types))
    return NetworkConfig(input_dim=input_dim, layers=(layer,), output_dim=output_dim,
                         activations=activations, task=task, seed=seed)


@dataclass
class SubnetParams:
    """Trainable residual for one activation type: w2 . tanh(w1 a + b1) + b2."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2]

    @property
    def hidden_width(self) -> int:
        return self.w1.data.size


@dataclass
class ParamSet:
    """Disjoint parameter partition: layer weights vs activation sub-networks."""

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    subnets: dict = field(default_factory=dict)

    def theta(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def theta_a(self):
        out = []
        for key in sorted(self.subnets):
            out.extend(self.subnets[key].tensors())
        return out

    def all_tensors(self):
        return self.theta() + self.theta_a()


def theta_size(params: ParamSet) -> int:
    return sum(t.data.size for t in params.theta())


def theta_a_size(params: ParamSet) -> int:
    return sum(t.data.size for t in params.theta_a())


def init_network(config: NetworkConfig, seed=None) -> ParamSet:
    """Draw layer weights uniform in +-1/sqrt(fan_in); zero each subnet's
    output layer so every learned activation starts exactly at its base."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dims = [config.input_dim] + [l.width for l in config.layers] + [config.output_dim]
    params = ParamSet()
    for fan_in, width in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        params.weights.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, width)),
                                     requires_grad=True))
        params.biases.append(Tensor(rng.uniform(-bound, bound, size=width),
                                    requires_grad=True))
    subnet_types = sorted({idx for layer in config.layers for idx in layer.assignment
                           if config.activations[idx].kind == "subnet"})
    for t in subnet_types:
        h = config.activations[t].hidden_width
        params.subnets[t] = SubnetParams(
            w1=Tensor(rng.uniform(-1.0, 1.0, size=h), requires_grad=True),
            b1=Tensor(rng.uniform(-1.0, 1.0, size=h), requires_grad=True),
            w2=Tensor(np.zeros(h), requires_grad=True),
            b2=Tensor(np.zeros(()), requires_grad=True),
        )
    return params


# ---------------------------------------------------------------------------
# Forward evaluation.

def _apply_spec(z: Tensor, spec: ActivationSpec, params: ParamSet, type_idx: int) -> Tensor:
    """Apply one activation spec elementwise to a matrix of preactivations."""
    if spec.kind == "builtin":
        return ad.record(spec.name, z)
    if spec.kind == "tabulated":
        return ad.interp(z, np.asarray(spec.grid), np.asarray(spec.values))
    if spec.kind == "subnet":
        sp = params.subnets[type_idx]
        m, k = z.data.shape
        h = sp.hidden_width
        flat = ad.reshape(z, (m * k, 1))
        hid = ad.tanh(ad.add(ad.matmul(flat, ad.reshape(sp.w1, (1, h))), sp.b1))
        res = ad.add(ad.matmul(hid, ad.reshape(sp.w2, (h, 1))), sp.b2)
        tot = ad.add(ad.record(spec.name, flat), res)
        return ad.reshape(tot, (m, k))
    raise ValueError(f"unknown activation kind {spec.kind!r}")


def _apply_layer(z: Tensor, layer: LayerSpec, config: NetworkConfig, params: ParamSet) -> Tensor:
    assignment = np.asarray(layer.assignment)
    types = np.unique(assignment)
    if types.size == 1:
        return _apply_spec(z, config.activations[types[0]], params, int(types[0]))
    parts = []
    for t in types:
        idx = np.flatnonzero(assignment == t)
        cols = ad.take_cols(z, idx)
        acts = _apply_spec(cols, config.activations[t], params, int(t))
        parts.append(ad.put_cols(acts, idx, layer.width))
    acc = parts[0]
    for p in parts[1:]:
        acc = ad.add(acc, p)
    return acc


def forward(params: ParamSet, config: NetworkConfig, batch):
    """Propagate a batch through the network.

    Returns (outputs, hidden_preacts, hidden_acts) where the hidden tensors
    belong to the last hidden layer (the representation feeding the output).
    Outputs are raw logits for classification and identity for regression.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 2 or x.data.shape[1] != config.input_dim:
        raise ShapeError(
            f"forward: batch shape {x.data.shape} does not match input_dim {config.input_dim}"
        )
    a = x
    pre = act = None
    for i, layer in enumerate(config.layers):
        z = ad.add(ad.matmul(a, params.weights[i]), params.biases[i])
        a = _apply_layer(z, layer, config, params)
        pre, act = z, a
    n = len(config.layers)
    out = ad.add(ad.matmul(a, params.weights[n]), params.biases[n])
    return out, pre, act


def eval_activation(spec: ActivationSpec, a, subnet_params: SubnetParams = None):
    """Evaluate one activation spec on plain numbers (no tape).

    Scalar-in/scalar-out semantics broadcast elementwise over arrays.  A
    subnet spec requires its parameter block.
    """
    arr = np.asarray(a, dtype=np.float64)
    if spec.kind == "builtin":
        return BUILTINS[spec.name](arr)
    if spec.kind == "tabulated":
        return np.interp(arr, np.asarray(spec.grid), np.asarray(spec.values))
    if spec.kind == "subnet":
        if subnet_params is None:
            raise ValueError("subnet activation needs its parameter block")
        flat = arr.reshape(-1)
        hid = np.tanh(np.outer(flat, subnet_params.w1.data) + subnet_params.b1.data)
        res = hid @ subnet_params.w2.data + float(subnet_params.b2.data)
        return BUILTINS[spec.name](arr) + res.reshape(arr.shape)
    raise ValueError(f"unknown activation kind {spec.kind!r}")


def extract_tabulated(spec: ActivationSpec, subnet_params: SubnetParams = None,
                      lo: float = -6.0, hi: float = 6.0, n_points: int = 601) -> ActivationSpec:
    """Sample an activation on a uniform grid and freeze it as an interpolant."""
    if not lo < hi:
        raise ValueError(f"invalid range [{lo}, {hi}]")
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    grid = np.linspace(lo, hi, int(n_points))
    values = eval_activation(spec, grid, subnet_params)
    return ActivationSpec.tabulated(grid, values)


def hidden_activity_matrix(params: ParamSet, config: NetworkConfig, inputs) -> np.ndarray:
    """Post-activation activity of each hidden neuron on each input, shape (N, M)."""
    if hasattr(inputs, "inputs"):
        inputs = inputs.inputs
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[0] == 0:
        raise ValueError("empty input set")
    if not config.layers:
        raise ValueError("network has no hidden layer")
    with ad.no_grad():
        _, _, act = forward(params, config, inputs)
    return act.data.T.copy()


# ---------------------------------------------------------------------------
# Serialization: tabulated-activation JSON, config dicts, parameter snapshots.

def save_activation_json(spec: ActivationSpec, path, provenance: dict = None) -> None:
    if spec.kind != "tabulated":
        raise ValueError("only tabulated activations are exported")
    obj = {
        "kind": "tabulated",
        "grid": [float(g) for g in spec.grid],
        "values": [float(v) for v in spec.values],
        "extrapolation": "clamp",
        "provenance": provenance or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_activation_json(path) -> ActivationSpec:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("kind") != "tabulated":
        raise ValueError(f"{path}: not a tabulated activation file")
    if obj.get("extrapolation", "clamp") != "clamp":
        raise ValueError(f"{path}: unsupported extrapolation rule {obj['extrapolation']!r}")
    return ActivationSpec.tabulated(obj["grid"], obj["values"])


def spec_to_dict(spec: ActivationSpec) -> dict:
    if spec.kind == "builtin":
        return {"kind": "builtin", "name": spec.name}
    if spec.kind == "subnet":
        return {"kind": "subnet", "base": spec.name, "hidden_width": spec.hidden_width}
    return {"kind": "tabulated", "grid": list(spec.grid), "values": list(spec.values)}


def spec_from_dict(obj: dict) -> ActivationSpec:
    kind = obj.get("kind")
    if kind == "builtin":
        return ActivationSpec.builtin(obj["name"])
    if kind == "subnet":
        return ActivationSpec.subnet(obj["base"], obj.get("hidden_width", 50))
    if kind == "tabulated":
        return ActivationSpec.tabulated(obj["grid"], obj["values"])
    raise ValueError(f"unknown activation kind {kind!r}")


def config_to_dict(config: NetworkConfig) -> dict:
    return {
        "input_dim": config.input_dim,
        "output_dim": config.output_dim,
        "task": config.task,
        "seed": config.seed,
        "layers": [{"width": l.width, "assignment": list(l.assignment)} for l in config.layers],
        "activations": [spec_to_dict(s) for s in config.activations],
    }


def config_from_dict(obj: dict) -> NetworkConfig:
    return NetworkConfig(
        input_dim=int(obj["input_dim"]),
        layers=tuple(LayerSpec(int(l["width"]), tuple(l["assignment"])) for l in obj["layers"]),
        output_dim=int(obj["output_dim"]),
        activations=tuple(spec_from_dict(s) for s in obj["activations"]),
        task=obj.get("task", "classification"),
        seed=int(obj.get("seed", 0)),
    )


def save_params(params: ParamSet, config: NetworkConfig, path) -> None:
    """Write a self-describing JSON snapshot; floats round-trip exactly."""
    obj = {
        "format": "ldnn-params-v1",
        "config": config_to_dict(config),
        "weights": [{"shape": list(w.data.shape), "data": w.data.ravel().tolist()}
                    for w in params.weights],
        "biases": [{"shape": list(b.data.shape), "data": b.data.ravel().tolist()}
                   for b in params.biases],
        "subnets": {
            str(t): {
                "w1": sp.w1.data.tolist(),
                "b1": sp.b1.data.tolist(),
                "w2": sp.w2.data.tolist(),
                "b2": float(sp.b2.data),
            }
            for t, sp in sorted(params.subnets.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")


def load_params(path):
    """Read a snapshot back; returns (ParamSet, NetworkConfig)."""
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("format") != "ldnn-params-v1":
        raise ValueError(f"{path}: not a parameter snapshot")
    config = config_from_dict(obj["config"])
    params = ParamSet()
    for entry in obj["weights"]:
        params.weights.append(Tensor(np.asarray(entry["data"]).reshape(entry["shape"]),
                                     requires_grad=True))
    for entry in obj["biases"]:
        params.biases.append(Tensor(np.asarray(entry["data"]).reshape(entry["shape"]),
                                    requires_grad=True))
    for key, sp in obj["subnets"].items():
        params.subnets[int(key)] = SubnetParams(
            w1=Tensor(sp["w1"], requires_grad=True),
            b1=Tensor(sp["b1"], requires_grad=True),
            w2=Tensor(sp["w2"], requires_grad=True),
            b2=Tensor(np.asarray(sp["b2"]), requires_grad=True),
        )
    return params, config
