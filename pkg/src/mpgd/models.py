"""Desk-scale regressors: a fully connected MLP and a fully convolutional net."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ConfigError, FormatError, ShapeError
from .tensor import load_tensor, save_tensor

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description.

    For ``mlp`` the ``widths`` list is ``[in, hidden..., out]``; for ``fcn`` it
    lists channel counts ``[c_in, hidden..., c_out]`` and ``kernel`` is the
    (odd) square kernel size.  ``activation`` is applied after hidden layers,
    ``output_activation`` after the last one.  ``bias=False`` drops the
    per-layer bias vectors.
    """

    kind: str
    widths: Tuple[int, ...]
    kernel: int = 3
    activation: str = "relu"
    output_activation: str = "identity"
    seed: int = 0
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.kind not in ("mlp", "fcn"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if len(self.widths) < 2:
            raise ConfigError("need at least one layer (two widths)")
        if min(self.widths) <= 0:
            raise ConfigError(f"zero-width layer in {self.widths}")
        if self.kind == "fcn" and (self.kernel < 1 or self.kernel % 2 == 0):
            raise ConfigError(f"fcn kernel size must be odd, got {self.kernel}")
        for act in (self.activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def to_json(self) -> str:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class Model:
    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray]):
        self.config = config
        self.params = params
        expected = param_shapes(config)
        if list(params) != list(expected):
            raise ShapeError(f"parameter names {list(params)} != {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: shape {params[name].shape} != {shape}")

    def param_nodes(self, requires_grad: bool = True) -> Dict[str, Node]:
        return {n: ad.leaf(p, requires_grad=requires_grad, name=n) for n, p in self.params.items()}

    def forward(self, x, nodes: Optional[Dict[str, Node]] = None) -> Node:
        """Evaluate on one instance or a leading-axis batch.

        Pass ``nodes`` from :meth:`param_nodes` to differentiate w.r.t. the
        parameters; otherwise the parameters enter as constants.
        """
        if nodes is None:
            nodes = self.param_nodes(requires_grad=False)
        h = x if isinstance(x, Node) else ad.const(x)
        cfg = self.config
        if cfg.kind == "mlp":
            return self._forward_mlp(h, nodes)
        return self._forward_fcn(h, nodes)

    def _act(self, h: Node, layer: int) -> Node:
        last = layer == self.config.n_layers - 1
        act = self.config.output_activation if last else self.config.activation
        return ad.relu(h) if act == "relu" else h

    def _forward_mlp(self, h: Node, nodes) -> Node:
        single = h.value.ndim == 1
        if h.value.ndim not in (1, 2) or h.shape[-1] != self.config.widths[0]:
            raise ShapeError(f"mlp expects (..., {self.config.widths[0]}) input, got {h.shape}")
        if single:
            h = ad.reshape(h, (1, h.shape[0]))
        for i in range(self.config.n_layers):
            h = ad.matmul(h, ad.transpose(nodes[f"W{i + 1}"]))
            if self.config.bias:
                h = ad.add_bias(h, nodes[f"b{i + 1}"], axis=-1)
            h = self._act(h, i)
        return ad.reshape(h, (h.shape[1],)) if single else h

    def _forward_fcn(self, h: Node, nodes) -> Node:
        if h.value.ndim not in (3, 4) or h.shape[-3] != self.config.widths[0]:
            raise ShapeError(f"fcn expects {self.config.widths[0]} input channels, got {h.shape}")
        axis = h.value.ndim - 3
        for i in range(self.config.n_layers):
            h = ad.conv2d(h, nodes[f"K{i + 1}"])
            if self.config.bias:
                h = ad.add_bias(h, nodes[f"b{i + 1}"], axis=axis)
            h = self._act(h, i)
        return h

    def predict(self, x) -> np.ndarray:
        return self.forward(x).value

    def copy(self) -> "Model":
        return Model(self.config, {n: p.copy() for n, p in self.params.items()})

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {"config": json.loads(self.config.to_json()), "params": list(self.params)}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        for name, p in self.params.items():
            save_tensor(d / f"{name}.mpgt", p)

    @classmethod
    def load(cls, directory) -> "Model":
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"{d}: unreadable checkpoint manifest ({exc})") from exc
        config = ModelConfig.from_json(json.dumps(manifest["config"]))
        params = {name: load_tensor(d / f"{name}.mpgt") for name in manifest["params"]}
        return cls(config, params)


def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    w = config.widths
    for i in range(config.n_layers):
        if config.kind == "mlp":
            shapes[f"W{i + 1}"] = (w[i + 1], w[i])
        else:
            shapes[f"K{i + 1}"] = (w[i + 1], w[i], config.kernel, config.kernel)
        if config.bias:
            shapes[f"b{i + 1}"] = (w[i + 1],)
    return shapes


def init_model(config: ModelConfig) -> Model:
    """Uniform(-s, s) weights with s = sqrt(1/fan_in); zero biases."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            s = np.sqrt(1.0 / fan_in)
            params[name] = rng.uniform(-s, s, size=shape)
    return Model(config, params)
