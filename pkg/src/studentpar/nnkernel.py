"""Minimal dense neural-network kernel.

Float64 throughout, deterministic given identical parameter and input
bytes. Expresses exactly two architectures: a deep residual teacher and a
shallow student whose mid-layer representation is tapped for distillation.
Parameters live in plain numpy arrays; gradients are exact reverse-mode.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np

TANH = "tanh"
IDENTITY = "identity"

_ACTIVATIONS = (TANH, IDENTITY)


def _glorot_uniform(out_dim: int, in_dim: int, rng: np.random.Generator) -> np.ndarray:
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


class DenseLayer:
    """Affine map plus elementwise activation: act(W x + b).

    ``forward`` caches input and pre-activation so ``backward`` can run any
    number of times against the same forward pass (gradients accumulate on
    the caller's side).
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray, activation: str = TANH):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2:
            raise ValueError(f"weight must be 2-D, got shape {weight.shape}")
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"bias shape {bias.shape} does not match weight rows {weight.shape[0]}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if not (np.isfinite(weight).all() and np.isfinite(bias).all()):
            raise ValueError("layer parameters must be finite")
        self.weight = weight
        self.bias = bias
        self.activation = activation
        self._x: np.ndarray | None = None
        self._z: np.ndarray | None = None

    @classmethod
    def init(cls, out_dim: int, in_dim: int, activation: str, rng: np.random.Generator) -> "DenseLayer":
        return cls(_glorot_uniform(out_dim, in_dim, rng), np.zeros(out_dim), activation)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"input width {x.shape} does not match layer in_dim {self.in_dim}")
        z = x @ self.weight.T + self.bias
        self._x, self._z = x, z
        out = np.tanh(z) if self.activation == TANH else z
        return out[0] if squeeze else out

    def backward(self, d_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (d_input, d_weight, d_bias) for upstream gradient d_out."""
        if self._x is None:
            raise RuntimeError("backward called before forward")
        d_out = np.asarray(d_out, dtype=np.float64)
        if d_out.ndim == 1:
            d_out = d_out[None, :]
        if self.activation == TANH:
            dz = d_out * (1.0 - np.tanh(self._z) ** 2)
        else:
            dz = d_out
        dw = dz.T @ self._x
        db = dz.sum(axis=0)
        dx = dz @ self.weight
        return dx, dw, db

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy(), self.activation)


class TapeGradients:
    """Per-parameter gradient arrays, shape-congruent with a model.

    Additive: ``add`` accumulates another tape or a name->array dict, which
    is what multi-loss training loops need.
    """

    def __init__(self, grads: dict[str, np.ndarray]):
        self.grads = grads

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "TapeGradients":
        return cls({name: np.zeros_like(arr) for name, arr in params.items()})

    def add(self, other: "TapeGradients | dict[str, np.ndarray]") -> "TapeGradients":
        items = other.grads if isinstance(other, TapeGradients) else other
        for name, arr in items.items():
            if name not in self.grads:
                raise ValueError(f"unknown parameter {name!r} in gradient tape")
            if self.grads[name].shape != arr.shape:
                raise ValueError(f"gradient shape mismatch for {name!r}")
            self.grads[name] += arr
        return self

    def scaled(self, factor: float) -> "TapeGradients":
        return TapeGradients({name: arr * factor for name, arr in self.grads.items()})

    def zero_(self) -> None:
        for arr in self.grads.values():
            arr[...] = 0.0

    def all_finite(self) -> bool:
        return all(np.isfinite(arr).all() for arr in self.grads.values())

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]


class _ResidualBlock:
    """One teacher block: h -> h + project(expand(h))."""

    def __init__(self, expand: DenseLayer, project: DenseLayer):
        self.expand = expand
        self.project = project

    def forward(self, h: np.ndarray) -> np.ndarray:
        return h + self.project.forward(self.expand.forward(h))

    def copy(self) -> "_ResidualBlock":
        return _ResidualBlock(self.expand.copy(), self.project.copy())


class TeacherModel:
    """Deep residual dense network with a classification head.

    The chain h_i = h_{i-1} + F_i(h_{i-1}) accumulates refinements on top of
    the projected input; the final representation is the stream after the
    last block, and the head maps it to class logits.
    """

    def __init__(self, input_proj: DenseLayer, blocks: list[_ResidualBlock], head: DenseLayer):
        self.input_proj = input_proj
        self.blocks = blocks
        self.head = head
        self._block_acts: list[np.ndarray] | None = None

    @classmethod
    def build(
        cls,
        d_in: int,
        rep_dim: int,
        hidden_dim: int,
        depth: int,
        n_classes: int,
        rng: np.random.Generator,
    ) -> "TeacherModel":
        input_proj = DenseLayer.init(rep_dim, d_in, TANH, rng)
        blocks = [
            _ResidualBlock(
                DenseLayer.init(hidden_dim, rep_dim, TANH, rng),
                DenseLayer.init(rep_dim, hidden_dim, IDENTITY, rng),
            )
            for _ in range(depth)
        ]
        head = DenseLayer.init(n_classes, rep_dim, IDENTITY, rng)
        return cls(input_proj, blocks, head)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def rep_dim(self) -> int:
        return self.input_proj.out_dim

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (final_rep, logits); caches block activations for backward."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = self.input_proj.forward(x[None, :] if squeeze else x)
        acts = []
        for block in self.blocks:
            h = block.forward(h)
            acts.append(h)
        self._block_acts = acts
        logits = self.head.forward(h)
        if squeeze:
            return h[0], logits[0]
        return h, logits

    def backward(self, d_final_rep: np.ndarray | None, d_logits: np.ndarray | None = None) -> TapeGradients:
        if self._block_acts is None:
            raise RuntimeError("backward called before forward")
        grads: dict[str, np.ndarray] = {}
        rep = self._block_acts[-1] if self.blocks else None
        if d_final_rep is None:
            g = None
        else:
            g = np.atleast_2d(np.asarray(d_final_rep, dtype=np.float64)).copy()
        if d_logits is not None:
            d_rep_head, dw, db = self.head.backward(d_logits)
            grads["head.weight"] = dw
            grads["head.bias"] = db
            g = d_rep_head if g is None else g + d_rep_head
        else:
            grads["head.weight"] = np.zeros_like(self.head.weight)
            grads["head.bias"] = np.zeros_like(self.head.bias)
        if g is None:
            g = np.zeros_like(rep) if rep is not None else np.zeros((1, self.rep_dim))
        for i in reversed(range(len(self.blocks))):
            block = self.blocks[i]
            d_f, dw_p, db_p = block.project.backward(g)
            d_h, dw_e, db_e = block.expand.backward(d_f)
            grads[f"blocks.{i}.project.weight"] = dw_p
            grads[f"blocks.{i}.project.bias"] = db_p
            grads[f"blocks.{i}.expand.weight"] = dw_e
            grads[f"blocks.{i}.expand.bias"] = db_e
            g = g + d_h  # residual path
        _, dw, db = self.input_proj.backward(g)
        grads["input_proj.weight"] = dw
        grads["input_proj.bias"] = db
        return TapeGradients(grads)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"input_proj.weight": self.input_proj.weight, "input_proj.bias": self.input_proj.bias}
        for i, block in enumerate(self.blocks):
            params[f"blocks.{i}.expand.weight"] = block.expand.weight
            params[f"blocks.{i}.expand.bias"] = block.expand.bias
            params[f"blocks.{i}.project.weight"] = block.project.weight
            params[f"blocks.{i}.project.bias"] = block.project.bias
        params["head.weight"] = self.head.weight
        params["head.bias"] = self.head.bias
        return params

    def copy(self) -> "TeacherModel":
        return TeacherModel(self.input_proj.copy(), [b.copy() for b in self.blocks], self.head.copy())


class StudentModel:
    """Shallow dense network with a tapped mid-layer representation.

    ``depth`` layers of width rep_dim follow the input projection. The
    representation after layer ceil(depth/2) is exposed alongside the final
    one; both share the teacher's representation width.
    """

    def __init__(self, input_proj: DenseLayer, layers: list[DenseLayer]):
        if len(layers) < 2:
            raise ValueError("student needs at least 2 layers")
        self.input_proj = input_proj
        self.layers = layers

    @classmethod
    def build(cls, d_in: int, rep_dim: int, depth: int, rng: np.random.Generator) -> "StudentModel":
        input_proj = DenseLayer.init(rep_dim, d_in, TANH, rng)
        layers = [DenseLayer.init(rep_dim, rep_dim, TANH, rng) for _ in range(depth)]
        return cls(input_proj, layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def mid_index(self) -> int:
        """1-based index of the tapped layer: ceil(depth / 2)."""
        return (self.depth + 1) // 2

    @property
    def rep_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (final_rep, mid_rep)."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = self.input_proj.forward(x[None, :] if squeeze else x)
        mid = None
        for i, layer in enumerate(self.layers, start=1):
            h = layer.forward(h)
            if i == self.mid_index:
                mid = h
        if squeeze:
            return h[0], mid[0]
        return h, mid

    def backward(self, d_final_rep: np.ndarray | None, d_mid_rep: np.ndarray | None = None) -> TapeGradients:
        if self.layers[-1]._x is None:
            raise RuntimeError("backward called before forward")
        grads: dict[str, np.ndarray] = {}
        if d_final_rep is None:
            g = np.zeros((self.layers[-1]._x.shape[0], self.rep_dim))
        else:
            g = np.atleast_2d(np.asarray(d_final_rep, dtype=np.float64)).copy()
        for i in reversed(range(1, self.depth + 1)):
            if i == self.mid_index and d_mid_rep is not None:
                g = g + np.atleast_2d(np.asarray(d_mid_rep, dtype=np.float64))
            layer = self.layers[i - 1]
            g, dw, db = layer.backward(g)
            grads[f"layers.{i - 1}.weight"] = dw
            grads[f"layers.{i - 1}.bias"] = db
        _, dw, db = self.input_proj.backward(g)
        grads["input_proj.weight"] = dw
        grads["input_proj.bias"] = db
        return TapeGradients(grads)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"input_proj.weight": self.input_proj.weight, "input_proj.bias": self.input_proj.bias}
        for i, layer in enumerate(self.layers):
            params[f"layers.{i}.weight"] = layer.weight
            params[f"layers.{i}.bias"] = layer.bias
        return params

    def copy(self) -> "StudentModel":
        return StudentModel(self.input_proj.copy(), [l.copy() for l in self.layers])


# -- spec operation surface ------------------------------------------------


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def teacher_forward(t: TeacherModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    final_rep, logits = t.forward(x)
    return final_rep, logits, list(t._block_acts or [])


def student_forward(s: StudentModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return s.forward(x)


def backward(model, *output_grads) -> TapeGradients:
    return model.backward(*output_grads)


SGD = "sgd"
ADAM = "adam"


@dataclass
class Optimizer:
    """SGD or Adam over a model's parameter dict.

    ``step`` validates the tape (rejecting non-finite gradients before any
    parameter is touched), applies the update in place, then clears the
    tape.
    """

    kind: str = ADAM
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _m: dict = field(default_factory=dict, repr=False)
    _v: dict = field(default_factory=dict, repr=False)
    _t: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.kind not in (SGD, ADAM):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def step(self, model, grads: TapeGradients) -> None:
        params = model.parameters() if hasattr(model, "parameters") else model
        for name, arr in params.items():
            g = grads.grads.get(name)
            if g is None:
                raise ValueError(f"missing gradient for parameter {name!r}")
            if g.shape != arr.shape:
                raise ValueError(f"gradient shape mismatch for {name!r}")
            if not np.isfinite(g).all():
                raise ValueError(f"non-finite gradient for {name!r}; parameters left unchanged")
        if self.kind == SGD:
            for name, arr in params.items():
                arr -= self.learning_rate * grads.grads[name]
        else:
            self._t += 1
            b1, b2 = self.beta1, self.beta2
            for name, arr in params.items():
                g = grads.grads[name]
                m = self._m.setdefault(name, np.zeros_like(arr))
                v = self._v.setdefault(name, np.zeros_like(arr))
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                m_hat = m / (1 - b1**self._t)
                v_hat = v / (1 - b2**self._t)
                arr -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        grads.zero_()


def optimizer_step(opt: Optimizer, model, grads: TapeGradients) -> None:
    opt.step(model, grads)


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    passed: bool
    worst_param: str = ""


def finite_diff_check(model, loss_fn, step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn(model)`` must return ``(loss, output_grads)`` where
    ``output_grads`` is the tuple of upstream gradients ``model.backward``
    accepts for that loss. The relative error per coordinate uses the
    denominator max(|analytic|, |numeric|, 1e-6) so near-zero pairs do not
    dominate the report.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    loss0, out_grads = loss_fn(model)
    if not np.isfinite(loss0):
        raise ValueError("loss is not finite")
    analytic = model.backward(*out_grads)
    params = model.parameters()
    worst = 0.0
    worst_name = ""
    for name, arr in params.items():
        a_grad = analytic.grads[name]
        flat = arr.reshape(-1)
        a_flat = a_grad.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            lp, _ = loss_fn(model)
            flat[idx] = orig - step
            lm, _ = loss_fn(model)
            flat[idx] = orig
            numeric = (lp - lm) / (2 * step)
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ValueError("loss is not finite under perturbation")
            denom = max(abs(a_flat[idx]), abs(numeric), 1e-6)
            rel = abs(a_flat[idx] - numeric) / denom
            if rel > worst:
                worst, worst_name = rel, f"{name}[{idx}]"
    # restore a clean cache for the caller
    loss_fn(model)
    return GradCheckReport(max_rel_err=worst, tol=tol, passed=worst <= tol, worst_param=worst_name)


# -- checkpoint file -------------------------------------------------------
#
# One JSON container for both modes. "binary" stores little-endian float64
# bytes base64-encoded (bit-exact round trip); "json" stores decimal lists
# (value-exact because json uses repr, the shortest round-trip form).

_SCHEMA = "dense-model-checkpoint-v1"


def _encode_array(arr: np.ndarray, mode: str):
    if mode == "binary":
        return base64.b64encode(arr.astype("<f8").tobytes()).decode("ascii")
    return arr.tolist()


def _decode_array(data, shape: tuple[int, ...], mode: str) -> np.ndarray:
    if mode == "binary":
        arr = np.frombuffer(base64.b64decode(data), dtype="<f8").astype(np.float64)
    else:
        arr = np.asarray(data, dtype=np.float64)
    arr = arr.reshape(shape)
    if not np.isfinite(arr).all():
        raise ValueError("checkpoint contains non-finite values")
    return arr


def _layer_to_dict(layer: DenseLayer, mode: str) -> dict:
    return {
        "out_dim": layer.out_dim,
        "in_dim": layer.in_dim,
        "activation": layer.activation,
        "weight": _encode_array(layer.weight, mode),
        "bias": _encode_array(layer.bias, mode),
    }


def _layer_from_dict(d: dict, mode: str) -> DenseLayer:
    shape = (d["out_dim"], d["in_dim"])
    weight = _decode_array(d["weight"], shape, mode)
    bias = _decode_array(d["bias"], (d["out_dim"],), mode)
    return DenseLayer(weight, bias, d["activation"])


def model_to_dict(model: TeacherModel | StudentModel, mode: str = "binary") -> dict:
    if mode not in ("binary", "json"):
        raise ValueError(f"unknown checkpoint mode {mode!r}")
    if isinstance(model, TeacherModel):
        return {
            "schema": _SCHEMA,
            "mode": mode,
            "kind": "teacher",
            "input_proj": _layer_to_dict(model.input_proj, mode),
            "blocks": [
                {"expand": _layer_to_dict(b.expand, mode), "project": _layer_to_dict(b.project, mode)}
                for b in model.blocks
            ],
            "head": _layer_to_dict(model.head, mode),
        }
    if isinstance(model, StudentModel):
        return {
            "schema": _SCHEMA,
            "mode": mode,
            "kind": "student",
            "input_proj": _layer_to_dict(model.input_proj, mode),
            "layers": [_layer_to_dict(l, mode) for l in model.layers],
        }
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def model_from_dict(d: dict) -> TeacherModel | StudentModel:
    if d.get("schema") != _SCHEMA:
        raise ValueError(f"not a model checkpoint (schema {d.get('schema')!r})")
    mode = d["mode"]
    if d["kind"] == "teacher":
        blocks = [
            _ResidualBlock(_layer_from_dict(b["expand"], mode), _layer_from_dict(b["project"], mode))
            for b in d["blocks"]
        ]
        return TeacherModel(_layer_from_dict(d["input_proj"], mode), blocks, _layer_from_dict(d["head"], mode))
    if d["kind"] == "student":
        layers = [_layer_from_dict(l, mode) for l in d["layers"]]
        return StudentModel(_layer_from_dict(d["input_proj"], mode), layers)
    raise ValueError(f"unknown checkpoint kind {d['kind']!r}")


def save_model(model, path, mode: str = "binary") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model, mode), fh, indent=1)
        fh.write("\n")


def load_model(path) -> TeacherModel | StudentModel:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
