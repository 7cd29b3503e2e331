"""Grouped MLP backbone, cosine classification head, and layer freezing.

The backbone is ``G`` groups of ``affine -> relu`` layers. Groups play the
role of the residual stages of a ResNet: adaptability is controlled by how
many trailing groups are left learnable.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, DimensionError, FormatError
from .numcore import DTYPE, Param, affine_backward, affine_forward, as_tensor, relu, relu_backward

NORM_EPS = 1e-12


@dataclass(frozen=True)
class BackboneConfig:
    input_dim: int = 128
    group_dims: tuple[int, ...] = (64, 64, 64, 64, 64)
    layers_per_group: int = 1

    def __post_init__(self):
        object.__setattr__(self, "group_dims", tuple(int(d) for d in self.group_dims))
        if self.input_dim < 1 or self.layers_per_group < 1:
            raise ValueError("input_dim and layers_per_group must be positive")
        if len(self.group_dims) < 1 or min(self.group_dims) < 1:
            raise ValueError(f"need at least one group with positive width, got {self.group_dims}")

    @property
    def n_groups(self) -> int:
        return len(self.group_dims)

    @property
    def feature_dim(self) -> int:
        return self.group_dims[-1]


@dataclass
class Layer:
    weight: Param
    bias: Param

    @property
    def params(self):
        return [self.weight, self.bias]


@dataclass
class BackboneModel:
    config: BackboneConfig
    groups: list[list[Layer]]
    group_frozen: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if not self.group_frozen:
            self.group_frozen = [False] * len(self.groups)

    def params(self, include_frozen=True) -> list[Param]:
        out = []
        for g, layers in enumerate(self.groups):
            if include_frozen or not self.group_frozen[g]:
                for layer in layers:
                    out.extend(layer.params)
        return out

    def freeze_group(self, g: int, frozen: bool):
        self.group_frozen[g] = frozen
        for layer in self.groups[g]:
            for p in layer.params:
                p.frozen = frozen

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()


@dataclass
class CosineHead:
    weights: Param
    scale: float = 10.0

    @property
    def n_classes(self) -> int:
        return self.weights.value.shape[0]


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations recorded by ``backbone_forward``."""

    inputs: list[list[np.ndarray]]
    preacts: list[list[np.ndarray]]


def _uniform_fan_in(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> BackboneModel:
    # He-style scale so activations keep their magnitude through relu stacks
    groups = []
    d_in = config.input_dim
    for d_out in config.group_dims:
        layers = []
        for _ in range(config.layers_per_group):
            w = _uniform_fan_in(rng, d_in, (d_in, d_out)) * np.sqrt(6.0)
            b = _uniform_fan_in(rng, d_in, (d_out,))
            layers.append(Layer(Param(w), Param(b, is_bias=True)))
            d_in = d_out
        groups.append(layers)
    return BackboneModel(config, groups)


def init_head(n_classes: int, feature_dim: int, rng: np.random.Generator, scale=10.0) -> CosineHead:
    w = _uniform_fan_in(rng, feature_dim, (n_classes, feature_dim))
    norms = np.linalg.norm(w, axis=1)
    while np.any(norms < NORM_EPS):
        bad = norms < NORM_EPS
        w[bad] = _uniform_fan_in(rng, feature_dim, (int(bad.sum()), feature_dim))
        norms = np.linalg.norm(w, axis=1)
    return CosineHead(Param(w), float(scale))


def init_model(config: BackboneConfig, n_classes: int, seed: int, scale=10.0):
    rng = np.random.default_rng(seed)
    model = init_backbone(config, rng)
    head = init_head(n_classes, config.feature_dim, rng, scale)
    return model, head


def group_input_dim(model: BackboneModel, g: int) -> int:
    return model.config.input_dim if g == 0 else model.config.group_dims[g - 1]


def backbone_forward(model: BackboneModel, batch, cache: bool = False, start_group: int = 0):
    """Features for ``batch``; with ``cache=True`` returns ``(features, ForwardCache)``.

    With ``start_group > 0``, ``batch`` is taken to be the activation entering
    that group and earlier groups are skipped (their cache entries stay empty).
    """
    h = as_tensor(batch)
    width = group_input_dim(model, start_group) if start_group < len(model.groups) else model.config.feature_dim
    if h.ndim != 2 or h.shape[1] != width:
        raise DimensionError(
            f"batch shape {h.shape} does not match width {width} expected at group {start_group}"
        )
    inputs, preacts = [[] for _ in range(start_group)], [[] for _ in range(start_group)]
    for layers in model.groups[start_group:]:
        gi, gp = [], []
        for layer in layers:
            z = affine_forward(h, layer.weight.value, layer.bias.value)
            if cache:
                gi.append(h)
                gp.append(z)
            h = relu(z)
        inputs.append(gi)
        preacts.append(gp)
    if cache:
        return h, ForwardCache(inputs, preacts)
    return h


def forward_prefix(model: BackboneModel, batch, n_groups: int) -> np.ndarray:
    """Activation leaving the first ``n_groups`` groups (the input when 0)."""
    h = as_tensor(batch)
    for layers in model.groups[:n_groups]:
        for layer in layers:
            h = relu(affine_forward(h, layer.weight.value, layer.bias.value))
    return h


def backbone_backward(model: BackboneModel, fcache: ForwardCache, grad_features, need_input_grad=False):
    """Accumulate parameter gradients of learnable groups.

    Backpropagation stops at the first group (walking backwards) below which
    nothing is learnable, unless ``need_input_grad`` is set.
    """
    g = as_tensor(grad_features)
    n_groups = len(model.groups)
    lowest_learnable = next((i for i in range(n_groups) if not model.group_frozen[i]), n_groups)
    stop = 0 if need_input_grad else lowest_learnable
    if stop < n_groups and not fcache.inputs[stop]:
        raise ValueError(f"forward cache does not reach group {stop}; rerun forward from an earlier group")
    for gi in range(n_groups - 1, stop - 1, -1):
        layers = model.groups[gi]
        for li in range(len(layers) - 1, -1, -1):
            layer = layers[li]
            g = relu_backward(fcache.preacts[gi][li], g)
            gx, gw, gb = affine_backward(fcache.inputs[gi][li], layer.weight.value, g)
            if not model.group_frozen[gi]:
                layer.weight.grad += gw
                layer.bias.grad += gb
            g = gx
    return g if need_input_grad else None


def _row_norms(x, what):
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms < NORM_EPS)
    if bad.size:
        raise DegenerateInputError(f"{what} row {int(bad[0])} has norm {norms[bad[0]]:.3g} < {NORM_EPS}")
    return norms


def cosine_logits(head: CosineHead, features, cache: bool = False):
    """``s * cos(feature_b, w_c)`` for every row/class pair."""
    f = as_tensor(features)
    w = head.weights.value
    if f.ndim != 2 or f.shape[1] != w.shape[1]:
        raise DimensionError(f"features shape {f.shape} does not match head width {w.shape[1]}")
    fn = _row_norms(f, "feature")
    wn = _row_norms(w, "head weight")
    u = f / fn[:, None]
    v = w / wn[:, None]
    logits = head.scale * (u @ v.T)
    if cache:
        return logits, (u, v, fn, wn)
    return logits


def cosine_logits_backward(head: CosineHead, hcache, grad_logits):
    """Accumulate the head-weight gradient; return the gradient w.r.t. features."""
    u, v, fn, wn = hcache
    gl = as_tensor(grad_logits) * head.scale
    gu = gl @ v
    gv = gl.T @ u
    # d(x/|x|) = (I - x̂x̂ᵀ)/|x|
    gf = (gu - np.sum(gu * u, axis=1, keepdims=True) * u) / fn[:, None]
    gw = (gv - np.sum(gv * v, axis=1, keepdims=True) * v) / wn[:, None]
    if not head.weights.frozen:
        head.weights.grad += gw
    return gf


def set_adaptability(model: BackboneModel, head: CosineHead, j: int):
    """Leave the last ``j`` groups and the head learnable; freeze the rest."""
    n_groups = len(model.groups)
    if not 0 <= j <= n_groups:
        raise ValueError(f"adaptability level j={j} outside [0, {n_groups}]")
    for g in range(n_groups):
        model.freeze_group(g, g < n_groups - j)
    head.weights.frozen = False


def clone_frozen_reference(model: BackboneModel) -> BackboneModel:
    ref = copy.deepcopy(model)
    for g in range(len(ref.groups)):
        ref.freeze_group(g, True)
    return ref


def clone_model(model: BackboneModel) -> BackboneModel:
    """Deep copy of weights and freezing state; gradients and momentum start at zero."""
    clone = copy.deepcopy(model)
    for p in clone.params():
        p.grad.fill(0.0)
        p.momentum_buf.fill(0.0)
    return clone


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"WCFSCKPT"
CHECKPOINT_VERSION = 1


def _flat_params(model: BackboneModel, head: CosineHead | None):
    arrays = [p.value for p in model.params()]
    if head is not None:
        arrays.append(head.weights.value)
    return arrays


def save_checkpoint(path, model: BackboneModel, head: CosineHead | None = None, seed=None, extra=None):
    """Binary container: magic, version, JSON header, raw little-endian f64 arrays."""
    arrays = _flat_params(model, head)
    header = {
        "config": {**asdict(model.config), "group_dims": list(model.config.group_dims)},
        "seed": seed,
        "group_frozen": list(model.group_frozen),
        "shapes": [list(a.shape) for a in arrays],
        "head": None if head is None else {"scale": head.scale, "n_classes": head.n_classes},
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    blob = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)) + hbytes + payload
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return blob


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``; returns ``(model, head_or_None, header)``."""
    blob = Path(path).read_bytes()
    n_magic = len(CHECKPOINT_MAGIC)
    if blob[:n_magic] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", 0)
    if len(blob) < n_magic + 8:
        raise FormatError("truncated checkpoint header", len(blob))
    version, hlen = struct.unpack_from("<II", blob, n_magic)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", n_magic)
    start = n_magic + 8
    try:
        header = json.loads(blob[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", start) from exc
    cfg = BackboneConfig(**header["config"])
    offset = start + hlen
    arrays = []
    for shape in header["shapes"]:
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(blob):
            raise FormatError("checkpoint payload truncated", len(blob))
        arrays.append(np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(DTYPE).reshape(shape))
        offset = end
    model = init_backbone(cfg, np.random.default_rng(0))
    params = model.params()
    for p, a in zip(params, arrays):
        if p.value.shape != a.shape:
            raise FormatError(f"param shape {a.shape} does not fit config (expected {p.value.shape})")
        p.value = a.copy()
    for g, frozen in enumerate(header["group_frozen"]):
        model.freeze_group(g, bool(frozen))
    head = None
    if header["head"] is not None:
        head = CosineHead(Param(arrays[len(params)].copy()), float(header["head"]["scale"]))
    return model, head, header
