"""The eleven-layer patch CNN: architecture, parameters, freezing and I/O.

The layer list below is a reconstruction. Kernel size (3x3x3, same padding),
per-element PReLU slopes on convolutional maps and the conv -> BN -> PReLU
ordering are not stated for the original network; they are the standard
configuration under which the published parameter counts (470466 total,
172928 / 41344 / 8320 for the three FC retraining groups) come out exactly.
"""
from __future__ import annotations

import enum
import hashlib
import io
import os
from dataclasses import dataclass, field

import numpy as np

from . import ops

PATCH_SIZE = 11
IN_CHANNELS = 2
GROUPS = ("CONV", "FC1", "FC2", "FC3", "OUT")
FORMAT_VERSION = 1
_MAGIC = "MSLESION-MODEL"


class FormatError(ValueError):
    """A model or cascade container is malformed or has an unknown version."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    group: str
    size: tuple = ()


def canonical_layers():
    """Layer list of the canonical network, in execution order."""
    s1, s2 = PATCH_SIZE, PATCH_SIZE // 2
    L = LayerSpec
    layers = [
        L("conv1", "conv3d", "CONV", (IN_CHANNELS, 32)),
        L("bn1", "batchnorm", "CONV", (32,)),
        L("act1", "prelu", "CONV", (32, s1, s1, s1)),
        L("conv2", "conv3d", "CONV", (32, 32)),
        L("bn2", "batchnorm", "CONV", (32,)),
        L("act2", "prelu", "CONV", (32, s1, s1, s1)),
        L("pool1", "maxpool", "CONV"),
        L("conv3", "conv3d", "CONV", (32, 64)),
        L("bn3", "batchnorm", "CONV", (64,)),
        L("act3", "prelu", "CONV", (64, s2, s2, s2)),
        L("conv4", "conv3d", "CONV", (64, 64)),
        L("bn4", "batchnorm", "CONV", (64,)),
        L("act4", "prelu", "CONV", (64, s2, s2, s2)),
        L("pool2", "maxpool", "CONV"),
        L("flatten", "flatten", "CONV", (512,)),
    ]
    width = 512
    for group, units in (("FC1", 256), ("FC2", 128), ("FC3", 64)):
        tag = group.lower()
        layers += [
            L(tag, "dense", group, (width, units)),
            L(f"{tag}_act", "prelu", group, (units,)),
            L(f"{tag}_drop", "dropout", group, (0.5,)),
        ]
        width = units
    layers.append(L("out", "dense", "OUT", (width, 2)))
    return layers


class FreezeMode(str, enum.Enum):
    NONE = "none"
    FC1_FC2_FC3 = "fc1_fc2_fc3"
    FC2_FC3 = "fc2_fc3"
    FC3 = "fc3"


_RETRAINED = {
    FreezeMode.NONE: GROUPS,
    FreezeMode.FC1_FC2_FC3: ("FC1", "FC2", "FC3"),
    FreezeMode.FC2_FC3: ("FC2", "FC3"),
    FreezeMode.FC3: ("FC3",),
}


@dataclass(frozen=True)
class FreezeConfig:
    """Which FC groups are retrained. CONV stays frozen in every adaptation mode.

    ``retrain_head`` keeps the two-unit output layer trainable during
    adaptation (default); set it to False to freeze the head as well.
    """

    mode: FreezeMode = FreezeMode.NONE
    retrain_head: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", FreezeMode(self.mode))

    @property
    def groups(self):
        groups = _RETRAINED[self.mode]
        if self.mode is not FreezeMode.NONE and self.retrain_head:
            groups = groups + ("OUT",)
        return groups


@dataclass
class Model:
    layers: list
    params: dict
    trainable: dict = field(default_factory=lambda: {g: True for g in GROUPS})
    seed: int = 0

    @property
    def dtype(self):
        return self.params["conv1.weight"].dtype

    def copy(self):
        return Model(list(self.layers), {k: v.copy() for k, v in self.params.items()},
                     dict(self.trainable), self.seed)

    def astype(self, dtype):
        out = self.copy()
        out.params = {k: v.astype(dtype) for k, v in out.params.items()}
        return out

    def layer_params(self, spec):
        return {k.split(".", 1)[1]: v for k, v in self.params.items() if k.startswith(spec.name + ".")}


def _param_shapes(spec):
    if spec.kind == "conv3d":
        cin, cout = spec.size
        return {"weight": (cout, cin, 3, 3, 3), "bias": (cout,)}
    if spec.kind == "batchnorm":
        (c,) = spec.size
        return {k: (c,) for k in ("gamma", "beta", "running_mean", "running_var")}
    if spec.kind == "prelu":
        return {"slope": spec.size}
    if spec.kind == "dense":
        nin, nout = spec.size
        return {"weight": (nout, nin), "bias": (nout,)}
    return {}


# Updated by batch statistics, never by the optimizer.
_BUFFERS = ("running_mean", "running_var")


def build_model(seed=0, dtype=np.float32):
    """Canonical network with He-normal weights, zero biases, PReLU slopes 0.25,
    batch-norm gamma 1 / beta 0 and running statistics (0, 1)."""
    rng = np.random.default_rng(seed)
    layers = canonical_layers()
    params = {}
    for spec in layers:
        for pname, shape in _param_shapes(spec).items():
            key = f"{spec.name}.{pname}"
            if pname == "weight":
                fan_in = int(np.prod(shape[1:]))
                params[key] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
            elif pname == "slope":
                params[key] = np.full(shape, 0.25, dtype=dtype)
            elif pname in ("gamma", "running_var"):
                params[key] = np.ones(shape, dtype=dtype)
            else:
                params[key] = np.zeros(shape, dtype=dtype)
    return Model(layers, params, {g: True for g in GROUPS}, seed)


def is_buffer(name):
    return name.rsplit(".", 1)[1] in _BUFFERS


def group_param_count(model, group, learnable_only=True):
    total = 0
    for spec in model.layers:
        if spec.group != group:
            continue
        for pname, value in model.layer_params(spec).items():
            if learnable_only and pname in _BUFFERS:
                continue
            total += value.size
    return total


def freeze_of(model):
    """Infer the FreezeConfig that produced the model's trainability flags."""
    t = model.trainable
    if all(t.values()):
        return FreezeConfig(FreezeMode.NONE)
    for mode in (FreezeMode.FC1_FC2_FC3, FreezeMode.FC2_FC3, FreezeMode.FC3):
        for head in (True, False):
            cfg = FreezeConfig(mode, head)
            if all(t[g] == (g in cfg.groups) for g in GROUPS):
                return cfg
    raise ValueError(f"trainability flags {t} match no freeze mode")


def count_params(model, freeze=None):
    """Return ``(total, trainable)`` under the published table's convention.

    ``total`` counts every stored value including batch-norm running
    statistics. ``trainable`` is ``total`` when nothing is frozen; otherwise
    it is the weights, biases and PReLU slopes of the retrained FC groups,
    leaving out the output layer just as the table does.
    """
    total = sum(v.size for v in model.params.values())
    freeze = freeze_of(model) if freeze is None else freeze
    if freeze.mode is FreezeMode.NONE:
        return total, total
    trainable = sum(group_param_count(model, g) for g in _RETRAINED[freeze.mode])
    return total, trainable


def set_trainable(model, freeze):
    """Copy of ``model`` whose groups are trainable according to ``freeze``."""
    out = model.copy()
    groups = freeze.groups
    out.trainable = {g: g in groups for g in GROUPS}
    return out


def first_trainable_index(model):
    for i, spec in enumerate(model.layers):
        if model.trainable[spec.group]:
            return i
    return len(model.layers)


def _slopes_cl(slope):
    # Conv slopes are stored channel-first (C, D, H, W).
    return np.moveaxis(slope, 0, -1) if slope.ndim == 4 else slope


def forward(model, x, mode="infer", rng=None, start=0, stop=None, frozen_bn="infer"):
    """Run layers ``start:stop`` on ``x``.

    Patches enter channel-first, ``(N, 2, 11, 11, 11)``; feature maps are kept
    channels-last internally. In train mode only layers of trainable groups
    use batch statistics and dropout; frozen groups behave as in inference
    (``frozen_bn="train"`` lets frozen batch-norm layers keep using batch
    statistics). Returns ``(output, caches, stat_updates)`` where
    ``stat_updates`` maps running-statistic names to their new values.
    """
    stop = len(model.layers) if stop is None else stop
    caches = []
    updates = {}
    h = ops.to_cl(x) if start == 0 else x
    for spec in model.layers[start:stop]:
        p = model.layer_params(spec)
        active = mode == "train" and model.trainable[spec.group]
        lmode = "train" if active else "infer"
        kind = spec.kind
        if kind == "conv3d":
            cache = h
            h = ops.conv3d_forward_cl(h, p["weight"], p["bias"])
        elif kind == "batchnorm":
            if mode == "train" and frozen_bn == "train":
                lmode = "train"
            h, cache, rm, rv = ops.batchnorm_forward_cl(h, p["gamma"], p["beta"], p["running_mean"],
                                                        p["running_var"], lmode)
            if lmode == "train":
                updates[f"{spec.name}.running_mean"] = rm.astype(model.dtype)
                updates[f"{spec.name}.running_var"] = rv.astype(model.dtype)
        elif kind == "prelu":
            cache = h
            h = ops.prelu(h, _slopes_cl(p["slope"]))
        elif kind == "maxpool":
            shape = h.shape
            h, argmax = ops.maxpool3d_cl(h)
            cache = (shape, argmax)
        elif kind == "flatten":
            cache = h.shape
            # Flatten in channel-first order (C, D, H, W).
            h = np.ascontiguousarray(ops.to_cf(h)).reshape(h.shape[0], -1)
        elif kind == "dense":
            cache = h
            h = ops.dense_forward(h, p["weight"], p["bias"])
        elif kind == "dropout":
            h, cache = ops.dropout(h, spec.size[0], lmode, rng)
        else:  # pragma: no cover
            raise ValueError(f"unknown layer kind {kind}")
        caches.append(cache)
    return h, caches, updates


def backward(model, caches, grad, start=0):
    """Backpropagate ``grad`` through layers ``start:`` given forward ``caches``.

    Returns gradients for the learnable parameters of trainable groups and
    stops as soon as no trainable layer remains upstream.
    """
    layers = model.layers[start:]
    lowest = max(first_trainable_index(model) - start, 0)
    grads = {}
    for i in range(len(layers) - 1, lowest - 1, -1):
        spec, cache = layers[i], caches[i]
        p = model.layer_params(spec)
        train = model.trainable[spec.group]
        need_input = i > lowest
        kind = spec.kind
        if kind == "conv3d":
            gx, gw, gb = ops.conv3d_backward_cl(cache, p["weight"], grad, need_input_grad=need_input)
            if train:
                grads[f"{spec.name}.weight"], grads[f"{spec.name}.bias"] = gw, gb
            grad = gx
        elif kind == "batchnorm":
            gx, gg, gbeta = ops.batchnorm_backward_cl(p["gamma"], cache, grad)
            if train:
                grads[f"{spec.name}.gamma"], grads[f"{spec.name}.beta"] = gg, gbeta
            grad = gx
        elif kind == "prelu":
            gx, gs = ops.prelu_backward(cache, _slopes_cl(p["slope"]), grad)
            if train:
                grads[f"{spec.name}.slope"] = np.moveaxis(gs, -1, 0) if gs.ndim == 4 else gs
            grad = gx
        elif kind == "maxpool":
            shape, argmax = cache
            grad = ops.maxpool3d_backward_cl(shape, argmax, grad)
        elif kind == "flatten":
            n, d, hh, w, c = cache
            grad = ops.to_cl(grad.reshape(n, c, d, hh, w))
        elif kind == "dense":
            gx, gw, gb = ops.dense_backward(cache, p["weight"], grad)
            if train:
                grads[f"{spec.name}.weight"], grads[f"{spec.name}.bias"] = gw, gb
            grad = gx
        elif kind == "dropout":
            if cache is not None:
                grad = grad * cache
    return grads


# Memory per sample is dominated by the 32 x 11^3 activation maps.
_PREDICT_CHUNK = 64


def check_patches(patches):
    expected = (IN_CHANNELS,) + (PATCH_SIZE,) * 3
    if patches.ndim != 5 or patches.shape[1:] != expected:
        raise ops.ShapeError(f"expected patches of shape (N, {', '.join(map(str, expected))}), "
                             f"got {patches.shape}")


def forward_features(model, patches, stop):
    """Inference-mode activations after layer ``stop - 1``, computed in chunks."""
    if stop == 0:
        return patches
    out = []
    for s in range(0, len(patches), _PREDICT_CHUNK):
        h, _, _ = forward(model, patches[s:s + _PREDICT_CHUNK].astype(model.dtype, copy=False),
                          "infer", stop=stop)
        out.append(h)
    if not out:
        h, _, _ = forward(model, patches[:1].astype(model.dtype), "infer", stop=stop)
        return np.empty((0,) + h.shape[1:], dtype=h.dtype)
    return np.concatenate(out)


def predict_logits(model, patches):
    check_patches(patches)
    return forward_features(model, patches, len(model.layers))


def predict(model, patches):
    """Lesion-class softmax probability for each patch, in inference mode."""
    return ops.softmax(predict_logits(model, patches))[:, 1]


# ----------------------------------------------------------------------------
# Container format
#
#   MSLESION-MODEL <version>
#   seed <int>
#   trainable CONV=1 FC1=1 FC2=1 FC3=1 OUT=1
#   layer <name> <kind> <group> <comma-separated size>
#   ...
#   tensor <param name> <comma-separated shape>
#   ...
#   payload <byte count>
#   end
#   <payload: little-endian float32 arrays in tensor order>
#   <32-byte SHA-256 digest of the payload>


def model_to_bytes(model):
    lines = [f"{_MAGIC} {FORMAT_VERSION}", f"seed {model.seed}",
             "trainable " + " ".join(f"{g}={int(model.trainable[g])}" for g in GROUPS)]
    for spec in model.layers:
        size = ",".join(str(s) for s in spec.size) or "-"
        lines.append(f"layer {spec.name} {spec.kind} {spec.group} {size}")
    payload = io.BytesIO()
    for name, value in model.params.items():
        lines.append(f"tensor {name} {','.join(str(s) for s in value.shape)}")
        payload.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    data = payload.getvalue()
    lines += [f"payload {len(data)}", "end"]
    header = ("\n".join(lines) + "\n").encode("ascii")
    return header + data + hashlib.sha256(data).digest()


def _parse_size(text):
    if text == "-":
        return ()
    return tuple(float(t) if "." in t else int(t) for t in text.split(","))


def _parse_header(lines):
    seed, trainable, layers, tensors, nbytes = 0, {}, [], [], None
    for line in lines:
        key, _, rest = line.partition(" ")
        parts = rest.split()
        if key == "seed":
            seed = int(rest)
        elif key == "trainable":
            trainable = {k: bool(int(v)) for k, v in (p.split("=") for p in parts)}
        elif key == "layer":
            layers.append(LayerSpec(parts[0], parts[1], parts[2], _parse_size(parts[3])))
        elif key == "tensor":
            tensors.append((parts[0], tuple(int(s) for s in parts[1].split(","))))
        elif key == "payload":
            nbytes = int(rest)
        else:
            raise FormatError(f"unknown header entry {key!r}")
    return seed, trainable, layers, tensors, nbytes


def model_from_bytes(blob):
    end = blob.find(b"\nend\n")
    if end < 0:
        raise FormatError("model container has no header terminator")
    try:
        header = blob[:end].decode("ascii").split("\n")
    except UnicodeDecodeError:
        raise FormatError("not a model container") from None
    body = blob[end + 5:]
    magic = header[0].split()
    if len(magic) != 2 or magic[0] != _MAGIC:
        raise FormatError("not a model container")
    if magic[1] != str(FORMAT_VERSION):
        raise FormatError(f"unsupported model format version {magic[1]} (expected {FORMAT_VERSION})")
    try:
        seed, trainable, layers, tensors, nbytes = _parse_header(header[1:])
    except (ValueError, IndexError) as exc:
        raise FormatError(f"bad model header: {exc}") from None
    if nbytes is None or len(body) != nbytes + 32:
        raise FormatError("model payload is truncated or has trailing data")
    data, digest = body[:nbytes], body[nbytes:]
    if hashlib.sha256(data).digest() != digest:
        raise FormatError("model payload checksum mismatch")
    params, offset = {}, 0
    for name, shape in tensors:
        count = int(np.prod(shape))
        params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape)
        offset += 4 * count
    return Model(layers, params, trainable, seed)


def save_model(model, path):
    with open(os.fspath(path), "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path):
    with open(os.fspath(path), "rb") as fh:
        return model_from_bytes(fh.read())


def describe(model):
    """Human-readable architecture listing with per-layer parameter counts."""
    rows = [f"{'layer':<10} {'kind':<10} {'group':<6} {'params':>8} {'trainable':>9}"]
    for spec in model.layers:
        n = sum(v.size for v in model.layer_params(spec).values())
        rows.append(f"{spec.name:<10} {spec.kind:<10} {spec.group:<6} {n:>8} "
                    f"{'yes' if model.trainable[spec.group] else 'no':>9}")
    return "\n".join(rows)


def parameter_table(model):
    """Rows ``(label, retrained groups, count)`` for the source and the three FC modes."""
    rows = []
    labels = {FreezeMode.NONE: "Source", FreezeMode.FC1_FC2_FC3: "Target 3 layers",
              FreezeMode.FC2_FC3: "Target 2 layers", FreezeMode.FC3: "Target 1 layer"}
    for mode, label in labels.items():
        groups = "all" if mode is FreezeMode.NONE else " + ".join(_RETRAINED[mode])
        rows.append((label, groups, count_params(model, FreezeConfig(mode))[1]))
    return rows
