"""Two-network cascade: training, gated inference, postprocessing, storage.

Container layout::

    MSLESION-CASCADE <version>
    t_bin <float>
    l_min <int>
    connectivity <int>
    gate <float>
    provenance <one-line JSON>
    net1 <byte count>
    net2 <byte count>
    end
    <net1 model container><net2 model container>
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .metrics import connected_components
from .network import (GROUPS, FormatError, build_model, count_params, describe, forward,
                      forward_features, model_from_bytes, model_to_bytes, parameter_table)
from .patches import build_stage1_dataset, build_stage2_dataset, extract_patches, _padded, score_voxels
from .training import TrainConfig, train
from .volume_io import Volume

CASCADE_VERSION = 1
_MAGIC = "MSLESION-CASCADE"
# Patch extractions per inference batch.
INFER_BATCH = 8192


@dataclass(frozen=True)
class PostprocessConfig:
    t_bin: float = 0.5
    l_min: int = 10
    connectivity: int = 26
    # Stage-1 probability below which a voxel is discarded before stage 2;
    # also the cutoff defining stage-1 false positives for training.
    gate: float = 0.5

    def __post_init__(self):
        if not 0 < self.t_bin < 1:
            raise ValueError(f"t_bin must be in (0, 1), got {self.t_bin}")
        if self.l_min < 1:
            raise ValueError(f"l_min must be >= 1, got {self.l_min}")
        if self.connectivity not in (6, 18, 26):
            raise ValueError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        if not 0 < self.gate < 1:
            raise ValueError(f"gate must be in (0, 1), got {self.gate}")


@dataclass
class CascadeModel:
    net1: object
    net2: object
    post: PostprocessConfig = PostprocessConfig()
    provenance: dict = field(default_factory=dict)
    # Training histories; not stored in the container.
    histories: dict = field(default_factory=dict, repr=False, compare=False)

    def copy(self):
        return CascadeModel(self.net1.copy(), self.net2.copy(), self.post,
                            json.loads(json.dumps(self.provenance)), dict(self.histories))

    @property
    def nets(self):
        return (self.net1, self.net2)


def conv_boundary(model):
    """Index of the first layer after the convolutional group."""
    return next(i for i, s in enumerate(model.layers) if s.group != "CONV")


def _digest(model, stop):
    h = hashlib.sha1()
    for spec in model.layers[:stop]:
        for name, value in model.layer_params(spec).items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(value).tobytes())
    return h.hexdigest()


def _case_key(case):
    h = hashlib.sha1(case.id.encode())
    for arr in (case.flair.data, case.t1.data, case.brain_mask.data):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


class FeatureStore:
    """Convolutional-stack outputs for every brain voxel of a case.

    Adaptation never changes the convolutional group, so these activations
    can be shared by every model derived from the same source. Entries are
    keyed by the convolutional weights and the case content.
    """

    def __init__(self):
        self._data = {}

    def __len__(self):
        return len(self._data)

    def get(self, model, case):
        """``(features, index)``: features of all brain voxels in raster
        order and a volume mapping each brain voxel to its row (-1 elsewhere)."""
        stop = conv_boundary(model)
        key = (_digest(model, stop), _case_key(case))
        if key not in self._data:
            pts = np.argwhere(case.brain_mask.data)
            index = np.full(case.shape, -1, dtype=np.int64)
            index[tuple(pts.T)] = np.arange(len(pts))
            feats = np.empty((len(pts), 512), dtype=model.dtype)
            vp = _padded(case)
            for s in range(0, len(pts), INFER_BATCH):
                patches = extract_patches(case, pts[s:s + INFER_BATCH], vp)
                feats[s:s + INFER_BATCH] = forward_features(model, patches, stop)
            self._data[key] = (feats, index)
        return self._data[key]

    def lookup(self, model, cases):
        """``f(case_index, centers)`` returning stored features, for training."""
        def fn(case_index, centers):
            out = None
            for ci in np.unique(case_index):
                feats, index = self.get(model, cases[ci])
                sel = np.flatnonzero(case_index == ci)
                rows = index[tuple(np.asarray(centers[sel]).T)]
                if np.any(rows < 0):
                    raise ValueError(f"centre outside the brain mask of case {cases[ci].id}")
                if out is None:
                    out = np.empty((len(case_index), feats.shape[1]), feats.dtype)
                out[sel] = feats[rows]
            return out
        fn.layer = conv_boundary(model)
        return fn


def _head_probs(model, feats, start, chunk=4096):
    probs = np.empty(len(feats), dtype=np.float32)
    for s in range(0, len(feats), chunk):
        out, _, _ = forward(model, feats[s:s + chunk], "infer", start=start)
        probs[s:s + chunk] = ops.softmax(out)[:, 1]
    return probs


def score(model, case, centers, store=None):
    """Lesion probability of ``model`` at ``centers``, through ``store`` when given."""
    centers = np.asarray(centers, dtype=np.intp).reshape(-1, 3)
    if store is None:
        return score_voxels(model, case, centers, INFER_BATCH)
    feats, index = store.get(model, case)
    rows = index[tuple(centers.T)]
    if np.any(rows < 0):
        raise ValueError(f"centre outside the brain mask of case {case.id}")
    return _head_probs(model, feats[rows], conv_boundary(model))


def infer(cascade, case, store=None, return_stages=False):
    """Cascade lesion probability map.

    Every brain voxel is scored by net1; voxels below the gate get 0 and the
    rest get net2's probability. Voxels outside the brain mask are 0.
    """
    for net in cascade.nets:
        if net.layers[0].size[0] != 2 or net.params["conv1.weight"].shape[2:] != (3, 3, 3):
            raise ValueError("cascade networks do not match the patch architecture")
    pts = np.argwhere(case.brain_mask.data)
    p1 = np.zeros(case.shape, dtype=np.float32)
    out = np.zeros(case.shape, dtype=np.float32)
    if len(pts):
        s1 = score(cascade.net1, case, pts, store)
        p1[tuple(pts.T)] = s1
        kept = pts[s1 >= cascade.post.gate]
        if len(kept):
            out[tuple(kept.T)] = score(cascade.net2, case, kept, store)
    prob = Volume(out, case.flair.spacing, case.flair.origin)
    if return_stages:
        return prob, Volume(p1, case.flair.spacing, case.flair.origin)
    return prob


def postprocess(prob, config=PostprocessConfig()):
    """Threshold at ``>= t_bin`` and drop components smaller than ``l_min``."""
    data = np.asarray(getattr(prob, "data", prob))
    binary = data >= config.t_bin
    regions = connected_components(binary, config.connectivity)
    keep = np.r_[False, regions.sizes >= config.l_min]
    mask = keep[regions.labels]
    if isinstance(prob, Volume):
        return Volume(mask, prob.spacing, prob.origin)
    return mask


def segment(cascade, case, store=None):
    return postprocess(infer(cascade, case, store), cascade.post)


def stage_seeds(seed):
    """Independent seeds ``(net1 init, net2 init, stage-1 data, stage-2 data)``."""
    return [int(s) for s in np.random.SeedSequence([int(seed), 7]).generate_state(4)]


def _history_summary(history):
    return {"epochs": len(history.epochs), "best_epoch": history.best_epoch,
            "best_val_loss": round(float(history.best_val_loss), 6)}


def false_positive_maps(model, cases, threshold, store=None):
    maps = []
    for case in cases:
        fp = np.zeros(case.shape, dtype=bool)
        pts = np.argwhere(case.brain_mask.data & ~case.lesion_mask.data)
        if len(pts):
            fp[tuple(pts.T)] = score(model, case, pts, store) >= threshold
        maps.append(fp)
    return maps


def train_stages(net1, net2, cases, config, post, seed, store=None, log=None):
    """Train net1, derive its false positives, then train net2 (in place)."""
    s = stage_seeds(seed)
    lookup1 = store.lookup(net1, cases) if store is not None else None
    lookup2 = store.lookup(net2, cases) if store is not None else None
    ds1 = build_stage1_dataset(cases, s[2])
    _, h1 = train(net1, ds1, replace(config, seed=s[2]), lookup1,
                  log=None if log is None else (lambda r: log("stage1", r)))
    fp = false_positive_maps(net1, cases, post.gate, store)
    ds2 = build_stage2_dataset(cases, net1, s[3], fp_maps=fp)
    _, h2 = train(net2, ds2, replace(config, seed=s[3]), lookup2,
                  log=None if log is None else (lambda r: log("stage2", r)))
    return {"stage1": h1, "stage2": h2}, {"stage1_patches": len(ds1), "stage2_patches": len(ds2),
                                          "stage2_fp_negatives": int((ds2.source == 2).sum())}


def train_cascade(cases, config=TrainConfig(), post=PostprocessConfig(), log=None):
    """Train both networks from scratch on ``cases`` (seeded by ``config.seed``)."""
    cases = list(cases)
    if not cases:
        raise ValueError("no training cases")
    s = stage_seeds(config.seed)
    net1, net2 = build_model(s[0]), build_model(s[1])
    histories, counts = train_stages(net1, net2, cases, config, post, config.seed, log=log)
    provenance = {"kind": "source", "cases": [c.id for c in cases], "seed": config.seed,
                  "train": config.to_dict(), **counts,
                  **{k: _history_summary(h) for k, h in histories.items()}}
    return CascadeModel(net1, net2, post, provenance, histories)


def cascade_to_bytes(cascade):
    b1, b2 = model_to_bytes(cascade.net1), model_to_bytes(cascade.net2)
    p = cascade.post
    lines = [f"{_MAGIC} {CASCADE_VERSION}", f"t_bin {p.t_bin!r}", f"l_min {p.l_min}",
             f"connectivity {p.connectivity}", f"gate {p.gate!r}",
             "provenance " + json.dumps(cascade.provenance, sort_keys=True, separators=(",", ":")),
             f"net1 {len(b1)}", f"net2 {len(b2)}", "end"]
    return ("\n".join(lines) + "\n").encode("utf-8") + b1 + b2


def cascade_from_bytes(blob):
    end = blob.find(b"\nend\n")
    if end < 0:
        raise FormatError("cascade container has no header terminator")
    try:
        lines = blob[:end].decode("utf-8").split("\n")
    except UnicodeDecodeError:
        raise FormatError("not a cascade container") from None
    first = lines[0].split()
    if len(first) != 2 or first[0] != _MAGIC:
        raise FormatError("not a cascade container")
    if first[1] != str(CASCADE_VERSION):
        raise FormatError(f"unsupported cascade format version {first[1]} (expected {CASCADE_VERSION})")
    header = dict(line.split(" ", 1) if " " in line else (line, "") for line in lines[1:])
    try:
        post = PostprocessConfig(float(header["t_bin"]), int(header["l_min"]),
                                 int(header["connectivity"]), float(header["gate"]))
        provenance = json.loads(header["provenance"])
        n1, n2 = int(header["net1"]), int(header["net2"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad cascade manifest: {exc}") from None
    body = blob[end + 5:]
    if len(body) != n1 + n2:
        raise FormatError("cascade payload is truncated or has trailing data")
    return CascadeModel(model_from_bytes(body[:n1]), model_from_bytes(body[n1:]), post, provenance)


def save_cascade(cascade, path):
    with open(os.fspath(path), "wb") as fh:
        fh.write(cascade_to_bytes(cascade))


def load_cascade(path):
    with open(os.fspath(path), "rb") as fh:
        return cascade_from_bytes(fh.read())


def inspect_cascade(cascade):
    """Architecture listing and parameter-count table of both networks."""
    lines = ["architecture (net1 and net2 are identical):", describe(cascade.net1), "",
             "parameter counts:"]
    lines += [f"  {label:<16} {groups:<16} {count:>7}" for label, groups, count in parameter_table(cascade.net1)]
    total, trainable = count_params(cascade.net1)
    lines += ["", "stored trainable flags: " + " ".join(
        f"{g}={'on' if cascade.net1.trainable[g] else 'off'}" for g in GROUPS),
        f"total {total}  trainable (current flags) {trainable}",
        f"postprocess: t_bin={cascade.post.t_bin} l_min={cascade.post.l_min} "
        f"connectivity={cascade.post.connectivity} gate={cascade.post.gate}",
        "provenance: " + json.dumps(cascade.provenance, sort_keys=True)]
    return "\n".join(lines)

