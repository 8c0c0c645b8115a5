"""Supervised domain adaptation by retraining fully connected groups."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .cascade import CascadeModel, train_stages
from .metrics import METRICS, evaluate
from .network import FreezeConfig, FreezeMode, count_params, set_trainable
from .training import TrainConfig

# Lesion volume from which retraining all three FC groups is advised.
FULL_FC_THRESHOLD_MM3 = 3000.0


def _freeze(freeze):
    if isinstance(freeze, FreezeConfig):
        return freeze
    return FreezeConfig(FreezeMode(freeze))


def adapt(source, target_cases, freeze, config=TrainConfig(), store=None, log=None):
    """Copy of ``source`` with the ``freeze`` groups of both networks retrained
    on ``target_cases``. The convolutional group is never touched.

    Stage 1 is retrained first; its false positives on the target cases then
    feed the stage-2 dataset.
    """
    freeze = _freeze(freeze)
    if freeze.mode is FreezeMode.NONE:
        raise ValueError("adaptation needs a freeze mode; use train_cascade for full training")
    cases = list(target_cases)
    if not cases:
        raise ValueError("no target cases")
    for case in cases:
        if case.lesion_mask is None or case.lesion_voxels == 0:
            raise ValueError(f"target case {case.id} has no annotated lesions")
    net1 = set_trainable(source.net1, freeze)
    net2 = set_trainable(source.net2, freeze)
    histories, counts = train_stages(net1, net2, cases, config, source.post, config.seed, store, log)
    provenance = {"kind": "adapted", "freeze": freeze.mode.value, "retrain_head": freeze.retrain_head,
                  "cases": [c.id for c in cases], "seed": config.seed, "train": config.to_dict(),
                  "trainable_per_network": count_params(net1, freeze)[1],
                  "lesion_volume_ml": round(sum(c.lesion_volume_ml() for c in cases), 6),
                  "source": source.provenance, **counts}
    return CascadeModel(net1, net2, source.post, provenance, histories)


def recommend_freeze(total_lesion_voxels, voxel_volume_mm3=1.0):
    """All FC groups from 3 ml of lesion upward, otherwise the last one only."""
    if total_lesion_voxels < 0 or voxel_volume_mm3 <= 0:
        raise ValueError("lesion voxel count must be >= 0 and voxel volume > 0")
    volume = total_lesion_voxels * voxel_volume_mm3
    return FreezeConfig(FreezeMode.FC1_FC2_FC3 if volume >= FULL_FC_THRESHOLD_MM3 else FreezeMode.FC3)


def cell_seed(master_seed, index):
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


@dataclass
class GridRow:
    mode: str
    n_images: int
    lesion_volume_ml: float
    report: object
    seed: int


@dataclass
class GridReport:
    rows: list = field(default_factory=list)

    def cell(self, mode, n_images):
        for row in self.rows:
            if row.mode == _freeze(mode).mode.value and row.n_images == n_images:
                return row
        raise KeyError((mode, n_images))

    def to_dsv(self, delimiter="\t"):
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(["mode", "n_images", "lesion_ml", *(f"{m}_{s}" for m in METRICS for s in ("mean", "std"))])
        for r in self.rows:
            stats = r.report.summary()
            w.writerow([r.mode, r.n_images, f"{r.lesion_volume_ml:.3f}",
                        *(f"{v:.6f}" for m in METRICS for v in stats[m])])
        return buf.getvalue()

    def to_table(self):
        lines = [f"{'mode':<12} {'images':>6} {'lesion ml':>9}  {'DSC':<12} {'sensitivity':<12} {'precision':<12}"]
        for r in self.rows:
            lines.append(f"{r.mode:<12} {r.n_images:>6} {r.lesion_volume_ml:>9.3f}  " +
                         " ".join(f"{r.report.formatted(m):<12}" for m in METRICS))
        return "\n".join(lines)


def run_adaptation_grid(source, train_cases, test_cases, modes, sizes, config=TrainConfig(),
                        master_seed=0, store=None, log=None):
    """Adapt a fresh copy of ``source`` for every (mode, size) cell and evaluate it.

    A cell of size ``n`` uses the first ``n`` training cases.
    """
    train_cases, test_cases = list(train_cases), list(test_cases)
    overlap = {c.id for c in train_cases} & {c.id for c in test_cases}
    if overlap:
        raise ValueError(f"training and test cases overlap: {sorted(overlap)}")
    for n in sizes:
        if not 1 <= n <= len(train_cases):
            raise ValueError(f"subset size {n} outside 1..{len(train_cases)} available training cases")
    report = GridReport()
    index = 0
    for mode in modes:
        for n in sizes:
            seed = cell_seed(master_seed, index)
            index += 1
            subset = train_cases[:n]
            cfg = TrainConfig(**{**config.to_dict(), "seed": seed})
            adapted = adapt(source, subset, mode, cfg, store, log)
            metrics = evaluate(adapted, test_cases, "expert", store)
            report.rows.append(GridRow(_freeze(mode).mode.value, n,
                                       sum(c.lesion_volume_ml() for c in subset), metrics, seed))
    return report
