"""Overlap and lesion-detection metrics with per-case and aggregate reports.

All scores are fractions in [0, 1]. Conventions for empty masks: DSC of two
empty masks is 1, sensitivity with no ground-truth regions is 1, precision
with no segmented regions is 1.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

_STRUCTURE_RANK = {6: 1, 18: 2, 26: 3}
METRICS = ("dsc", "sensitivity", "precision")


def _array(mask):
    return np.asarray(getattr(mask, "data", mask), dtype=bool)


def _pair(gt, seg):
    gt, seg = _array(gt), _array(seg)
    if gt.shape != seg.shape:
        raise ValueError(f"mask shapes differ: {gt.shape} vs {seg.shape}")
    return gt, seg


@dataclass
class RegionLabeling:
    labels: np.ndarray
    sizes: np.ndarray
    connectivity: int

    @property
    def count(self):
        return len(self.sizes)


def connected_components(mask, connectivity=26):
    """Label regions 1..k, numbered by their first voxel in raster order."""
    if connectivity not in _STRUCTURE_RANK:
        raise ValueError(f"connectivity must be one of 6, 18, 26, got {connectivity}")
    mask = _array(mask)
    structure = ndimage.generate_binary_structure(mask.ndim, _STRUCTURE_RANK[connectivity])
    labels, k = ndimage.label(mask, structure)
    # scipy already numbers regions in scan order; renumber defensively so the
    # contract does not depend on that implementation detail.
    vals, first = np.unique(labels.ravel(), return_index=True)
    keep = vals > 0
    order = vals[keep][np.argsort(first[keep], kind="stable")]
    if k and not np.array_equal(order, np.arange(1, k + 1)):
        remap = np.zeros(k + 1, dtype=labels.dtype)
        remap[order] = np.arange(1, k + 1)
        labels = remap[labels]
    sizes = np.bincount(labels.ravel(), minlength=k + 1)[1:]
    return RegionLabeling(labels, sizes, connectivity)


@dataclass
class Tallies:
    tp_s: int
    fp_s: int
    fn_s: int
    tp_d_gt: int
    fn_d: int
    tp_d_seg: int
    fp_d: int


def _detected(labels, k, other, min_overlap):
    """Number of the ``k`` regions in ``labels`` that overlap ``other`` enough."""
    if k == 0:
        return 0
    hits = np.bincount(labels[other], minlength=k + 1)[1:]
    if min_overlap <= 0:
        return int((hits >= 1).sum())
    sizes = np.bincount(labels.ravel(), minlength=k + 1)[1:]
    need = np.maximum(1, np.ceil(min_overlap * sizes))
    return int((hits >= need).sum())


def tallies(gt, seg, connectivity=26, min_overlap=0.0):
    """Voxel (``*_s``) and region (``*_d``) tallies.

    A region counts as detected when at least ``max(1, ceil(min_overlap *
    size))`` of its voxels lie in the other mask; the default is one voxel.
    """
    gt, seg = _pair(gt, seg)
    return tallies_from_labels(gt, seg, connected_components(gt, connectivity),
                               connected_components(seg, connectivity), min_overlap)


def tallies_from_labels(gt, seg, g, s, min_overlap=0.0):
    """:func:`tallies` with precomputed :class:`RegionLabeling` of both masks."""
    tp = int(np.count_nonzero(gt & seg))
    tp_gt = _detected(g.labels, g.count, seg, min_overlap)
    tp_seg = _detected(s.labels, s.count, gt, min_overlap)
    return Tallies(tp, int(seg.sum()) - tp, int(gt.sum()) - tp,
                   tp_gt, g.count - tp_gt, tp_seg, s.count - tp_seg)


def _dsc(t):
    denom = t.fn_s + t.fp_s + 2 * t.tp_s
    return 1.0 if denom == 0 else 2 * t.tp_s / denom


def _sensitivity(t):
    n = t.tp_d_gt + t.fn_d
    return 1.0 if n == 0 else t.tp_d_gt / n


def _precision(t):
    n = t.tp_d_seg + t.fp_d
    return 1.0 if n == 0 else t.tp_d_seg / n


def dsc(gt, seg):
    gt, seg = _pair(gt, seg)
    tp = int(np.count_nonzero(gt & seg))
    denom = int(gt.sum()) + int(seg.sum())
    return 1.0 if denom == 0 else 2 * tp / denom


def lesion_sensitivity(gt, seg, connectivity=26, min_overlap=0.0):
    """Fraction of ground-truth regions touched by the segmentation."""
    return _sensitivity(tallies(gt, seg, connectivity, min_overlap))


def lesion_precision(gt, seg, connectivity=26, min_overlap=0.0):
    """Fraction of segmented regions touching the ground truth."""
    return _precision(tallies(gt, seg, connectivity, min_overlap))


@dataclass
class CaseMetrics:
    case_id: str
    dsc: float
    sensitivity: float
    precision: float
    tp_s: int
    fp_s: int
    fn_s: int
    tp_d: int
    fp_d: int
    fn_d: int

    @classmethod
    def from_masks(cls, case_id, gt, seg, connectivity=26, min_overlap=0.0):
        t = tallies(gt, seg, connectivity, min_overlap)
        # TP_d in the sensitivity uses ground-truth regions, in the precision
        # segmented regions; the report keeps the ground-truth count.
        return cls(case_id, _dsc(t), _sensitivity(t), _precision(t), t.tp_s, t.fp_s, t.fn_s,
                   t.tp_d_gt, t.fp_d, t.fn_d)


def _mean_std(values):
    # Population std, so a single case reports 0.
    if not values:
        return math.nan, math.nan
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


@dataclass
class MetricsReport:
    cases: list = field(default_factory=list)
    label: str = ""

    def mean(self, metric):
        return _mean_std([getattr(c, metric) for c in self.cases])[0]

    def std(self, metric):
        return _mean_std([getattr(c, metric) for c in self.cases])[1]

    def summary(self):
        """``{metric: (mean, std)}`` over the cases."""
        return {m: _mean_std([getattr(c, m) for c in self.cases]) for m in METRICS}

    def formatted(self, metric, digits=2):
        """``mean (std)`` string of one metric."""
        mu, sd = self.summary()[metric]
        return f"{mu:.{digits}f} ({sd:.{digits}f})"

    def to_dsv(self, delimiter="\t"):
        buf = io.StringIO()
        names = list(asdict(self.cases[0]).keys()) if self.cases else ["case_id", *METRICS]
        writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        writer.writerow(names)
        for c in self.cases:
            writer.writerow([_fmt(v) for v in asdict(c).values()])
        writer.writerow(["mean (std)"] + [self.formatted(n, 4) if n in METRICS else ""
                                          for n in names[1:]])
        return buf.getvalue()

    def to_table(self):
        rows = [["case", "DSC", "sensitivity", "precision", "TP_s", "FP_s", "FN_s", "TP_d", "FP_d", "FN_d"]]
        for c in self.cases:
            rows.append([c.case_id, f"{c.dsc:.3f}", f"{c.sensitivity:.3f}", f"{c.precision:.3f}",
                         *(str(getattr(c, k)) for k in ("tp_s", "fp_s", "fn_s", "tp_d", "fp_d", "fn_d"))])
        rows.append(["mean (std)", *(self.formatted(m) for m in METRICS), "", "", "", "", "", ""])
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows)


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def report_from_masks(pairs, connectivity=26, min_overlap=0.0, label=""):
    """Report from ``(case_id, gt, seg)`` triples."""
    return MetricsReport([CaseMetrics.from_masks(cid, gt, seg, connectivity, min_overlap)
                          for cid, gt, seg in pairs], label)


def evaluate(cascade, cases, reference="expert", store=None, connectivity=None, min_overlap=0.0):
    """Segment each case with ``cascade`` and score it against a reference.

    ``reference`` is ``"expert"`` (the case's lesion mask), another cascade
    whose segmentations serve as silver masks, or a mapping from case id to
    mask.
    """
    from .cascade import CascadeModel, segment

    connectivity = cascade.post.connectivity if connectivity is None else connectivity
    pairs = []
    for case in cases:
        if isinstance(reference, str):
            if reference != "expert":
                raise ValueError(f"unknown reference {reference!r}")
            if case.lesion_mask is None:
                raise ValueError(f"case {case.id} has no expert lesion mask")
            ref = case.lesion_mask.data
        elif isinstance(reference, CascadeModel):
            ref = segment(reference, case, store).data
        else:
            if case.id not in reference:
                raise ValueError(f"no reference mask for case {case.id}")
            ref = _array(reference[case.id])
        pairs.append((case.id, ref, segment(cascade, case, store).data))
    label = reference if isinstance(reference, str) else "silver"
    return report_from_masks(pairs, connectivity, min_overlap, label)
