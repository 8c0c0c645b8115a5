"""Balanced patch datasets for the two cascade stages.

Positives are every lesion voxel of the source cases. Negatives are drawn
uniformly without replacement from a pool of candidate centres: random
brain voxels for stage 1, stage-1 false positives for stage 2 (topped up
with random brain voxels when there are too few). Training negatives are
redrawn from the same pool every ``period`` epochs; positives and the
validation split never change.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .network import PATCH_SIZE, predict

HALF = PATCH_SIZE // 2

LESION, RANDOM_NEGATIVE, FP_NEGATIVE = 0, 1, 2
SOURCE_NAMES = {LESION: "lesion", RANDOM_NEGATIVE: "random-negative", FP_NEGATIVE: "fp-negative"}

# Patches extracted per scoring batch; the network chunks further internally.
SCORE_BATCH = 8192


class SamplingError(ValueError):
    pass


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _padded(case):
    vol = np.stack([case.flair.data, case.t1.data]).astype(np.float32, copy=False)
    return np.pad(vol, ((0, 0),) + ((HALF, HALF),) * 3)


def extract_patches(case, centers, padded=None):
    """Patches ``(n, 2, 11, 11, 11)`` (FLAIR, T1) around integer ``centers`` ``(n, 3)``.

    Windows reaching outside the volume are zero-padded.
    """
    centers = np.asarray(centers, dtype=np.intp).reshape(-1, 3)
    if len(centers) and (np.any(centers < 0) or np.any(centers >= np.array(case.shape))):
        bad = centers[np.any((centers < 0) | (centers >= np.array(case.shape)), axis=1)][0]
        raise IndexError(f"patch centre {tuple(bad)} lies outside volume of shape {case.shape}")
    vp = _padded(case) if padded is None else padded
    win = sliding_window_view(vp, (PATCH_SIZE,) * 3, axis=(1, 2, 3))
    out = win[:, centers[:, 0], centers[:, 1], centers[:, 2]]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))


def extract_patch(case, center):
    return extract_patches(case, [center])[0]


def score_voxels(model, case, centers, batch=SCORE_BATCH):
    """Lesion probability of ``model`` at each centre, extracting in batches."""
    centers = np.asarray(centers, dtype=np.intp).reshape(-1, 3)
    probs = np.zeros(len(centers), dtype=np.float32)
    if not len(centers):
        return probs
    vp = _padded(case)
    for s in range(0, len(centers), batch):
        probs[s:s + batch] = predict(model, extract_patches(case, centers[s:s + batch], vp))
    return probs


def brain_voxels(case):
    return np.argwhere(case.brain_mask.data)


@dataclass
class PatchDataset:
    """Patches with labels, provenance, optional validation split and the
    negative pool used for resampling."""

    patches: np.ndarray
    labels: np.ndarray
    case_index: np.ndarray
    centers: np.ndarray
    source: np.ndarray
    case_ids: list
    seed: int
    pool_case: np.ndarray
    pool_centers: np.ndarray
    pool_source: np.ndarray
    is_val: np.ndarray | None = None
    cases: list = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.labels)

    @property
    def n_positive(self):
        return int((self.labels == 1).sum())

    @property
    def n_negative(self):
        return int((self.labels == 0).sum())

    def provenance(self):
        """Per-patch ``(case id, centre, source)`` tuples."""
        return [(self.case_ids[c], tuple(int(v) for v in p), SOURCE_NAMES[int(s)])
                for c, p, s in zip(self.case_index, self.centers, self.source)]

    def subset(self, idx):
        return replace(self, patches=self.patches[idx], labels=self.labels[idx],
                       case_index=self.case_index[idx], centers=self.centers[idx],
                       source=self.source[idx],
                       is_val=None if self.is_val is None else self.is_val[idx])


def _draw_negatives(pool_case, pool_centers, pool_source, k, rng):
    """Indices into the pool: fp-negatives first, random brain voxels as fallback."""
    primary = np.flatnonzero(pool_source == FP_NEGATIVE)
    fallback = np.flatnonzero(pool_source == RANDOM_NEGATIVE)
    if len(primary) >= k:
        return np.sort(rng.choice(primary, size=k, replace=False))
    need = k - len(primary)
    if len(fallback) < need:
        raise SamplingError(f"need {k} negatives but the pool holds only {len(primary) + len(fallback)}")
    return np.sort(np.concatenate([primary, rng.choice(fallback, size=need, replace=False)]))


def _gather(cases, case_idx, centers):
    patches = np.empty((len(centers), 2) + (PATCH_SIZE,) * 3, dtype=np.float32)
    for ci in np.unique(case_idx):
        sel = np.flatnonzero(case_idx == ci)
        patches[sel] = extract_patches(cases[ci], centers[sel])
    return patches


def _build(cases, pool_case, pool_centers, pool_source, seed):
    pos_case, pos_centers = [], []
    for ci, case in enumerate(cases):
        if case.lesion_mask is None:
            raise SamplingError(f"case {case.id} has no lesion mask")
        pts = np.argwhere(case.lesion_mask.data)
        pos_case.append(np.full(len(pts), ci))
        pos_centers.append(pts)
    pos_case = np.concatenate(pos_case) if pos_case else np.zeros(0, int)
    pos_centers = np.concatenate(pos_centers) if pos_centers else np.zeros((0, 3), int)
    n_pos = len(pos_case)
    if n_pos == 0:
        raise SamplingError("no lesion voxels in the training cases")
    sel = _draw_negatives(pool_case, pool_centers, pool_source, n_pos, _rng(seed, 0))
    case_idx = np.concatenate([pos_case, pool_case[sel]])
    centers = np.concatenate([pos_centers, pool_centers[sel]]).astype(np.int32)
    source = np.concatenate([np.full(n_pos, LESION), pool_source[sel]]).astype(np.int8)
    labels = np.concatenate([np.ones(n_pos), np.zeros(n_pos)]).astype(np.int8)
    return PatchDataset(_gather(cases, case_idx, centers), labels, case_idx, centers, source,
                        [c.id for c in cases], int(seed), pool_case, pool_centers, pool_source,
                        cases=list(cases))


def _negative_pool(cases, fp_maps=None):
    pc, pp, ps = [], [], []
    for ci, case in enumerate(cases):
        if case.lesion_mask is None:
            raise SamplingError(f"case {case.id} has no lesion mask")
        normal = case.brain_mask.data & ~case.lesion_mask.data
        pts = np.argwhere(normal)
        src = np.full(len(pts), RANDOM_NEGATIVE, dtype=np.int8)
        if fp_maps is not None:
            src[fp_maps[ci][normal]] = FP_NEGATIVE
        pc.append(np.full(len(pts), ci))
        pp.append(pts)
        ps.append(src)
    return np.concatenate(pc), np.concatenate(pp).astype(np.int32), np.concatenate(ps)


def build_stage1_dataset(cases, seed):
    """All lesion voxels plus as many uniformly drawn normal brain voxels."""
    if not cases:
        raise SamplingError("no cases given")
    return _build(cases, *_negative_pool(cases), seed)


def false_positive_maps(cases, stage1_model, threshold=0.5):
    """Boolean maps of non-lesion brain voxels the stage-1 model scores >= ``threshold``."""
    maps = []
    for case in cases:
        fp = np.zeros(case.shape, dtype=bool)
        pts = np.argwhere(case.brain_mask.data & ~case.lesion_mask.data)
        fp[tuple(pts.T)] = score_voxels(stage1_model, case, pts) >= threshold
        maps.append(fp)
    return maps


def build_stage2_dataset(cases, stage1_model, seed, threshold=0.5, fp_maps=None):
    """All lesion voxels plus negatives drawn from the stage-1 false positives.

    When there are fewer false positives than lesion voxels the remainder is
    drawn from the other normal brain voxels.
    """
    if not cases:
        raise SamplingError("no cases given")
    if fp_maps is None:
        fp_maps = false_positive_maps(cases, stage1_model, threshold)
    return _build(cases, *_negative_pool(cases, fp_maps), seed)


def resample_negatives(dataset, cases=None, epoch=0, period=10):
    """Redraw the training negatives at epochs divisible by ``period`` (not epoch 0)."""
    if epoch == 0 or not period or epoch % period:
        return dataset
    cases = dataset.cases if cases is None else cases
    is_val = np.zeros(len(dataset), bool) if dataset.is_val is None else dataset.is_val
    train_neg = np.flatnonzero((dataset.labels == 0) & ~is_val)
    val_neg = np.flatnonzero((dataset.labels == 0) & is_val)
    keep = np.ones(len(dataset.pool_case), bool)
    if len(val_neg):
        # Validation centres stay out of the redraw.
        taken = {(int(c), *map(int, p)) for c, p in zip(dataset.case_index[val_neg], dataset.centers[val_neg])}
        keep = np.array([(int(c), *map(int, p)) not in taken
                         for c, p in zip(dataset.pool_case, dataset.pool_centers)], dtype=bool)
    idx = np.flatnonzero(keep)
    sel = idx[_draw_negatives(dataset.pool_case[idx], dataset.pool_centers[idx],
                              dataset.pool_source[idx], len(train_neg), _rng(dataset.seed, epoch, 1))]
    out = dataset.subset(np.arange(len(dataset)))
    out.case_index[train_neg] = dataset.pool_case[sel]
    out.centers[train_neg] = dataset.pool_centers[sel]
    out.source[train_neg] = dataset.pool_source[sel]
    out.patches[train_neg] = _gather(cases, dataset.pool_case[sel], dataset.pool_centers[sel])
    return out


def split_validation(dataset, fraction=0.25, seed=0):
    """Stratified per-class validation split."""
    if not 0 < fraction < 1:
        raise ValueError(f"validation fraction must be in (0, 1), got {fraction}")
    if len(dataset) < 8:
        raise SamplingError(f"dataset of {len(dataset)} patches is too small to split")
    rng = _rng(seed, 2)
    is_val = np.zeros(len(dataset), bool)
    for label in (0, 1):
        idx = np.flatnonzero(dataset.labels == label)
        n_val = int(round(fraction * len(idx)))
        is_val[rng.permutation(idx)[:n_val]] = True
    return replace(dataset, is_val=is_val)
