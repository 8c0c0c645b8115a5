"""Synthetic two-modality brain phantoms with ellipsoidal lesions.

A phantom is an ellipsoidal brain: a white-matter core, a grey-matter shell
and lesions placed inside the white matter. A :class:`DomainSpec` decides how
each tissue looks in each modality, so the same anatomy can be rendered in a
source domain and a shifted domain (same seed gives identical ground truth).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume_io import Volume, make_case

TISSUES = ("wm", "gm", "lesion")
MODALITIES = ("flair", "t1")
_WM, _GM, _LESION = 1, 2, 3


class PlacementError(RuntimeError):
    """Lesions could not be placed within the retry budget."""


@dataclass(frozen=True)
class DomainSpec:
    """Tissue appearance, noise and global intensity remap of one domain.

    ``means`` and ``stds`` map ``(tissue, modality)`` to the tissue mean and
    the per-voxel texture spread; ``gain``/``offset`` map modality to the
    affine transform applied last.
    """

    id: str
    means: dict
    stds: dict = field(default_factory=dict)
    gain: dict = field(default_factory=lambda: {"flair": 1.0, "t1": 1.0})
    offset: dict = field(default_factory=lambda: {"flair": 0.0, "t1": 0.0})
    noise_std: float = 0.05
    smoothing: float = 0.0

    def __post_init__(self):
        for t in TISSUES:
            for m in MODALITIES:
                if (t, m) not in self.means:
                    raise ValueError(f"domain {self.id}: missing mean for {t}/{m}")
        if any(self.gain.get(m, 1.0) <= 0 for m in MODALITIES):
            raise ValueError(f"domain {self.id}: gains must be positive")
        if self.noise_std < 0 or self.smoothing < 0:
            raise ValueError(f"domain {self.id}: noise and smoothing must be non-negative")
        flair = self.means[("lesion", "flair")] > max(self.means[("wm", "flair")], self.means[("gm", "flair")])
        t1 = self.means[("lesion", "t1")] < min(self.means[("wm", "t1")], self.means[("gm", "t1")])
        if not (flair and t1):
            raise ValueError(f"domain {self.id}: lesions must be FLAIR-hyperintense and T1-hypointense")


def _means(**kw):
    return {(t, m): kw[f"{t}_{m}"] for t in TISSUES for m in MODALITIES}


def source_domain():
    return DomainSpec("source", _means(wm_flair=1.0, gm_flair=1.4, lesion_flair=2.6,
                                       wm_t1=1.0, gm_t1=0.7, lesion_t1=0.45),
                      noise_std=0.08)


def shifted_domain():
    """Lower lesion contrast, brighter grey matter on FLAIR, noisier, rescaled."""
    return DomainSpec("shifted", _means(wm_flair=1.0, gm_flair=1.55, lesion_flair=1.85,
                                        wm_t1=1.0, gm_t1=0.8, lesion_t1=0.7),
                      gain={"flair": 180.0, "t1": 0.6}, offset={"flair": 40.0, "t1": 0.1},
                      noise_std=0.1)


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = (64, 64, 64)
    # Brain ellipsoid semi-axes in voxels; None means 40% of each extent.
    brain_radii: tuple | None = None
    gm_thickness: float = 2.0
    lesion_count: tuple = (1, 12)
    lesion_radius: tuple = (1.5, 4.0)
    # Total lesion volume range in ml at the given spacing.
    lesion_volume_ml: tuple = (0.5, 18.0)
    spacing: tuple = (1.0, 1.0, 1.0)
    # Smallest single lesion; the default matches the postprocessing l_min so
    # every lesion can survive component filtering.
    min_lesion_voxels: int = 10
    max_retries: int = 200

    def __post_init__(self):
        lo, hi = self.lesion_count
        if not 0 <= lo <= hi:
            raise ValueError(f"bad lesion count range {self.lesion_count}")
        if not 0 < self.lesion_radius[0] <= self.lesion_radius[1]:
            raise ValueError(f"bad lesion radius range {self.lesion_radius}")
        if not 0 <= self.lesion_volume_ml[0] <= self.lesion_volume_ml[1]:
            raise ValueError(f"bad lesion volume range {self.lesion_volume_ml}")
        if self.min_lesion_voxels < 1:
            raise ValueError(f"min_lesion_voxels must be >= 1, got {self.min_lesion_voxels}")

    @property
    def radii(self):
        return tuple(self.brain_radii or (0.4 * s for s in self.shape))

    @property
    def voxel_ml(self):
        return float(np.prod(self.spacing)) / 1000.0


def small_phantom_spec():
    """16^3 phantoms with a few small lesions; sized for quick CPU experiments."""
    return PhantomSpec(shape=(16, 16, 16), brain_radii=(6.5, 5.5, 5.5), gm_thickness=1.2,
                       lesion_count=(1, 2), lesion_radius=(1.5, 2.3),
                       lesion_volume_ml=(0.02, 0.06))


def _ellipsoid(grid, center, radii):
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def _anatomy(spec, rng):
    """Tissue label map with lesions; deterministic in ``rng``."""
    grid = np.indices(spec.shape, dtype=np.float64)
    center = [(s - 1) / 2 for s in spec.shape]
    radii = spec.radii
    brain = _ellipsoid(grid, center, radii)
    wm = _ellipsoid(grid, center, [r - spec.gm_thickness for r in radii])
    labels = np.where(brain, _GM, 0).astype(np.uint8)
    labels[wm] = _WM
    n = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    if n == 0:
        return labels
    lo, hi = spec.lesion_volume_ml
    for _ in range(spec.max_retries):
        target = rng.uniform(lo, hi) / spec.voxel_ml
        lesion = np.zeros(spec.shape, bool)
        # Lesions keep one voxel of white matter between each other and the cortex.
        free = ndimage.binary_erosion(wm, np.ones((3, 3, 3)))
        r_mean = np.clip((3 * target / n / (4 * np.pi)) ** (1 / 3), *spec.lesion_radius)
        candidates = np.argwhere(free)
        placed = 0
        for _ in range(spec.max_retries):
            if placed == n or not len(candidates):
                break
            r = np.clip(r_mean * rng.uniform(0.8, 1.25, 3), *spec.lesion_radius)
            c = candidates[rng.integers(len(candidates))] + rng.uniform(-0.5, 0.5, 3)
            blob = _ellipsoid(grid, c, r)
            if blob.sum() >= spec.min_lesion_voxels and not np.any(blob & ~free):
                lesion |= blob
                free &= ~ndimage.binary_dilation(blob, np.ones((3, 3, 3)))
                placed += 1
        if placed == n and lo <= lesion.sum() * spec.voxel_ml <= hi:
            labels[lesion] = _LESION
            return labels
    raise PlacementError(f"could not place {n} lesions totalling {lo}-{hi} ml "
                         f"after {spec.max_retries} attempts")


def _render(labels, domain, rng):
    brain = labels > 0
    out = []
    for m in MODALITIES:
        img = np.zeros(labels.shape)
        for code, t in ((_WM, "wm"), (_GM, "gm"), (_LESION, "lesion")):
            sel = labels == code
            img[sel] = domain.means[(t, m)]
            spread = domain.stds.get((t, m), 0.0)
            if spread:
                img[sel] += rng.normal(0, spread, sel.sum())
        if domain.smoothing:
            img = ndimage.gaussian_filter(img, domain.smoothing) * brain
        img[brain] += rng.normal(0, domain.noise_std, brain.sum())
        # Skull-stripped convention: the background stays at zero.
        img[brain] = domain.gain.get(m, 1.0) * img[brain] + domain.offset.get(m, 0.0)
        out.append(img.astype(np.float32))
    return out


def generate_case(phantom, domain, seed, case_id=None, return_raw=False):
    """One normalized phantom :class:`~mslesion.volume_io.Case`.

    Anatomy depends only on ``seed`` and ``phantom``; noise also depends on the
    domain id, so a paired source/target case shares its ground truth.
    """
    labels = _anatomy(phantom, np.random.default_rng([int(seed), 0]))
    tag = int.from_bytes(hashlib.sha256(domain.id.encode()).digest()[:4], "little")
    noise_rng = np.random.default_rng([int(seed), 1, tag])
    flair, t1 = _render(labels, domain, noise_rng)
    vols = [Volume(v, phantom.spacing) for v in (flair, t1, labels == _LESION, labels > 0)]
    case = make_case(case_id or f"{domain.id}-{seed}", vols[0], vols[1], vols[2], vols[3])
    case.meta.update(seed=int(seed), domain=domain.id)
    return (case, (vols[0], vols[1])) if return_raw else case


def derive_seeds(master_seed, n):
    ss = np.random.SeedSequence(int(master_seed))
    return [int(c.generate_state(1)[0]) for c in ss.spawn(n)]


def generate_domain_set(phantom, domain, n_cases, master_seed, prefix=None):
    """``n_cases`` independent phantoms with per-case seeds derived from ``master_seed``."""
    prefix = prefix or domain.id
    return [generate_case(phantom, domain, s, f"{prefix}-{i:03d}")
            for i, s in enumerate(derive_seeds(master_seed, n_cases))]


def threshold_oracle_dsc(case):
    """Best DSC reachable by thresholding the normalized FLAIR inside the brain."""
    brain = case.brain_mask.data
    values = case.flair.data[brain]
    truth = case.lesion_mask.data[brain]
    n_true = int(truth.sum())
    if n_true == 0:
        return 1.0
    order = np.argsort(-values, kind="stable")
    tp = np.cumsum(truth[order])
    k = np.arange(1, len(values) + 1)
    # Only cut between distinct values.
    last = np.r_[values[order][1:] != values[order][:-1], True]
    dsc = 2 * tp[last] / (k[last] + n_true)
    return float(dsc.max())
