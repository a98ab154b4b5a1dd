"""Detector-aware descriptor augmentation.

One ``AugmentorBranch`` exists per (detector, descriptor) pair.  Branches that
share a descriptor are trained together so that augmented descriptors from
different detectors become mutually retrievable, measured by the
cross-detector average precision (CDAP).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .diffcore import (AftLayer, AftLayerSpec, LrSchedule, Mlp, MlpSpec, NonFiniteError,
                       OptimizerState, adamw, l2_normalize, lr_at, make_generator, optimizer_step)
from .diffcore import grad as compute_grad
from .features import AlgorithmId, CorrespondenceSet, FeatureSet, normalize_keypoints

log = logging.getLogger(__name__)

KEYPT_SIZES = (32, 64, 128)
DESC_HIDDEN = 256
BOOST_EPS = 1e-6
DISTANCE_EPS = 1e-12

# attention-free layers per descriptor style
AFT_LAYERS = {"sift": 4, "superpoint": 9}


class AlgorithmMismatchError(ValueError):
    pass


class NoValidFeaturesError(ValueError):
    pass


class NoPositivesError(ValueError):
    pass


class AugmentorBranch(nn.Module):
    def __init__(self, algorithm: AlgorithmId, num_layers: int = 4, seed: int = 0):
        super().__init__()
        n = algorithm.descriptor_dim
        gen = make_generator(seed)
        self.algorithm = algorithm
        self.mlp_keypt = Mlp(MlpSpec(5, KEYPT_SIZES + (n, n)), gen)
        self.mlp_desc = Mlp(MlpSpec(n, (DESC_HIDDEN, n)), gen)
        self.aft = nn.ModuleList(AftLayer(AftLayerSpec(n), gen) for _ in range(num_layers))

    @property
    def prefix(self) -> str:
        return f"augm/{self.algorithm.detector}/{self.algorithm.descriptor}/"

    def encode(self, keypoints: torch.Tensor, descriptors: torch.Tensor) -> torch.Tensor:
        n = self.algorithm.descriptor_dim
        if descriptors.shape[-1] != n or keypoints.shape[-1] != 5:
            raise ValueError(f"expected (K, 5) keypoints and (K, {n}) descriptors, "
                             f"got {tuple(keypoints.shape)} and {tuple(descriptors.shape)}")
        return self.mlp_keypt(keypoints) + self.mlp_desc(descriptors)

    def forward(self, keypoints: torch.Tensor, descriptors: torch.Tensor) -> torch.Tensor:
        x = self.encode(keypoints, descriptors)
        for layer in self.aft:
            x = layer(x)
        return l2_normalize(x)

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {self.prefix + k: v for k, v in self.state_dict().items()}

    def load_named_tensors(self, tensors: Mapping[str, torch.Tensor]) -> None:
        own = {k[len(self.prefix):]: v for k, v in tensors.items() if k.startswith(self.prefix)}
        self.load_state_dict(own)


def make_branch(algorithm: AlgorithmId, style: str = "sift", seed: int = 0,
                num_layers: Optional[int] = None) -> AugmentorBranch:
    return AugmentorBranch(algorithm, AFT_LAYERS[style] if num_layers is None else num_layers, seed)


def _dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def set_tensors(fs: FeatureSet, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Normalized keypoints and raw descriptors of a set, as tensors."""
    norm = fs if fs.normalized else normalize_keypoints(fs)
    return (torch.from_numpy(norm.keypoints).to(dtype),
            torch.from_numpy(fs.descriptors).to(dtype))


def encode_feature(branch: AugmentorBranch, keypoint, descriptor) -> np.ndarray:
    dt = _dtype(branch)
    k = torch.as_tensor(np.asarray(keypoint, dtype=np.float64), dtype=dt).reshape(1, -1)
    d = torch.as_tensor(np.asarray(descriptor, dtype=np.float64), dtype=dt).reshape(1, -1)
    with torch.no_grad():
        return branch.encode(k, d)[0].numpy()


@torch.no_grad()
def augment_set(branch: AugmentorBranch, fs: FeatureSet) -> FeatureSet:
    if fs.algorithm != branch.algorithm:
        raise AlgorithmMismatchError(f"branch for {branch.algorithm.label} cannot augment {fs.algorithm.label}")
    if len(fs) == 0:
        return fs.replace_descriptors(fs.descriptors)
    kp, desc = set_tensors(fs, _dtype(branch))
    out = branch(kp, desc).to(torch.float32).numpy()
    return fs.replace_descriptors(out)


# ---------------------------------------------------------------------------
# average precision


def exact_ap(query, candidates, positive_indices) -> float:
    """AP of a Euclidean ranking; ties go to the lower candidate index."""
    pos = np.unique(np.asarray(positive_indices, dtype=np.int64))
    if pos.size == 0:
        raise NoPositivesError("average precision needs at least one positive")
    q = np.asarray(query, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    dist = np.linalg.norm(c - q, axis=1)
    order = np.argsort(dist, kind="stable")
    is_pos = np.zeros(len(c), dtype=bool)
    is_pos[pos] = True
    hits = is_pos[order]
    ranks = np.nonzero(hits)[0] + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def pairwise_distances(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    sq = (a * a).sum(-1, keepdim=True) + (b * b).sum(-1)[None, :] - 2.0 * a @ b.T
    return torch.sqrt(torch.clamp_min(sq, 0.0) + DISTANCE_EPS)


def fast_ap_from_distances(dist: torch.Tensor, positive: torch.Tensor, bins: int = 10) -> torch.Tensor:
    """Histogram-binned AP surrogate for each row of a distance matrix.

    ``dist`` is (Q, N) with values in [0, 2]; ``positive`` is a (Q, N) 0/1
    mask.  Distances are soft-assigned to ``bins`` equally spaced centers with
    triangular kernels; per-bin precision is weighted by per-bin recall.
    """
    if bins < 2:
        raise ValueError("FastAP needs at least two bins")
    positive = positive.to(dist.dtype)
    n_pos = positive.sum(dim=1)
    if bool((n_pos <= 0).any()):
        raise NoPositivesError("every query row needs at least one positive")
    delta = 2.0 / (bins - 1)
    centers = torch.linspace(0.0, 2.0, bins, dtype=dist.dtype)
    d = torch.clamp(dist, 0.0, 2.0)
    pulse = torch.clamp_min(1.0 - torch.abs(d[..., None] - centers) / delta, 0.0)  # (Q, N, B)
    h_pos = (pulse * positive[..., None]).sum(dim=1)
    h_all = pulse.sum(dim=1)
    cum_pos = torch.cumsum(h_pos, dim=1)
    cum_all = torch.cumsum(h_all, dim=1)
    safe = cum_all > 0
    ratio = torch.where(safe, h_pos * cum_pos / torch.where(safe, cum_all, torch.ones_like(cum_all)),
                        torch.zeros_like(cum_all))
    return ratio.sum(dim=1) / n_pos


def fast_ap(query, candidates, positive_indices, bins: int = 10) -> torch.Tensor:
    q = torch.as_tensor(query)
    c = torch.as_tensor(candidates, dtype=q.dtype)
    pos = torch.zeros(1, c.shape[0], dtype=q.dtype)
    idx = torch.as_tensor(np.asarray(positive_indices, dtype=np.int64))
    if idx.numel() == 0:
        raise NoPositivesError("average precision needs at least one positive")
    pos[0, idx] = 1.0
    return fast_ap_from_distances(pairwise_distances(q.reshape(1, -1), c), pos, bins)[0]


def _cross_ap(queries: torch.Tensor, candidates: torch.Tensor, gt: CorrespondenceSet,
              bins: int) -> tuple[torch.Tensor, torch.Tensor]:
    """FastAP of every query row that has a ground-truth partner among ``candidates``."""
    rows = torch.as_tensor(gt.pairs[:, 0])
    cols = torch.as_tensor(gt.pairs[:, 1])
    if len(rows) == 0:
        return rows, queries.new_zeros(0)
    dist = pairwise_distances(queries[rows], candidates)
    pos = torch.zeros_like(dist)
    pos[torch.arange(len(rows)), cols] = 1.0
    return rows, fast_ap_from_distances(dist, pos, bins)


def cdap_all(query_desc: torch.Tensor, other_view: Mapping[str, torch.Tensor],
             gts: Mapping[str, CorrespondenceSet], bins: int) -> tuple[torch.Tensor, torch.Tensor]:
    """CDAP for every feature of one set against the other view's per-detector sets.

    Returns ``(cdap, valid)``; features without any partner have ``valid`` False.
    """
    k = query_desc.shape[0]
    total = query_desc.new_zeros(k)
    count = query_desc.new_zeros(k)
    for det, cand in other_view.items():
        rows, ap = _cross_ap(query_desc, cand, gts[det], bins)
        if len(rows):
            total = total.index_add(0, rows, ap)
            count = count.index_add(0, rows, torch.ones_like(ap))
    valid = count > 0
    return total / torch.clamp_min(count, 1.0), valid


def cdap(feature_index: int, own_set, other_view_sets: Mapping[str, object],
         gt: Mapping[str, CorrespondenceSet], bins: int = 10) -> Optional[torch.Tensor]:
    """CDAP of a single feature; ``None`` when it has no partner in any detector's set.

    ``own_set`` and the values of ``other_view_sets`` are descriptor matrices
    (tensors, arrays or ``FeatureSet``) already augmented.
    """
    def as_tensor(x):
        if isinstance(x, FeatureSet):
            x = x.descriptors
        return torch.as_tensor(x)

    own = as_tensor(own_set)
    q = own[feature_index:feature_index + 1]
    aps = []
    for det, cand in other_view_sets.items():
        pairs = gt[det].pairs
        hit = pairs[pairs[:, 0] == feature_index]
        if len(hit):
            c = as_tensor(cand).to(q.dtype)
            aps.append(fast_ap(q[0], c, [int(hit[0, 1])], bins))
    if not aps:
        return None
    return torch.stack(aps).mean()


# ---------------------------------------------------------------------------
# training data and loss


@dataclass
class AugmentPair:
    """One image pair: per view, one feature set per detector (shared descriptor)."""
    views: tuple[dict[str, FeatureSet], dict[str, FeatureSet]]
    gt: dict[tuple[str, str], CorrespondenceSet]  # (detector in view 0, detector in view 1)

    def gt_between(self, view: int, det: str, other_det: str) -> CorrespondenceSet:
        if view == 0:
            return self.gt[(det, other_det)]
        return self.gt[(other_det, det)].transposed()


@dataclass
class AugmentTrainBatch:
    pairs: list[AugmentPair]


@dataclass
class AugmentLossBreakdown:
    l_cd: torch.Tensor
    l_boost: torch.Tensor
    lam: float
    total: torch.Tensor
    num_valid: int

    def as_floats(self) -> dict[str, float]:
        return {"l_cd": self.l_cd.item(), "l_boost": self.l_boost.item(), "total": self.total.item()}


def boost_terms(cdap_aug: torch.Tensor, cdap_orig: torch.Tensor) -> torch.Tensor:
    """Per-feature penalty for augmented descriptors retrieving worse than the originals."""
    # equals max(0, 1 - aug / max(orig, eps)) except that it is exactly zero whenever aug >= orig
    return torch.clamp_min(cdap_orig - cdap_aug, 0.0) / torch.clamp_min(cdap_orig, BOOST_EPS)


def combine_losses(per_detector_aug: Mapping[str, torch.Tensor], per_detector_orig: Mapping[str, torch.Tensor],
                   lam: float) -> AugmentLossBreakdown:
    """Assemble the loss from per-detector CDAP vectors of valid features."""
    dets = [d for d in per_detector_aug if per_detector_aug[d].numel()]
    if not dets:
        raise NoValidFeaturesError("batch contains no feature with a cross-detector positive")
    l_cd = sum(1.0 - per_detector_aug[d].mean() for d in dets)
    boosts = torch.cat([boost_terms(per_detector_aug[d], per_detector_orig[d]) for d in dets])
    l_boost = boosts.mean()
    n = sum(int(per_detector_aug[d].numel()) for d in dets)
    return AugmentLossBreakdown(l_cd, l_boost, lam, l_cd + lam * l_boost, n)


class _PairCache:
    """Per-pair tensors and original-descriptor CDAP, which never change during training."""

    def __init__(self, pair: AugmentPair, bins: int, dtype):
        self.pair = pair
        self.inputs = [{d: set_tensors(fs, dtype) for d, fs in view.items()} for view in pair.views]
        self.orig = {}
        with torch.no_grad():
            raw = [{d: l2_normalize(t[1]) if len(t[1]) else t[1] for d, t in view.items()}
                   for view in self.inputs]
            for v in (0, 1):
                for det in pair.views[v]:
                    self.orig[(v, det)] = self._cdap(raw, v, det, bins)

    def _cdap(self, descs, v: int, det: str, bins: int):
        gts = {other: self.pair.gt_between(v, det, other) for other in self.pair.views[1 - v]}
        return cdap_all(descs[v][det], descs[1 - v], gts, bins)


def augmentation_loss(batch: AugmentTrainBatch | Sequence, branches: Mapping[str, AugmentorBranch],
                      lam: float = 10.0, bins: int = 10, _caches=None) -> AugmentLossBreakdown:
    dtype = _dtype(next(iter(branches.values())))
    if _caches is None:
        pairs = batch.pairs if isinstance(batch, AugmentTrainBatch) else list(batch)
        _caches = [_PairCache(p, bins, dtype) for p in pairs]
    caches = _caches
    aug_by_det: dict[str, list] = {d: [] for d in branches}
    orig_by_det: dict[str, list] = {d: [] for d in branches}
    for cache in caches:
        augmented = [{}, {}]
        for v in (0, 1):
            for det, (kp, desc) in cache.inputs[v].items():
                if det not in branches:
                    raise AlgorithmMismatchError(f"no branch for detector {det!r}")
                augmented[v][det] = branches[det](kp, desc) if len(kp) else desc
        for v in (0, 1):
            for det in cache.pair.views[v]:
                values, valid = cache._cdap(augmented, v, det, bins)
                orig_values, orig_valid = cache.orig[(v, det)]
                aug_by_det[det].append(values[valid])
                orig_by_det[det].append(orig_values[valid])
    aug = {d: torch.cat(v) if v else torch.zeros(0, dtype=dtype) for d, v in aug_by_det.items()}
    orig = {d: torch.cat(v) if v else torch.zeros(0, dtype=dtype) for d, v in orig_by_det.items()}
    return combine_losses(aug, orig, lam)


@dataclass
class AugmentTrainConfig:
    epochs: int = 23
    batch_size: int = 16
    lam: float = 10.0
    bins: int = 10
    seed: int = 0
    peak_lr: float = 1e-4
    warmup_steps: int = 500
    weight_decay: float = 0.01


@dataclass
class TrainResult:
    modules: dict
    history: list[dict] = field(default_factory=list)  # one row per optimizer step
    validation: list[dict] = field(default_factory=list)  # one row per epoch, epoch 0 = before training
    optimizer: Optional[OptimizerState] = None
    epochs_done: int = 0


def steps_per_epoch(num_items: int, batch_size: int) -> int:
    return max(1, math.ceil(num_items / batch_size))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _all_params(branches: Mapping[str, nn.Module]) -> dict[str, torch.Tensor]:
    return {f"{det}/{name}": p for det, b in branches.items() for name, p in b.named_parameters()}


@torch.no_grad()
def evaluate_augmentation(branches, caches, lam: float, bins: int) -> dict[str, float]:
    loss = augmentation_loss(None, branches, lam, bins, _caches=caches)
    return loss.as_floats()


def train_augmentor(branches: dict[str, AugmentorBranch], train: Sequence[AugmentPair],
                    val: Sequence[AugmentPair], config: AugmentTrainConfig,
                    resume: Optional[TrainResult] = None, stop_after_epochs: Optional[int] = None,
                    on_epoch_end: Optional[Callable[[TrainResult], None]] = None) -> TrainResult:
    """Train all detector branches of one descriptor jointly with AdamW and warmup-cosine."""
    dtype = _dtype(next(iter(branches.values())))
    train_caches = [_PairCache(p, config.bins, dtype) for p in train]
    val_caches = [_PairCache(p, config.bins, dtype) for p in val] if val else []
    per_epoch = steps_per_epoch(len(train), config.batch_size)
    total = per_epoch * config.epochs
    schedule = LrSchedule(config.peak_lr, total, max(1, min(config.warmup_steps, total - 1))) if total > 1 else None
    params = _all_params(branches)

    if resume is None:
        result = TrainResult(branches, optimizer=adamw(config.peak_lr, config.weight_decay))
        if val_caches:
            result.validation.append({"epoch": 0, **evaluate_augmentation(branches, val_caches, config.lam, config.bins)})
    else:
        result = resume
        result.modules = branches
    opt = result.optimizer
    last_epoch = config.epochs if stop_after_epochs is None else min(config.epochs, stop_after_epochs)

    for epoch in range(result.epochs_done + 1, last_epoch + 1):
        for b in branches.values():
            b.train()
        order = epoch_order(config.seed, epoch, len(train_caches))
        for s in range(per_epoch):
            chunk = [train_caches[i] for i in order[s * config.batch_size:(s + 1) * config.batch_size]]
            step = opt.step
            lr = config.peak_lr if schedule is None else lr_at(schedule, step + 1)
            holder = {}

            def loss_fn():
                holder["loss"] = augmentation_loss(None, branches, config.lam, config.bins, _caches=chunk)
                return holder["loss"].total

            try:
                grads = compute_grad(loss_fn, params)
            except NonFiniteError as exc:
                raise NonFiniteError(f"augmentation training diverged at step {step}: {exc}") from exc
            optimizer_step(opt, params, grads, lr)
            result.history.append({"step": step, "epoch": epoch, "lr": lr, **holder["loss"].as_floats()})
        result.epochs_done = epoch
        if val_caches:
            row = {"epoch": epoch, **evaluate_augmentation(branches, val_caches, config.lam, config.bins)}
            result.validation.append(row)
            log.info("augment epoch %d val %s", epoch, row)
        if on_epoch_end is not None:
            on_epoch_end(result)
    return result
