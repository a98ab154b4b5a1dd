"""Cross-algorithm descriptor translation through a shared embedding space.

Every descriptor algorithm owns an encoder into the embedding and a decoder
back out of it.  Chaining one algorithm's encoder with another's decoder
translates descriptors directly between the two spaces.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .augment import DISTANCE_EPS, TrainResult, epoch_order, pairwise_distances, steps_per_epoch
from .diffcore import (Mlp, MlpSpec, NonFiniteError, OptimizerState, adam, l2_normalize,
                       make_generator, optimizer_step)
from .diffcore import grad as compute_grad

log = logging.getLogger(__name__)

EMB_DIM = 256
CODEC_HIDDEN = {"sift": (1024, 1024), "superpoint": (256, 256)}


class Codec(nn.Module):
    def __init__(self, descriptor_id: str, descriptor_dim: int, hidden: Sequence[int] = (256, 256),
                 emb_dim: int = EMB_DIM, seed: int = 0):
        super().__init__()
        gen = make_generator(seed)
        self.descriptor_id = descriptor_id
        self.descriptor_dim = descriptor_dim
        self.emb_dim = emb_dim
        hidden = tuple(hidden)
        self.encoder = Mlp(MlpSpec(descriptor_dim, hidden + (emb_dim,), batch_norm=True), gen)
        self.decoder = Mlp(MlpSpec(emb_dim, hidden[::-1] + (descriptor_dim,), batch_norm=True), gen)

    @property
    def prefix(self) -> str:
        return f"xlat/{self.descriptor_id}/"

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.descriptor_dim:
            raise ValueError(f"codec {self.descriptor_id!r} expects dim {self.descriptor_dim}, got {x.shape[-1]}")
        return l2_normalize(self.encoder(x))

    def decode(self, e: torch.Tensor) -> torch.Tensor:
        if e.shape[-1] != self.emb_dim:
            raise ValueError(f"codec {self.descriptor_id!r} expects embeddings of dim {self.emb_dim}, got {e.shape[-1]}")
        return l2_normalize(self.decoder(e))

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for part in ("encoder", "decoder"):
            sub = getattr(self, part)
            short = "enc" if part == "encoder" else "dec"
            out.update({f"{self.prefix}{short}/{k}": v for k, v in sub.state_dict().items()})
        return out

    def load_named_tensors(self, tensors: Mapping[str, torch.Tensor]) -> None:
        for part, short in (("encoder", "enc"), ("decoder", "dec")):
            pre = f"{self.prefix}{short}/"
            getattr(self, part).load_state_dict({k[len(pre):]: v for k, v in tensors.items() if k.startswith(pre)})


def make_codec(descriptor_id: str, descriptor_dim: int, style: str = "sift", emb_dim: int = EMB_DIM,
               seed: int = 0, hidden: Optional[Sequence[int]] = None) -> Codec:
    return Codec(descriptor_id, descriptor_dim, CODEC_HIDDEN[style] if hidden is None else hidden, emb_dim, seed)


def _as_tensor(codec: Codec, x) -> torch.Tensor:
    dtype = next(codec.parameters()).dtype
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x).to(dtype)
    return t.reshape(1, -1) if t.ndim == 1 else t


@torch.no_grad()
def encode(codec: Codec, descriptors) -> np.ndarray:
    """Embed descriptors with frozen batch-norm statistics."""
    was = codec.training
    codec.eval()
    try:
        x = _as_tensor(codec, descriptors)
        out = codec.encode(x).numpy()
    finally:
        codec.train(was)
    return out[0] if np.ndim(descriptors) == 1 else out


@torch.no_grad()
def decode(codec: Codec, embedded) -> np.ndarray:
    was = codec.training
    codec.eval()
    try:
        out = codec.decode(_as_tensor(codec, embedded)).numpy()
    finally:
        codec.train(was)
    return out[0] if np.ndim(embedded) == 1 else out


def translate_direct(codec_src: Codec, codec_dst: Codec, descriptors) -> np.ndarray:
    return decode(codec_dst, encode(codec_src, descriptors))


# ---------------------------------------------------------------------------
# loss and training


@dataclass
class TranslationBatch:
    """Row k of every matrix describes the same keypoint."""
    descriptors: dict[str, torch.Tensor]
    labels: Optional[torch.Tensor] = None  # rows sharing a label are never negatives of each other

    def __len__(self) -> int:
        return next(iter(self.descriptors.values())).shape[0]


@dataclass
class TranslationLossBreakdown:
    l_dirtr: torch.Tensor
    l_match: torch.Tensor
    gamma: float
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {"l_dirtr": self.l_dirtr.item(), "l_match": self.l_match.item(), "total": self.total.item()}


def triplet_terms(anchor_emb: torch.Tensor, other_emb: torch.Tensor, margin: float,
                  labels: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-row hinge with the batch-hardest negative."""
    dist = pairwise_distances(anchor_emb, other_emb)
    # positives straight from row differences; the expanded form cancels badly near zero
    diff = anchor_emb - other_emb
    pos = torch.sqrt((diff * diff).sum(dim=1) + DISTANCE_EPS)
    k = dist.shape[0]
    if labels is None:
        blocked = torch.eye(k, dtype=torch.bool)
    else:
        blocked = labels[:, None] == labels[None, :]
    neg = torch.where(blocked, torch.full_like(dist, math.inf), dist).min(dim=1).values
    hinge = torch.clamp_min(margin + pos - neg, 0.0)
    return torch.where(torch.isfinite(neg), hinge, torch.zeros_like(hinge))


def translation_loss(batch: TranslationBatch, codecs: Mapping[str, Codec], gamma: float = 0.1,
                     margin: float = 1.0) -> TranslationLossBreakdown:
    if len(batch) < 2:
        raise ValueError("translation loss needs at least two keypoints for negatives")
    ids = list(batch.descriptors)
    emb = {a: codecs[a].encode(batch.descriptors[a]) for a in ids}
    dirtr, match = [], []
    for a in ids:
        for b in ids:
            translated = codecs[b].decode(emb[a])
            diff = translated - batch.descriptors[b]
            dirtr.append(torch.sqrt((diff * diff).sum(dim=1) + 1e-12).mean())
            match.append(triplet_terms(emb[a], emb[b], margin, batch.labels).mean())
    l_dirtr = torch.stack(dirtr).mean()
    l_match = torch.stack(match).mean()
    return TranslationLossBreakdown(l_dirtr, l_match, gamma, l_dirtr + gamma * l_match)


@dataclass
class TranslationData:
    descriptors: dict[str, np.ndarray]
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, rows, dtype=torch.float32) -> TranslationBatch:
        return TranslationBatch({k: torch.from_numpy(v[rows]).to(dtype) for k, v in self.descriptors.items()},
                                torch.from_numpy(self.labels[rows]))


@dataclass
class TranslateTrainConfig:
    epochs: int = 17
    batch_size: int = 4096
    lr: float = 1e-3
    gamma: float = 0.1
    margin: float = 1.0
    seed: int = 0


def _all_params(codecs: Mapping[str, Codec]) -> dict[str, torch.Tensor]:
    return {f"{d}/{name}": p for d, c in codecs.items() for name, p in c.named_parameters()}


@torch.no_grad()
def evaluate_translation(codecs: Mapping[str, Codec], data: TranslationData, config: TranslateTrainConfig,
                         max_batch: int = 4096) -> dict[str, float]:
    for c in codecs.values():
        c.eval()
    dtype = next(next(iter(codecs.values())).parameters()).dtype
    sums = {"l_dirtr": 0.0, "l_match": 0.0, "total": 0.0}
    n = len(data)
    rows = np.arange(n)
    for start in range(0, n, max_batch):
        chunk = rows[start:start + max_batch]
        if len(chunk) < 2:
            continue
        loss = translation_loss(data.batch(chunk, dtype), codecs, config.gamma, config.margin)
        for k, v in loss.as_floats().items():
            sums[k] += v * len(chunk)
    for c in codecs.values():
        c.train()
    return {k: v / n for k, v in sums.items()}


def train_translator(codecs: dict[str, Codec], train: TranslationData, val: Optional[TranslationData],
                     config: TranslateTrainConfig, resume: Optional[TrainResult] = None,
                     stop_after_epochs: Optional[int] = None,
                     on_epoch_end: Optional[Callable[[TrainResult], None]] = None) -> TrainResult:
    """Adam at a constant learning rate; batch-norm in training mode throughout."""
    dtype = next(next(iter(codecs.values())).parameters()).dtype
    params = _all_params(codecs)
    per_epoch = steps_per_epoch(len(train), config.batch_size)
    if resume is None:
        result = TrainResult(codecs, optimizer=adam(config.lr))
        if val is not None:
            result.validation.append({"epoch": 0, **evaluate_translation(codecs, val, config)})
    else:
        result = resume
        result.modules = codecs
    opt: OptimizerState = result.optimizer
    last_epoch = config.epochs if stop_after_epochs is None else min(config.epochs, stop_after_epochs)
    for epoch in range(result.epochs_done + 1, last_epoch + 1):
        for c in codecs.values():
            c.train()
        order = epoch_order(config.seed, epoch, len(train))
        for s in range(per_epoch):
            rows = order[s * config.batch_size:(s + 1) * config.batch_size]
            if len(rows) < 2:
                continue
            batch = train.batch(rows, dtype)
            step = opt.step
            holder = {}

            def loss_fn():
                holder["loss"] = translation_loss(batch, codecs, config.gamma, config.margin)
                return holder["loss"].total

            try:
                grads = compute_grad(loss_fn, params)
            except NonFiniteError as exc:
                raise NonFiniteError(f"translation training diverged at step {step}: {exc}") from exc
            optimizer_step(opt, params, grads, config.lr)
            result.history.append({"step": step, "epoch": epoch, "lr": config.lr, **holder["loss"].as_floats()})
        result.epochs_done = epoch
        if val is not None:
            row = {"epoch": epoch, **evaluate_translation(codecs, val, config)}
            result.validation.append(row)
            log.info("translate epoch %d val %s", epoch, row)
        if on_epoch_end is not None:
            on_epoch_end(result)
    for c in codecs.values():
        c.eval()
    return result
