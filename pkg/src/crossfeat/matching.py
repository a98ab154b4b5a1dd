"""Nearest-neighbour descriptor matching and the four matching pipelines."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional

import numpy as np

from .augment import AugmentorBranch, augment_set
from .features import AlgorithmId, FeatureSet
from .translate import Codec, decode, encode


class MatchMode(str, Enum):
    DIRECT = "direct"
    AUGMENT_ONLY = "augment_only"
    TRANSLATE = "translate_query_to_map"
    EMBEDDED = "embedded"


class IncompatibleDescriptorsError(ValueError):
    pass


class MissingModelError(KeyError):
    pass


@dataclass(frozen=True)
class MatchOptions:
    mode: MatchMode = MatchMode.DIRECT
    mutual_check: bool = True
    ratio: Optional[float] = None
    augment: bool = True  # translate/embedded modes: augment before the codecs (False = baseline)

    def __post_init__(self):
        object.__setattr__(self, "mode", MatchMode(self.mode))
        if self.ratio is not None and not 0 < self.ratio <= 1:
            raise ValueError("ratio must lie in (0, 1]")


@dataclass
class MatchList:
    pairs: np.ndarray  # (M, 2) query index, map index
    distances: np.ndarray
    options: MatchOptions = field(default_factory=MatchOptions)
    checksums: dict = field(default_factory=dict)

    @property
    def mode(self) -> MatchMode:
        return self.options.mode

    def __len__(self) -> int:
        return len(self.pairs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# mode={self.mode.value} mutual_check={self.options.mutual_check} "
                  f"ratio={self.options.ratio} augment={self.options.augment}\n")
        for name, digest in sorted(self.checksums.items()):
            buf.write(f"# model {name} sha256={digest}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query_idx", "map_idx", "distance"])
        for (i, j), d in zip(self.pairs, self.distances):
            w.writerow([int(i), int(j), f"{float(d):.9g}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MatchList":
        header = {}
        rows = []
        for line in text.splitlines():
            if line.startswith("# mode="):
                header = dict(tok.split("=", 1) for tok in line[2:].split())
            elif line.startswith("#") or line.startswith("query_idx") or not line.strip():
                continue
            else:
                i, j, d = line.split(",")
                rows.append((int(i), int(j), float(d)))
        ratio = header.get("ratio", "None")
        opts = MatchOptions(MatchMode(header.get("mode", "direct")), header.get("mutual_check", "True") == "True",
                            None if ratio == "None" else float(ratio), header.get("augment", "True") == "True")
        pairs = np.array([(i, j) for i, j, _ in rows], dtype=np.int64).reshape(-1, 2)
        return cls(pairs, np.array([d for *_, d in rows]), opts)


def _sq_distances(q: np.ndarray, m: np.ndarray) -> np.ndarray:
    q = q.astype(np.float64)
    m = m.astype(np.float64)
    sq = (q * q).sum(1)[:, None] + (m * m).sum(1)[None, :] - 2.0 * q @ m.T
    return np.maximum(sq, 0.0)


def nn_match(query_descs, map_descs, options: MatchOptions = MatchOptions()) -> MatchList:
    """Euclidean nearest neighbours with optional mutual check and ratio test."""
    q = np.asarray(query_descs)
    m = np.asarray(map_descs)
    if q.ndim != 2 or m.ndim != 2 or (len(q) and len(m) and q.shape[1] != m.shape[1]):
        raise IncompatibleDescriptorsError(f"descriptor dims differ: {q.shape} vs {m.shape}")
    if len(q) == 0 or len(m) == 0:
        return MatchList(np.zeros((0, 2), np.int64), np.zeros(0), options)
    sq = _sq_distances(q, m)
    nn12 = np.argmin(sq, axis=1)
    keep = np.ones(len(q), dtype=bool)
    if options.mutual_check:
        nn21 = np.argmin(sq, axis=0)
        keep &= nn21[nn12] == np.arange(len(q))
    qi = np.arange(len(q))
    d1 = np.linalg.norm(q[qi].astype(np.float64) - m[nn12].astype(np.float64), axis=1)
    if options.ratio is not None:
        if m.shape[0] > 1:
            masked = sq.copy()
            masked[qi, nn12] = np.inf
            second = np.argmin(masked, axis=1)
            d2 = np.linalg.norm(q.astype(np.float64) - m[second].astype(np.float64), axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(d2 > 0, d1 / d2, np.inf)
            keep &= ratio < options.ratio
    pairs = np.column_stack([qi[keep], nn12[keep]]).astype(np.int64)
    return MatchList(pairs, d1[keep], options)


def _branch(branches, alg: AlgorithmId) -> AugmentorBranch:
    if not branches or (alg.detector, alg.descriptor) not in branches:
        raise MissingModelError(f"no augmentation branch for {alg.label}")
    return branches[(alg.detector, alg.descriptor)]


def _codec(codecs, descriptor: str) -> Codec:
    if not codecs or descriptor not in codecs:
        raise MissingModelError(f"no codec for descriptor {descriptor!r}")
    return codecs[descriptor]


def _maybe_augment(fs: FeatureSet, branches, augment: bool) -> np.ndarray:
    return augment_set(_branch(branches, fs.algorithm), fs).descriptors if augment else fs.descriptors


def match_pipeline(query: FeatureSet, map_set: FeatureSet,
                   branches: Optional[Mapping[tuple[str, str], AugmentorBranch]] = None,
                   codecs: Optional[Mapping[str, Codec]] = None,
                   options: MatchOptions = MatchOptions()) -> MatchList:
    qa, ma = query.algorithm, map_set.algorithm
    same_space = qa.descriptor == ma.descriptor and qa.descriptor_dim == ma.descriptor_dim
    mode = options.mode
    if mode in (MatchMode.DIRECT, MatchMode.AUGMENT_ONLY) and not same_space:
        raise IncompatibleDescriptorsError(
            f"incompatible descriptor spaces: {qa.descriptor} ({qa.descriptor_dim}) vs "
            f"{ma.descriptor} ({ma.descriptor_dim})")
    if mode is MatchMode.DIRECT:
        qd, md = query.descriptors, map_set.descriptors
    elif mode is MatchMode.AUGMENT_ONLY:
        qd, md = _maybe_augment(query, branches, True), _maybe_augment(map_set, branches, True)
    elif mode is MatchMode.TRANSLATE:
        cq, cm = _codec(codecs, qa.descriptor), _codec(codecs, ma.descriptor)
        qd = _maybe_augment(query, branches, options.augment)
        qd = decode(cm, encode(cq, qd)) if len(qd) else qd.reshape(0, ma.descriptor_dim)
        md = _maybe_augment(map_set, branches, options.augment)
    else:
        cq, cm = _codec(codecs, qa.descriptor), _codec(codecs, ma.descriptor)
        qd = _maybe_augment(query, branches, options.augment)
        md = _maybe_augment(map_set, branches, options.augment)
        qd = encode(cq, qd) if len(qd) else np.zeros((0, cq.emb_dim))
        md = encode(cm, md) if len(md) else np.zeros((0, cm.emb_dim))
    return nn_match(qd, md, options)
