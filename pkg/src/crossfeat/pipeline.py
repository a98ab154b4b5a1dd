"""Two-stage training and matching evaluation on a synthetic pair dataset."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .augment import AugmentorBranch, AugmentTrainConfig, TrainResult, augment_set, make_branch, train_augmentor
from .features import AlgorithmId, FeatureSet
from .geometry import mma_curve
from .matching import MatchList, MatchMode, MatchOptions, match_pipeline
from .synth import PairDataset
from .translate import Codec, TranslateTrainConfig, TranslationData, make_codec, train_translator

log = logging.getLogger(__name__)

LABEL_STRIDE = 1_000_000


@dataclass
class ModelSet:
    branches: dict[tuple[str, str], AugmentorBranch] = field(default_factory=dict)
    codecs: dict[str, Codec] = field(default_factory=dict)  # trained on augmented descriptors
    plain_codecs: dict[str, Codec] = field(default_factory=dict)  # trained on raw descriptors

    def tensors(self) -> dict:
        out = {}
        for b in self.branches.values():
            out.update(b.named_tensors())
        for c in self.codecs.values():
            out.update(c.named_tensors())
        for c in self.plain_codecs.values():
            out.update({"plain/" + k: v for k, v in c.named_tensors().items()})
        return out


def build_branches(dataset: PairDataset, seed: int = 0, num_layers: Optional[Mapping[str, int]] = None
                   ) -> dict[tuple[str, str], AugmentorBranch]:
    out = {}
    for i, alg in enumerate(dataset.algorithms()):
        style = dataset.descriptor(alg.descriptor).style
        layers = None if num_layers is None else num_layers.get(style)
        out[(alg.detector, alg.descriptor)] = make_branch(alg, style, seed=seed * 1000 + i, num_layers=layers)
    return out


def build_codecs(dataset: PairDataset, seed: int = 0, emb_dim: int = 256,
                 hidden: Optional[Mapping[str, Sequence[int]]] = None) -> dict[str, Codec]:
    out = {}
    for i, d in enumerate(dataset.descriptors):
        h = None if hidden is None else hidden.get(d.style)
        out[d.id] = make_codec(d.id, d.output_dim, d.style, emb_dim, seed=seed * 1000 + 100 + i, hidden=h)
    return out


def train_augment_stage(dataset: PairDataset, branches: dict[tuple[str, str], AugmentorBranch],
                        config: AugmentTrainConfig, **kwargs) -> dict[str, TrainResult]:
    """Train the branches of each descriptor jointly across detectors."""
    results = {}
    for d in dataset.descriptors:
        group = {det: b for (det, desc), b in branches.items() if desc == d.id}
        results[d.id] = train_augmentor(group, dataset.augment_pairs(d.id, "train"),
                                        dataset.augment_pairs(d.id, "val"), config, **kwargs)
    return results


def _descriptors(fs: FeatureSet, branches) -> np.ndarray:
    if branches is None:
        return fs.descriptors
    return augment_set(branches[(fs.algorithm.detector, fs.algorithm.descriptor)], fs).descriptors


def translation_data(dataset: PairDataset, split: str,
                     branches: Optional[Mapping[tuple[str, str], AugmentorBranch]] = None) -> TranslationData:
    """One row per keypoint of every (pair, view, detector), described by every descriptor."""
    cols: dict[str, list] = {d.id: [] for d in dataset.descriptors}
    labels = []
    for pi in dataset.splits[split]:
        pair = dataset.pairs[pi]
        for v in (0, 1):
            for e in dataset.detectors:
                sets = {d.id: pair.view(v, e.id, d.id) for d in dataset.descriptors}
                ids = next(iter(sets.values())).landmark_ids
                for d, fs in sets.items():
                    if not np.array_equal(fs.landmark_ids, ids):
                        raise ValueError("descriptor renderings of one detector must share keypoints")
                    cols[d].append(_descriptors(fs, branches))
                labels.append(pi * LABEL_STRIDE + ids)
    descs = {d: np.concatenate(v).astype(np.float32) for d, v in cols.items()}
    return TranslationData(descs, np.concatenate(labels).astype(np.int64))


def train_translate_stage(dataset: PairDataset, codecs: dict[str, Codec], config: TranslateTrainConfig,
                          branches=None, **kwargs) -> TrainResult:
    return train_translator(codecs, translation_data(dataset, "train", branches),
                            translation_data(dataset, "val", branches), config, **kwargs)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalMode:
    label: str
    mode: MatchMode
    augment: bool = True
    plain: bool = False  # use codecs trained without augmentation


EVAL_MODES = {
    "Direct": EvalMode("Direct", MatchMode.DIRECT, False),
    "Ours^A-": EvalMode("Ours^A-", MatchMode.AUGMENT_ONLY),
    "Ours": EvalMode("Ours", MatchMode.TRANSLATE),
    "Ours^EMB": EvalMode("Ours^EMB", MatchMode.EMBEDDED),
    "C-D": EvalMode("C-D", MatchMode.TRANSLATE, augment=False, plain=True),
    "C-D^EMB": EvalMode("C-D^EMB", MatchMode.EMBEDDED, augment=False, plain=True),
}


@dataclass(frozen=True)
class EvalCase:
    query: AlgorithmId
    map: AlgorithmId

    @property
    def kind(self) -> str:
        if self.query == self.map:
            return "homogeneous"
        if self.query.descriptor == self.map.descriptor:
            return "cross-detector"
        if self.query.detector == self.map.detector:
            return "cross-descriptor"
        return "heterogeneous"

    @property
    def label(self) -> str:
        # map-query naming
        return f"{self.map.label}-{self.query.label}"


def default_cases(dataset: PairDataset) -> list[EvalCase]:
    algs = dataset.algorithms()
    cases = [EvalCase(a, a) for a in algs]
    seen = set()
    for q in algs:
        for m in algs:
            if q == m:
                continue
            key = frozenset((q, m))
            if key not in seen:
                seen.add(key)
                cases.append(EvalCase(q, m))
    return cases


def applicable(case: EvalCase, mode: EvalMode) -> bool:
    same_space = case.query.descriptor == case.map.descriptor
    return same_space or mode.mode not in (MatchMode.DIRECT, MatchMode.AUGMENT_ONLY)


def missing_models(models: ModelSet, mode: EvalMode, case: EvalCase) -> list[str]:
    need = []
    if mode.augment and mode.mode is not MatchMode.DIRECT:
        need += [f"augment {a.label}" for a in (case.query, case.map)
                 if (a.detector, a.descriptor) not in models.branches]
    if mode.mode in (MatchMode.TRANSLATE, MatchMode.EMBEDDED):
        pool = models.plain_codecs if mode.plain else models.codecs
        kind = "plain codec" if mode.plain else "codec"
        need += [f"{kind} {d}" for d in {case.query.descriptor, case.map.descriptor} if d not in pool]
    return sorted(set(need))


def run_match(models: ModelSet, mode: EvalMode, query: FeatureSet, map_set: FeatureSet) -> MatchList:
    opts = MatchOptions(mode.mode, augment=mode.augment)
    codecs = models.plain_codecs if mode.plain else models.codecs
    return match_pipeline(query, map_set, models.branches, codecs, opts)


@dataclass
class EvalResult:
    rows: list[dict]
    skipped: list[tuple[str, str, list[str]]]  # case label, mode label, missing models
    matches: dict[tuple[str, str, str], MatchList] = field(default_factory=dict)


def evaluate(dataset: PairDataset, models: ModelSet, split: str = "val",
             cases: Optional[Sequence[EvalCase]] = None, modes: Iterable[str] = tuple(EVAL_MODES),
             workers: int = 1, keep_matches: bool = False) -> EvalResult:
    """Rows per (sequence, case, mode, threshold) with MMA and inlier counts against the true homography."""
    cases = default_cases(dataset) if cases is None else list(cases)
    jobs, skipped = [], []
    for case in cases:
        for name in modes:
            mode = EVAL_MODES[name]
            if not applicable(case, mode):
                continue
            missing = missing_models(models, mode, case)
            if missing:
                skipped.append((case.label, mode.label, missing))
                continue
            jobs.append((case, mode))
    pairs = [dataset.pairs[i] for i in dataset.splits[split]]

    def work(pair):
        out = []
        for case, mode in jobs:
            q = pair.view(0, case.query.detector, case.query.descriptor)
            m = pair.view(1, case.map.detector, case.map.descriptor)
            ml = run_match(models, mode, q, m)
            out.append((case, mode, ml, mma_curve(ml, q, m, pair.h)))
        return out

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            per_pair = list(pool.map(work, pairs))
    else:
        per_pair = [work(p) for p in pairs]

    rows, kept = [], {}
    for pair, results in zip(pairs, per_pair):
        for case, mode, ml, curve in results:
            if keep_matches:
                kept[(pair.scene_id, case.label, mode.label)] = ml
            for t, mma, inl in zip(curve.thresholds, curve.mma_at, curve.num_inliers_at):
                rows.append({"sequence": pair.scene_id, "case": case.kind, "config": case.label,
                             "mode": mode.label, "threshold_px": t, "mma": float(mma),
                             "num_inliers": int(inl), "num_matches": curve.num_matches,
                             "empty": curve.empty})
    return EvalResult(rows, skipped, kept)


def summarize(rows: Sequence[dict], threshold_px: int = 3) -> dict[tuple[str, str], dict[str, float]]:
    """Mean MMA and inliers per (config, mode) at one threshold."""
    acc: dict[tuple[str, str], list] = {}
    for r in rows:
        if r["threshold_px"] == threshold_px:
            acc.setdefault((r["config"], r["mode"]), []).append((r["mma"], r["num_inliers"], r["num_matches"]))
    return {k: {"mma": float(np.mean([a for a, _, _ in v])), "inliers": float(np.mean([b for _, b, _ in v])),
                "matches": float(np.mean([c for _, _, c in v])), "n": len(v)} for k, v in acc.items()}


def mean_curves(rows: Sequence[dict]) -> dict[tuple[str, str, str], dict[str, np.ndarray]]:
    """Per (case kind, config, mode): MMA and inlier curves averaged over sequences."""
    acc: dict = {}
    for r in rows:
        key = (r["case"], r["config"], r["mode"])
        acc.setdefault(key, {}).setdefault(r["threshold_px"], []).append((r["mma"], r["num_inliers"]))
    out = {}
    for key, by_t in acc.items():
        ts = sorted(by_t)
        out[key] = {"thresholds": np.array(ts),
                    "mma": np.array([np.mean([a for a, _ in by_t[t]]) for t in ts]),
                    "inliers": np.array([np.mean([b for _, b in by_t[t]]) for t in ts])}
    return out
