"""Synthetic planar benchmark with exact ground truth.

A scene is a set of latent landmarks on a plane.  Detector profiles decide
which landmarks fire and how precisely they are localized; descriptor
profiles turn a landmark latent into a descriptor through a fixed random
nonlinear map, shifted by a detector-conditioned offset.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augment import AugmentPair
from .features import AlgorithmId, CorrespondenceSet, FeatureSet, landmark_correspondences, wrap_angle
from .geometry import apply_homography

MIN_SEPARATION_PX = 4.0
MANIFEST_VERSION = 1


class SceneGenerationError(ValueError):
    pass


def _tag(s: str) -> int:
    return zlib.crc32(s.encode("utf-8"))


def _rng(*parts) -> np.random.Generator:
    return np.random.default_rng([_tag(p) if isinstance(p, str) else int(p) for p in parts])


@dataclass(frozen=True)
class SceneSpec:
    num_landmarks: int  # landmarks shared by every detector
    latent_dim: int = 32
    width: int = 640
    height: int = 480
    seed: int = 0

    def __post_init__(self):
        if self.num_landmarks < 8:
            raise ValueError("a scene needs at least 8 landmarks")
        if self.latent_dim < 1 or self.width <= 0 or self.height <= 0:
            raise ValueError("invalid scene dimensions")


@dataclass(frozen=True)
class DetectorProfile:
    id: str
    detect_prob: float = 0.85
    jitter_px: float = 0.7
    scale_noise: float = 0.1
    orientation_noise: float = 0.1
    private_fraction: float = 0.0  # share of this detector's landmarks no other detector fires on

    def __post_init__(self):
        if not 0.0 <= self.detect_prob <= 1.0:
            raise ValueError("detect_prob must lie in [0, 1]")
        if not 0.0 <= self.private_fraction < 1.0:
            raise ValueError("private_fraction must lie in [0, 1)")
        if min(self.jitter_px, self.scale_noise, self.orientation_noise) < 0:
            raise ValueError("noise levels must be non-negative")

    def private_count(self, shared: int) -> int:
        f = self.private_fraction
        return int(round(shared * f / (1.0 - f)))


@dataclass(frozen=True)
class DescriptorProfile:
    id: str
    output_dim: int
    style: str = "sift"
    seed: int = 0
    noise: float = 0.3  # expected norm of the additive noise before normalization
    detector_bias: float = 1.25
    hidden_dim: int = 64
    latent_gain: float = 1.5

    @property
    def algorithm_dim(self) -> int:
        return self.output_dim

    def weights(self, latent_dim: int) -> tuple[np.ndarray, np.ndarray]:
        rng = _rng("descriptor-map", self.id, self.seed)
        w1 = rng.normal(0.0, self.latent_gain, (latent_dim, self.hidden_dim))
        w2 = rng.normal(0.0, 1.0 / math.sqrt(self.hidden_dim), (self.hidden_dim, self.output_dim))
        return w1, w2

    def detector_transform(self, detector_id: str) -> np.ndarray:
        """Orthogonal map R_det; the rendered offset is (R_det - I) m.

        Built as a Cayley transform of a random skew-symmetric matrix whose
        entry scale is the profile's detector_bias.
        """
        rng = _rng("detector-offset", self.id, self.seed, detector_id)
        g = rng.normal(0.0, self.detector_bias / math.sqrt(self.output_dim), (self.output_dim, self.output_dim))
        skew = 0.5 * (g - g.T)
        eye = np.eye(self.output_dim)
        return np.linalg.solve(eye - skew, eye + skew)

    def clean(self, latents: np.ndarray) -> np.ndarray:
        w1, w2 = self.weights(latents.shape[1])
        m = np.tanh(latents @ w1) @ w2
        return m / np.linalg.norm(m, axis=1, keepdims=True)


@dataclass
class Scene:
    spec: SceneSpec
    positions: np.ndarray  # (N, 2) scene-plane pixels
    latents: np.ndarray  # (N, latent_dim), unit norm
    owner: np.ndarray  # (N,) "" for shared landmarks, else the only detector id that fires
    base_scale: np.ndarray
    base_orientation: np.ndarray
    strength: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def shared(self) -> np.ndarray:
        return self.owner == ""


def _place(n: int, width: int, height: int, rng: np.random.Generator, min_sep: float) -> np.ndarray:
    """Dart throwing with a coarse grid so that every pair is at least min_sep apart."""
    cell = min_sep / math.sqrt(2)
    gw, gh = int(math.ceil(width / cell)), int(math.ceil(height / cell))
    grid = -np.ones((gh, gw), dtype=np.int64)
    pts = np.empty((n, 2))
    count, attempts, budget = 0, 0, 60 * n + 1000
    while count < n:
        if attempts >= budget:
            raise SceneGenerationError(f"cannot place {n} landmarks {min_sep} px apart in {width}x{height}")
        batch = rng.uniform((0, 0), (width, height), size=(256, 2))
        for p in batch:
            attempts += 1
            gx, gy = int(p[0] / cell), int(p[1] / cell)
            x0, x1 = max(gx - 2, 0), min(gx + 3, gw)
            y0, y1 = max(gy - 2, 0), min(gy + 3, gh)
            near = grid[y0:y1, x0:x1]
            near = near[near >= 0]
            if len(near) and np.min(np.sum((pts[near] - p) ** 2, axis=1)) < min_sep ** 2:
                continue
            pts[count] = p
            grid[gy, gx] = count
            count += 1
            if count == n:
                break
    return pts


def gen_scene(spec: SceneSpec, detectors: Sequence[DetectorProfile] = ()) -> Scene:
    """Shared landmarks plus each detector's private ones; latents are unit norm."""
    owners = [""] * spec.num_landmarks
    for det in detectors:
        owners += [det.id] * det.private_count(spec.num_landmarks)
    n = len(owners)
    rng = _rng("scene", spec.seed)
    positions = _place(n, spec.width, spec.height, rng, MIN_SEPARATION_PX)
    latents = rng.normal(size=(n, spec.latent_dim))
    latents /= np.linalg.norm(latents, axis=1, keepdims=True)
    order = rng.permutation(n)  # interleave shared and private landmarks in space
    return Scene(spec, positions, latents[order], np.array(owners, dtype=object)[order],
                 base_scale=np.exp(rng.uniform(np.log(1.6), np.log(12.0), n)),
                 base_orientation=rng.uniform(-np.pi, np.pi, n),
                 strength=rng.uniform(0.2, 1.0, n))


def local_similarity(h: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Local scale and rotation of the homography's Jacobian at each point."""
    h = np.asarray(h, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    u = (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / w
    v = (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / w
    j00 = (h[0, 0] - u * h[2, 0]) / w
    j01 = (h[0, 1] - u * h[2, 1]) / w
    j10 = (h[1, 0] - v * h[2, 0]) / w
    j11 = (h[1, 1] - v * h[2, 1]) / w
    scale = np.sqrt(np.abs(j00 * j11 - j01 * j10))
    rot = np.arctan2(j10 - j01, j00 + j11)
    return scale, rot


def render_view(scene: Scene, h, det: DetectorProfile, desc: DescriptorProfile, seed: int = 0,
                view: int = 0, image_id: Optional[str] = None) -> FeatureSet:
    """Detect and describe one view of a scene.

    Keypoints depend only on (scene, view, detector, seed), so every descriptor
    rendered for the same detector sees identical keypoints in identical order.
    """
    spec = scene.spec
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    kp_rng = _rng("keypoints", seed, spec.seed, view, det.id)
    candidates = (scene.owner == "") | (scene.owner == det.id)
    proj = apply_homography(h, scene.positions)
    inside = (proj[:, 0] >= 0) & (proj[:, 0] < spec.width) & (proj[:, 1] >= 0) & (proj[:, 1] < spec.height)
    fired = kp_rng.random(len(scene)) < det.detect_prob
    idx = np.flatnonzero(candidates & inside & fired)
    idx = idx[kp_rng.permutation(len(idx))]
    k = len(idx)
    alg = AlgorithmId(det.id, desc.id, desc.output_dim)
    image_id = image_id or f"s{spec.seed}_v{view}"
    if k == 0:
        return FeatureSet(image_id, spec.width, spec.height, alg, np.zeros((0, 5), np.float32),
                          np.zeros((0, desc.output_dim), np.float32), np.zeros(0, np.int64))
    xy = proj[idx] + kp_rng.normal(0.0, det.jitter_px, (k, 2)) if det.jitter_px > 0 else proj[idx]
    xy = np.clip(xy, 0.0, [spec.width - 1e-3, spec.height - 1e-3])
    loc_scale, loc_rot = local_similarity(h, scene.positions[idx])
    s = scene.base_scale[idx] * loc_scale * np.exp(kp_rng.normal(0.0, 1.0, k) * det.scale_noise)
    theta = wrap_angle(scene.base_orientation[idx] + loc_rot + kp_rng.normal(0.0, 1.0, k) * det.orientation_noise)
    keypoints = np.column_stack([xy, s, theta, scene.strength[idx]]).astype(np.float32)

    d_rng = _rng("descriptors", seed, spec.seed, view, det.id, desc.id)
    m = desc.clean(scene.latents[idx])
    d = m @ desc.detector_transform(det.id).T
    if desc.noise > 0:
        d = d + d_rng.normal(0.0, desc.noise / math.sqrt(desc.output_dim), d.shape)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return FeatureSet(image_id, spec.width, spec.height, alg, keypoints, d.astype(np.float32),
                      idx.astype(np.int64))


# ---------------------------------------------------------------------------
# viewpoint changes


@dataclass(frozen=True)
class HomographyFamily:
    max_rotation_deg: float = 10.0
    scale_range: tuple[float, float] = (0.85, 1.15)
    max_perspective: float = 1e-4
    max_translation_px: float = 20.0

    def sample(self, rng: np.random.Generator, width: int, height: int) -> np.ndarray:
        a = math.radians(rng.uniform(-self.max_rotation_deg, self.max_rotation_deg))
        s = rng.uniform(*self.scale_range)
        tx, ty = rng.uniform(-self.max_translation_px, self.max_translation_px, 2)
        px, py = rng.uniform(-self.max_perspective, self.max_perspective, 2)
        cx, cy = width / 2.0, height / 2.0
        to_center = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1.0]])
        sim = np.array([[s * math.cos(a), -s * math.sin(a), tx], [s * math.sin(a), s * math.cos(a), ty], [0, 0, 1]])
        persp = np.array([[1, 0, 0], [0, 1, 0], [px, py, 1.0]])
        back = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1.0]])
        h = back @ persp @ sim @ to_center
        return h / h[2, 2]


# ---------------------------------------------------------------------------
# datasets


@dataclass
class ScenePair:
    scene_id: str
    scene_seed: int
    h: np.ndarray  # maps view 0 pixels to view 1 pixels
    features: dict[tuple[int, str, str], FeatureSet]  # (view, detector, descriptor)

    def view(self, v: int, det: str, desc: str) -> FeatureSet:
        return self.features[(v, det, desc)]


@dataclass
class PairDataset:
    spec: SceneSpec
    detectors: list[DetectorProfile]
    descriptors: list[DescriptorProfile]
    family: HomographyFamily
    seed: int
    pairs: list[ScenePair]
    splits: dict[str, list[int]]
    gt_threshold_px: float = 3.0

    def split(self, name: str) -> list[ScenePair]:
        return [self.pairs[i] for i in self.splits[name]]

    def algorithms(self) -> list[AlgorithmId]:
        return [AlgorithmId(e.id, d.id, d.output_dim) for e in self.detectors for d in self.descriptors]

    def descriptor(self, desc_id: str) -> DescriptorProfile:
        return next(d for d in self.descriptors if d.id == desc_id)

    def augment_pairs(self, desc_id: str, split: str = "train") -> list[AugmentPair]:
        """Pairs for one descriptor with landmark ground truth between every detector combination."""
        out = []
        for pair in self.split(split):
            views = tuple({e.id: pair.view(v, e.id, desc_id) for e in self.detectors} for v in (0, 1))
            gt = {(a, b): landmark_correspondences(views[0][a], views[1][b], pair.h, self.gt_threshold_px)
                  for a in views[0] for b in views[1]}
            out.append(AugmentPair(views, gt))
        return out


def combination_count(detectors: Sequence, descriptors: Sequence) -> int:
    return len(detectors) * len(descriptors)


def make_pair_dataset(scene_count: int, spec: SceneSpec, detectors: Sequence[DetectorProfile],
                      descriptors: Sequence[DescriptorProfile], family: HomographyFamily = HomographyFamily(),
                      seed: int = 0, val_fraction: float = 0.2, gt_threshold_px: float = 3.0) -> PairDataset:
    """Render every scene in two views under every detector x descriptor combination."""
    if scene_count < 1:
        raise ValueError("scene_count must be positive")
    ids = [d.id for d in detectors] + [d.id for d in descriptors]
    if len(set(ids)) != len(ids):
        raise ValueError("profile ids must be unique")
    pairs = []
    for i in range(scene_count):
        scene_seed = int(_rng("scene-seed", seed, i).integers(0, 2**31 - 1))
        sspec = SceneSpec(spec.num_landmarks, spec.latent_dim, spec.width, spec.height, scene_seed)
        scene = gen_scene(sspec, detectors)
        h = family.sample(_rng("homography", seed, i), spec.width, spec.height)
        identity = np.eye(3)
        feats = {}
        for v, hv in ((0, identity), (1, h)):
            for e in detectors:
                for d in descriptors:
                    feats[(v, e.id, d.id)] = render_view(scene, hv, e, d, seed, v, image_id=f"scene{i:04d}_v{v}")
        pairs.append(ScenePair(f"scene{i:04d}", scene_seed, h, feats))
    order = np.random.default_rng([seed, _tag("split")]).permutation(scene_count)
    n_val = int(round(val_fraction * scene_count)) if scene_count > 1 else 0
    splits = {"val": sorted(order[:n_val].tolist()), "train": sorted(order[n_val:].tolist())}
    return PairDataset(spec, list(detectors), list(descriptors), family, seed, pairs, splits, gt_threshold_px)


def gt_for(dataset: PairDataset, pair: ScenePair, query: tuple[str, str], map_: tuple[str, str]) -> CorrespondenceSet:
    return landmark_correspondences(pair.view(0, *query), pair.view(1, *map_), pair.h, dataset.gt_threshold_px)


# ---------------------------------------------------------------------------
# manifest


def feature_filename(pair: ScenePair, view: int, det: str, desc: str) -> str:
    return f"{pair.scene_id}_v{view}_{det}_{desc}.mcha"


def manifest_dict(dataset: PairDataset) -> dict:
    return {
        "version": MANIFEST_VERSION,
        "seed": dataset.seed,
        "scene": asdict(dataset.spec),
        "detectors": [asdict(d) for d in dataset.detectors],
        "descriptors": [asdict(d) for d in dataset.descriptors],
        "homography_family": asdict(dataset.family),
        "gt_threshold_px": dataset.gt_threshold_px,
        "splits": dataset.splits,
        "scenes": [
            {"id": p.scene_id, "scene_seed": p.scene_seed, "h": [float(v) for v in p.h.reshape(-1)],
             "files": {f"{v}/{e}/{d}": feature_filename(p, v, e, d) for (v, e, d) in p.features}}
            for p in dataset.pairs
        ],
    }


def save_dataset(dataset: PairDataset, out_dir) -> Path:
    from .features import write_features

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for p in dataset.pairs:
        for (v, e, d), fs in p.features.items():
            write_features(fs, out / feature_filename(p, v, e, d))
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest_dict(dataset), indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(directory) -> PairDataset:
    from .features import read_features

    directory = Path(directory)
    doc = json.loads((directory / "manifest.json").read_text())
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {doc.get('version')}")
    fam = doc["homography_family"]
    fam["scale_range"] = tuple(fam["scale_range"])
    pairs = []
    for s in doc["scenes"]:
        feats = {}
        for key, fname in s["files"].items():
            v, e, d = key.split("/")
            feats[(int(v), e, d)] = read_features(directory / fname)
        pairs.append(ScenePair(s["id"], s["scene_seed"], np.array(s["h"]).reshape(3, 3), feats))
    return PairDataset(SceneSpec(**doc["scene"]), [DetectorProfile(**d) for d in doc["detectors"]],
                       [DescriptorProfile(**d) for d in doc["descriptors"]], HomographyFamily(**fam),
                       doc["seed"], pairs, doc["splits"], doc["gt_threshold_px"])
