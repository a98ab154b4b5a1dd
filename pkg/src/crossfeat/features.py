"""Feature containers, keypoint normalization, ground-truth correspondences and
the on-disk feature format.

A ``FeatureSet`` stores its keypoints as a (K, 5) float32 array with columns
``x, y, s, theta, c`` and its descriptors as a (K, n) float32 array.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Optional

import numpy as np

MAGIC = b"MCHA"
FORMAT_VERSION = 1
FLAG_LANDMARKS = 1
FLAG_NORMALIZED = 2

KEYPOINT_FIELDS = ("x", "y", "s", "theta", "c")
SCALE_RANGE = (-0.5, 5.0)


class FeatureFormatError(ValueError):
    """Raised for malformed feature files."""


class BadMagicError(FeatureFormatError):
    pass


class VersionMismatchError(FeatureFormatError):
    pass


class TruncatedPayloadError(FeatureFormatError):
    pass


class DimMismatchError(FeatureFormatError):
    pass


class NonFiniteKeypointError(ValueError):
    def __init__(self, field_name: str, index: int):
        super().__init__(f"non-finite keypoint field {field_name!r} at feature {index}")
        self.field = field_name
        self.index = index


class SingularHomographyError(ValueError):
    pass


@dataclass(frozen=True)
class AlgorithmId:
    detector: str
    descriptor: str
    descriptor_dim: int

    def __post_init__(self):
        if int(self.descriptor_dim) <= 0:
            raise ValueError(f"descriptor_dim must be positive, got {self.descriptor_dim}")

    @property
    def label(self) -> str:
        return f"{self.detector}+{self.descriptor}"


class Keypoint(NamedTuple):
    x: float
    y: float
    s: float
    theta: float
    c: float


class Feature(NamedTuple):
    keypoint: Keypoint
    descriptor: np.ndarray
    landmark_id: Optional[int] = None


@dataclass(eq=False)
class FeatureSet:
    image_id: str
    width: int
    height: int
    algorithm: AlgorithmId
    keypoints: np.ndarray
    descriptors: np.ndarray
    landmark_ids: Optional[np.ndarray] = None
    normalized: bool = False

    def __post_init__(self):
        n = self.algorithm.descriptor_dim
        self.keypoints = np.ascontiguousarray(self.keypoints, dtype=np.float32).reshape(-1, 5)
        self.descriptors = np.ascontiguousarray(self.descriptors, dtype=np.float32)
        if self.descriptors.size == 0:
            self.descriptors = self.descriptors.reshape(0, n)
        if self.descriptors.ndim != 2 or self.descriptors.shape[1] != n:
            raise DimMismatchError(
                f"descriptors of shape {self.descriptors.shape} do not match declared dim {n}")
        if len(self.descriptors) != len(self.keypoints):
            raise ValueError("keypoint and descriptor counts differ")
        if self.landmark_ids is not None:
            self.landmark_ids = np.ascontiguousarray(self.landmark_ids, dtype=np.int64).reshape(-1)
            if len(self.landmark_ids) != len(self.keypoints):
                raise ValueError("landmark id count differs from feature count")

    def __len__(self) -> int:
        return len(self.keypoints)

    def __getitem__(self, i: int) -> Feature:
        lid = None if self.landmark_ids is None else int(self.landmark_ids[i])
        return Feature(Keypoint(*map(float, self.keypoints[i])), self.descriptors[i], lid)

    def __iter__(self) -> Iterator[Feature]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSet):
            return NotImplemented
        same_ids = (self.landmark_ids is None) == (other.landmark_ids is None)
        if same_ids and self.landmark_ids is not None:
            same_ids = np.array_equal(self.landmark_ids, other.landmark_ids)
        return (
            self.image_id == other.image_id
            and self.width == other.width
            and self.height == other.height
            and self.algorithm == other.algorithm
            and self.normalized == other.normalized
            and self.keypoints.tobytes() == other.keypoints.tobytes()
            and self.descriptors.tobytes() == other.descriptors.tobytes()
            and same_ids
        )

    @property
    def xy(self) -> np.ndarray:
        return self.keypoints[:, :2].astype(np.float64)

    def replace_descriptors(self, descriptors, algorithm: Optional[AlgorithmId] = None) -> "FeatureSet":
        return FeatureSet(
            self.image_id, self.width, self.height, algorithm or self.algorithm,
            self.keypoints.copy(), descriptors, self.landmark_ids, self.normalized)


@dataclass(frozen=True)
class CorrespondenceSet:
    pairs: np.ndarray  # (M, 2) int64 indices into (A, B)
    errors: np.ndarray  # (M,) pixels
    threshold: float

    def __len__(self) -> int:
        return len(self.pairs)

    def transposed(self) -> "CorrespondenceSet":
        order = np.argsort(self.pairs[:, 1], kind="stable")
        return CorrespondenceSet(self.pairs[order][:, ::-1].copy(), self.errors[order], self.threshold)

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.pairs}


def wrap_angle(theta):
    """Wrap radians into (-pi, pi]."""
    theta = np.asarray(theta, dtype=np.float64)
    return math.pi - np.mod(math.pi - theta, 2 * math.pi)


def normalize_keypoints(fs: FeatureSet) -> FeatureSet:
    if fs.width <= 0 or fs.height <= 0:
        raise ValueError("image width and height must be positive")
    kp = fs.keypoints.astype(np.float64)
    if len(kp):
        bad = ~np.isfinite(kp)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise NonFiniteKeypointError(KEYPOINT_FIELDS[j], int(i))
    out = np.empty_like(kp)
    out[:, 0] = 2.0 * kp[:, 0] / fs.width - 1.0
    out[:, 1] = 2.0 * kp[:, 1] / fs.height - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        log_s = np.log2(np.where(kp[:, 2] > 0, kp[:, 2], 0.0))
    out[:, 2] = np.clip(np.nan_to_num(log_s, neginf=SCALE_RANGE[0]), *SCALE_RANGE)
    out[:, 3] = wrap_angle(kp[:, 3])
    c = kp[:, 4]
    if len(c):
        lo, hi = c.min(), c.max()
        out[:, 4] = 0.5 if hi == lo else (c - lo) / (hi - lo)
    return FeatureSet(fs.image_id, fs.width, fs.height, fs.algorithm, out, fs.descriptors.copy(),
                      fs.landmark_ids, normalized=True)


def _check_homography(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    if not np.all(np.isfinite(h)) or abs(np.linalg.det(h)) <= 1e-12:
        raise SingularHomographyError("homography is singular")
    return h


def project(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hom = pts @ h[:, :2].T + h[:, 2]
    return hom[:, :2] / hom[:, 2:3]


def transfer_errors(h: np.ndarray, pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Pairwise symmetric transfer error (mean of both directions), shape (len(pa), len(pb))."""
    h = _check_homography(h)
    hinv = np.linalg.inv(h)
    fwd = np.linalg.norm(project(h, pa)[:, None, :] - pb[None, :, :], axis=-1)
    bwd = np.linalg.norm(pa[:, None, :] - project(hinv, pb)[None, :, :], axis=-1)
    return 0.5 * (fwd + bwd)


def build_gt_correspondences(a: FeatureSet, b: FeatureSet, h, threshold_px: float = 3.0) -> CorrespondenceSet:
    """Mutual nearest keypoints under ``h`` (A -> B) with error below the threshold."""
    h = _check_homography(h)
    if len(a) == 0 or len(b) == 0:
        return CorrespondenceSet(np.zeros((0, 2), np.int64), np.zeros(0), threshold_px)
    err = transfer_errors(h, a.xy, b.xy)
    nn_ab = np.argmin(err, axis=1)
    nn_ba = np.argmin(err, axis=0)
    ia = np.arange(len(a))
    keep = (nn_ba[nn_ab] == ia) & (err[ia, nn_ab] < threshold_px)
    cand = [(err[i, nn_ab[i]], i, nn_ab[i]) for i in ia[keep]]
    cand.sort()
    used_a, used_b, pairs, errs = set(), set(), [], []
    for e, i, j in cand:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
        errs.append(e)
    pairs_arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    order = np.argsort(pairs_arr[:, 0], kind="stable")
    return CorrespondenceSet(pairs_arr[order], np.array(errs, dtype=np.float64)[order], threshold_px)


def landmark_correspondences(a: FeatureSet, b: FeatureSet, h, threshold_px: float = 3.0) -> CorrespondenceSet:
    """Ground truth from shared landmark ids, filtered by the same transfer-error threshold."""
    if a.landmark_ids is None or b.landmark_ids is None:
        raise ValueError("both feature sets need landmark ids")
    index_b = {int(l): j for j, l in enumerate(b.landmark_ids)}
    pairs = [(i, index_b[int(l)]) for i, l in enumerate(a.landmark_ids) if int(l) in index_b]
    if not pairs:
        return CorrespondenceSet(np.zeros((0, 2), np.int64), np.zeros(0), threshold_px)
    p = np.array(pairs, dtype=np.int64)
    h = _check_homography(h)
    fwd = np.linalg.norm(project(h, a.xy[p[:, 0]]) - b.xy[p[:, 1]], axis=1)
    bwd = np.linalg.norm(a.xy[p[:, 0]] - project(np.linalg.inv(h), b.xy[p[:, 1]]), axis=1)
    err = 0.5 * (fwd + bwd)
    keep = err < threshold_px
    return CorrespondenceSet(p[keep], err[keep], threshold_px)


# ---------------------------------------------------------------------------
# file format


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _record_dtype(n: int, with_ids: bool) -> np.dtype:
    fields = [("kp", "<f4", (5,)), ("desc", "<f4", (n,))]
    if with_ids:
        fields.append(("landmark", "<i8"))
    return np.dtype(fields)


def features_to_bytes(fs: FeatureSet) -> bytes:
    flags = (FLAG_LANDMARKS if fs.landmark_ids is not None else 0) | (FLAG_NORMALIZED if fs.normalized else 0)
    n = fs.algorithm.descriptor_dim
    head = MAGIC + struct.pack("<HH", FORMAT_VERSION, flags) + _pack_str(fs.image_id)
    head += struct.pack("<II", fs.width, fs.height)
    head += _pack_str(fs.algorithm.detector) + _pack_str(fs.algorithm.descriptor)
    head += struct.pack("<II", n, len(fs))
    rec = np.empty(len(fs), dtype=_record_dtype(n, fs.landmark_ids is not None))
    rec["kp"] = fs.keypoints
    rec["desc"] = fs.descriptors
    if fs.landmark_ids is not None:
        rec["landmark"] = fs.landmark_ids
    return head + rec.tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def features_from_bytes(buf: bytes) -> FeatureSet:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, found {bytes(buf[:4])!r}")
    r = _Reader(buf)
    r.take(4)
    version, flags = r.unpack("<HH")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported feature format version {version}")
    image_id = r.string()
    width, height = r.unpack("<II")
    detector, descriptor = r.string(), r.string()
    n, k = r.unpack("<II")
    with_ids = bool(flags & FLAG_LANDMARKS)
    dtype = _record_dtype(n, with_ids)
    payload = len(buf) - r.pos
    if payload < k * dtype.itemsize:
        raise TruncatedPayloadError(f"payload holds {payload} bytes, {k} records need {k * dtype.itemsize}")
    if payload > k * dtype.itemsize:
        extra = 8 if with_ids else 0
        if k and payload % k == 0 and (payload // k - extra) % 4 == 0:
            found = (payload // k - extra) // 4 - 5
            raise DimMismatchError(f"declared descriptor dim {n} but records hold {found} values")
        raise FeatureFormatError(f"{payload - k * dtype.itemsize} trailing bytes after {k} records")
    rec = np.frombuffer(buf, dtype=dtype, count=k, offset=r.pos)
    return FeatureSet(
        image_id, width, height, AlgorithmId(detector, descriptor, n),
        rec["kp"].copy(), rec["desc"].copy(),
        rec["landmark"].copy() if with_ids else None,
        normalized=bool(flags & FLAG_NORMALIZED),
    )


def features_to_json(fs: FeatureSet) -> dict:
    doc = {
        "image_id": fs.image_id,
        "width": fs.width,
        "height": fs.height,
        "detector": fs.algorithm.detector,
        "descriptor": fs.algorithm.descriptor,
        "descriptor_dim": fs.algorithm.descriptor_dim,
        "normalized": fs.normalized,
        "has_landmark_ids": fs.landmark_ids is not None,
        "features": [],
    }
    for i in range(len(fs)):
        entry = dict(zip(KEYPOINT_FIELDS, map(float, fs.keypoints[i])))
        entry["descriptor"] = [float(v) for v in fs.descriptors[i]]
        if fs.landmark_ids is not None:
            entry["landmark_id"] = int(fs.landmark_ids[i])
        doc["features"].append(entry)
    return doc


def features_from_json(doc: dict) -> FeatureSet:
    n = int(doc["descriptor_dim"])
    feats = doc["features"]
    for i, f in enumerate(feats):
        if len(f["descriptor"]) != n:
            raise DimMismatchError(f"feature {i} has {len(f['descriptor'])} descriptor values, declared {n}")
    kp = np.array([[f[k] for k in KEYPOINT_FIELDS] for f in feats], dtype=np.float32).reshape(-1, 5)
    desc = np.array([f["descriptor"] for f in feats], dtype=np.float32).reshape(-1, n)
    ids = None
    if doc.get("has_landmark_ids", bool(feats) and all("landmark_id" in f for f in feats)):
        ids = np.array([f["landmark_id"] for f in feats], dtype=np.int64)
    return FeatureSet(doc["image_id"], int(doc["width"]), int(doc["height"]),
                      AlgorithmId(doc["detector"], doc["descriptor"], n), kp, desc, ids,
                      normalized=bool(doc.get("normalized", False)))


def write_features(fs: FeatureSet, path) -> None:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(features_to_json(fs)))
    else:
        path.write_bytes(features_to_bytes(fs))


def read_features(path) -> FeatureSet:
    path = Path(path)
    if path.suffix == ".json":
        return features_from_json(json.loads(path.read_text()))
    return features_from_bytes(path.read_bytes())
