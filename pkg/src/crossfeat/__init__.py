"""Cross-algorithm sparse feature matching.

Descriptors from different detector/descriptor pairs are first rewritten by a
detector-aware augmentation network, then mapped through per-descriptor
encoder/decoder pairs into a shared embedding where they can be matched.
"""
from .augment import (AugmentorBranch, AugmentTrainConfig, augment_set, augmentation_loss, cdap, exact_ap, fast_ap,
                      make_branch, train_augmentor)
from .features import (AlgorithmId, CorrespondenceSet, FeatureSet, build_gt_correspondences, read_features,
                       write_features)
from .geometry import apply_homography, count_inliers, mma_curve, ransac_homography
from .matching import MatchList, MatchMode, MatchOptions, match_pipeline, nn_match
from .pipeline import ModelSet, evaluate
from .synth import (DescriptorProfile, DetectorProfile, HomographyFamily, SceneSpec, gen_scene, make_pair_dataset,
                    render_view)
from .translate import Codec, TranslateTrainConfig, decode, encode, make_codec, train_translator, translation_loss

__all__ = [
    "AlgorithmId", "AugmentTrainConfig", "AugmentorBranch", "Codec", "CorrespondenceSet", "DescriptorProfile",
    "DetectorProfile", "FeatureSet", "HomographyFamily", "MatchList", "MatchMode", "MatchOptions", "ModelSet",
    "SceneSpec", "TranslateTrainConfig", "apply_homography", "augment_set", "augmentation_loss",
    "build_gt_correspondences", "cdap", "count_inliers", "decode", "encode", "evaluate", "exact_ap", "fast_ap",
    "gen_scene", "make_branch", "make_codec", "make_pair_dataset", "match_pipeline", "mma_curve", "nn_match",
    "ransac_homography", "read_features", "render_view", "train_augmentor", "train_translator",
    "translation_loss", "write_features",
]
