"""Volumetric image fingerprints: 3D keypoint signatures, soft Jaccard overlap and cohort curation."""
from .curation import (
    CohortMetadata,
    CohortRow,
    OutlierReport,
    OutlierRules,
    RelationshipLabel,
    Verdict,
    flag_outliers,
    ks_two_sample,
    label_pairs,
    summarize,
)
from .descriptor import Descriptor, Signature, extract_signature, load_signature, rank_order, save_signature
from .errors import SigprintError
from .index import BandwidthTable, DescriptorRef, KnnForest, brute_force_knn, build_forest, compute_bandwidths, knn_query
from .jaccard import PairScore, SimilarityMatrix, SoftJaccardParams, jaccard_score, pairwise_matrix, soft_intersection
from .scalespace import Keypoint, ScaleSpaceParams, detect_keypoints
from .volume import PhantomSpec, SimilarityTransform, Volume, load_volume, make_phantom, observe, save_volume

__version__ = "0.1.0"
