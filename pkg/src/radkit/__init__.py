"""Training-free multi-class anomaly detection by memory-bank retrieval."""

from .anomaly_map import (
    AnomalyResult,
    image_score,
    load_result,
    render_heatmap,
    save_result,
    upsample_map,
)
from .errors import (
    BadMagicError,
    ContainerError,
    ContractViolation,
    RadError,
    TruncatedTensorError,
    ValidationError,
    VersionMismatchError,
)
from .feature_io import (
    FeaturePack,
    LayerGrid,
    l2_normalize_rows,
    load_mask,
    load_pixel_map,
    packs_equal,
    read_feature_pack,
    save_mask,
    save_pixel_map,
    validate_pack,
    write_feature_pack,
)
from .manifest import DatasetManifest, ManifestEntry, read_manifest, write_dataset
from .memory_bank import (
    MemoryBank,
    ScalingProtocol,
    add_images,
    build_bank,
    load_bank,
    save_bank,
    subsample_bank,
)
from .metrics import (
    EvalReport,
    GroundTruthEntry,
    MetricBundle,
    aupro,
    auroc,
    average_precision,
    evaluate,
    f1_max,
)
from .retrieval import (
    CandidateSet,
    RetrievalConfig,
    candidate_set,
    distance_to_set,
    global_topk,
    patch_score,
    score_image,
    score_image_bruteforce,
)
from .synthetic import SynthSpec, generate_synthetic_dataset
from .theory import (
    AmplificationReport,
    ToyReconstruction,
    amplification_demo,
    build_toy,
    check_cosine_euclidean_bridge,
    check_dominance,
    check_nonexpansive,
    check_saturation,
    check_sv_inequality,
    jacobi_singular_values,
    reconstruction_residuals,
    run_all_checks,
)

__version__ = "0.1.0"
