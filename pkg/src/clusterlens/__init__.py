"""Object-centric open-vocabulary image retrieval over dense embedding packs."""

from .aggregation import (
    AggregationConfig,
    ClusterAssignment,
    KMeansParams,
    RepresentativeSet,
    SegmentMask,
    adaptive_kmeans,
    agglomerative_cluster,
    anchors_aggregate,
    attention_aggregate,
    bic_score,
    downsample_mask,
    kmeans_cluster,
    mean_aggregate,
    mix_global,
    region_mask_aggregate,
)
from .evaluation import EvalReport, EvalSpec, average_precision, derive_rare_set, evaluate
from .index import (
    FlatIndex,
    QueryVector,
    RankedList,
    build_index,
    ensemble_query,
    score_image,
    search,
)
from .store import DatasetManifest, load_manifest, read_pack, write_pack
from .synth import SynthSpec, generate
from .tensor import (
    EmbeddingMap,
    FeatureGrid,
    ProjectionWeights,
    dense_project,
    global_attention_pool,
    soft_attention_aggregate,
)

__version__ = "0.1.0"
