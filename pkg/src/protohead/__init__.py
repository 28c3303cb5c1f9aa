"""protohead: prototype-based open-set detection head over frozen features."""

from .errors import (
    ConvergenceError,
    CorruptFileError,
    DegenerateBoxError,
    EmptyRegionError,
    FormatError,
    NumericalError,
    ProtoheadError,
    ProtoheadWarning,
    ValidationError,
)
from .feature_io import (
    BBox,
    FeatureMap,
    PrototypeBank,
    RegionFeatures,
    load_feature_map,
    load_prototype_bank,
    roi_align,
    save_feature_map,
    save_prototype_bank,
)
from .prototype_builder import (
    CentroidSet,
    InstancePrototype,
    InstanceRecord,
    TransportPlan,
    build_background_prototypes,
    build_bank,
    build_class_prototype,
    cluster_step,
    instance_prototype,
    l2_normalize,
    load_instance_records,
    mask_to_rle,
    rle_to_mask,
    sinkhorn,
)
from .classifier_head import (
    ClassSpecificMap,
    ClsNetWeights,
    SimilarityMap,
    classify,
    preselect_classes,
    prototype_projection,
    rearrange,
    score_proposal,
)
from .localizer_head import (
    Heatmap,
    IntegralParams,
    LocNetWeights,
    RelBox,
    box_to_heatmap,
    expand_proposal,
    load_loc_weights,
    localize,
    propagate,
    save_loc_weights,
    spatial_integral,
    to_absolute,
)
from .pipeline import (
    Detection,
    PipelineConfig,
    detect,
    filter_small,
    load_detections,
    load_proposals,
    nms_class_agnostic,
    nms_per_class,
    save_detections,
)
from .cli import run_cli

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
