"""Weakly supervised whole-slide subtype classification (ABC vs GCB)
from patch embeddings, with attention heatmaps and nuclear morphometry."""

__version__ = "1.0.0"

from .datamodel import (  # noqa: F401
    LabelMask,
    Manifest,
    ManifestRow,
    PatchRef,
    SlideBag,
    SubtypeLabel,
    read_embedding_file,
    read_label_mask,
    read_manifest,
    write_embedding_file,
    write_label_mask,
    write_manifest,
)
from .errors import (  # noqa: F401
    CorruptionError,
    EmptyBagError,
    FileFormatError,
    LymphomilError,
    NumericError,
    UndefinedMetricError,
    UnsupportedDepthError,
    ValidationError,
)
from .milnet import (  # noqa: F401
    MilConfig,
    MilParams,
    backward,
    forward,
    init_params,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
)
from .trainer import (  # noqa: F401
    CvReport,
    FoldPlan,
    TrainConfig,
    adamw_step,
    make_folds,
    run_cross_validation,
    train_fold,
)
