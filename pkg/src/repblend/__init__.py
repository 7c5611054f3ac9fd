"""Multi-label recognition with partial labels via representation blending.

The package learns category-specific feature maps with semantic
decoupling, complements unknown labels by blending those maps across
images (instance path) and against per-category spatial-bin prototypes
(prototype path), and trains with a partial binary cross-entropy plus a
compactness contrastive loss.  A FastAPI service wraps the harness; the
``repblend`` CLI is a thin client of that service.
"""

from .backbone import BackboneConfig, ConvBackbone
from .config import ExperimentConfig, apply_overrides, load_config, save_config
from .decoupling import (
    CategoryEmbeddings,
    SemanticDecoupling,
    contrastive_batch_loss,
    contrastive_pair_loss,
    load_embeddings,
    pool_maps,
    random_embeddings,
)
from .heads import (
    GatedPropagationClassifier,
    LossConfig,
    classification_loss,
    partial_bce,
    total_loss,
)
from .instance_blend import (
    BlendCoefficients,
    blend_batch,
    blend_instance,
    build_blend_masks,
    flip_pairing,
)
from .labels import (
    LabelMatrix,
    ProportionSpec,
    drop_labels,
    from_coco_annotations,
    from_csv,
    known_stats,
    to_csv,
)
from .metrics import (
    EvalReport,
    aggregate_proportions,
    average_precision,
    f1_measures,
    mean_average_precision,
)
from .model import PartialLabelRecognizer
from .prototype_blend import (
    PrototypeBank,
    assign_bin,
    blend_prototype,
    blend_prototype_batch,
    build_prototypes,
    load_bank,
    save_bank,
)
from .synthetic import SyntheticSceneSpec, generate_synthetic

__version__ = "0.1.0"
