"""Multi-modal entity alignment across two knowledge graphs.

Joint embeddings (graph structure, images, relations, attributes and optional
surface forms) are trained with an NCA loss; seeds come either from labelled
pivots or from visual pivot induction, and grow through probation-based
iterative learning. Retrieval is evaluated with CSLS-adjusted ranking.
"""

from mmea.numcore import Param, grad_check, matmul, row_l2_normalize
from mmea.kgdata import (
    AlignmentTask,
    KnowledgeGraph,
    ModalityFeatures,
    degree_sum,
    impute_missing_images,
    load_task,
)
from mmea.encoders import (
    ModelParams,
    fuse,
    gcn_forward,
    init_params,
    normalize_adjacency,
    project_modality,
)
from mmea.alignloss import LossConfig, cosine_matrix, joint_loss, nca_loss
from mmea.seeding import (
    ILConfig,
    PivotLedger,
    induce_visual_pivots,
    propose_round,
    threshold_pivots,
)
from mmea.trainer import TrainConfig, TrainState, ablate, adamw_step, train
from mmea.inference import (
    EvalReport,
    csls_adjust,
    evaluate,
    rank_targets,
    stratified_evaluate,
)

__version__ = "0.1.0"
