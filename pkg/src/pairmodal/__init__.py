"""Semi-supervised paired-modality medical image classification.

Pipeline: synergistic self-supervised pretraining over co-registered image
pairs, a shift vector dictionary for feature-space augmentation, fusion
fine-tuning on a labeled fraction, and evidential (Dirichlet) prediction
with uncertainty.
"""

from .checkpoint import Checkpoint, load_checkpoint, restore_model, save_checkpoint
from .config import RunConfig, SeedBlock, config_hash, load_run_config
from .data import (
    DatasetSplits,
    PairedSample,
    generate_synthetic_dataset,
    generate_synthetic_pair,
    load_paired_dataset,
    make_label_fraction_view,
    split_dataset,
    write_paired_dataset,
)
from .evidential import (
    DirichletParams,
    EvidentialOpinion,
    combine,
    concentration_to_opinion,
    evidence_from_logits,
    evidential_nll,
    kl_regularizer,
    opinion_to_concentration,
    predict,
)
from .finetune import FinetuneConfig, evaluate_model, finetune_loop
from .networks import Model, NetConfig, build_model
from .pretraining import PretrainConfig, pretrain_loop
from .shiftdict import (
    ShiftVectorDictionary,
    SvdConfig,
    build_shift_dictionary,
    draw_shift,
    kmeans,
    load_svd,
    sample_shift_vectors,
    save_svd,
)

__version__ = "0.1.0"
