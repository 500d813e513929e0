"""Semantic segmentation of 6-channel karyotype images: a dilated-conv /
pyramid-pooling network, a patch-HOSVD baseline, and a leave-one-out
evaluation harness."""

from .data import (AugmentationConfig, DatasetManifest, LabelCoding,
                   MfishSample, augment, batch_iterator, curate,
                   load_manifest, load_sample, preprocess)
from .metrics import CcrReport, ErrorMatrix, average_last_k, compute_ccr, confusion
from .network import (BlockSpec, Network, NetworkConfig, build_network,
                      forward, load_checkpoint, predict_labels, save_checkpoint)
from .ops import (AdamState, BatchNormState, ConvParams, adam_step,
                  batch_norm, bilinear_upsample, conv2d, dropout, grad_check,
                  masked_cross_entropy, max_pool, relu, softmax_channels)
from .training import FoldResult, TrainConfig, evaluate_model, run_loocv, train_model

__version__ = "0.1.0"
