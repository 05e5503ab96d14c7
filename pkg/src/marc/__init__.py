"""Modular representation compression toolkit.

Trains a residual feature encoder with an HSIC-constrained compression
network and an explicit-interaction matching network, alongside reference
compressors and proxy objectives, and probes every encoder layer's
representations with a downstream CTR model to chart representation
quality against depth.
"""

from .backbone import EncoderConfig, EncoderStack, encode_all_layers, pool_user_input
from .baselines import PcaModel, ae_loss, cl_proxy_loss, cs_proxy_loss, mrl_loss, pca_fit, pca_transform
from .compression import CompressionNet, KernelConfig, gaussian_kernel_matrix, hsic, hsic_loss, median_sigma
from .dataio import (
    InteractionDataset,
    SyntheticConfig,
    gen_synthetic,
    load_dataset,
    load_embeddings,
    load_model,
    save_dataset,
    save_embeddings,
    save_model,
    split_by_user,
)
from .downstream import CtrProbeConfig, auc, logloss, rank_metrics, storage_report, train_ctr_probe
from .matching import MarcLossConfig, MatchingNet, explicit_features, match_loss, predict_match, total_loss
from .numcore import Adam, Tape, Tensor, backward, finite_diff_check
from .probe import LayerProbeReport, ProbeConfig, layer_sweep, mra_summary
from .trainer import MarcModel, RunConfig, train

__version__ = "0.1.0"
