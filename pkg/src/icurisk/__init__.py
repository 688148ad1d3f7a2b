"""ICU time-series risk scoring with an attentive deep Markov model.

A latent-Gaussian sequence model (gated transition and emission networks,
structured variational posterior) pooled by cosine attention into a
mortality-risk predictor, trained with a weighted cross-entropy loss
regularized by the ELBO. Everything is verified at desk scale against
exact Kalman-filter and finite-difference oracles.
"""

from .autodiff import (
    DiagGaussian,
    GradError,
    NumericError,
    Tensor,
    gaussian_logpdf,
    kl_diag_gaussians,
    no_grad,
    reparam_sample,
    reverse_gradients,
)
from .data import (
    DataError,
    Dataset,
    Normalizer,
    PatientRecord,
    SynthConfig,
    impute_and_mask,
    load_checkpoint,
    load_dataset,
    preprocess,
    save_checkpoint,
    synth_generate,
    write_dataset_csvs,
)
from .inference import LatentPath, combine, encode_backward, sample_posterior_path
from .metrics import EvalCurve, auprc, auroc, delong_test, eval_task1, eval_task2
from .model import (
    Dims,
    ModelParams,
    attention_aggregate,
    emission,
    generate_sequence,
    init_params,
    predict,
    transition,
)
from .oracle import LGSSM, fd_gradient, kalman_loglik, kalman_smooth, lgssm_from_linear_model
from .scoring import RiskScore, score_at_time, score_trajectory
from .training import (
    TrainConfig,
    TrainReport,
    compute_rho,
    elbo_estimate,
    stratified_folds,
    total_loss,
    train,
    weighted_ce,
)

__version__ = "0.1.0"
