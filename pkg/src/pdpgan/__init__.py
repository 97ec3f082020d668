"""Power-delay-profile GAN toolkit: channel math, a stochastic multipath
simulator, a small reverse-mode autodiff engine, WGAN-GP training with
transfer learning, evaluation metrics and dataset formats."""

from .channel import (
    ChannelTransferFunction,
    Cir,
    DelayGrid,
    MultipathComponent,
    NormParams,
    Pdp,
    cir_to_pdp,
    ctf_to_pdp,
    denormalize,
    mean_delay,
    minmax_normalize,
    rms_delay_spread,
)
from .dataset_io import PdpDataset, load_dataset, load_manifest, save_dataset
from .evaluation import EvalReport, evaluate, rmse, ssim_1d, wasserstein_1d
from .gan import Checkpoint, DiscriminatorNet, GeneratorNet, load_checkpoint, save_checkpoint
from .kernels import BACKEND as KERNEL_BACKEND
from .synthetic import DatasetSpec, StochasticChannelParams, fit_params, generate_dataset
from .training import TrainConfig, TrainReport, fine_tune, generate, train

__version__ = "0.1.0"
