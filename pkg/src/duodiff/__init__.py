"""Desk-scale adaptive-depth diffusion: early-exit inference and
dual-backbone sampling, trainable in minutes on a CPU."""

from .adadiff import (AdaDiffModel, ExitTrace, OutputHead, UncertaintyModule,
                      early_exit_forward, estimate_latency, loss_all, loss_u,
                      loss_ual, pseudo_uncertainty, simple_loss,
                      simulate_batch_early_exit, uem_forward)
from .bench import (BenchResult, FeatureExtractor, TrendProfile,
                    exit_trend_profile, fid_proxy, frechet_distance,
                    latency_bench, per_step_mse_profile)
from .checkpoint import (CheckpointError, load_checkpoint, load_model,
                         save_checkpoint, save_model)
from .config import ConfigError, RunConfig, config_hash, parse_config
from .data import (DataError, DatasetSpec, SyntheticDataset, denormalize,
                   generate, load_image_dir, normalize)
from .diffusion import (NoiseSchedule, SamplerSpec, analytic_gaussian_denoiser,
                        ddim_step, ddim_timesteps, ddpm_step, forward_noise,
                        make_schedule)
from .duo import (DuoDiffSampler, SampleResult, TrainConfig, sample,
                  select_backbone, train_adadiff, train_backbone)
from .optim import AdamWState, adamw_step
from .tensor import NumericsError, ShapeError, Tape, Tensor
from .uvit import DenoiserConfig, UVitModel, patchify, sinusoidal_features, unpatchify

__version__ = "0.1.0"
