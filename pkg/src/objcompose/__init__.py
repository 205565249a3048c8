"""Desk-scale masked diffusion transformer for zero-shot object customization."""

from .ccnet import CCNetConfig, ConditionsCollector, drop_condition
from .codec import CodecConfig, decode, encode, fit_codec, load_codec, save_codec
from .data import Box, SceneSample, SynthParams, generate_scene, generate_views, load_dataset, synthesize, write_dataset
from .diffusion import NoiseSchedule, concat_hint, q_sample
from .errors import DataError, LoadError, NumericError, ObjComposeError, ParameterError, ShapeError
from .evaluation import (
    cross_view_alignment,
    generate_images,
    histogram_divergence,
    outside_box_psnr,
    profile_run,
    psnr,
    score_samples,
    ssim,
)
from .features import ExtractorConfig, build_extractor, extract_tokens
from .sampler import SamplerSchedule, ddim_sample, dynamic_beta
from .training import TrainConfig, compute_joint_loss, ema_update, init_state, load_checkpoint, save_checkpoint, train
from .transformer import MaskedDenoiser, ModelConfig, build_denoiser, count_params, mask_tokens

__version__ = "0.1.0"
