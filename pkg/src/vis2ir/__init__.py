"""Instruction-conditioned latent diffusion for visible-to-infrared translation,
with a procedurally generated paired dataset, metrics and a CLI."""

from .annotation import AnnotationSet, ObjectAnnotation, annotate_oracle, degrade_annotations
from .codec import LatentCodec
from .conditioning import CondFlags, Conditioner, ConditioningBundle, EmbedderConfig
from .diffusion import NoiseSchedule, build_schedule, ddim_sample, q_sample, training_loss
from .errors import (AnnotationParseError, ConfigHashMismatch, ConfigurationError, GenerationError,
                     IntegrityError, NumericalFailure, SchemaVersionError, TrainingFailure, Vis2IRError)
from .instructions import build_bank, parse_band, render_instruction
from .metrics import MetricReport, fid, perceptual_distance, psnr, ssim
from .pipeline import TranslationModel
from .scene import DEFAULT_TABLE, EmissivityTable, GeneratorConfig, SceneSpec, render_infrared, render_visible, sample_scene
from .training import AutoencoderConfig, TrainConfig, pretrain_autoencoder, train_translation
from .unet import Denoiser, DenoiserConfig

__version__ = "0.1.0"
