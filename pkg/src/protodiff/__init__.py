"""Prototype-conditioned denoising diffusion (PDM, s-PDM and a DDPM ablation)."""

from .schedule import NoiseSchedule, linear_schedule, sigma
from .diffusion import NoisedSample, forward_chain, forward_sample, predict_x0, reverse_step
from .prototypes import (Assignment, PrototypeBank, align_loss, assign, compact_loss,
                         contrastive_loss)
from .networks import CrossAttention, Encoder, PrototypeDiffusion, TimeEmbedding, UNet
from .training import LossReport, ModelState, RunConfig, supervised_select, train, train_step
from .sampler import SampleRequest, generate, select_condition
from .metrics import GaussianStats, fid, inception_score, kid, pca_project
from .data import Dataset, load_image_dir, synth_two_mode

__version__ = "0.1.0"
