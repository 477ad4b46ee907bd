"""Latent force modelling of audio subband envelopes.

The package splits a sound into ERB subbands, demodulates each into an
envelope and a carrier, and explains the envelopes with a small number of
Gaussian-process latent forces passed through a nonlinear, history-dependent
ODE. Fitted models reconstruct envelopes and generate new sounds.
"""
from .audio_io import AudioBuffer, EnvelopeMatrix, load_audio, read_matrix_csv, read_wav, \
    write_matrix_csv, write_wav
from .baselines import NMF, TemporalNMF, cosine_distance, nmf, relative_report, rms_error, tnmf
from .demod import demodulate, demodulate_subbands
from .estimator import EnvelopeExtractor, LatentForceModel, decompose
from .filterbank import ErbFilterbank, analyze, design_filterbank, synthesize
from .gpssm import KernelParams, discretize, kernel_to_ssm, matern32, sample_gp
from .inference import FilterDivergence, ckf_filter, marginal_loglik, rts_smooth
from .lfm_core import LfmParams, StateLayout, build_layout, initial_state, softplus, transition
from .modelfile import ModelFile
from .synthesis import (CarrierModel, ModulatorModel, fit_carriers, fit_modulator,
                        generate_envelopes, reconstruct, render, sample_latents)
from .training import TrainConfig, TrainReport, optimize, select_forces

__version__ = "0.1.0"

__all__ = [
    "AudioBuffer", "EnvelopeMatrix", "load_audio", "read_matrix_csv", "read_wav",
    "write_matrix_csv", "write_wav",
    "NMF", "TemporalNMF", "cosine_distance", "nmf", "relative_report", "rms_error", "tnmf",
    "demodulate", "demodulate_subbands",
    "EnvelopeExtractor", "LatentForceModel", "decompose",
    "ErbFilterbank", "analyze", "design_filterbank", "synthesize",
    "KernelParams", "discretize", "kernel_to_ssm", "matern32", "sample_gp",
    "FilterDivergence", "ckf_filter", "marginal_loglik", "rts_smooth",
    "LfmParams", "StateLayout", "build_layout", "initial_state", "softplus", "transition",
    "ModelFile",
    "CarrierModel", "ModulatorModel", "fit_carriers", "fit_modulator", "generate_envelopes",
    "reconstruct", "render", "sample_latents",
    "TrainConfig", "TrainReport", "optimize", "select_forces",
]
