"""Singing voice conversion inside songs: separate, convert, merge.

Subpackages are plain modules; the most used names are re-exported here.
"""
from .audio_io import AudioClip, istft, load_wav, resample, stft, store_wav
from .cyclegan import CycleGAN, LossWeights, TrainConfig
from .errors import DataError, NumericError, SongConvError
from .features import F0Stats, VoiceFeatures, analyze, f0_convert, f0_stats, synthesize
from .pipeline import ConversionJob, convert_song, detect_onsets, overlay
from .separation import SeparatorModel, separate
from .transfer import load_checkpoint, save_checkpoint, transfer_init

__version__ = "0.1.0"
