"""Multilingual zero-shot multispeaker text-to-speech with language-agnostic meta learning."""

__version__ = "0.1.0"

from .acoustic import AcousticModel, ModelConfig, toy_config
from .aligner import Aligner, AlignerConfig, AlignerVocabulary, align, mas
from .data import AcousticFeatures, FeatureCache, FeatureConfig, extract_features, load_wav, write_wav
from .frontend import FeatureInventory, LanguageRegistry, LexiconG2P, PhoneSequence, default_inventory, text_to_units
from .laml import TaskRegistry, TrainConfig, finetune_lowresource, laml_step, pretrain
from .speaker import ToyEmbedder, cosine_similarity, embed
from .vocoder import GriffinLim, NoisePolicy, noise_inject

__all__ = [
    "AcousticFeatures", "AcousticModel", "Aligner", "AlignerConfig", "AlignerVocabulary", "FeatureCache",
    "FeatureConfig", "FeatureInventory", "GriffinLim", "LanguageRegistry", "LexiconG2P", "ModelConfig",
    "NoisePolicy", "PhoneSequence", "TaskRegistry", "ToyEmbedder", "TrainConfig", "align", "cosine_similarity",
    "default_inventory", "embed", "extract_features", "finetune_lowresource", "laml_step", "load_wav", "mas",
    "noise_inject", "pretrain", "text_to_units", "toy_config", "write_wav",
]
