"""Two-stream multilingual acoustic model, trained entirely on the CPU.

The package decouples pronunciation (mel-cepstra) and prosody
(energy/logF0/voicing) modeling: two language-conditioned encoders, a
shared location-sensitive attention module, twin autoregressive decoders
and an adversarial speaker classifier, all differentiated by a small
built-in reverse-mode engine.
"""

from .autodiff import Tensor, backward, finite_difference_check
from .features import (Corpus, FeatureTrack, GeneratorConfig, NormStats,
                       compute_norm_stats, denormalize,
                       generate_synthetic_corpus, load_corpus, normalize,
                       save_corpus)
from .frontend import (FrontendConfig, LanguageInfo, PhonemeSequence,
                       encode_utterance, prosody_onehot)
from .metrics import EvalReport, evaluate, mcd
from .model import (ModelConfig, ModelParams, init_params, load_checkpoint,
                    parameter_census, save_checkpoint, synthesize,
                    teacher_forced_forward)
from .training import TrainConfig, compute_loss, learning_rate, make_batches, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "finite_difference_check",
    "Corpus", "FeatureTrack", "GeneratorConfig", "NormStats",
    "compute_norm_stats", "denormalize", "generate_synthetic_corpus",
    "load_corpus", "normalize", "save_corpus",
    "FrontendConfig", "LanguageInfo", "PhonemeSequence", "encode_utterance",
    "prosody_onehot",
    "EvalReport", "evaluate", "mcd",
    "ModelConfig", "ModelParams", "init_params", "load_checkpoint",
    "parameter_census", "save_checkpoint", "synthesize",
    "teacher_forced_forward",
    "TrainConfig", "compute_loss", "learning_rate", "make_batches", "train",
    "__version__",
]
