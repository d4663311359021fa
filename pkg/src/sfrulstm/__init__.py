"""SlowFast rolling-unrolling LSTMs for action anticipation, in numpy with
hand-written backward passes."""

from .dataio import Dataset, SyntheticSpec, load_model, save_model, synth_generate
from .model import Model, ModelConfig
from .slowfast import ClockConfig, ClockError, build_clock, build_multi_clock, single_clock
from .train import Hyper, evaluate, finetune_fusion, train_branch

__all__ = [
    "ClockConfig", "ClockError", "Dataset", "Hyper", "Model", "ModelConfig", "SyntheticSpec",
    "build_clock", "build_multi_clock", "evaluate", "finetune_fusion", "load_model",
    "save_model", "single_clock", "synth_generate", "train_branch",
]
__version__ = "0.1.0"
