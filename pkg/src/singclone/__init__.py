"""Few-shot voice cloning for an autoregressive singing synthesizer, on synthetic voices."""

from .speakerspace import EmbeddingOnly, EmbeddingTable, JointFinetune, Sequential, add_speaker, trainable_partition
from .synthnet import ModelConfig, ModelParams, build_model, condition, generate, receptive_field, teacher_forced_forward
from .trainer import Checkpoint, Example, TrainConfig, adapt, polyak_update, train

__version__ = "0.1.0"
