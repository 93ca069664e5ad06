"""Transformer grapheme-to-phoneme conversion on plain numpy."""

from .data import LexiconEntry, Vocabulary, parse_cmudict, parse_nettalk
from .evaluation import evaluate, levenshtein, per, wer
from .inference import batch_decode, greedy_decode
from .model import (
    Checkpoint,
    ModelConfig,
    build_model,
    count_params,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .training import TrainOptions, train

__version__ = "0.1.0"
