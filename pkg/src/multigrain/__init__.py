"""Grid-image report generation with iterative region/tag alignment,
multi-grained decoding, and a from-scratch reverse-mode autodiff core."""

from .attention import FeedForward, MultiHeadAttention, ProbeLog, Sublayer
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ModelConfig, RunConfig, TrainConfig, desk_preset, paper_preset
from .corpus import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    UNK_ID,
    Batch,
    CorpusSpec,
    Sample,
    Vocabulary,
    build_vocab,
    generate_corpus,
    tokenize,
)
from .decoder import ReportDecoder, beam_decode, greedy_decode, report_loss
from .encoder import AlignEncoder, PatchEncoder, TagPredictor, select_top_tags
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    MaskError,
    MultigrainError,
    NumericError,
    SequenceError,
    ShapeError,
    StateError,
)
from .metrics import EvalReport, abnormality_recall, bleu, lcs_length, rouge_l
from .model import ReportModel
from .optim import Adam, clip_global_norm
from .rng import RngHub
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "Adam", "AlignEncoder", "Batch", "BOS_ID", "Checkpoint", "CheckpointError",
    "ConfigError", "CorpusSpec", "DataError", "EOS_ID", "EvalReport",
    "FeedForward", "MaskError", "ModelConfig", "MultiHeadAttention",
    "MultigrainError", "NumericError", "PAD_ID", "PatchEncoder", "ProbeLog",
    "ReportDecoder", "ReportModel", "RngHub", "RunConfig", "Sample",
    "SequenceError", "ShapeError", "StateError", "Sublayer", "TagPredictor",
    "Tape", "Tensor", "TrainConfig", "UNK_ID", "Vocabulary",
    "abnormality_recall", "beam_decode", "bleu", "build_vocab",
    "clip_global_norm", "desk_preset", "generate_corpus", "greedy_decode",
    "lcs_length", "load_checkpoint", "paper_preset", "report_loss", "rouge_l",
    "save_checkpoint", "select_top_tags", "tokenize",
]
