"""Dynamic concept language model: byte-level encoder, learned segmentation into
variable-length concepts, a wider concept backbone and a cross-attention decoder."""

from .model import DLCM, BaselineConfig, BaselineLM, DLCMConfig
from .tokens import BOD, VOCAB_SIZE, TokenBatch, Vocab, pack_batches, tokenize, detokenize

__version__ = "0.1.0"
