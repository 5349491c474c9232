"""MOFormer: MOFid text encoder, CGCNN structure encoder, cross-modal
Barlow Twins pretraining and property regression."""

from .mofid import MofId, TokenSequence, Vocabulary, build_vocabulary, encode, parse_mofid, tokenize_mofid, tokenize_smiles
from .transformer import TransformerConfig, init_encoder, positional_encoding

__all__ = [
    "MofId",
    "TokenSequence",
    "Vocabulary",
    "build_vocabulary",
    "encode",
    "parse_mofid",
    "tokenize_mofid",
    "tokenize_smiles",
    "TransformerConfig",
    "init_encoder",
    "positional_encoding",
]

__version__ = "0.1.0"
