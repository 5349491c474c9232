"""Uniform wrappers so training code can treat both encoders alike."""

from __future__ import annotations

from pathlib import Path
from typing import Protocol

from .autodiff import Tensor
from .crystal import CgcnnState, CrystalGraph, GraphCache, GraphConfig, encode_graphs, load_graph
from .errors import ModalityMismatch
from .mofid import TokenSequence, Vocabulary, encode, parse_mofid
from .transformer import EncoderState, encode_batch


class Encoder(Protocol):
    kind: str
    out_dim: int

    @property
    def params(self) -> dict[str, Tensor]: ...

    def featurize(self, mofid: str | None, cif_path: str | Path | None): ...

    def embed(self, items: list) -> Tensor: ...


class TextEncoder:
    kind = "moformer"

    def __init__(self, state: EncoderState, vocab: Vocabulary):
        if len(vocab) != state.config.vocab_size:
            raise ModalityMismatch(
                f"vocabulary has {len(vocab)} tokens but the encoder expects {state.config.vocab_size}"
            )
        self.state = state
        self.vocab = vocab

    @property
    def params(self) -> dict[str, Tensor]:
        return self.state.params

    @property
    def out_dim(self) -> int:
        return self.state.config.d_emb

    def featurize(self, mofid, cif_path=None) -> TokenSequence:
        if not mofid:
            raise ModalityMismatch("the moformer branch needs a mofid for every record")
        return encode(parse_mofid(mofid), self.vocab, self.state.config.max_len)

    def embed(self, items: list[TokenSequence]) -> Tensor:
        return encode_batch(self.state, items)


class GraphEncoder:
    kind = "cgcnn"

    def __init__(self, state: CgcnnState, graph_config: GraphConfig, cache: GraphCache | None = None):
        if len(graph_config.centers) != state.config.n_gauss:
            raise ModalityMismatch(
                f"graph settings give {len(graph_config.centers)} Gaussian centers, "
                f"encoder expects {state.config.n_gauss}"
            )
        self.state = state
        self.graph_config = graph_config
        self.cache = cache

    @property
    def params(self) -> dict[str, Tensor]:
        return self.state.params

    @property
    def out_dim(self) -> int:
        return self.state.config.embed_size

    def featurize(self, mofid=None, cif_path=None) -> CrystalGraph:
        if not cif_path:
            raise ModalityMismatch("the cgcnn branch needs a cif_path for every record")
        return load_graph(cif_path, self.graph_config, self.cache)

    def embed(self, items: list[CrystalGraph]) -> Tensor:
        return encode_graphs(self.state, items, self.graph_config.m_max)
