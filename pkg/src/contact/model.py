"""Model bundle: encoder parameters + tokenizer vocabulary + run metadata.

A saved model is addressed by its ``.bin`` path; the tensor sidecar, the
vocabulary and the metadata live next to it as ``<stem>.bin.json``,
``<stem>.vocab.json`` and ``<stem>.meta.json``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig, Parameters, load_params, save_params
from .errors import DataError
from .ioutil import read_json, write_json
from .tokenizer import Vocabulary


@dataclass
class ModelState:
    params: Parameters
    vocab: Vocabulary
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> EncoderConfig:
        return self.params.config

    def save(self, bin_path: str | Path) -> list[Path]:
        bin_path = Path(bin_path)
        if bin_path.suffix != ".bin":
            raise DataError(f"model path must end in .bin, got {bin_path}")
        save_params(self.params, bin_path)
        stem = bin_path.with_suffix("")
        vocab_path = stem.with_suffix(".vocab.json")
        meta_path = stem.with_suffix(".meta.json")
        self.vocab.save(vocab_path)
        write_json(meta_path, self.meta)
        return [bin_path, Path(str(bin_path) + ".json"), vocab_path, meta_path]

    @classmethod
    def load(cls, bin_path: str | Path) -> "ModelState":
        bin_path = Path(bin_path)
        if not bin_path.exists():
            raise DataError(f"model file not found: {bin_path}")
        stem = bin_path.with_suffix("")
        vocab_path = stem.with_suffix(".vocab.json")
        meta_path = stem.with_suffix(".meta.json")
        if not vocab_path.exists():
            raise DataError(f"missing vocabulary sidecar: {vocab_path}")
        params = load_params(bin_path)
        vocab = Vocabulary.load(vocab_path)
        if len(vocab) > params.config.vocab_size:
            raise DataError(
                f"vocabulary size {len(vocab)} exceeds encoder vocab_size "
                f"{params.config.vocab_size}"
            )
        meta = read_json(meta_path) if meta_path.exists() else {}
        return cls(params=params, vocab=vocab, meta=meta)
