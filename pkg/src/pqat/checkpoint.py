"""JSON checkpoints holding the word-embedding table and the model weights.

The virtual P/Q tables are training-time scaffolding and are never written.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .data import Vocab
from .model import MRCModel, ModelConfig
from .perturb import ConfigError, EmbeddingSet

FORMAT = "pqat-checkpoint/1"


def checkpoint_dict(model: MRCModel, emb: EmbeddingSet, vocab: Vocab, train_config: dict | None = None) -> dict:
    return {
        "format": FORMAT,
        "V": emb.V,
        "D": emb.D,
        "vocab": list(vocab.tokens),
        "model_config": model.cfg.to_dict(),
        "train_config": train_config or {},
        "E": emb.E.values.tolist(),
        "theta": {name: {"shape": list(t.shape), "values": t.values.ravel().tolist()}
                  for name, t in sorted(model.params.items())},
    }


def save_checkpoint(path, model: MRCModel, emb: EmbeddingSet, vocab: Vocab,
                    train_config: dict | None = None) -> None:
    # json writes floats with repr, which round-trips float64 exactly
    Path(path).write_text(json.dumps(checkpoint_dict(model, emb, vocab, train_config)))


def load_checkpoint(path) -> tuple[MRCModel, EmbeddingSet, Vocab, dict]:
    """Rebuild ``(model, emb, vocab, train_config)``; ``emb.P`` and ``emb.Q`` come back as zeros."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read checkpoint: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise ConfigError(f"{path}: not a checkpoint (format {doc.get('format')!r})")
    E = np.array(doc["E"], dtype=np.float64)
    if E.shape != (doc["V"], doc["D"]):
        raise ConfigError(f"{path}: E has shape {E.shape}, header says {(doc['V'], doc['D'])}")
    params = {name: Tensor(np.array(p["values"], dtype=np.float64).reshape(p["shape"]),
                           requires_grad=True, name=name)
              for name, p in doc["theta"].items()}
    model = MRCModel(ModelConfig(**doc["model_config"]), params)
    zeros = np.zeros_like(E)
    emb = EmbeddingSet(Tensor(E, requires_grad=True, name="E"),
                       Tensor(zeros, requires_grad=True, name="P"),
                       Tensor(zeros.copy(), requires_grad=True, name="Q"))
    return model, emb, Vocab(doc["vocab"]), doc.get("train_config", {})
