"""Toy reading-comprehension model: learned position and role-type embeddings,
a pre-norm single-head encoder block with a short depthwise convolution in
front of the attention (QANet-style), and span / multiple-choice heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch, DataError
from .perturb import Role

MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    dim: int = 32
    hidden: int = 128
    max_len: int = 32
    layers: int = 1
    n_roles: int = 4
    # spread of confusion-class twins around their shared base vector, relative
    # to the embedding scale
    twin_spread: float = 0.6

    def to_dict(self) -> dict:
        return asdict(self)


def init_embeddings(vocab_size: int, dim: int, rng: np.random.Generator,
                    groups: list[list[int]] | None = None, twin_spread: float = 0.6) -> np.ndarray:
    """Word vectors with row norm about 1; tokens in one group start close together."""
    std = 1.0 / np.sqrt(dim)
    E = rng.normal(0.0, std, size=(vocab_size, dim))
    for group in groups or []:
        base = rng.normal(0.0, std, size=dim)
        for i in group:
            E[i] = base + twin_spread * rng.normal(0.0, std, size=dim)
    return E


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    D, H = cfg.dim, cfg.hidden
    if H < D:
        raise ValueError(f"hidden size {H} must be >= dim {D}")

    def normal(shape, fan_in, gain=1.0):
        return Tensor(rng.normal(0.0, gain / np.sqrt(fan_in), size=shape), requires_grad=True)

    p = {
        "pos": normal((cfg.max_len, D), D),
        "role": normal((cfg.n_roles, D), D),
    }
    for layer in range(cfg.layers):
        pre = f"l{layer}."
        p[pre + "ln0.scale"] = Tensor(np.ones(D), requires_grad=True)
        p[pre + "ln0.shift"] = Tensor(np.zeros(D), requires_grad=True)
        p[pre + "conv.cur"] = Tensor(rng.normal(0.0, 0.5, size=D), requires_grad=True)
        p[pre + "conv.prev"] = Tensor(rng.normal(0.0, 0.5, size=D), requires_grad=True)
        p[pre + "ln1.scale"] = Tensor(np.ones(D), requires_grad=True)
        p[pre + "ln1.shift"] = Tensor(np.zeros(D), requires_grad=True)
        for w in ("wq", "wk", "wv"):
            p[pre + w] = normal((D, D), D)
        p[pre + "wo"] = normal((D, D), D, gain=0.5)
        p[pre + "ln2.scale"] = Tensor(np.ones(D), requires_grad=True)
        p[pre + "ln2.shift"] = Tensor(np.zeros(D), requires_grad=True)
        p[pre + "w1"] = normal((D, H), D)
        p[pre + "w2"] = normal((H, D), H, gain=0.5)
    p["head.start"] = normal((D, 1), D)
    p["head.end"] = normal((D, 1), D)
    p["head.choice"] = normal((D, D), D)
    for name, t in p.items():
        t.name = name
    return p


def attention_bias(pad_mask: np.ndarray) -> Tensor:
    """Additive ``(N, T, T)`` score bias that hides padded key positions."""
    n, t = pad_mask.shape
    keys = np.where(pad_mask, 0.0, MASK_VALUE)
    return Tensor(np.broadcast_to(keys[:, None, :], (n, t, t)).copy())


def encode(z: Tensor, params: dict[str, Tensor], attn_bias: Tensor | None = None, layer: int = 0) -> Tensor:
    """One bidirectional pre-norm block.

    ``c = z + Conv(LN(z))``, ``h = c + Attn(LN(c))``, ``out = h + FFN(LN(h))``.
    The convolution is depthwise over the current and the preceding position.
    """
    pre = f"l{layer}."
    d = z.shape[-1]
    a = ad.layer_norm(z, params[pre + "ln0.scale"], params[pre + "ln0.shift"])
    c = z + (a * params[pre + "conv.cur"] + ad.shift_down(a) * params[pre + "conv.prev"])
    a = ad.layer_norm(c, params[pre + "ln1.scale"], params[pre + "ln1.shift"])
    q = a @ params[pre + "wq"]
    k = a @ params[pre + "wk"]
    v = a @ params[pre + "wv"]
    scores = ad.mul_scalar(q @ ad.transpose_last(k), 1.0 / np.sqrt(d))
    if attn_bias is not None:
        scores = scores + attn_bias
    h = c + (ad.softmax(scores) @ v) @ params[pre + "wo"]
    f = ad.layer_norm(h, params[pre + "ln2.scale"], params[pre + "ln2.shift"])
    return h + ad.relu(f @ params[pre + "w1"]) @ params[pre + "w2"]


class MRCModel:
    """Everything in the model except the word-embedding table (which lives in
    :class:`pqat.perturb.EmbeddingSet`)."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int) -> "MRCModel":
        return cls(cfg, init_params(cfg, np.random.default_rng([seed, 1])))

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def hidden_states(self, z: Tensor, batch: Batch) -> Tensor:
        n, t = batch.ids.shape
        if t > self.cfg.max_len:
            raise DataError(f"sequence length {t} exceeds model max_len {self.cfg.max_len}")
        pos = ad.getitem(self.params["pos"], slice(0, t))
        x = (z + pos) + ad.gather_rows(self.params["role"], batch.roles)
        bias = attention_bias(batch.pad_mask)
        for layer in range(self.cfg.layers):
            x = encode(x, self.params, bias, layer)
        return x

    def span_forward(self, z: Tensor, batch: Batch) -> tuple[Tensor, Tensor, Tensor]:
        """Start/end logits over all positions (padding masked) and the mean of
        the start and end cross-entropies."""
        n, t = batch.ids.shape
        if batch.starts is None:
            raise DataError("span_forward needs a span batch")
        if np.any(batch.starts >= t) or np.any(batch.ends >= t) or np.any(batch.starts < 0):
            raise DataError("gold span index outside the sequence")
        h = self.hidden_states(z, batch)
        pad_bias = Tensor(np.where(batch.pad_mask, 0.0, MASK_VALUE))
        start = ad.reshape(h @ self.params["head.start"], (n, t)) + pad_bias
        end = ad.reshape(h @ self.params["head.end"], (n, t)) + pad_bias
        loss = ad.mul_scalar(ad.cross_entropy_logits(start, batch.starts)
                             + ad.cross_entropy_logits(end, batch.ends), 0.5)
        return start, end, loss

    def choice_forward(self, z: Tensor, batch: Batch) -> tuple[Tensor, Tensor]:
        """Score each option sequence from its first-position vector; cross-entropy
        over the ``m`` scores of every example."""
        if batch.choices is None:
            raise DataError("choice_forward needs a choice batch")
        if batch.m < 2:
            raise DataError(f"multiple choice needs m >= 2 options, got {batch.m}")
        h = self.hidden_states(z, batch)
        rows = np.arange(batch.ids.shape[0])
        h_q = ad.getitem(h, (rows, np.argmax(batch.roles == Role.QUESTION, axis=1)))
        h_o = ad.getitem(h, (rows, np.argmax(batch.roles == Role.OPTION, axis=1)))
        ones = Tensor(np.ones((h.shape[-1], 1)))
        scores = ((h_q @ self.params["head.choice"]) * h_o) @ ones
        logits = ad.reshape(scores, (batch.n_examples, batch.m))
        return logits, ad.cross_entropy_logits(logits, batch.choices)

    def loss(self, z: Tensor, batch: Batch) -> Tensor:
        if batch.task == "choice":
            return self.choice_forward(z, batch)[1]
        return self.span_forward(z, batch)[2]


def predict_span(start_logits: np.ndarray, end_logits: np.ndarray, passage_range: tuple[int, int],
                 max_answer_len: int = 8) -> tuple[int, int]:
    """Best ``(start, end)`` with ``start <= end <= start + max_answer_len`` inside the
    inclusive passage range; ties go to the smallest start, then smallest end."""
    lo, hi = int(passage_range[0]), int(passage_range[1])
    if hi < lo:
        raise ValueError(f"empty passage range {passage_range}")
    s = np.asarray(start_logits, dtype=np.float64)[lo:hi + 1]
    e = np.asarray(end_logits, dtype=np.float64)[lo:hi + 1]
    n = s.size
    i, j = np.indices((n, n))
    valid = (j >= i) & (j - i <= max_answer_len)
    scores = np.where(valid, s[:, None] + e[None, :], -np.inf)
    best = int(np.argmax(scores))
    return lo + best // n, lo + best % n
