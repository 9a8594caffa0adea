"""Adversarial training loop with local (per-position) and virtual passage /
question perturbations, AdamW, and span / choice evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch, Example, Vocab, build_batch, iter_batches, sequence_length
from .model import MRCModel, ModelConfig, init_embeddings, predict_span
from .perturb import (ConfigError, EmbeddingSet, compose, init_delta, pgd_update_classic,
                      renormalize, update_delta, update_virtual_rowwise)

log = logging.getLogger(__name__)

MODES = ("baseline", "at", "pqat", "both")


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    eps_delta: float = 0.0
    eps_p: float = 2e-2
    eps_q: float = 2e-2
    sigma: float = 1e-2
    K: int = 2
    alpha: float | None = None
    eps_ball: float | None = None
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    batch_size: int = 8
    epochs: int = 3
    seed: int = 0
    grad_accum_mode: str = "sum"
    delta_norm_scope: str = "per_example"
    dim: int = 32
    hidden: int = 128
    layers: int = 1
    max_len: int = 0
    max_answer_len: int = 8
    twin_spread: float = 0.6
    log_wall_clock: bool = False

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        for name in ("eps_delta", "eps_p", "eps_q", "sigma", "weight_decay"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"{name} must be a finite value >= 0, got {v}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if (self.alpha is None) != (self.eps_ball is None):
            raise ConfigError("alpha and eps_ball must be given together (classic PGD)")
        if self.alpha is not None and (self.alpha <= 0 or self.eps_ball <= 0):
            raise ConfigError("alpha and eps_ball must be > 0")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.warmup_ratio <= 1:
            raise ConfigError(f"warmup_ratio must lie in [0, 1], got {self.warmup_ratio}")
        if self.grad_accum_mode not in ("sum", "mean"):
            raise ConfigError(f"grad_accum_mode must be 'sum' or 'mean', got {self.grad_accum_mode!r}")
        if self.delta_norm_scope not in ("per_example", "whole_batch"):
            raise ConfigError(f"delta_norm_scope must be 'per_example' or 'whole_batch', "
                              f"got {self.delta_norm_scope!r}")
        if self.dim < 1 or self.hidden < self.dim or self.layers < 1:
            raise ConfigError("need dim >= 1, hidden >= dim, layers >= 1")

    @property
    def classic_pgd(self) -> bool:
        return self.alpha is not None

    @property
    def local_active(self) -> bool:
        return self.eps_delta > 0 or self.classic_pgd

    @property
    def mode(self) -> str:
        local = self.local_active
        virtual = self.eps_p > 0 or self.eps_q > 0
        if local and virtual:
            return "both"
        if local:
            return "at"
        if virtual:
            return "pqat"
        return "baseline"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def with_mode(self, mode: str, eps_delta: float, eps_pq: float) -> "TrainConfig":
        """Copy with the strengths set for one ablation row."""
        strengths = {"baseline": (0.0, 0.0), "at": (eps_delta, 0.0),
                     "pqat": (0.0, eps_pq), "both": (eps_delta, eps_pq)}
        if mode not in strengths:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        d, pq = strengths[mode]
        return TrainConfig.from_dict({**self.to_dict(), "eps_delta": d, "eps_p": pq, "eps_q": pq})


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.values) for p in params], [np.zeros_like(p.values) for p in params])


def adam_update(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float,
                weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam step plus decoupled weight decay ``p -= lr * wd * p``
    (computed from the pre-step parameter), in place."""
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ad.DimensionError(f"adam_update: grad {g.shape} vs param {p.shape}")
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        decay = lr * weight_decay * p.values
        p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.values -= decay


def lr_at(step: int, total: int, base_lr: float, warmup_ratio: float = 0.1) -> float:
    """Linear warmup over the first ``warmup_ratio`` of steps, then linear decay to 0."""
    warm = int(math.ceil(total * warmup_ratio))
    if step < warm:
        return base_lr * (step + 1) / warm
    return base_lr * max(0.0, (total - step) / max(1, total - warm))


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    mode: str
    loss_clean: float
    loss_adv: list[float]
    em: float | None = None
    f1: float | None = None
    acc: float | None = None
    wall_ms: int = 0
    diagnostics: dict = field(default_factory=dict, repr=False)

    def to_json(self) -> str:
        rec = {k: getattr(self, k) for k in
               ("step", "epoch", "mode", "loss_clean", "loss_adv", "em", "f1", "acc", "wall_ms")}
        return json.dumps(rec)


class Trainer:
    """Owns the model, the embedding set, the optimizer state and the RNG of
    one training job.

    With ``trace=True`` every :meth:`train_batch` record carries the
    intermediate quantities (renormalised tables, perturbation steps, the
    accumulated gradient) in ``record.diagnostics``.
    """

    def __init__(self, model: MRCModel, emb: EmbeddingSet, config: TrainConfig, trace: bool = False):
        self.model = model
        self.emb = emb
        self.config = config
        self.trace = trace
        self.adam = AdamState.for_params(self.trainable())
        self.rng = np.random.default_rng([config.seed, 2])
        self.step = 0

    def trainable(self) -> list[Tensor]:
        return self.model.parameters() + [self.emb.E]

    def _zero(self) -> None:
        ad.zero_grad(self.trainable() + [self.emb.P, self.emb.Q])

    def clean_loss(self, batch: Batch) -> float:
        with ad.no_grad():
            z, _ = compose(batch.ids, batch.roles, self.emb, None, use_p=False, use_q=False)
            return self.model.loss(z, batch).item()

    def train_batch(self, batch: Batch, lr: float | None = None, epoch: int = 0) -> MetricsRecord:
        cfg = self.config
        lr = cfg.lr if lr is None else lr
        emb = self.emb
        use_p, use_q = cfg.eps_p > 0, cfg.eps_q > 0
        diag: dict = {}

        emb.P.values = renormalize(emb.P.values, cfg.sigma)
        emb.Q.values = renormalize(emb.Q.values, cfg.sigma)
        if self.trace:
            diag["P_renorm"] = emb.P.values.copy()
            diag["Q_renorm"] = emb.Q.values.copy()

        shape = batch.ids.shape + (emb.D,)
        delta = init_delta(shape, cfg.sigma, self.rng) if cfg.local_active else None
        if self.trace:
            diag["delta_init"] = None if delta is None else delta.copy()
        params = self.trainable()
        g_acc = [np.zeros_like(p.values) for p in params]
        losses = []
        steps = []
        for t in range(cfg.K):
            self._zero()
            delta_t = Tensor(delta, requires_grad=True) if delta is not None else None
            z, x_vec = compose(batch.ids, batch.roles, emb, delta_t, use_p=use_p, use_q=use_q)
            loss = self.model.loss(z, batch)
            lv = loss.item()
            if not math.isfinite(lv):
                info = {"step": self.step, "inner_step": t, "mode": cfg.mode,
                        "delta_norm": None if delta is None else float(np.linalg.norm(delta)),
                        "P_norm": float(np.linalg.norm(emb.P.values)),
                        "Q_norm": float(np.linalg.norm(emb.Q.values)),
                        "E_norm": float(np.linalg.norm(emb.E.values))}
                raise NonFiniteLossError(f"non-finite loss {lv} at step {self.step}", info)
            losses.append(lv)
            ad.backward(loss)
            for acc, p in zip(g_acc, params):
                acc += p.grad
            step_info = {}
            if delta is not None:
                if cfg.classic_pgd:
                    new = pgd_update_classic(delta, delta_t.grad, cfg.alpha, cfg.eps_ball)
                else:
                    new = update_delta(delta, delta_t.grad, x_vec.values, cfg.eps_delta,
                                       cfg.delta_norm_scope)
                if self.trace:
                    step_info.update(delta_step=new - delta, x_vec=x_vec.values.copy(),
                                     grad_delta=delta_t.grad.copy())
                delta = new
            row_norms = np.sqrt((emb.E.values ** 2).sum(axis=1))
            if use_p:
                newP = update_virtual_rowwise(emb.P.values, emb.P.grad, row_norms, cfg.eps_p)
                if self.trace:
                    step_info.update(P_step=newP - emb.P.values, grad_P=emb.P.grad.copy())
                emb.P.values = newP
            if use_q:
                newQ = update_virtual_rowwise(emb.Q.values, emb.Q.grad, row_norms, cfg.eps_q)
                if self.trace:
                    step_info.update(Q_step=newQ - emb.Q.values, grad_Q=emb.Q.grad.copy())
                emb.Q.values = newQ
            if self.trace:
                step_info.update(row_norms=row_norms, delta=None if delta is None else delta.copy(),
                                 P=emb.P.values.copy(), Q=emb.Q.values.copy())
                steps.append(step_info)
        if cfg.grad_accum_mode == "mean":
            g_acc = [g / cfg.K for g in g_acc]
        if self.trace:
            diag["steps"] = steps
            diag["g_acc"] = [g.copy() for g in g_acc]
            diag["params_before"] = [p.values.copy() for p in params]
        adam_update(params, g_acc, self.adam, lr, cfg.weight_decay, cfg.betas, cfg.adam_eps)
        self._zero()
        if self.trace:
            diag["params_after"] = [p.values.copy() for p in params]
        rec = MetricsRecord(step=self.step, epoch=epoch, mode=cfg.mode,
                            loss_clean=self.clean_loss(batch), loss_adv=losses, diagnostics=diag)
        self.step += 1
        return rec


def build_model(config: TrainConfig, vocab: Vocab, max_len: int) -> tuple[MRCModel, EmbeddingSet]:
    mcfg = ModelConfig(dim=config.dim, hidden=config.hidden, max_len=max_len, layers=config.layers,
                       twin_spread=config.twin_spread)
    model = MRCModel.create(mcfg, config.seed)
    E = init_embeddings(len(vocab), config.dim, np.random.default_rng([config.seed, 0]),
                        vocab.confusion_classes(), mcfg.twin_spread)
    return model, EmbeddingSet.create(E, config.sigma, config.seed)


def required_len(*datasets: Sequence[Example]) -> int:
    return max(sequence_length(ex) for ds in datasets for ex in ds)


def train(dataset: Sequence[Example], vocab: Vocab, config: TrainConfig,
          eval_sets: dict[str, Sequence[Example]] | None = None,
          on_record: Callable[[MetricsRecord], None] | None = None,
          trace: bool = False) -> tuple[MRCModel, EmbeddingSet, list[MetricsRecord]]:
    """Run ``epochs`` passes of :meth:`Trainer.train_batch` over shuffled batches.

    ``eval_sets`` are scored at the end of every epoch; the first one fills the
    em / f1 / acc fields of the epoch record and all of them land in
    ``diagnostics["eval"]``.
    """
    if not dataset:
        raise ConfigError("train: dataset is empty")
    eval_sets = eval_sets or {}
    max_len = config.max_len or required_len(dataset, *eval_sets.values())
    model, emb = build_model(config, vocab, max_len)
    trainer = Trainer(model, emb, config, trace=trace)
    records: list[MetricsRecord] = []
    n_batches = math.ceil(len(dataset) / config.batch_size)
    total = config.epochs * n_batches
    t0 = time.perf_counter()

    def emit(rec: MetricsRecord) -> None:
        if config.log_wall_clock:
            rec.wall_ms = int((time.perf_counter() - t0) * 1000)
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, 3, epoch]).permutation(len(dataset))
        for chunk in iter_batches(dataset, config.batch_size, order):
            batch = build_batch(chunk, vocab, max_len)
            lr = lr_at(trainer.step, total, config.lr, config.warmup_ratio)
            emit(trainer.train_batch(batch, lr, epoch))
        if eval_sets:
            results = {name: evaluate(model, emb, ds, vocab, max_len, config.max_answer_len)
                       for name, ds in eval_sets.items()}
            first = next(iter(results.values()))
            rec = MetricsRecord(step=trainer.step, epoch=epoch, mode=config.mode,
                                loss_clean=first["loss"], loss_adv=[], em=first.get("em"),
                                f1=first.get("f1"), acc=first.get("acc"),
                                diagnostics={"eval": results})
            emit(rec)
            log.info("epoch %d %s", epoch, results)
    return model, emb, records


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def span_f1(pred: tuple[int, int], gold: tuple[int, int]) -> float:
    overlap = max(0, min(pred[1], gold[1]) - max(pred[0], gold[0]) + 1)
    if overlap == 0:
        return 0.0
    precision = overlap / (pred[1] - pred[0] + 1)
    recall = overlap / (gold[1] - gold[0] + 1)
    return 2 * precision * recall / (precision + recall)


def clean_inputs(batch: Batch, emb: EmbeddingSet) -> Tensor:
    """Plain word-vector lookup; the virtual tables are never read."""
    return ad.gather_rows(emb.E, batch.ids)


def predict(model: MRCModel, emb: EmbeddingSet, examples: Sequence[Example], vocab: Vocab,
            max_len: int, max_answer_len: int = 8, batch_size: int = 64) -> Iterator[tuple]:
    """Yield ``(prediction, loss_sum)`` per batch: span tuples or option indices."""
    with ad.no_grad():
        for chunk in iter_batches(examples, batch_size):
            batch = build_batch(chunk, vocab, max_len)
            z = clean_inputs(batch, emb)
            if batch.task == "choice":
                logits, loss = model.choice_forward(z, batch)
                preds = [int(i) for i in np.argmax(logits.values, axis=1)]
            else:
                start, end, loss = model.span_forward(z, batch)
                preds = [predict_span(start.values[r], end.values[r], batch.passage_ranges[r],
                                      max_answer_len) for r in range(len(chunk))]
            yield preds, loss.item() * len(chunk)


def evaluate(model: MRCModel, emb: EmbeddingSet, examples: Sequence[Example], vocab: Vocab,
             max_len: int | None = None, max_answer_len: int = 8) -> dict:
    """EM / F1 for span data, accuracy for choice data, plus the mean clean loss."""
    max_len = max_len or model.cfg.max_len
    preds: list = []
    loss_sum = 0.0
    for p, l in predict(model, emb, examples, vocab, max_len, max_answer_len):
        preds += p
        loss_sum += l
    return score(preds, examples) | {"loss": loss_sum / len(examples)}


def score(preds: Sequence, examples: Sequence[Example]) -> dict:
    if examples[0].choice is not None:
        return {"acc": float(np.mean([p == ex.choice for p, ex in zip(preds, examples)]))}
    gold = [(ex.span[0] + 1, ex.span[1] + 1) for ex in examples]
    em = float(np.mean([tuple(p) == g for p, g in zip(preds, gold)]))
    f1 = float(np.mean([span_f1(tuple(p), g) for p, g in zip(preds, gold)]))
    return {"em": em, "f1": f1}
