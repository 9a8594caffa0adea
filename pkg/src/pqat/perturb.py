"""Word-embedding table, virtual passage/question perturbation tables, and the
local per-position perturbation, with their initialisation and update rules."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import ContractError, DimensionError, Tensor, add, gather_rows, mul

ZERO_GRAD_THRESHOLD = 1e-12


class Role(enum.IntEnum):
    PASSAGE = 0
    QUESTION = 1
    OPTION = 2
    SPECIAL = 3


class DegenerateMatrixWarning(RuntimeWarning):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class EmbeddingSet:
    """Real embedding table ``E`` plus the virtual tables ``P`` and ``Q``.

    ``P`` and ``Q`` only ever hold perturbations. Nothing at inference time reads
    them and checkpoints never store them.
    """

    E: Tensor
    P: Tensor
    Q: Tensor

    def __post_init__(self):
        if not (self.E.shape == self.P.shape == self.Q.shape) or self.E.values.ndim != 2:
            raise DimensionError(
                f"E, P, Q must share one V x D shape, got {self.E.shape}, {self.P.shape}, {self.Q.shape}")

    @property
    def V(self) -> int:
        return self.E.shape[0]

    @property
    def D(self) -> int:
        return self.E.shape[1]

    @classmethod
    def create(cls, E: np.ndarray, sigma: float, seed: int) -> "EmbeddingSet":
        E = np.asarray(E, dtype=np.float64)
        P, Q = init_virtual(E.shape[0], E.shape[1], sigma, seed)
        return cls(Tensor(E, requires_grad=True, name="E"),
                   Tensor(P, requires_grad=True, name="P"),
                   Tensor(Q, requires_grad=True, name="Q"))


def init_virtual(V: int, D: int, sigma: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw the P and Q tables i.i.d. from Normal(0, sigma^2)."""
    if V < 1 or D < 1:
        raise ConfigError(f"init_virtual: V and D must be >= 1, got V={V}, D={D}")
    if sigma < 0:
        raise ConfigError(f"init_virtual: sigma must be >= 0, got {sigma}")
    rng = np.random.default_rng(seed)
    P = rng.normal(0.0, 1.0, size=(V, D)) * sigma
    Q = rng.normal(0.0, 1.0, size=(V, D)) * sigma
    return P, Q


def renormalize(M: np.ndarray, sigma: float) -> np.ndarray:
    """Shift and scale the whole matrix to mean 0 and population std ``sigma``.

    A constant matrix has no direction to keep; it comes back as zeros with a
    :class:`DegenerateMatrixWarning`.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.size < 2:
        raise ContractError("renormalize: matrix needs at least 2 entries")
    mu = M.mean()
    std = M.std()
    if std == 0.0:
        warnings.warn("renormalize: matrix has zero spread, returning zeros",
                      DegenerateMatrixWarning, stacklevel=2)
        return np.zeros_like(M)
    return (M - mu) / std * sigma


def init_delta(shape, sigma: float, rng: np.random.Generator | int) -> np.ndarray:
    """Uniform(-sigma, sigma) noise scaled by 1/sqrt(D), D being the last axis."""
    if sigma < 0:
        raise ConfigError(f"init_delta: sigma must be >= 0, got {sigma}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    shape = tuple(shape)
    if sigma == 0:
        return np.zeros(shape)
    return rng.uniform(-sigma, sigma, size=shape) / np.sqrt(shape[-1])


def _role_mask(roles: np.ndarray, wanted: tuple[Role, ...], d: int) -> Tensor:
    m = np.isin(roles, [int(r) for r in wanted]).astype(np.float64)
    return Tensor(np.repeat(m[..., None], d, axis=-1))


def compose(ids, roles, emb: EmbeddingSet, delta: Tensor | None,
            use_p: bool = True, use_q: bool = True) -> tuple[Tensor, Tensor]:
    """Build the adversarial input ``E[x] + P[x]*passage + Q[x]*question + delta``.

    OPTION positions route to ``Q``; SPECIAL positions get ``E[x] + delta`` only.
    Returns ``(z_vec, x_vec)`` where ``x_vec`` is the clean lookup node (its
    values are needed by the normalised updates).
    """
    ids = np.asarray(ids, dtype=np.int64)
    roles = np.asarray(roles, dtype=np.int64)
    if ids.shape != roles.shape:
        raise ContractError(f"compose: ids shape {ids.shape} does not match role mask {roles.shape}")
    x_vec = gather_rows(emb.E, ids)
    z = x_vec
    if use_p:
        z = add(z, mul(gather_rows(emb.P, ids), _role_mask(roles, (Role.PASSAGE,), emb.D)))
    if use_q:
        z = add(z, mul(gather_rows(emb.Q, ids),
                       _role_mask(roles, (Role.QUESTION, Role.OPTION), emb.D)))
    if delta is not None:
        if delta.shape != z.shape:
            raise DimensionError(f"compose: delta shape {delta.shape} != embedded shape {z.shape}")
        z = add(z, delta)
    return z, x_vec


def _example_norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt((a.reshape(a.shape[0], -1) ** 2).sum(axis=1))


def update_delta(delta: np.ndarray, grad_delta: np.ndarray, x_vec: np.ndarray, eps_delta: float,
                 scope: str = "per_example") -> np.ndarray:
    """Normalised ascent step on the local perturbation.

    With ``scope="per_example"`` each slice along the first axis gets a step of
    norm ``eps_delta * ||x_vec[b]||`` in the direction of its own gradient. With
    ``"whole_batch"`` one norm is taken over the full tensors. Slices whose
    gradient norm is below 1e-12 are left as they are.
    """
    if delta.shape != grad_delta.shape or delta.shape != x_vec.shape:
        raise DimensionError(
            f"update_delta: shapes {delta.shape}, {grad_delta.shape}, {x_vec.shape} differ")
    if eps_delta == 0:
        return delta.copy()
    if scope == "whole_batch":
        gn = float(np.sqrt((grad_delta ** 2).sum()))
        if gn < ZERO_GRAD_THRESHOLD:
            return delta.copy()
        return delta + grad_delta / gn * float(np.sqrt((x_vec ** 2).sum())) * eps_delta
    if scope != "per_example":
        raise ConfigError(f"update_delta: unknown scope {scope!r}")
    gn = _example_norms(grad_delta)
    xn = _example_norms(x_vec)
    live = gn >= ZERO_GRAD_THRESHOLD
    factor = np.where(live, xn * eps_delta / np.where(live, gn, 1.0), 0.0)
    step = grad_delta * factor.reshape((-1,) + (1,) * (delta.ndim - 1))
    out = delta.copy()
    out[live] += step[live]
    return out


def update_virtual_rowwise(M: np.ndarray, grad_M: np.ndarray,
                           row_norms: np.ndarray | Mapping[int, float], eps: float) -> np.ndarray:
    """Token-wise normalised step: every row with a nonzero gradient moves by
    ``eps * row_norms[i]`` along its own gradient direction."""
    if M.shape != grad_M.shape:
        raise DimensionError(f"update_virtual_rowwise: shapes {M.shape} and {grad_M.shape} differ")
    out = M.copy()
    if eps == 0:
        return out
    gn = np.sqrt((grad_M ** 2).sum(axis=1))
    rows = np.nonzero(gn >= ZERO_GRAD_THRESHOLD)[0]
    if isinstance(row_norms, Mapping):
        missing = [int(i) for i in rows if int(i) not in row_norms]
        norms = np.array([row_norms.get(int(i), np.nan) for i in rows])
    else:
        row_norms = np.asarray(row_norms, dtype=np.float64)
        missing = [int(i) for i in rows if i >= row_norms.size or not np.isfinite(row_norms[i])]
        norms = row_norms[rows] if not missing else None
    if missing:
        raise ContractError(f"update_virtual_rowwise: no row norm for token row {missing[0]}")
    out[rows] += grad_M[rows] / gn[rows, None] * (norms * eps)[:, None]
    return out


def pgd_update_classic(delta: np.ndarray, grad: np.ndarray, alpha: float, eps_ball: float) -> np.ndarray:
    """One projected step: ascend ``alpha`` along the normalised gradient, then
    pull each example back inside the L2 ball of radius ``eps_ball``."""
    if alpha <= 0 or eps_ball <= 0:
        raise ConfigError(f"pgd_update_classic: alpha and eps_ball must be > 0, got {alpha}, {eps_ball}")
    if delta.shape != grad.shape:
        raise DimensionError(f"pgd_update_classic: shapes {delta.shape} and {grad.shape} differ")
    bshape = (-1,) + (1,) * (delta.ndim - 1)
    gn = _example_norms(grad)
    live = gn >= ZERO_GRAD_THRESHOLD
    step = grad * (alpha / np.where(live, gn, 1.0) * live).reshape(bshape)
    v = delta + step
    vn = _example_norms(v)
    scale = np.where(vn > eps_ball, eps_ball / np.where(vn > 0, vn, 1.0), 1.0)
    return v * scale.reshape(bshape)
