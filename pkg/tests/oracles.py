"""Independent reference implementations used by the training and acceptance tests.

The torch versions recompute every gradient with torch autograd, so they share
no differentiation code with the package.
"""

from dataclasses import dataclass

import numpy as np
import torch

from pqat import autodiff as ad
from pqat.autodiff import Tensor
from pqat.perturb import Role


@dataclass
class TinyBatch:
    ids: np.ndarray
    roles: np.ndarray
    y: np.ndarray


class TinyLinear:
    """Score every position with one weight vector; squared error to ``y``."""

    def __init__(self, w):
        self.w = Tensor(np.asarray(w, dtype=np.float64).reshape(-1, 1), requires_grad=True, name="w")

    def parameters(self):
        return [self.w]

    def loss(self, z, batch):
        n, t = batch.ids.shape
        s = ad.reshape(z @ self.w, (n, t))
        r = s - Tensor(batch.y)
        return ad.mean(r * r)


def torch_batch_step(E, P, Q, w, batch, cfg, adam, delta0):
    """One batch of the adversarial loop in torch float64.

    ``adam`` is a dict with ``m``, ``v`` lists (for ``[w, E]``) and ``step``;
    it is updated in place. Returns a dict of intermediate quantities.
    """
    t64 = lambda a: torch.tensor(np.asarray(a), dtype=torch.float64)
    E, P, Q, w = t64(E), t64(P), t64(Q), t64(w).reshape(-1, 1)
    ids = torch.tensor(batch.ids)
    roles = np.asarray(batch.roles)
    mp = t64((roles == Role.PASSAGE)[..., None] * 1.0)
    mq = t64(np.isin(roles, [Role.QUESTION, Role.OPTION])[..., None] * 1.0)
    y = t64(batch.y)
    out = {"steps": []}

    def renorm(M):
        std = M.std(unbiased=False)
        if std == 0:
            return torch.zeros_like(M)
        return (M - M.mean()) / std * cfg.sigma

    P, Q = renorm(P), renorm(Q)
    out["P_renorm"], out["Q_renorm"] = P.numpy().copy(), Q.numpy().copy()
    delta = t64(delta0) if delta0 is not None else None
    g_acc = [torch.zeros_like(w), torch.zeros_like(E)]
    losses = []
    for _ in range(cfg.K):
        wv = w.clone().requires_grad_(True)
        Ev = E.clone().requires_grad_(True)
        Pv = P.clone().requires_grad_(True)
        Qv = Q.clone().requires_grad_(True)
        leaves = [wv, Ev, Pv, Qv]
        x = Ev[ids]
        z = x
        if cfg.eps_p > 0:
            z = z + Pv[ids] * mp
        if cfg.eps_q > 0:
            z = z + Qv[ids] * mq
        if delta is not None:
            dv = delta.clone().requires_grad_(True)
            leaves.append(dv)
            z = z + dv
        s = (z @ wv).reshape(ids.shape)
        loss = ((s - y) ** 2).mean()
        losses.append(loss.item())
        grads = torch.autograd.grad(loss, leaves, allow_unused=True)
        grads = [torch.zeros_like(l) if g is None else g for g, l in zip(grads, leaves)]
        g_acc[0] = g_acc[0] + grads[0]
        g_acc[1] = g_acc[1] + grads[1]
        step = {}
        if delta is not None:
            gd = grads[4]
            gn = gd.reshape(gd.shape[0], -1).norm(dim=1)
            xn = x.detach().reshape(x.shape[0], -1).norm(dim=1)
            live = (gn >= 1e-12).double()
            scale = torch.where(gn >= 1e-12, xn * cfg.eps_delta / torch.where(gn >= 1e-12, gn, 1.0),
                                torch.zeros_like(gn)) * live
            delta = delta + gd * scale.reshape(-1, 1, 1)
            step["delta"] = delta.numpy().copy()
        row_norms = E.norm(dim=1)
        for name, M, g, eps in (("P", P, grads[2], cfg.eps_p), ("Q", Q, grads[3], cfg.eps_q)):
            if eps == 0:
                continue
            gn = g.norm(dim=1)
            new = M.clone()
            for i in range(M.shape[0]):
                if gn[i] >= 1e-12:
                    new[i] = M[i] + g[i] / gn[i] * row_norms[i] * eps
            if name == "P":
                P = new
            else:
                Q = new
            step[name] = new.numpy().copy()
        out["steps"].append(step)
    if cfg.grad_accum_mode == "mean":
        g_acc = [g / cfg.K for g in g_acc]
    out["g_acc"] = [g.numpy().copy() for g in g_acc]
    b1, b2 = cfg.betas
    adam["step"] += 1
    params = [w, E]
    new_params = []
    for k, (p, g) in enumerate(zip(params, g_acc)):
        m = b1 * adam["m"][k] + (1 - b1) * g
        v = b2 * adam["v"][k] + (1 - b2) * g * g
        adam["m"][k], adam["v"][k] = m, v
        mh = m / (1 - b1 ** adam["step"])
        vh = v / (1 - b2 ** adam["step"])
        new_params.append(p - cfg.lr * mh / (vh.sqrt() + cfg.adam_eps) - cfg.lr * cfg.weight_decay * p)
    out["params_after"] = [new_params[0].numpy().copy(), new_params[1].numpy().copy()]
    out["P"], out["Q"] = P.numpy().copy(), Q.numpy().copy()
    out["losses"] = losses
    return out


def torch_adam_state(w_shape, E_shape):
    return {"m": [torch.zeros(w_shape, dtype=torch.float64), torch.zeros(E_shape, dtype=torch.float64)],
            "v": [torch.zeros(w_shape, dtype=torch.float64), torch.zeros(E_shape, dtype=torch.float64)],
            "step": 0}


def hand_trace_instance():
    """2-token vocab, D=4, one sequence ``[t0 t1 | t1]`` (two passage positions, one question)."""
    E = np.array([[0.5, -0.3, 0.2, 0.1],
                  [-0.4, 0.6, 0.1, -0.2]])
    w = np.array([0.7, -0.5, 0.3, 0.2])
    batch = TinyBatch(ids=np.array([[0, 1, 1]]),
                      roles=np.array([[Role.PASSAGE, Role.PASSAGE, Role.QUESTION]]),
                      y=np.array([[1.0, -1.0, 0.5]]))
    return E, w, batch
