"""Prototype-learning kernel on dense matrices.

Covers the fusion MLP (voxel features plus an MLP of the voxel-aligned
object mask), InfoNCE between few-shot anchors and a learnable prototype
bank, multi-head cross-attention refinement of proposal features, and exact
reverse-mode gradients of the composite objective

    L = L_task(tilde F_prp) + lam * L_CL(anchors, bank)

where ``L_task`` is a least-squares head standing in for the detector.

All forward/backward code avoids ``abs``/``conj`` so it also runs on complex
inputs; the MAML code uses that for complex-step Hessian-vector products.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass
class FusionParams:
    """Two affine layers ``|C| -> hidden -> d`` with a tanh in between.

    ``w2 = None`` gives a single affine layer ``|C| -> d`` (w1 then has d columns).
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray | None = None
    b2: np.ndarray | None = None
    activation: str = "tanh"

    @classmethod
    def zeros(cls, num_classes: int, hidden: int, dim: int) -> "FusionParams":
        return cls(np.zeros((num_classes, hidden)), np.zeros(hidden),
                   np.zeros((hidden, dim)), np.zeros(dim))

    @classmethod
    def random(cls, num_classes: int, hidden: int, dim: int, rng, scale=0.5) -> "FusionParams":
        return cls(rng.normal(0, scale, (num_classes, hidden)), rng.normal(0, scale, hidden),
                   rng.normal(0, scale, (hidden, dim)), rng.normal(0, scale, dim))

    @property
    def out_dim(self) -> int:
        return (self.w1 if self.w2 is None else self.w2).shape[1]


@dataclass
class AttentionParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    heads: int = 4

    def __post_init__(self):
        d = self.wq.shape[1]
        if d % self.heads:
            raise ValueError(f"feature dim {d} not divisible by {self.heads} heads")

    @classmethod
    def random(cls, dim: int, rng, heads: int = 4, scale=None) -> "AttentionParams":
        scale = 1.0 / np.sqrt(dim) if scale is None else scale
        return cls(*(rng.normal(0, scale, (dim, dim)) for _ in range(3)), heads=heads)


@dataclass
class TrainConfig:
    lr: float = 0.1
    steps: int = 500
    tau: float = 0.07
    lam: float = 1.0
    inner_lr: float = 0.05
    outer_lr: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if min(self.lr, self.inner_lr, self.outer_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")


def _activation(name, z):
    if name == "tanh":
        t = np.tanh(z)
        return t, 1.0 - t * t
    if name == "identity":
        return z, np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


def _fusion_forward(m, p: FusionParams):
    z1 = m @ p.w1 + p.b1
    if p.w2 is None:
        return z1, (None, None)
    hid, dact = _activation(p.activation, z1)
    return hid @ p.w2 + p.b2, (hid, dact)


def fuse_features(f_voxel, m_vxl_obj, params: FusionParams) -> np.ndarray:
    """``F_fused = F_voxel + MLP(M_vxl_obj)``, row by row."""
    f_voxel, m_vxl_obj = np.asarray(f_voxel), np.asarray(m_vxl_obj)
    if f_voxel.shape[0] != m_vxl_obj.shape[0]:
        raise ValueError("voxel features and object mask have different row counts")
    if params.w1.shape[0] != m_vxl_obj.shape[1] or params.out_dim != f_voxel.shape[1]:
        raise ValueError("fusion parameters do not match feature/mask shapes")
    out, _ = _fusion_forward(m_vxl_obj, params)
    return f_voxel + out


def _rownorm(x):
    return np.sqrt(np.sum(x * x, axis=-1))


def cosine_similarity(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    na, nb = _rownorm(a), _rownorm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _normalized(x, what):
    n = _rownorm(x)
    if np.any(n == 0):
        raise ValueError(f"{what} has a zero row")
    return x / n[:, None], n


def _softmax(logits):
    shifted = logits - logits.real.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _infonce_parts(anchors, bank, tau):
    if anchors.shape != bank.shape:
        raise ValueError(f"anchors {anchors.shape} and bank {bank.shape} must match")
    a_hat, a_norm = _normalized(anchors, "anchors")
    b_hat, b_norm = _normalized(bank, "bank")
    sim = a_hat @ b_hat.T
    logits = sim / tau
    shift = logits.real.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - shift).sum(axis=1)) + shift[:, 0]
    loss = np.sum(lse - np.diagonal(logits))
    return loss, sim, logits, a_hat, a_norm, b_hat, b_norm


def infonce_loss(anchors, bank, tau: float = 0.07) -> float:
    """``-sum_c log softmax_s(Sim(anchor_c, proto_s) / tau)[c]``."""
    loss = _infonce_parts(np.asarray(anchors, float), np.asarray(bank, float), tau)[0]
    return float(loss)


def infonce_grad(anchors, bank, tau: float = 0.07):
    """Return ``(loss, d_loss/d_bank, d_loss/d_anchors)``."""
    loss, sim, logits, a_hat, a_norm, b_hat, b_norm = _infonce_parts(anchors, bank, tau)
    g = (_softmax(logits) - np.eye(len(sim))) / tau  # dL/dSim
    gs = g * sim
    d_bank = (g.T @ a_hat - gs.sum(axis=0)[:, None] * b_hat) / b_norm[:, None]
    d_anchors = (g @ b_hat - gs.sum(axis=1)[:, None] * a_hat) / a_norm[:, None]
    return loss, d_bank, d_anchors


def _attention_forward(x, bank, p: AttentionParams, dropout=0.0, rng=None):
    n, d = x.shape
    dh = d // p.heads
    q, k, v = x @ p.wq, bank @ p.wk, bank @ p.wv
    hat = np.zeros(q.shape, dtype=np.result_type(q, v))
    cache = []
    for h in range(p.heads):
        sl = slice(h * dh, (h + 1) * dh)
        att = _softmax(q[:, sl] @ k[:, sl].T / np.sqrt(dh))
        keep = None
        if dropout > 0:
            keep = (rng.random(att.shape) >= dropout) / (1.0 - dropout)
        used = att if keep is None else att * keep
        hat[:, sl] = used @ v[:, sl]
        cache.append((sl, att, keep))
    return hat, (q, k, v, cache, dh)


def cross_attention_refine(f_prp, bank, params: AttentionParams, dropout: float = 0.0,
                           rng=None, return_weights: bool = False):
    """Proposals attend over prototypes; returns ``(hat, tilde = hat + f_prp)``.

    Each head uses scores ``Q_h K_h^T / sqrt(d_head)``. Dropout on the
    attention weights is off unless ``dropout > 0`` (then ``rng`` is required).
    """
    f_prp, bank = np.asarray(f_prp), np.asarray(bank)
    if f_prp.shape[1] != params.wq.shape[0] or bank.shape[1] != params.wk.shape[0]:
        raise ValueError("feature dims do not match attention parameters")
    if dropout > 0 and rng is None:
        raise ValueError("dropout needs a seeded rng")
    hat, (_, _, _, cache, _) = _attention_forward(f_prp, bank, params, dropout, rng)
    if return_weights:
        return hat, hat + f_prp, [c[1] for c in cache]
    return hat, hat + f_prp


@dataclass
class KernelParams:
    fusion: FusionParams
    attention: AttentionParams
    bank: np.ndarray
    head: np.ndarray  # (d, k) least-squares task head

    _ARRAYS = ("fusion.w1", "fusion.b1", "fusion.w2", "fusion.b2",
               "attention.wq", "attention.wk", "attention.wv", "bank", "head")

    @classmethod
    def random(cls, num_classes: int, dim: int, hidden: int, out_dim: int, rng,
               heads: int = 4) -> "KernelParams":
        return cls(FusionParams.random(num_classes, hidden, dim, rng),
                   AttentionParams.random(dim, rng, heads),
                   rng.normal(0, 1, (num_classes, dim)),
                   rng.normal(0, 1 / np.sqrt(dim), (dim, out_dim)))

    def _get(self, name):
        obj = self
        for part in name.split("."):
            obj = getattr(obj, part)
        return obj

    def arrays(self) -> dict:
        return {name: self._get(name) for name in self._ARRAYS}

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays().values()])

    def from_vector(self, vec) -> "KernelParams":
        out, pos = {}, 0
        for name, a in self.arrays().items():
            out[name] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size
        fusion = replace(self.fusion, w1=out["fusion.w1"], b1=out["fusion.b1"],
                         w2=out["fusion.w2"], b2=out["fusion.b2"])
        attention = replace(self.attention, wq=out["attention.wq"], wk=out["attention.wk"],
                            wv=out["attention.wv"])
        return KernelParams(fusion, attention, out["bank"], out["head"])


@dataclass
class KernelBatch:
    f_voxel: np.ndarray  # (n, d)
    mask: np.ndarray  # (n, |C|)
    anchors: np.ndarray  # (|C|, d)
    targets: np.ndarray  # (n, k)


def kernel_loss_and_grad(params: KernelParams, batch: KernelBatch, lam: float = 1.0,
                         tau: float = 0.07):
    """Composite loss and its exact gradient (a ``KernelParams`` of gradients)."""
    fp, ap = params.fusion, params.attention
    if fp.w2 is None:
        raise ValueError("gradients need the two-layer fusion MLP")
    n = batch.f_voxel.shape[0]
    # forward
    z1 = batch.mask @ fp.w1 + fp.b1
    hid, dact = _activation(fp.activation, z1)
    fused = batch.f_voxel + hid @ fp.w2 + fp.b2
    hat, (q, k, v, cache, dh) = _attention_forward(fused, params.bank, ap)
    tilde = hat + fused
    resid = tilde @ params.head - batch.targets
    task = 0.5 * np.sum(resid * resid) / n
    cl, d_bank_cl, _ = infonce_grad(batch.anchors, params.bank, tau)
    loss = task + lam * cl
    # backward
    d_pred = resid / n
    d_head = tilde.T @ d_pred
    d_tilde = d_pred @ params.head.T
    d_fused = d_tilde.copy()
    dq, dk, dv = np.zeros_like(q), np.zeros_like(k), np.zeros_like(v)
    for sl, att, _ in cache:
        d_out = d_tilde[:, sl]
        dv[:, sl] = att.T @ d_out
        d_att = d_out @ v[:, sl].T
        d_scores = att * (d_att - np.sum(d_att * att, axis=1, keepdims=True)) / np.sqrt(dh)
        dq[:, sl] = d_scores @ k[:, sl]
        dk[:, sl] = d_scores.T @ q[:, sl]
    d_wq = fused.T @ dq
    d_wk = params.bank.T @ dk
    d_wv = params.bank.T @ dv
    d_fused += dq @ ap.wq.T
    d_bank = dk @ ap.wk.T + dv @ ap.wv.T + lam * d_bank_cl
    d_w2 = hid.T @ d_fused
    d_b2 = d_fused.sum(axis=0)
    d_z1 = (d_fused @ fp.w2.T) * dact
    d_w1 = batch.mask.T @ d_z1
    d_b1 = d_z1.sum(axis=0)
    grad = KernelParams(FusionParams(d_w1, d_b1, d_w2, d_b2, fp.activation),
                        AttentionParams(d_wq, d_wk, d_wv, ap.heads), d_bank, d_head)
    return loss, grad


def kernel_loss(params: KernelParams, batch: KernelBatch, lam: float = 1.0, tau: float = 0.07):
    return kernel_loss_and_grad(params, batch, lam, tau)[0]


def analytic_gradients(params: KernelParams, batch: KernelBatch, lam: float = 1.0,
                       tau: float = 0.07) -> dict:
    """Gradients of the composite loss keyed like ``KernelParams.arrays()``."""
    return kernel_loss_and_grad(params, batch, lam, tau)[1].arrays()


def nearest_prototype(anchors, bank) -> np.ndarray:
    """Index of the most cosine-similar prototype for every anchor."""
    a_hat, _ = _normalized(np.asarray(anchors, float), "anchors")
    b_hat, _ = _normalized(np.asarray(bank, float), "bank")
    return np.argmax(a_hat @ b_hat.T, axis=1)


def train_prototypes(bank, anchors, config: TrainConfig = TrainConfig()):
    """Plain gradient descent on ``lam * InfoNCE`` w.r.t. the bank.

    Returns ``(bank, trace)`` where ``trace[i]`` is the loss before step i and
    the last entry is the final loss.
    """
    bank = np.array(bank, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    trace = []
    for step in range(config.steps + 1):
        loss, d_bank, _ = infonce_grad(anchors, bank, config.tau)
        loss *= config.lam
        if not np.isfinite(loss):
            raise FloatingPointError(f"prototype training diverged at step {step}")
        trace.append(float(loss))
        if step == config.steps or config.lam == 0:
            if config.lam == 0:
                trace.extend([0.0] * (config.steps - step))
            break
        bank -= config.lr * config.lam * d_bank
    return bank, np.array(trace)


__all__ = [
    "FusionParams", "AttentionParams", "TrainConfig", "KernelParams", "KernelBatch",
    "fuse_features", "cosine_similarity", "infonce_loss", "infonce_grad",
    "cross_attention_refine", "kernel_loss", "kernel_loss_and_grad", "analytic_gradients",
    "nearest_prototype", "train_prototypes",
]
