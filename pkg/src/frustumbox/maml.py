"""Two-step (MAML) meta-update on flat parameter vectors.

    theta_1 = theta - inner_lr * grad L_support(theta)
    theta'  = theta - outer_lr * (I - inner_lr * H_support(theta)) grad L_query(theta_1)

Tasks expose ``loss``, ``grad`` and ``hvp``. Where no closed-form Hessian is
at hand, ``hvp`` uses a complex step on the analytic gradient, which is exact
to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .proto import KernelBatch, KernelParams, infonce_grad, kernel_loss_and_grad

_CSTEP = 1e-30


def complex_step_hvp(grad_fn, theta, v) -> np.ndarray:
    """``H(theta) v`` from ``Im(grad(theta + i h v)) / h``."""
    return np.imag(grad_fn(theta + 1j * _CSTEP * np.asarray(v))) / _CSTEP


class Task:
    def loss(self, theta) -> float:
        raise NotImplementedError

    def grad(self, theta) -> np.ndarray:
        raise NotImplementedError

    def hvp(self, theta, v) -> np.ndarray:
        return complex_step_hvp(self.grad, np.asarray(theta, dtype=np.float64), v)


@dataclass
class QuadraticTask(Task):
    """``0.5 * ||theta - target||^2``."""

    target: np.ndarray

    def loss(self, theta):
        d = theta - self.target
        return 0.5 * float(d @ d)

    def grad(self, theta):
        return theta - self.target

    def hvp(self, theta, v):
        return np.asarray(v, dtype=np.float64)


class SineTask(Task):
    """Regress ``amplitude * sin(x + phase)`` with a 1-hidden-layer tanh MLP.

    Parameters are packed as ``[w1 (H), b1 (H), w2 (H), b2]``.
    """

    def __init__(self, amplitude, phase, xs, hidden=20):
        self.xs = np.asarray(xs, dtype=np.float64)
        self.ys = amplitude * np.sin(self.xs + phase)
        self.hidden = hidden

    @staticmethod
    def n_params(hidden=20) -> int:
        return 3 * hidden + 1

    @staticmethod
    def init_params(rng, hidden=20) -> np.ndarray:
        return np.concatenate([rng.normal(0, 1, hidden), rng.normal(0, 1, hidden),
                               rng.normal(0, 1 / np.sqrt(hidden), hidden), [0.0]])

    @classmethod
    def sample(cls, rng, k=10, hidden=20) -> tuple["SineTask", "SineTask"]:
        """Support and query sets of one random sine task."""
        amp, phase = rng.uniform(0.1, 5.0), rng.uniform(0.0, np.pi)
        xs = rng.uniform(-5.0, 5.0, 2 * k)
        return cls(amp, phase, xs[:k], hidden), cls(amp, phase, xs[k:], hidden)

    def _unpack(self, theta):
        h = self.hidden
        return theta[:h], theta[h:2 * h], theta[2 * h:3 * h], theta[3 * h]

    def predict(self, theta, xs=None):
        xs = self.xs if xs is None else xs
        w1, b1, w2, b2 = self._unpack(theta)
        return np.tanh(xs[:, None] * w1 + b1) @ w2 + b2

    def loss(self, theta):
        r = self.predict(theta) - self.ys
        return float(np.mean(r * r))

    def grad(self, theta):
        w1, b1, w2, b2 = self._unpack(theta)
        act = np.tanh(self.xs[:, None] * w1 + b1)
        r = act @ w2 + b2 - self.ys
        dpred = 2.0 * r / len(self.xs)
        dz = dpred[:, None] * w2 * (1.0 - act * act)
        return np.concatenate([dz.T @ self.xs, dz.sum(axis=0), act.T @ dpred, [dpred.sum()]])


class PrototypeTask(Task):
    """``lam * InfoNCE(anchors, bank)`` with the bank as the flat parameter."""

    def __init__(self, anchors, tau=0.07, lam=1.0):
        self.anchors = np.asarray(anchors, dtype=np.float64)
        self.tau, self.lam = tau, lam

    def loss(self, theta):
        return self.lam * float(infonce_grad(self.anchors, theta.reshape(self.anchors.shape), self.tau)[0].real)

    def grad(self, theta):
        d_bank = infonce_grad(self.anchors, theta.reshape(self.anchors.shape), self.tau)[1]
        return self.lam * d_bank.ravel()


class KernelTask(Task):
    """The composite kernel loss over all kernel parameters."""

    def __init__(self, template: KernelParams, batch: KernelBatch, lam=1.0, tau=0.07):
        self.template, self.batch, self.lam, self.tau = template, batch, lam, tau

    def loss(self, theta):
        return float(np.real(kernel_loss_and_grad(self.template.from_vector(theta), self.batch,
                                                  self.lam, self.tau)[0]))

    def grad(self, theta):
        return kernel_loss_and_grad(self.template.from_vector(theta), self.batch,
                                    self.lam, self.tau)[1].to_vector()


def maml_meta_step(theta, support: Task, query: Task, inner_lr: float, outer_lr: float,
                   first_order: bool = False) -> np.ndarray:
    """One meta-update of ``theta`` through a single inner gradient step."""
    theta = np.asarray(theta, dtype=np.float64)
    theta_1 = theta - inner_lr * support.grad(theta)
    g_query = query.grad(theta_1)
    if first_order:
        meta_grad = g_query
    else:
        meta_grad = g_query - inner_lr * support.hvp(theta, g_query)
    return theta - outer_lr * meta_grad


def adapt(theta, task: Task, inner_lr: float, steps: int = 1) -> np.ndarray:
    for _ in range(steps):
        theta = theta - inner_lr * task.grad(theta)
    return theta


def meta_train_sine(theta, rng, meta_steps=200, inner_lr=0.01, outer_lr=0.01, k=10,
                    hidden=20, first_order=False) -> np.ndarray:
    """Sequential MAML over freshly sampled sine tasks."""
    for _ in range(meta_steps):
        support, query = SineTask.sample(rng, k, hidden)
        theta = maml_meta_step(theta, support, query, inner_lr, outer_lr, first_order)
    return theta


def meta_train_prototypes(bank, anchors, rng, steps=100, inner_lr=0.05, outer_lr=0.05,
                          tau=0.07, lam=1.0, noise=0.1, first_order=False):
    """Meta-train the bank: support anchors are noise-augmented copies of the query anchors.

    Returns ``(bank, trace)`` with the query loss after one inner step, per meta-step.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    theta = np.array(bank, dtype=np.float64).ravel()
    query = PrototypeTask(anchors, tau, lam)
    trace = []
    for step in range(steps):
        support = PrototypeTask(anchors + noise * rng.standard_normal(anchors.shape), tau, lam)
        theta = maml_meta_step(theta, support, query, inner_lr, outer_lr, first_order)
        value = query.loss(adapt(theta, support, inner_lr))
        if not np.isfinite(value):
            raise FloatingPointError(f"meta-training diverged at step {step}")
        trace.append(value)
    return theta.reshape(anchors.shape), np.array(trace)
