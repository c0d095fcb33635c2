"""Client placement, data partitioning and desk-scale learning tasks.

Two tasks are provided. :class:`QuadraticTask` has closed-form smoothness,
gradient-noise variance and heterogeneity constants, so bounds can be
evaluated exactly. :class:`LogisticTask` is softmax regression on Gaussian
blobs with label-sorted shards, a small analogue of a non-iid image split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import ParameterError


@dataclass(frozen=True)
class ClientProfile:
    id: int
    d: float
    n: int
    p: float
    shard: np.ndarray | None = None  # sample indices for data-backed tasks


def place_clients(N: int, radius_m: float, rng: np.random.Generator) -> np.ndarray:
    """Distances of ``N`` points uniform over a disk, in ascending order."""
    if N < 1:
        raise ParameterError("N must be >= 1")
    if radius_m <= 0:
        raise ParameterError("radius must be positive")
    return np.sort(radius_m * np.sqrt(rng.random(N)))


def data_weights(n) -> np.ndarray:
    n = np.asarray(n, dtype=float)
    if np.any(n <= 0):
        raise ParameterError("every client needs at least one sample")
    return n / n.sum()


def make_profiles(distances, n, shards=None) -> list[ClientProfile]:
    p = data_weights(n)
    shards = [None] * len(p) if shards is None else shards
    return [ClientProfile(i, float(d), int(k), float(pi), s)
            for i, (d, k, pi, s) in enumerate(zip(distances, n, p, shards))]


@dataclass(frozen=True)
class QuadraticTask:
    """``F_i(w) = 0.5*||A_i (w - c_i)||^2`` with Gaussian per-sample gradient noise.

    A sample gradient is the exact gradient plus ``N(0, noise_std**2 I)``, so
    the mini-batch variance is exactly ``noise_std**2 * dim / b``.
    """

    A: np.ndarray  # clients x dim x dim
    c: np.ndarray  # clients x dim
    p: np.ndarray
    noise_std: float
    hessians: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        c = np.asarray(self.c, dtype=float)
        if A.ndim != 3 or A.shape[1] != A.shape[2] or A.shape[:2] != c.shape:
            raise ParameterError("A must be clients x dim x dim and c clients x dim")
        if self.noise_std < 0:
            raise ParameterError("noise_std must be non-negative")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "p", data_weights(self.p))
        object.__setattr__(self, "hessians", np.einsum("nki,nkj->nij", A, A))

    @property
    def shared_hessian(self) -> bool:
        return bool(np.all(self.hessians == self.hessians[0]))

    @property
    def n_clients(self) -> int:
        return self.c.shape[0]

    @property
    def dim(self) -> int:
        return self.c.shape[1]

    @property
    def L(self) -> float:
        return float(max(np.linalg.eigvalsh(H)[-1] for H in self.hessians))

    @property
    def sigma_sq(self) -> float:
        """Per-sample gradient variance."""
        return self.noise_std**2 * self.dim

    @property
    def global_hessian(self) -> np.ndarray:
        return np.einsum("n,nij->ij", self.p, self.hessians)

    def loss(self, i: int, w) -> float:
        r = self.A[i] @ (np.asarray(w, dtype=float) - self.c[i])
        return 0.5 * float(r @ r)

    def grad(self, i: int, w) -> np.ndarray:
        return self.hessians[i] @ (np.asarray(w, dtype=float) - self.c[i])

    def all_grads(self, w) -> np.ndarray:
        diff = np.asarray(w, dtype=float)[None, :] - self.c
        return np.einsum("nij,nj->ni", self.hessians, diff)

    def global_loss(self, w) -> float:
        return float(sum(pi * self.loss(i, w) for i, pi in enumerate(self.p)))

    def global_grad(self, w) -> np.ndarray:
        return self.p @ self.all_grads(w)

    def optimum(self) -> np.ndarray:
        rhs = np.einsum("n,nij,nj->i", self.p, self.hessians, self.c)
        return np.linalg.lstsq(self.global_hessian, rhs, rcond=None)[0]

    @property
    def F_low(self) -> float:
        return self.global_loss(self.optimum())

    def initial_point(self) -> np.ndarray:
        return np.zeros(self.dim)

    def sample_grad(self, i: int, w, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        g = self.grad(i, w)
        if self.noise_std == 0:
            return g
        return g + rng.normal(0.0, self.noise_std, (batch_size, self.dim)).mean(axis=0)


def make_quadratic(N: int, dim: int, heterogeneity: float, noise_std: float,
                   rng: np.random.Generator, curvature=(0.1, 1.0), samples=None,
                   hessian_spread: float = 0.0) -> QuadraticTask:
    """Quadratic task whose client optima spread with ``heterogeneity``.

    Every client shares one Hessian with eigenvalues evenly spaced in
    ``curvature`` unless ``hessian_spread > 0``, which perturbs each
    client's factor and makes the gradient gap depend on ``w``.
    """
    if heterogeneity < 0 or hessian_spread < 0:
        raise ParameterError("heterogeneity and hessian_spread must be non-negative")
    if N < 1 or dim < 1:
        raise ParameterError("N and dim must be positive")
    lo, hi = curvature
    if not (0 <= lo <= hi) or hi <= 0:
        raise ParameterError("curvature must satisfy 0 <= lo <= hi, hi > 0")
    basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    A0 = basis @ np.diag(np.sqrt(np.linspace(lo, hi, dim))) @ basis.T
    A = np.repeat(A0[None], N, axis=0)
    if hessian_spread > 0:
        A = A + hessian_spread * rng.normal(size=(N, dim, dim)) / math.sqrt(dim)
    c = heterogeneity * rng.normal(size=(N, dim))
    p = np.ones(N) if samples is None else np.asarray(samples, dtype=float)
    return QuadraticTask(A, c, p, noise_std)


@dataclass(frozen=True)
class LogisticTask:
    """Softmax regression with an L2 penalty on per-client sample shards."""

    X: np.ndarray  # samples x features (a bias column is appended internally)
    y: np.ndarray
    classes: int
    shards: list
    l2: float = 1e-4

    @property
    def n_clients(self) -> int:
        return len(self.shards)

    @property
    def p(self) -> np.ndarray:
        return data_weights([len(s) for s in self.shards])

    @property
    def features(self) -> int:
        return self.X.shape[1] + 1

    @property
    def dim(self) -> int:
        return self.classes * self.features

    @property
    def L(self) -> float:
        """Upper bound from the softmax Hessian bound ``0.5*I`` on each shard."""
        vals = []
        for s in self.shards:
            Z = self._design(s)
            vals.append(0.5 * np.linalg.eigvalsh(Z.T @ Z / len(s))[-1])
        return float(max(vals)) + self.l2

    def _design(self, idx) -> np.ndarray:
        X = self.X[idx]
        return np.hstack([X, np.ones((X.shape[0], 1))])

    def _loss_grad(self, idx, w):
        W = np.asarray(w, dtype=float).reshape(self.classes, self.features)
        Z = self._design(idx)
        logits = Z @ W.T
        logits -= logits.max(axis=1, keepdims=True)
        prob = np.exp(logits)
        prob /= prob.sum(axis=1, keepdims=True)
        y = self.y[idx]
        n = len(idx)
        loss = -np.mean(np.log(prob[np.arange(n), y])) + 0.5 * self.l2 * float(W.ravel() @ W.ravel())
        prob[np.arange(n), y] -= 1.0
        grad = (prob.T @ Z) / n + self.l2 * W
        return float(loss), grad.ravel()

    def loss(self, i: int, w) -> float:
        return self._loss_grad(self.shards[i], w)[0]

    def grad(self, i: int, w) -> np.ndarray:
        return self._loss_grad(self.shards[i], w)[1]

    def all_grads(self, w) -> np.ndarray:
        return np.array([self.grad(i, w) for i in range(self.n_clients)])

    def global_loss(self, w) -> float:
        return float(sum(pi * self.loss(i, w) for i, pi in enumerate(self.p)))

    def global_grad(self, w) -> np.ndarray:
        return self.p @ self.all_grads(w)

    def accuracy(self, w) -> float:
        W = np.asarray(w, dtype=float).reshape(self.classes, self.features)
        pred = np.argmax(self._design(np.arange(len(self.y))) @ W.T, axis=1)
        return float(np.mean(pred == self.y))

    def initial_point(self) -> np.ndarray:
        return np.zeros(self.dim)

    def sample_grad(self, i: int, w, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        shard = self.shards[i]
        if len(shard) == 0:
            raise ParameterError(f"client {i} has an empty shard")
        idx = shard[rng.integers(0, len(shard), batch_size)]
        return self._loss_grad(idx, w)[1]


def make_logistic_noniid(N: int, classes_per_client: int, samples_per_client: int,
                         rng: np.random.Generator, classes: int = 10, features: int = 8,
                         separation: float = 3.0, l2: float = 1e-4) -> LogisticTask:
    """Gaussian-blob data split so client ``k`` (k-th nearest) holds larger labels as ``k`` grows.

    Each client's samples come from ``classes_per_client`` consecutive label
    slots in label order; with ``classes_per_client >= classes`` every client
    draws all labels evenly.
    """
    if classes_per_client < 1:
        raise ParameterError("classes_per_client must be >= 1")
    if N < 1 or samples_per_client < 1 or classes < 2:
        raise ParameterError("need N >= 1, samples_per_client >= 1 and classes >= 2")
    means = separation * rng.normal(size=(classes, features))
    labels = []
    for k in range(N):
        if classes_per_client >= classes:
            lab = np.arange(samples_per_client) % classes
        else:
            slots = k * classes_per_client + np.arange(classes_per_client)
            slot_labels = (slots * classes) // (N * classes_per_client)
            lab = slot_labels[np.arange(samples_per_client) * classes_per_client
                              // samples_per_client]
        labels.append(lab)
    y = np.concatenate(labels).astype(np.int64)
    X = means[y] + rng.normal(size=(y.size, features))
    bounds = np.cumsum([0] + [samples_per_client] * N)
    shards = [np.arange(bounds[k], bounds[k + 1]) for k in range(N)]
    return LogisticTask(X, y, classes, shards, l2)


def local_stochastic_gradient(task, client: int, w, batch_size: int,
                              rng: np.random.Generator) -> np.ndarray:
    """Mini-batch gradient of client ``client``; samples drawn with replacement."""
    if batch_size < 1:
        raise ParameterError("batch_size must be >= 1")
    return task.sample_grad(client, w, batch_size, rng)


@dataclass(frozen=True)
class Heterogeneity:
    pointwise: np.ndarray
    ball: np.ndarray
    radius: float


def _ball_max_sq(G: np.ndarray, h: np.ndarray, r: float) -> float:
    """``max ||G x + h||^2`` over ``||x|| <= r`` (a trust-region maximization)."""
    base = float(h @ h)
    if r == 0 or not np.any(G):
        return base
    S = G.T @ G
    s = G.T @ h
    e, V = np.linalg.eigh(S)
    t = V.T @ s
    top = e[-1]
    # the maximizer lies on the sphere: x = (lam I - S)^{-1} s with lam >= top
    def norm_gap(lam):
        return float(np.sum((t / (lam - e)) ** 2)) - r * r

    mask = np.abs(t) > 1e-14 * max(1.0, np.abs(t).max())
    on_top = e >= top - 1e-12 * max(top, 1.0)
    if not np.any(mask & on_top):
        # hard case: fill the top eigenspace with what the secular equation leaves
        y = np.zeros_like(t)
        free = ~on_top
        y[free] = t[free] / (top - e[free])
        rest = r * r - float(y @ y)
        if rest >= 0:
            y[np.argmax(e)] = math.sqrt(rest)
            x = V @ y
            v = G @ x + h
            return float(v @ v)
    lo = top + 1e-15 * max(top, 1.0)
    hi = top + np.linalg.norm(t) / r + 1.0
    while norm_gap(hi) > 0:
        hi = top + 2 * (hi - top)
    while norm_gap(lo) < 0 and lo > top:
        lo = top + (lo - top) / 16
        if lo - top < 1e-300:
            break
    lam = brentq(norm_gap, lo, hi, xtol=1e-300, rtol=1e-15, maxiter=500)
    x = V @ (t / (lam - e))
    v = G @ x + h
    return float(v @ v)


def heterogeneity_D(task, w, radius: float = 0.0, rng: np.random.Generator | None = None,
                    samples: int = 64) -> Heterogeneity:
    """Squared gradient gaps ``||grad F_i(w) - grad F(w)||^2`` per client.

    ``ball`` holds the maximum over ``||w' - w|| <= radius``: exact for the
    quadratic task, and the largest value over ``samples`` random points of
    the sphere (plus ``w``) for other tasks.
    """
    if radius < 0:
        raise ParameterError("radius must be non-negative")
    w = np.asarray(w, dtype=float)
    if isinstance(task, QuadraticTask) and task.shared_hessian:
        # the gap H (c_bar - c_i) does not depend on w
        gap = (task.p @ task.c)[None, :] - task.c
        point = np.sum((gap @ task.hessians[0]) ** 2, axis=1)
        return Heterogeneity(point, point.copy(), radius)
    grads = task.all_grads(w)
    point = np.sum((grads - task.p @ grads) ** 2, axis=1)
    if radius == 0:
        return Heterogeneity(point, point.copy(), 0.0)
    if isinstance(task, QuadraticTask):
        Hbar = task.global_hessian
        ball = np.empty(task.n_clients)
        for i in range(task.n_clients):
            G = task.hessians[i] - Hbar
            ball[i] = max(_ball_max_sq(G, grads[i] - task.p @ grads, radius), point[i])
        return Heterogeneity(point, ball, radius)
    rng = np.random.default_rng(0) if rng is None else rng
    ball = point.copy()
    for _ in range(samples):
        u = rng.normal(size=w.size)
        g = task.all_grads(w + radius * u / np.linalg.norm(u))
        ball = np.maximum(ball, np.sum((g - task.p @ g) ** 2, axis=1))
    return Heterogeneity(point, ball, radius)
