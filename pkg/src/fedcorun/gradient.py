"""Momentum SGD on a small synthetic task, and gradient-gap estimation.

The gap between the parameters a device pulled and the parameters the
server will hold once ``lag`` other updates land is estimated by linear
weight prediction from the momentum vector:

    theta_future = theta - lr * (1 - beta**lag) / (1 - beta) * v
    gap          = lr * (1 - beta**lag) / (1 - beta) * ||v||
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Decision


class DimensionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ModelState:
    theta: np.ndarray
    momentum: np.ndarray
    lr: float = 0.01
    beta: float = 0.9
    _vnorm: float = field(default=-1.0, repr=False, compare=False)

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        momentum = np.asarray(self.momentum, dtype=float)
        if theta.shape != momentum.shape or theta.ndim != 1:
            raise DimensionError(
                f"theta {theta.shape} and momentum {momentum.shape} must be equal-length vectors"
            )
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must be in [0, 1), got {self.beta}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "momentum", momentum)
        object.__setattr__(self, "_vnorm", float(np.linalg.norm(momentum)))

    @classmethod
    def zeros(cls, dim: int, lr: float = 0.01, beta: float = 0.9) -> "ModelState":
        return cls(np.zeros(dim), np.zeros(dim), lr, beta)

    @property
    def dim(self) -> int:
        return self.theta.shape[0]

    @property
    def momentum_norm(self) -> float:
        return self._vnorm


@dataclass(frozen=True)
class GapRecord:
    device: int
    value: float
    lag: int
    slot: int

    def __post_init__(self):
        if self.value < 0 or self.lag < 0:
            raise ValueError("gap value and lag must be non-negative")


def momentum_step(state: ModelState, gradient: np.ndarray) -> ModelState:
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != state.theta.shape:
        raise DimensionError(f"gradient {gradient.shape} does not match model {state.theta.shape}")
    v = state.beta * state.momentum + (1.0 - state.beta) * gradient
    return ModelState(state.theta - state.lr * v, v, state.lr, state.beta)


def _horizon_factor(beta: float, lag: int) -> float:
    if lag < 0:
        raise ValueError(f"lag must be >= 0, got {lag}")
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must be in [0, 1)")
    if lag == 0:
        return 0.0
    return (1.0 - beta**lag) / (1.0 - beta)


def predict_future_params(state: ModelState, lag: int) -> np.ndarray:
    return state.theta - state.lr * _horizon_factor(state.beta, lag) * state.momentum


def gradient_gap(state: ModelState, lag: int) -> float:
    return state.lr * _horizon_factor(state.beta, lag) * state.momentum_norm


def gap_dynamics(
    prev_gap: float,
    decision: Decision,
    state: ModelState,
    lag_if_scheduled: int,
    increment: float,
) -> float:
    """Gap after this slot: re-estimated on schedule, ``prev + increment`` on idle."""
    if prev_gap < 0:
        raise ValueError("prev_gap must be >= 0")
    if decision.scheduled:
        return gradient_gap(state, lag_if_scheduled)
    return prev_gap + increment


def async_merge(global_params: np.ndarray, local_params: np.ndarray) -> np.ndarray:
    """Server-side merge: the pushed local model replaces the global copy."""
    if np.shape(global_params) != np.shape(local_params):
        raise DimensionError("global and local models differ in dimension")
    return np.array(local_params, dtype=float, copy=True)


# -- toy task -----------------------------------------------------------------


@dataclass
class ToyTask:
    """Softmax regression over Gaussian clusters, split evenly across users.

    Class ``k`` is centred at ``separation * e_k`` with unit covariance. The
    parameter vector packs a ``(n_classes, dim)`` weight matrix followed by
    ``n_classes`` biases.
    """

    parts_x: list[np.ndarray]
    parts_y: list[np.ndarray]
    test_x: np.ndarray
    test_y: np.ndarray
    n_classes: int
    dim: int

    @property
    def model_dim(self) -> int:
        return self.n_classes * (self.dim + 1)

    @property
    def n_users(self) -> int:
        return len(self.parts_x)

    def loss_and_grad(self, theta: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        k, d = self.n_classes, self.dim
        w = theta[: k * d].reshape(k, d)
        b = theta[k * d :]
        logits = x @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        m = len(y)
        loss = -float(np.mean(np.log(p[np.arange(m), y] + 1e-300)))
        p[np.arange(m), y] -= 1.0
        p /= m
        grad = np.concatenate([(p.T @ x).ravel(), p.sum(axis=0)])
        return loss, grad

    def evaluate(self, theta: np.ndarray) -> tuple[float, float]:
        """Loss and accuracy of ``theta`` on the held-out set."""
        k, d = self.n_classes, self.dim
        logits = self.test_x @ theta[: k * d].reshape(k, d).T + theta[k * d :]
        acc = float(np.mean(logits.argmax(axis=1) == self.test_y))
        logits -= logits.max(axis=1, keepdims=True)
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        loss = -float(np.mean(logp[np.arange(len(self.test_y)), self.test_y]))
        return loss, acc

    def stability_threshold(self, beta: float) -> float:
        """Largest learning rate for which heavy-ball momentum is stable on the
        quadratic upper bound of this loss: ``2 (1 + beta) / L`` with
        ``L = 0.5 * lambda_max(E[x x^T])`` over bias-augmented inputs."""
        x = np.vstack(self.parts_x)
        xa = np.hstack([x, np.ones((len(x), 1))])
        lam = float(np.linalg.eigvalsh(xa.T @ xa / len(xa))[-1])
        return 2.0 * (1.0 + beta) / (0.5 * lam)


def make_toy_task(
    n_users: int,
    rng: np.random.Generator,
    points_per_user: int = 400,
    test_points: int = 2000,
    dim: int = 16,
    n_classes: int = 10,
    separation: float = 1.8,
) -> ToyTask:
    if n_users < 1 or points_per_user < 1:
        raise ValueError("need at least one user with at least one point")
    if n_classes > dim:
        raise ValueError("n_classes must not exceed dim")

    def draw(m: int) -> tuple[np.ndarray, np.ndarray]:
        y = rng.integers(0, n_classes, size=m)
        x = rng.standard_normal((m, dim))
        x[np.arange(m), y] += separation
        return x, y

    x, y = draw(n_users * points_per_user)
    parts_x = [x[i * points_per_user : (i + 1) * points_per_user] for i in range(n_users)]
    parts_y = [y[i * points_per_user : (i + 1) * points_per_user] for i in range(n_users)]
    test_x, test_y = draw(test_points)
    return ToyTask(parts_x, parts_y, test_x, test_y, n_classes, dim)


def local_epoch(
    task: ToyTask,
    user: int,
    start_params: np.ndarray,
    rng: np.random.Generator,
    lr: float = 0.01,
    beta: float = 0.9,
    batch_size: int = 20,
    momentum: np.ndarray | None = None,
) -> tuple[list[float], ModelState]:
    """One shuffled pass of mini-batch momentum SGD over ``user``'s partition.

    Returns the per-batch loss trace and the final model state. ``momentum``
    seeds the velocity (zeros by default).
    """
    if not 0 <= user < task.n_users:
        raise IndexError(f"user {user} out of range for {task.n_users} users")
    x, y = task.parts_x[user], task.parts_y[user]
    if len(y) == 0:
        raise ValueError(f"user {user} has an empty partition")
    start = np.asarray(start_params, dtype=float)
    if start.shape != (task.model_dim,):
        raise DimensionError(f"start params {start.shape} do not match model dim {task.model_dim}")
    v = np.zeros_like(start) if momentum is None else np.asarray(momentum, dtype=float)
    state = ModelState(start.copy(), v.copy(), lr, beta)
    order = rng.permutation(len(y))
    losses = []
    for lo in range(0, len(order), batch_size):
        idx = order[lo : lo + batch_size]
        loss, grad = task.loss_and_grad(state.theta, x[idx], y[idx])
        losses.append(loss)
        state = momentum_step(state, grad)
    return losses, state


def gap_limit(state: ModelState) -> float:
    """Supremum of ``gradient_gap`` over all lags."""
    return state.lr * state.momentum_norm / (1.0 - state.beta)

