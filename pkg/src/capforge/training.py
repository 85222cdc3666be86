"""Regularized maximum-likelihood training with momentum SGD."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decoder import (
    PARAM_NAMES, DecoderParams, StepTrace, backward_batch, batch_losses,
    forward_batch, pad_batch, zeros_like,
)

LOSS_LOG_VERSION = "# capforge-loss-log v1"


class NonFiniteGradientError(FloatingPointError):
    """Raised when an update would consume a NaN or infinite gradient."""


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    batch_size: int = 100
    halve_every: int = 20000
    lam: float = 1.0
    max_iters: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.halve_every < 1:
            raise ValueError("halve_every must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")


# config-file key -> (dataclass field, type)
_CONFIG_KEYS = {
    "lr0": ("lr0", float),
    "momentum": ("momentum", float),
    "batch_size": ("batch_size", int),
    "halve_every": ("halve_every", int),
    "lambda": ("lam", float),
    "max_iters": ("max_iters", int),
    "seed": ("seed", int),
}


def parse_config(text: str) -> TrainConfig:
    """Parse flat ``key = value`` lines; unknown or repeated keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        attr, typ = _CONFIG_KEYS[key]
        if attr in values:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        try:
            values[attr] = typ(value)
        except ValueError:
            raise ValueError(f"config line {lineno}: bad value {value!r} for {key}") from None
    return TrainConfig(**values)


def format_config(config: TrainConfig) -> str:
    return "".join(f"{key} = {getattr(config, attr)!r}\n" for key, (attr, _) in _CONFIG_KEYS.items())


def load_config(path: str | os.PathLike) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    iter: int = 0

    @classmethod
    def zeros(cls, params: DecoderParams) -> "OptimizerState":
        return cls(zeros_like(params), 0)


def loss(traces: Sequence[StepTrace], target_ids: Sequence[int], lam: float) -> float:
    """Caption NLL plus ``lam * sum_i (1 - sum_t alpha_ti)^2``."""
    if len(traces) != len(target_ids):
        raise ValueError(f"{len(traces)} traces for {len(target_ids)} targets")
    nll = -sum(float(tr.log_probs[w]) for tr, w in zip(traces, target_ids))
    if not traces:
        return nll
    mass = np.sum([tr.alpha for tr in traces], axis=0)
    return nll + lam * float(np.sum((1.0 - mass) ** 2))


def lr_at(iteration: int, config: TrainConfig) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return config.lr0 * 0.5 ** (iteration // config.halve_every)


def sgd_momentum_step(params: DecoderParams, grads: dict[str, np.ndarray],
                      opt_state: OptimizerState, lr: float, momentum: float):
    """Classical momentum: ``v <- momentum*v + g``, ``p <- p - lr*v``."""
    for name in PARAM_NAMES:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name} at iteration {opt_state.iter}")
    velocity = {k: momentum * opt_state.velocity[k] + grads[k] for k in PARAM_NAMES}
    tensors = {k: params[k] - lr * velocity[k] for k in PARAM_NAMES}
    return (DecoderParams(params.dims, tensors, seed=params.seed),
            OptimizerState(velocity, opt_state.iter + 1))


def batch_loss_and_grads(batch, params: DecoderParams, lam: float, start_id: int = 0):
    """Mean loss over ``batch`` of ``(annotation, target_ids)`` pairs and its gradient."""
    anns, targets = zip(*batch)
    A, amask, W, Y, tmask = pad_batch(anns, targets, start_id)
    cache = forward_batch(A, amask, W, params)
    losses = batch_losses(cache, Y, tmask, lam)
    grads = backward_batch(cache, Y, tmask, params, lam, scale=1.0 / len(batch))
    return float(losses.mean()), grads


def sequence_loss(params: DecoderParams, example, lam: float, start_id: int = 0) -> float:
    ann, target = example
    A, amask, W, Y, tmask = pad_batch([ann], [target], start_id)
    return float(batch_losses(forward_batch(A, amask, W, params), Y, tmask, lam)[0])


def token_nll(params: DecoderParams, dataset, start_id: int = 0) -> float:
    """Mean per-token negative log-likelihood under teacher forcing."""
    anns, targets = zip(*dataset)
    A, amask, W, Y, tmask = pad_batch(anns, targets, start_id)
    cache = forward_batch(A, amask, W, params)
    nll = batch_losses(cache, Y, tmask, 0.0)
    return float(nll.sum() / tmask.sum())


def train(dataset, config: TrainConfig, params: DecoderParams, start_id: int = 0):
    """Run ``config.max_iters`` momentum-SGD updates; returns ``(params, history)``.

    ``history`` holds ``(iteration, mean batch loss)`` pairs, the loss being
    measured before that iteration's update.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    opt = OptimizerState.zeros(params)
    history: list[tuple[int, float]] = []
    n = len(dataset)
    while opt.iter < config.max_iters:
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            if opt.iter >= config.max_iters:
                break
            batch = [dataset[k] for k in order[start:start + config.batch_size]]
            batch_loss, grads = batch_loss_and_grads(batch, params, config.lam, start_id)
            history.append((opt.iter, batch_loss))
            params, opt = sgd_momentum_step(params, grads, opt, lr_at(opt.iter, config), config.momentum)
    return params, history


def format_loss_history(history) -> str:
    return LOSS_LOG_VERSION + "\n" + "".join(f"{it}\t{val!r}\n" for it, val in history)


def parse_loss_history(text: str) -> list[tuple[int, float]]:
    out = []
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        it, val = line.split("\t")
        out.append((int(it), float(val)))
    return out


def grad_check_report(params: DecoderParams, example, lam: float, epsilon: float = 1e-5,
                      analytic: dict[str, np.ndarray] | None = None,
                      start_id: int = 0) -> dict[str, float]:
    """Max relative error per tensor between analytic and central-difference gradients.

    ``analytic`` overrides the backprop gradient (used to confirm the check
    catches a corrupted gradient).
    """
    if analytic is None:
        _, analytic = batch_loss_and_grads([example], params, lam, start_id)
    errors = {}
    for name in PARAM_NAMES:
        theta = params[name]
        worst = 0.0
        for idx in np.ndindex(theta.shape):
            orig = theta[idx]
            theta[idx] = orig + epsilon
            up = sequence_loss(params, example, lam, start_id)
            theta[idx] = orig - epsilon
            down = sequence_loss(params, example, lam, start_id)
            theta[idx] = orig
            numeric = (up - down) / (2 * epsilon)
            exact = analytic[name][idx]
            rel = abs(exact - numeric) / max(1e-8, abs(exact) + abs(numeric))
            worst = max(worst, rel)
        errors[name] = worst
    return errors


def grad_check(params: DecoderParams, example, lam: float, epsilon: float = 1e-5,
               analytic: dict[str, np.ndarray] | None = None, start_id: int = 0) -> float:
    return max(grad_check_report(params, example, lam, epsilon, analytic, start_id).values())


def smoothed(history, window: int = 50) -> list[float]:
    """Means of consecutive non-overlapping ``window``-iteration blocks."""
    vals = [v for _, v in history]
    return [float(np.mean(vals[k:k + window])) for k in range(0, len(vals) - window + 1, window)]


def random_problem(dims, L: int, K: int, seed: int = 0, end_id: int = 0, jitter: float = 0.3):
    """A random decoder and one caption example for gradient checking.

    Every tensor, biases included, gets Gaussian jitter on top of the usual
    initialization so no coordinate sits at a special point. The target has
    ``K`` tokens: ``K - 1`` random non-end ids, then ``end_id``.
    """
    if dims.V < 2:
        raise ValueError("V must be >= 2 to draw non-end tokens")
    rng = np.random.default_rng(seed)
    params = DecoderParams.init(dims, seed)
    for _, tensor in params.items():
        tensor += rng.normal(0.0, jitter, tensor.shape)
    A = rng.uniform(-1.0, 1.0, (L, dims.D))
    others = [v for v in range(dims.V) if v != end_id]
    target = [int(v) for v in rng.choice(others, K - 1)] + [end_id]
    return params, (A, target)
