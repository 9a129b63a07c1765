"""Velocity MLP with hand-written reverse-mode gradients, trainer and checkpoints."""

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import rng

log = logging.getLogger(__name__)

MAGIC = b"SGFMLP01"


def swish(x):
    return x * expit(x)


def swish_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


class MLP:
    """Input (x, t) -> velocity of the same dimension as x.

    ``layers`` is a list of ``(W, b)`` with ``W`` shaped ``(fan_in, fan_out)``.
    Swish on every hidden layer, linear output.
    """

    def __init__(self, layers):
        self.layers = [(np.asarray(W, dtype=float), np.asarray(b, dtype=float)) for W, b in layers]
        for (W, b), (W2, _) in zip(self.layers, self.layers[1:]):
            if W.shape[1] != W2.shape[0]:
                raise ValueError("layer shapes do not chain")
        if self.layers[0][0].shape[0] != self.layers[-1][0].shape[1] + 1:
            raise ValueError("output dimension must equal input dimension minus the time input")

    @classmethod
    def init(cls, dim: int, hidden=(512, 512, 512, 512), seed: int = 0) -> "MLP":
        """Fan-in scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        gen = rng.generator(seed, 0, rng.INIT)
        sizes = [dim + 1, *hidden, dim]
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            layers.append((gen.uniform(-bound, bound, (fan_in, fan_out)),
                           gen.uniform(-bound, bound, fan_out)))
        return cls(layers)

    @property
    def dim(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [W.shape[1] for W, _ in self.layers]

    def copy(self) -> "MLP":
        return MLP([(W.copy(), b.copy()) for W, b in self.layers])

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer]

    def _inputs(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tt = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1), (len(x), 1))
        return np.concatenate([x, tt], axis=1)

    def forward(self, x, t, keep: bool = False):
        h = self._inputs(x, t)
        cache = [h]
        for W, b in self.layers[:-1]:
            pre = h @ W + b
            h = swish(pre)
            if keep:
                cache.append(pre)
                cache.append(h)
        W, b = self.layers[-1]
        out = h @ W + b
        return (out, cache) if keep else out

    def backward(self, cache, dout) -> list[np.ndarray]:
        """Parameter gradients given dLoss/dOutput, in ``params()`` order."""
        grads = []
        n_hidden = len(self.layers) - 1
        h = cache[-1] if n_hidden else cache[0]
        W, _ = self.layers[-1]
        grads.append((h.T @ dout, dout.sum(axis=0)))
        dh = dout @ W.T
        for i in range(n_hidden - 1, -1, -1):
            # cache layout: [input, pre_0, h_0, pre_1, h_1, ...]
            pre = cache[2 * i + 1]
            below = cache[2 * i]
            dpre = dh * swish_grad(pre)
            W, _ = self.layers[i]
            grads.append((below.T @ dpre, dpre.sum(axis=0)))
            dh = dpre @ W.T
        grads.reverse()
        return [g for pair in grads for g in pair]

    def velocity(self, x, t: float):
        single = np.ndim(x) == 1
        v = self.forward(x, t)
        return v[0] if single else v


def flow_matching_loss(mlp: MLP, x0, eps, t, with_grad: bool = True):
    """Mean over the batch of ||v(x_t, t) - (eps - x0)||^2."""
    t = np.asarray(t, dtype=float).reshape(-1, 1)
    xt = (1.0 - t) * x0 + t * eps
    target = eps - x0
    out, cache = mlp.forward(xt, t, keep=True)
    r = out - target
    loss = float(np.mean(np.sum(r * r, axis=1)))
    if not with_grad:
        return loss
    return loss, mlp.backward(cache, 2.0 * r / len(x0))


@dataclass
class TrainConfig:
    batch: int = 4096
    steps: int = 20001
    lr: float = 1e-4
    optimizer: str = "sgd"
    hidden: tuple = (512, 512, 512, 512)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    log_every: int = 0

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Reduced preset that trains in a few minutes on one core."""
        base = dict(batch=512, steps=2000, lr=1e-3, optimizer="adam")
        base.update(kw)
        return cls(**base)


@dataclass
class TrainResult:
    model: MLP
    losses: list = field(default_factory=list)
    heldout_initial: float = float("nan")
    heldout_final: float = float("nan")


def _batch(data, cfg, gen, n):
    x0 = data.sample(n, gen)
    eps = gen.standard_normal(x0.shape)
    t = gen.uniform(0.0, 1.0, n)
    return x0, eps, t


def train_velocity(data, cfg: TrainConfig | None = None) -> TrainResult:
    """Fit an MLP velocity to ``data`` (anything with ``sample(n, gen)`` and ``dim``)."""
    cfg = cfg or TrainConfig()
    if cfg.optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
    mlp = MLP.init(data.dim, cfg.hidden, cfg.seed)
    held = _batch(data, cfg, rng.generator(cfg.seed, 1, rng.TRAIN), cfg.batch)
    result = TrainResult(mlp, heldout_initial=flow_matching_loss(mlp, *held, with_grad=False))
    gen = rng.generator(cfg.seed, 0, rng.TRAIN)
    params = mlp.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    for step in range(1, cfg.steps + 1):
        loss, grads = flow_matching_loss(mlp, *_batch(data, cfg, gen, cfg.batch))
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"non-finite training loss {loss} at step {step}; last losses {result.losses[-5:]}"
            )
        result.losses.append(loss)
        if cfg.optimizer == "sgd":
            for p, g in zip(params, grads):
                p -= cfg.lr * g
        else:
            c1 = 1.0 - cfg.beta1 ** step
            c2 = 1.0 - cfg.beta2 ** step
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= cfg.beta1
                mi += (1.0 - cfg.beta1) * g
                vi *= cfg.beta2
                vi += (1.0 - cfg.beta2) * g * g
                p -= cfg.lr * (mi / c1) / (np.sqrt(vi / c2) + 1e-8)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.5f", step, loss)
    result.heldout_final = flow_matching_loss(mlp, *held, with_grad=False)
    return result


def save_checkpoint(mlp: MLP, path):
    """Header: magic, uint32 layer count, uint32 sizes; then float64 LE params."""
    sizes = mlp.sizes
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(sizes)))
        f.write(struct.pack(f"<{len(sizes)}I", *sizes))
        for p in mlp.params():
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> MLP:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a velocity checkpoint")
        (n,) = struct.unpack("<I", f.read(4))
        sizes = struct.unpack(f"<{n}I", f.read(4 * n))
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            W = np.frombuffer(f.read(8 * fan_in * fan_out), dtype="<f8").reshape(fan_in, fan_out)
            b = np.frombuffer(f.read(8 * fan_out), dtype="<f8")
            layers.append((W.copy(), b.copy()))
        if f.read(1):
            raise ValueError(f"{path} has trailing bytes")
    return MLP(layers)
