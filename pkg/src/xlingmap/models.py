"""Model assembly: the tied linear encoder/decoder pair and the residual
discriminator, with orthogonal initialization throughout.

Two discriminators with identical structure but independent initializations
are built per run: one trains against the generator, the other only observes
the same batches and serves as an over/underfitting monitor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import PROB_CLAMP, Linear, Param, ResBlock, sigmoid, sigmoid_backward
from .numerics import Rng


@dataclass(frozen=True)
class ModelConfig:
    dim: int
    block_dim: int = 40
    depth: int = 10
    leaky_slope: float = 0.01
    dropout_rate: float = 0.1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    encoder_bias: bool = False

    def __post_init__(self):
        if self.dim < 1 or self.block_dim < 1 or self.depth < 1:
            raise ValueError("dim, block_dim and depth must be positive")


# The two experimental configurations shipped as presets.
PRESETS = {
    "en-it": {"dim": 100, "block_dim": 40, "depth": 10},
    "de-en": {"dim": 40, "block_dim": 40, "depth": 4},
}


def init_orthogonal(d: int, rng: Rng) -> np.ndarray:
    """Uniformly random d x d orthogonal matrix (QR with sign-fixed R)."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    a = rng.normal(size=(d, d))
    q, r = np.linalg.qr(a)
    s = np.sign(np.diag(r))
    s[s == 0.0] = 1.0
    return q * s


def init_semi_orthogonal(rows: int, cols: int, rng: Rng) -> np.ndarray:
    """Random (rows x cols) matrix whose smaller side is orthonormal."""
    if rows >= cols:
        a = rng.normal(size=(rows, cols))
        q, r = np.linalg.qr(a)
        s = np.sign(np.diag(r))
        s[s == 0.0] = 1.0
        return q * s
    return init_semi_orthogonal(cols, rows, rng).T


class EncoderDecoder:
    """Linear map f -> f @ W with the reverse map z -> z @ W.T sharing the
    single stored weight; gradients from both directions accumulate there."""

    def __init__(self, weight, enc_bias=None, dec_bias=None):
        self.weight = Param("encoder.weight", weight)
        if self.weight.value.ndim != 2 or (
            self.weight.value.shape[0] != self.weight.value.shape[1]
        ):
            raise ValueError("encoder weight must be square")
        self.enc_bias = Param("encoder.enc_bias", enc_bias) if enc_bias is not None else None
        self.dec_bias = Param("encoder.dec_bias", dec_bias) if dec_bias is not None else None
        self._enc_cache = []
        self._dec_cache = []

    @property
    def dim(self) -> int:
        return self.weight.value.shape[0]

    def encode(self, f, record: bool = True):
        if record:
            self._enc_cache.append(f)
        z = f @ self.weight.value
        if self.enc_bias is not None:
            z = z + self.enc_bias.value
        return z

    def encode_backward(self, grad_out):
        f = self._enc_cache.pop()
        self.weight.grad += f.T @ grad_out
        if self.enc_bias is not None:
            self.enc_bias.grad += grad_out.sum(axis=0)
        return grad_out @ self.weight.value.T

    def decode(self, z, record: bool = True):
        if record:
            self._dec_cache.append(z)
        x = z @ self.weight.value.T
        if self.dec_bias is not None:
            x = x + self.dec_bias.value
        return x

    def decode_backward(self, grad_out):
        z = self._dec_cache.pop()
        self.weight.grad += grad_out.T @ z
        if self.dec_bias is not None:
            self.dec_bias.grad += grad_out.sum(axis=0)
        return grad_out @ self.weight.value

    def map_rows(self, f):
        """Apply the learned mapping without recording anything."""
        return self.encode(f, record=False)

    def params(self):
        out = [self.weight]
        if self.enc_bias is not None:
            out.append(self.enc_bias)
        if self.dec_bias is not None:
            out.append(self.dec_bias)
        return out

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()


class Discriminator:
    """Input projection d->k, a stack of residual blocks, and a sigmoid
    output layer. The output layer starts at zero so a fresh discriminator
    scores every input exactly 0.5."""

    def __init__(self, name: str, cfg: ModelConfig, rng: Rng):
        k = cfg.block_dim
        self.name = name
        self.input_proj = Linear(
            f"{name}.input", init_semi_orthogonal(cfg.dim, k, rng.substream("input"))
        )
        self.blocks = [
            ResBlock(
                f"{name}.block{i}",
                k,
                init_orthogonal(k, rng.substream(f"block{i}")),
                leaky_slope=cfg.leaky_slope,
                dropout_rate=cfg.dropout_rate,
                bn_eps=cfg.bn_eps,
                bn_momentum=cfg.bn_momentum,
            )
            for i in range(cfg.depth)
        ]
        self.output = Linear(f"{name}.output", np.zeros((k, 1)), bias=np.zeros(1))
        self.training = True
        self._out_cache = []

    def set_training(self, flag: bool) -> None:
        self.training = flag
        for b in self.blocks:
            b.set_training(flag)

    def forward(self, x, rng: Rng | None = None, record: bool = True):
        """Probability column for a batch; training mode needs n >= 2.

        Outputs are clamped strictly inside (0, 1). Besides keeping the
        losses finite, using the clamped value in the backward chain keeps
        the generator's gradient alive when the discriminator saturates:
        the exact sigmoid derivative underflows to zero there, while the
        clamped chain reproduces the analytic -(1 - p) logit gradient.
        """
        h = self.input_proj.forward(x, record=record)
        for b in self.blocks:
            h = b.forward(h, rng, record=record)
        p = sigmoid(self.output.forward(h, record=record))
        np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP, out=p)
        if record:
            self._out_cache.append(p)
        return p

    def backward(self, grad_p):
        g = sigmoid_backward(grad_p, self._out_cache.pop())
        g = self.output.backward(g)
        for b in reversed(self.blocks):
            g = b.backward(g)
        return self.input_proj.backward(g)

    def predict(self, x):
        """Inference-mode forward with no caches; model must not be training."""
        if self.training:
            raise ValueError("predict requires inference mode")
        return self.forward(x, rng=None, record=False)

    def params(self):
        out = self.input_proj.params()
        for b in self.blocks:
            out.extend(b.params())
        out.extend(self.output.params())
        return out

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()

    def norm_state(self) -> dict:
        """Batch-norm running statistics, keyed like parameters."""
        out = {}
        for b in self.blocks:
            out[f"{b.bn.gamma.name[:-6]}.running_mean"] = b.bn.running_mean
            out[f"{b.bn.gamma.name[:-6]}.running_var"] = b.bn.running_var
        return out

    def load_norm_state(self, state: dict) -> None:
        for b in self.blocks:
            prefix = b.bn.gamma.name[:-6]
            b.bn.running_mean = np.array(state[f"{prefix}.running_mean"], dtype=np.float64)
            b.bn.running_var = np.array(state[f"{prefix}.running_var"], dtype=np.float64)


def build_models(cfg: ModelConfig, rng: Rng):
    """Encoder/decoder plus two independently initialized discriminators."""
    weight = init_orthogonal(cfg.dim, rng.substream("encoder_init"))
    if cfg.encoder_bias:
        enc = EncoderDecoder(weight, enc_bias=np.zeros(cfg.dim), dec_bias=np.zeros(cfg.dim))
    else:
        enc = EncoderDecoder(weight)
    d_train = Discriminator("disc_train", cfg, rng.substream("disc_train_init"))
    d_monitor = Discriminator("disc_monitor", cfg, rng.substream("disc_monitor_init"))
    return enc, d_train, d_monitor
