"""Dense encoder/decoder, parameter initialization and the Adam optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lgad import tensor as T
from lgad.tensor import ShapeError, Tensor


@dataclass
class Dense:
    W: Tensor
    b: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_row(T.matmul(x, self.W), self.b)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
    return Tensor(w, requires_grad=True)


def dense(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> Dense:
    return Dense(glorot(rng, fan_in, fan_out, dtype),
                 Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True))


def mlp(layers: list[Dense], x: Tensor, hidden=T.relu, final=None,
        trace: list | None = None) -> Tensor:
    h = x
    for i, layer in enumerate(layers):
        h = layer(h)
        h = hidden(h) if i < len(layers) - 1 else (final(h) if final else h)
        if trace is not None:
            trace.append(h)
    return h


@dataclass
class LatentOperator:
    """Phi_g^v: parameter-free ``geometric`` pair rotation or a ``learned`` MLP.

    The learned network maps [z_v ; cos(theta) ; sin(theta)] -> d.
    """
    kind: str = "geometric"
    layers: list[Dense] = field(default_factory=list)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"op.{i}.W"] = layer.W
            out[f"op.{i}.b"] = layer.b
        return out


@dataclass
class Model:
    encoder: list[Dense]
    decoder: list[Dense]
    alpha: Tensor
    operator: LatentOperator
    latent_dim: int
    image_shape: tuple[int, int]
    pair_aligned: bool = True
    tau: float = 0.5

    @property
    def n_pixels(self) -> int:
        return self.image_shape[0] * self.image_shape[1]

    @property
    def hidden_widths(self) -> list[int]:
        return [layer.W.shape[1] for layer in self.encoder[:-1]]

    def parameters(self) -> dict[str, Tensor]:
        """Every trainable tensor, in a fixed order."""
        out = {}
        for prefix, layers in (("enc", self.encoder), ("dec", self.decoder)):
            for i, layer in enumerate(layers):
                out[f"{prefix}.{i}.W"] = layer.W
                out[f"{prefix}.{i}.b"] = layer.b
        out["alpha"] = self.alpha
        out.update(self.operator.parameters())
        return out

    def astype(self, dtype) -> Model:
        def conv(layers):
            return [Dense(layer.W.astype(dtype), layer.b.astype(dtype)) for layer in layers]
        return Model(conv(self.encoder), conv(self.decoder), self.alpha.astype(dtype),
                     LatentOperator(self.operator.kind, conv(self.operator.layers)),
                     self.latent_dim, self.image_shape, self.pair_aligned, self.tau)


def init_model(latent_dim: int = 32, image_shape=(28, 28), hidden=(256, 64), seed: int = 0,
               pair_aligned: bool = True, operator: str = "geometric",
               operator_hidden: int = 64, tau: float = 0.5, alpha_init: float = 0.5,
               dtype=np.float32) -> Model:
    """Glorot-uniform weights, zero biases, every mask logit at ``alpha_init``.

    The default puts sigmoid(alpha) near 0.62, so training starts with every
    dimension variant. With alpha_init=0 every dimension sits on the tie and
    starts invariant.
    """
    if latent_dim <= 0:
        raise ValueError("latent_dim must be positive")
    if pair_aligned and latent_dim % 2:
        raise ValueError(f"pair-aligned masking needs an even latent_dim, got {latent_dim}")
    if operator not in ("geometric", "learned"):
        raise ValueError(f"unknown operator kind {operator!r}")
    rng = np.random.default_rng(seed)
    n_pix = int(image_shape[0] * image_shape[1])
    widths = [n_pix, *hidden, latent_dim]
    encoder = [dense(rng, a, b, dtype) for a, b in zip(widths[:-1], widths[1:])]
    rev = widths[::-1]
    decoder = [dense(rng, a, b, dtype) for a, b in zip(rev[:-1], rev[1:])]
    n_alpha = latent_dim // 2 if pair_aligned else latent_dim
    if not np.isfinite(alpha_init):
        raise ValueError("alpha_init must be finite")
    alpha = Tensor(np.full(n_alpha, alpha_init, dtype=dtype), requires_grad=True)
    op = LatentOperator(operator)
    if operator == "learned":
        op.layers = [dense(rng, latent_dim + 2, operator_hidden, dtype),
                     dense(rng, operator_hidden, latent_dim, dtype)]
    return Model(encoder, decoder, alpha, op, latent_dim, tuple(image_shape), pair_aligned, tau)


def encode(m: Model, x: Tensor, trace: list | None = None) -> Tensor:
    """E_phi: [B, pixels] -> [B, d]; the last layer is linear."""
    if x.data.ndim != 2 or x.shape[1] != m.n_pixels:
        raise ShapeError(f"encode: expected [batch, {m.n_pixels}], got {x.shape}")
    return mlp(m.encoder, x, trace=trace)


def decode(m: Model, z: Tensor) -> Tensor:
    """D_theta: [B, d] -> [B, pixels] in (0, 1)."""
    if z.data.ndim != 2 or z.shape[1] != m.latent_dim:
        raise ShapeError(f"decode: expected [batch, {m.latent_dim}], got {z.shape}")
    return mlp(m.decoder, z, final=T.sigmoid)


@dataclass
class Adam:
    """Adam with bias correction. Moments are keyed by parameter name."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        """Update every tensor in ``params`` from ``grads``.

        Parameter arrays are replaced rather than written in place, so arrays
        captured by an older tape keep their values.
        """
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"adam: grad for {name} has shape {g.shape}, param {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"adam: non-finite gradient for {name}; step aborted")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name].astype(p.dtype, copy=False)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.beta2 * self.v[name] + (1 - self.beta2) * (g * g)
            self.m[name] = m.astype(p.dtype, copy=False)
            self.v[name] = v.astype(p.dtype, copy=False)
            update = (self.lr / bc1) * self.m[name] / (np.sqrt(self.v[name] / bc2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)
