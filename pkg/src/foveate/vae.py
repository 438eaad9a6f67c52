"""Inference side of the joint continuous/categorical autoencoder.

Weights are trained elsewhere and shipped as a flat binary (magic
"VAEW"): u32 version, u32 layer count, then per layer u32 in_dim,
u32 out_dim, u8 activation tag (0 identity, 1 relu, 2 sigmoid), f32
weight matrix row-major (out_dim x in_dim), f32 biases; little-endian
with a trailing CRC32 over everything before it. The file stores the
encoder layers followed by the decoder layers; the single dimension
break in the chain (encoder head 3*n_latent -> decoder input
n_c + n_d) marks the boundary.

The encoder maps a 784 image to a 30-vector split into (mu, logvar,
logits); the decoder maps a 20-vector (z_c ++ one-hot class) back to
784 pixels. Class-mixture decoding and its exact reverse-mode gradients
are what the continuous-time loop consumes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

WEIGHT_MAGIC = b"VAEW"
WEIGHT_VERSION = 1

ACT_IDENTITY = 0
ACT_RELU = 1
ACT_SIGMOID = 2
_ACT_NAMES = {ACT_IDENTITY: "identity", ACT_RELU: "relu", ACT_SIGMOID: "sigmoid"}

N_LATENT = 10  # continuous dims == categorical classes


class WeightFormatError(ValueError):
    """Raised on malformed weight files."""


@dataclass
class Layer:
    W: np.ndarray  # (out_dim, in_dim) float32
    b: np.ndarray  # (out_dim,) float32
    activation: int

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float32)
        self.b = np.asarray(self.b, dtype=np.float32)
        if self.activation not in _ACT_NAMES:
            raise WeightFormatError(f"unknown activation tag {self.activation}")
        if self.W.shape[0] != self.b.shape[0]:
            raise WeightFormatError("bias length does not match output dim")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


def _activate(a: np.ndarray, tag: int) -> np.ndarray:
    if tag == ACT_RELU:
        return np.maximum(a, 0.0)
    if tag == ACT_SIGMOID:
        return 1.0 / (1.0 + np.exp(-a))
    return a


@dataclass
class VaeWeights:
    encoder: list
    decoder: list
    n_c: int = N_LATENT
    n_d: int = N_LATENT

    def __post_init__(self):
        for name, stack in (("encoder", self.encoder), ("decoder", self.decoder)):
            for prev, nxt in zip(stack, stack[1:]):
                if prev.out_dim != nxt.in_dim:
                    raise WeightFormatError(
                        f"{name} dimension chain break: {prev.out_dim} -> {nxt.in_dim}"
                    )
        if self.encoder[0].in_dim != 784:
            raise WeightFormatError("encoder must take 784 inputs")
        if self.encoder[-1].out_dim != 3 * self.n_c:
            raise WeightFormatError("encoder head must emit mu/logvar/logits")
        if self.decoder[0].in_dim != self.n_c + self.n_d:
            raise WeightFormatError("decoder input dim must be n_c + n_d")
        if self.decoder[-1].out_dim != 784:
            raise WeightFormatError("decoder must emit 784 pixels")
        if self.decoder[-1].activation != ACT_SIGMOID:
            raise WeightFormatError("final decoder activation must be sigmoid")


def save_weights(path, weights: VaeWeights) -> None:
    layers = list(weights.encoder) + list(weights.decoder)
    body = bytearray()
    body += WEIGHT_MAGIC
    body += struct.pack("<II", WEIGHT_VERSION, len(layers))
    for layer in layers:
        body += struct.pack("<IIB", layer.in_dim, layer.out_dim, layer.activation)
        body += layer.W.astype("<f4").tobytes()
        body += layer.b.astype("<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(body))


def load_weights(path) -> VaeWeights:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise WeightFormatError("file too short")
    if blob[:4] != WEIGHT_MAGIC:
        raise WeightFormatError(f"bad magic {blob[:4]!r}")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise WeightFormatError("CRC mismatch")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != WEIGHT_VERSION:
        raise WeightFormatError(f"unsupported version {version}")
    off = 12
    layers = []
    for _ in range(n_layers):
        if off + 9 > len(blob) - 4:
            raise WeightFormatError("truncated layer header")
        in_dim, out_dim, act = struct.unpack_from("<IIB", blob, off)
        off += 9
        nw, nb = in_dim * out_dim * 4, out_dim * 4
        if off + nw + nb > len(blob) - 4:
            raise WeightFormatError("truncated layer payload")
        W = np.frombuffer(blob, dtype="<f4", count=in_dim * out_dim, offset=off).reshape(out_dim, in_dim)
        off += nw
        b = np.frombuffer(blob, dtype="<f4", count=out_dim, offset=off)
        off += nb
        layers.append(Layer(W=W.copy(), b=b.copy(), activation=act))
    if off != len(blob) - 4:
        raise WeightFormatError("trailing bytes after layers")

    breaks = [i for i in range(1, len(layers)) if layers[i - 1].out_dim != layers[i].in_dim]
    if len(breaks) != 1:
        raise WeightFormatError(f"expected one encoder/decoder boundary, found {len(breaks)}")
    return VaeWeights(encoder=layers[: breaks[0]], decoder=layers[breaks[0]:])


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _run_stack(layers, x: np.ndarray) -> np.ndarray:
    for layer in layers:
        x = _activate(x @ layer.W.T + layer.b, layer.activation)
    return x


def encode(weights: VaeWeights, image: np.ndarray):
    """(mu, logvar, logits) for one flattened image in [0, 1]."""
    x = np.asarray(image, dtype=np.float64).reshape(-1)
    if x.shape[0] != 784:
        raise ValueError(f"expected 784 pixels, got {x.shape[0]}")
    head = _run_stack(weights.encoder, x)
    n = weights.n_c
    return head[:n], head[n : 2 * n], head[2 * n :]


def decode(weights: VaeWeights, code: np.ndarray) -> np.ndarray:
    """Decode a full latent code (n_c + n_d) to 784 pixels."""
    code = np.asarray(code, dtype=np.float64)
    return _run_stack(weights.decoder, code)


def decode_classes(weights: VaeWeights, z_c: np.ndarray) -> np.ndarray:
    """Per-hypothesis decodes: row h is decoder(z_c ++ onehot(h)), (n_d, 784)."""
    n_d = weights.n_d
    codes = np.concatenate(
        [np.tile(np.asarray(z_c, dtype=np.float64), (n_d, 1)), np.eye(n_d)], axis=1
    )
    return _run_stack(weights.decoder, codes)


def decode_mixture(weights: VaeWeights, z_c: np.ndarray, class_weights: np.ndarray) -> np.ndarray:
    """Hypothesis-weighted prediction sum_h w_h * decoder(z_c ++ onehot(h))."""
    w = np.asarray(class_weights, dtype=np.float64)
    if abs(w.sum() - 1.0) > 1e-8 or w.min() < -1e-12:
        raise ValueError("class_weights must be a simplex")
    return w @ decode_classes(weights, z_c)


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x))
    return e / e.sum()


def gumbel_softmax(logits: np.ndarray, temperature: float, rng) -> np.ndarray:
    """Relaxed one-hot sample softmax((logits + g) / temperature).

    rng is either a foveate.rng.CounterRng (portable protocol) or a
    numpy Generator.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    if hasattr(rng, "gumbel") and not isinstance(rng, np.random.Generator):
        noise = rng.gumbel(len(logits))
    elif isinstance(rng, np.random.Generator):
        noise = -np.log(-np.log(np.maximum(rng.random(len(logits)), 2.0**-53)))
    else:
        noise = np.asarray(rng, dtype=np.float64)  # explicit noise vector
    return softmax((logits + noise) / temperature)


def gaussian_kl(mu: np.ndarray, logvar: np.ndarray) -> float:
    """KL of N(mu, exp(logvar)) from the unit prior, summed over dims."""
    return float(0.5 * np.sum(mu**2 + np.exp(logvar) - 1.0 - logvar))


def categorical_kl(logits: np.ndarray) -> float:
    """KL of softmax(logits) from the uniform distribution."""
    q = softmax(np.asarray(logits, dtype=np.float64))
    return float(np.sum(q * (np.log(np.maximum(q, 1e-12)) + np.log(len(q)))))


def elbo_terms(image, weights: VaeWeights, rng, caps=(0.0, 0.0), gains=(1.0, 1.0)):
    """(recon_loglik, kl_c, kl_d, loss) under one posterior sample.

    loss = -recon + r_c * |kl_c - k_c| + r_d * |kl_d - k_d|; the KL for
    z_c is against the unit Gaussian prior, for z_d against uniform.
    """
    x = np.asarray(image, dtype=np.float64).reshape(-1)
    mu, logvar, logits = encode(weights, x)
    k_c, k_d = caps
    r_c, r_d = gains

    z_c = mu + np.exp(0.5 * logvar) * rng.standard_normal(len(mu))
    z_d = gumbel_softmax(logits, 1.0, rng)
    y = np.clip(decode_mixture(weights, z_c, z_d), 1e-7, 1.0 - 1e-7)
    recon = float(x @ np.log(y) + (1.0 - x) @ np.log(1.0 - y))

    kl_c = gaussian_kl(mu, logvar)
    kl_d = categorical_kl(logits)
    loss = -recon + r_c * abs(kl_c - k_c) + r_d * abs(kl_d - k_d)
    return recon, kl_c, kl_d, loss


# ---------------------------------------------------------------------------
# Exact gradients through the decoder and the mixture
# ---------------------------------------------------------------------------

def _stack_forward_cached(layers, x: np.ndarray):
    """Forward pass keeping the post-activation outputs of every layer."""
    outs = [x]
    for layer in layers:
        outs.append(_activate(outs[-1] @ layer.W.T + layer.b, layer.activation))
    return outs


def _stack_backward(layers, outs, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of <output, grad_out> with respect to the stack input."""
    g = grad_out
    for layer, y in zip(reversed(layers), reversed(outs[1:])):
        if layer.activation == ACT_RELU:
            g = g * (y > 0)
        elif layer.activation == ACT_SIGMOID:
            g = g * y * (1.0 - y)
        g = g @ layer.W
    return g


def decoder_grad(weights: VaeWeights, z_c, class_weights, residual):
    """Gradients of <decode_mixture(z_c, w), residual>.

    Returns (d/d z_c, d/d logits) where logits are the pre-softmax
    parameters of class_weights.
    """
    w = np.asarray(class_weights, dtype=np.float64)
    r = np.asarray(residual, dtype=np.float64)
    n_c, n_d = weights.n_c, weights.n_d
    codes = np.concatenate([np.tile(np.asarray(z_c, dtype=np.float64), (n_d, 1)), np.eye(n_d)], axis=1)
    outs = _stack_forward_cached(weights.decoder, codes)
    grad_codes = _stack_backward(weights.decoder, outs, np.tile(r, (n_d, 1)))
    grad_zc = w @ grad_codes[:, :n_c]
    per_class_score = outs[-1] @ r  # <decode_h, residual> per hypothesis
    grad_logits = w * (per_class_score - w @ per_class_score)
    return grad_zc, grad_logits
