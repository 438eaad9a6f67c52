"""Weight export in the shared VAEW binary format.

Layout: magic "VAEW", u32 version=1, u32 layer count, then per layer
u32 in_dim, u32 out_dim, u8 activation tag (0 identity, 1 relu,
2 sigmoid), f32 row-major weights (out x in), f32 biases; little-endian
with a trailing CRC32 over all preceding bytes. Encoder layers first,
then decoder layers; the single dimension break marks the boundary.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np
import torch

from .model import JointVae

ACT_IDENTITY = 0
ACT_RELU = 1
ACT_SIGMOID = 2


def _layer_bytes(linear: torch.nn.Linear, act: int) -> bytes:
    W = linear.weight.detach().cpu().numpy().astype("<f4")
    b = linear.bias.detach().cpu().numpy().astype("<f4")
    out_dim, in_dim = W.shape
    return struct.pack("<IIB", in_dim, out_dim, act) + W.tobytes() + b.tobytes()


def export(model: JointVae, path) -> None:
    """Write the model atomically (temp file, then rename)."""
    body = bytearray()
    body += b"VAEW"
    layers = [
        (model.enc1, ACT_RELU), (model.enc2, ACT_RELU), (model.enc_head, ACT_IDENTITY),
        (model.dec1, ACT_RELU), (model.dec2, ACT_RELU), (model.dec3, ACT_SIGMOID),
    ]
    body += struct.pack("<II", 1, len(layers))
    for linear, act in layers:
        body += _layer_bytes(linear, act)
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(bytes(body))
    import os
    os.replace(tmp, path)
