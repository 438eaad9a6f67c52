"""Joint continuous/categorical autoencoder.

Encoder 784 -> 512 -> 256 -> 30 (mu, logvar, logits); decoder
(10 continuous + 10 categorical) -> 256 -> 512 -> 784 with a sigmoid
output. The categorical branch is sampled with the Gumbel-Softmax
relaxation during training.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

N_LATENT = 10


class JointVae(nn.Module):
    def __init__(self):
        super().__init__()
        self.enc1 = nn.Linear(784, 512)
        self.enc2 = nn.Linear(512, 256)
        self.enc_head = nn.Linear(256, 3 * N_LATENT)
        self.dec1 = nn.Linear(2 * N_LATENT, 256)
        self.dec2 = nn.Linear(256, 512)
        self.dec3 = nn.Linear(512, 784)

    def encode(self, x: torch.Tensor):
        h = F.relu(self.enc2(F.relu(self.enc1(x))))
        head = self.enc_head(h)
        mu, logvar, logits = torch.split(head, N_LATENT, dim=-1)
        return mu, logvar, logits

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.dec2(F.relu(self.dec1(z))))
        return torch.sigmoid(self.dec3(h))

    def forward(self, x: torch.Tensor, temperature: float):
        mu, logvar, logits = self.encode(x)
        z_c = mu + torch.exp(0.5 * logvar) * torch.randn_like(mu)
        z_d = gumbel_softmax_sample(logits, temperature)
        recon = self.decode(torch.cat([z_c, z_d], dim=-1))
        return recon, mu, logvar, logits


def gumbel_softmax_sample(logits: torch.Tensor, temperature: float) -> torch.Tensor:
    u = torch.rand_like(logits).clamp_min(1e-20)
    g = -torch.log(-torch.log(u))
    return F.softmax((logits + g) / temperature, dim=-1)


def gaussian_kl(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Per-sample KL to the unit prior."""
    return 0.5 * torch.sum(mu**2 + torch.exp(logvar) - 1.0 - logvar, dim=-1)


def categorical_kl(logits: torch.Tensor) -> torch.Tensor:
    """Per-sample KL of softmax(logits) to the uniform prior."""
    q = F.softmax(logits, dim=-1)
    logq = torch.log(q.clamp_min(1e-12))
    return torch.sum(q * (logq + torch.log(torch.tensor(float(logits.shape[-1])))), dim=-1)


def capacity_loss(x, recon, mu, logvar, logits, k_c, k_d, r_c, r_d):
    """Negative objective: -E[log p] + r_c |KL_c - k_c| + r_d |KL_d - k_d|."""
    bce = F.binary_cross_entropy(recon.clamp(1e-7, 1 - 1e-7), x, reduction="none").sum(dim=-1)
    kl_c = gaussian_kl(mu, logvar)
    kl_d = categorical_kl(logits)
    loss = bce + r_c * torch.abs(kl_c - k_c) + r_d * torch.abs(kl_d - k_d)
    return loss.mean(), bce.mean(), kl_c.mean(), kl_d.mean()
