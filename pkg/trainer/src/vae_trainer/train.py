"""Training loop for the joint autoencoder.

The objective regularizes both KL terms toward annealed capacities
(|KL - k| penalties) while the Gumbel-Softmax temperature anneals from
1.0 to 0.5. Because the objective is unsupervised, the learned
categorical clusters land in arbitrary index order; after training the
clusters are permuted into label order (a weight-space permutation of
the encoder logits head and the decoder's categorical input columns,
which leaves the network's behavior unchanged) so that argmax(logits)
is directly comparable to labels.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .data import read_idx_images, read_idx_labels
from .export import export
from .model import JointVae, capacity_loss, gumbel_softmax_sample


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    temp_start: float = 1.0
    temp_end: float = 0.5
    cap_c_max: float = 5.0          # nats, reached at cap_epochs
    cap_d_max: float = float(np.log(10.0))
    cap_epochs: int = 20
    r_c: float = 30.0
    r_d: float = 30.0
    seed: int = 7
    export_path: str = "weights.vaew"

    def __post_init__(self):
        if self.r_c < 0 or self.r_d < 0:
            raise ValueError("gains must be non-negative")
        if self.temp_start <= 0 or self.temp_end <= 0:
            raise ValueError("temperature must stay positive")

    def temperature(self, epoch: int) -> float:
        frac = epoch / max(self.epochs - 1, 1)
        return self.temp_start + (self.temp_end - self.temp_start) * frac

    def capacities(self, epoch: int) -> tuple:
        frac = min(epoch / max(self.cap_epochs, 1), 1.0)
        return self.cap_c_max * frac, self.cap_d_max * frac


def evaluate(model: JointVae, images: np.ndarray, labels: np.ndarray):
    """Held-out mean per-image BCE and argmax(logits) label accuracy."""
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(images)
        mu, logvar, logits = model.encode(x)
        onehot = torch.eye(10)[logits.argmax(dim=-1)]
        recon = model.decode(torch.cat([mu, onehot], dim=-1))
        bce = torch.nn.functional.binary_cross_entropy(
            recon.clamp(1e-7, 1 - 1e-7), x, reduction="none").sum(dim=-1).mean()
        acc = (logits.argmax(dim=-1).numpy() == labels).mean()
    model.train()
    return float(bce), float(acc)


def align_clusters_to_labels(model: JointVae, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Permute the categorical dimension so cluster i means label i."""
    model.eval()
    with torch.no_grad():
        logits = model.encode(torch.from_numpy(images))[2]
        clusters = logits.argmax(dim=-1).numpy()
    confusion = np.zeros((10, 10))
    for c, l in zip(clusters, labels):
        confusion[c, l] += 1
    rows, cols = linear_sum_assignment(-confusion)
    perm = np.empty(10, dtype=int)  # perm[label] = cluster
    for c, l in zip(rows, cols):
        perm[l] = c
    with torch.no_grad():
        head_W = model.enc_head.weight.data
        head_b = model.enc_head.bias.data
        head_W[20:30] = head_W[20:30][perm].clone()
        head_b[20:30] = head_b[20:30][perm].clone()
        dec_W = model.dec1.weight.data
        dec_W[:, 10:20] = dec_W[:, 10:20][:, perm].clone()
    model.train()
    return perm


def train(config: TrainConfig, data_dir) -> dict:
    """Run the full loop; exports weights and returns the metrics report."""
    torch.manual_seed(config.seed)
    np.random.seed(config.seed)

    data_dir = Path(data_dir)
    x_train = read_idx_images(data_dir / "train-images-idx3-ubyte")
    y_train = read_idx_labels(data_dir / "train-labels-idx1-ubyte")
    x_test = read_idx_images(data_dir / "t10k-images-idx3-ubyte")
    y_test = read_idx_labels(data_dir / "t10k-labels-idx1-ubyte")

    model = JointVae()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    bce0, _ = evaluate(model, x_test, y_test)

    n = len(x_train)
    losses = []
    for epoch in range(config.epochs):
        temp = config.temperature(epoch)
        k_c, k_d = config.capacities(epoch)
        order = np.random.permutation(n)
        epoch_loss = 0.0
        for i in range(0, n, config.batch_size):
            batch = torch.from_numpy(x_train[order[i : i + config.batch_size]])
            recon, mu, logvar, logits = model(batch, temp)
            loss, bce, kl_c, kl_d = capacity_loss(
                batch, recon, mu, logvar, logits, k_c, k_d, config.r_c, config.r_d)
            if not torch.isfinite(loss):
                raise RuntimeError("training diverged (non-finite loss)")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(batch)
        losses.append(epoch_loss / n)

    align_clusters_to_labels(model, x_train, y_train)
    bce_final, acc = evaluate(model, x_test, y_test)
    export(model, config.export_path)

    with torch.no_grad():
        zero_decode = model.decode(torch.zeros(1, 20)).numpy()[0]

    report = {
        "recon_bce": bce_final,
        "recon_bce_epoch0": bce0,
        "zd_accuracy": acc,
        "epochs": config.epochs,
        "epoch_losses": losses,
    }
    return report, zero_decode


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Train the joint autoencoder and export weights")
    parser.add_argument("--data-dir", required=True)
    parser.add_argument("--out", default="weights.vaew")
    parser.add_argument("--report", default="train_report.json")
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)

    config = TrainConfig(epochs=args.epochs, seed=args.seed, export_path=args.out)
    try:
        report, _ = train(config, args.data_dir)
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    with open(args.report, "w") as f:
        json.dump(report, f, indent=2)
    print(f"held-out BCE {report['recon_bce']:.1f} (epoch0 {report['recon_bce_epoch0']:.1f}), "
          f"z_d accuracy {report['zd_accuracy']:.3f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
