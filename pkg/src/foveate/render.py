"""Figure-style rendering of a trial: six panels on one canvas.

Panels, left to right: raw stimulus with the final fixation marked,
the foveated view (window around the fixation, rest occluded), the
global decode expectation, the local decode patch, the location
posterior heat map, and the digit posterior bar strip. The baseline
format is binary PGM (bit-exact goldens); .png output renders the same
canvas in color with a red fixation dot.
"""

from __future__ import annotations

import numpy as np

from . import mdp
from .dynamics import FOVEA, predict
from .grid import cell_center, cell_footprint, grid_to_pixel
from .inversion import BehaviorTrace, trace_actions
from .trial import TrialSetup, run_trial
from .vae import decode_mixture, softmax

PANEL = 224
GAP = 8


def _upscale(img: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def _bar_strip(p: np.ndarray) -> np.ndarray:
    """10 vertical bars, heights proportional to the posterior."""
    panel = np.zeros((PANEL, PANEL))
    width = 18
    gap = 4
    x0 = (PANEL - 10 * width - 9 * gap) // 2
    for k in range(10):
        h = int(round(float(p[k]) * (PANEL - 24)))
        x = x0 + k * (width + gap)
        if h > 0:
            panel[PANEL - 12 - h : PANEL - 12, x : x + width] = 1.0
        panel[PANEL - 10 : PANEL - 8, x : x + width] = 0.5  # baseline ticks
    return panel


def render_trace(trace: BehaviorTrace, stimulus: np.ndarray, setup: TrialSetup,
                 out_path) -> None:
    """Replay the trace deterministically and write the 6-panel raster."""
    if not trace.fixations:
        raise ValueError("trace has no fixations to render")
    actions = trace_actions(trace, setup.model.T)
    rec = run_trial(setup, stimulus, label=0, rng=None, forced_actions=actions,
                    detailed=True)
    if not rec.saccade_traces:
        raise ValueError("trace and stimulus produced no saccades")

    final_cell = trace.fixations[-1][1]
    final_mu = rec.saccade_traces[-1].final_mu
    beliefs = rec.final_beliefs
    t = beliefs.t

    # panel 1: stimulus, marker burned in as a bright dot over a dark ring
    stim = _upscale(stimulus, 8)
    px, py = grid_to_pixel(cell_center(final_cell)) * 8
    marker = np.zeros_like(stim, dtype=bool)
    yy, xx = np.mgrid[0:stim.shape[0], 0:stim.shape[1]]
    r2 = (yy - py) ** 2 + (xx - px) ** 2
    stim = np.where(r2 <= 36, 1.0, np.where(r2 <= 64, 0.0, stim))
    marker[r2 <= 36] = True

    # panel 2: foveated view
    footprint = cell_footprint(final_cell)
    mask = np.zeros((28, 28))
    for r, c in footprint:
        mask[r, c] = 1.0
    foveated = _upscale(stimulus * mask + 0.08 * (1 - mask), 8)

    # panel 3: global decode expectation
    w_h = softmax(final_mu.v_h)
    global_decode = _upscale(decode_mixture(setup.weights, final_mu.rho, w_h).reshape(28, 28), 8)

    # panel 4: local decode patch
    _, y_e_hat = predict(final_mu, setup.weights)
    local = _upscale(y_e_hat, PANEL // FOVEA)

    # panel 5: location posterior heat map (grid cells only)
    where_post = beliefs.s[mdp.F_WHERE][t][:49].reshape(7, 7)
    peak = where_post.max()
    heat = _upscale(where_post / peak if peak > 0 else where_post, PANEL // 7)

    # panel 6: digit posterior bars
    bars = _bar_strip(beliefs.s[mdp.F_DIGIT][t])

    panels = [stim, foveated, global_decode, local, heat, bars]
    markers = [marker] + [np.zeros_like(p, dtype=bool) for p in panels[1:]]
    canvas = np.zeros((PANEL, 6 * PANEL + 5 * GAP))
    canvas_marker = np.zeros_like(canvas, dtype=bool)
    for i, (p, m) in enumerate(zip(panels, markers)):
        x = i * (PANEL + GAP)
        canvas[:, x : x + PANEL] = p
        canvas_marker[:, x : x + PANEL] = m

    out_path = str(out_path)
    if out_path.endswith(".png"):
        _write_png(out_path, canvas, canvas_marker)
    else:
        _write_pgm(out_path, _to_u8(canvas))


def _write_pgm(path: str, img: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())


def _write_png(path: str, canvas: np.ndarray, marker: np.ndarray) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rgb = np.stack([canvas] * 3, axis=-1)
    rgb[marker] = [1.0, 0.1, 0.1]
    plt.imsave(path, np.clip(rgb, 0, 1))
