"""Per-token attention traces across denoising timesteps.

For each text token the mean cross-attention weight it receives from the
learnable queries is recorded at a grid of timesteps and normalized by that
token's maximum over the grid, exposing when in the denoising schedule the
token matters most. The mean runs over blocks, heads, and queries; that
averaging choice is recorded in the emitted metadata.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np

from .connector import Connector, TextFeatureSequence, extract_attention_scores

AVERAGING = "mean over blocks, heads, and latent queries"


@dataclass
class AttentionTrace:
    tokens: list         # (index, label)
    timesteps: list
    raw: np.ndarray      # [tokens, timesteps]
    relative: np.ndarray # raw / per-token max


def trace_attention(conn: Connector, text: TextFeatureSequence, timesteps) -> AttentionTrace:
    """Observe cross-attention without perturbing the forward computation."""
    timesteps = [int(t) for t in timesteps]
    if not timesteps:
        raise ValueError("empty timestep grid")
    if any(t < 0 or t >= conn.config.timesteps for t in timesteps):
        raise ValueError("timestep grid outside the schedule")
    cols = []
    for t in timesteps:
        per_block = extract_attention_scores(
            conn, text, t=t if conn.variant.requires_timestep else None)
        stacked = np.stack(per_block)          # [blocks, heads, queries, tokens]
        cols.append(stacked.mean(axis=(0, 1, 2)).astype(np.float64))
    raw = np.stack(cols, axis=1)               # [tokens, timesteps]
    relative = raw / raw.max(axis=1, keepdims=True)
    labels = text.token_labels or [f"tok{i}" for i in range(len(text))]
    return AttentionTrace(
        tokens=[(i, labels[i]) for i in range(len(text))],
        timesteps=timesteps, raw=raw, relative=relative,
    )


def default_timestep_grid(total_steps: int, points: int = 10):
    """Evenly spaced grid over [0, total_steps)."""
    return [int(round(i * (total_steps - 1) / max(points - 1, 1))) for i in range(points)]


def emit_trace_csv(trace: AttentionTrace, path) -> None:
    """Token-major rows, timesteps ascending, with a JSON metadata sidecar."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["token_index", "token_label", "timestep", "raw", "relative"])
        for (idx, label) in trace.tokens:
            for j, t in enumerate(trace.timesteps):
                w.writerow([idx, label, t,
                            repr(float(trace.raw[idx, j])),
                            repr(float(trace.relative[idx, j]))])
    with open(str(path) + ".meta.json", "w") as fh:
        json.dump({"averaging": AVERAGING, "timesteps": trace.timesteps},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_trace_csv(path) -> AttentionTrace:
    rows = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["token_index", "token_label", "timestep", "raw", "relative"]:
            raise ValueError(f"unexpected trace header {header}")
        for row in r:
            rows.append((int(row[0]), row[1], int(row[2]), float(row[3]), float(row[4])))
    tokens = sorted({(r[0], r[1]) for r in rows})
    timesteps = sorted({r[2] for r in rows})
    raw = np.zeros((len(tokens), len(timesteps)))
    rel = np.zeros_like(raw)
    t_pos = {t: j for j, t in enumerate(timesteps)}
    for idx, _, t, rv, relv in rows:
        raw[idx, t_pos[t]] = rv
        rel[idx, t_pos[t]] = relv
    return AttentionTrace(tokens=tokens, timesteps=timesteps, raw=raw, relative=rel)
