"""Stripe-distance matrices and the shortest-path aligned local distance.

Two images are each summarized by H stripe features.  Their pairwise
stripe distances are squashed into [0, 1) and the local distance is the
cheapest monotone lattice path from the top-left to the bottom-right of
that matrix, found by dynamic programming.  The path doubles as the
stripe-to-stripe alignment and carries the subgradient used in training.
"""

from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from . import autodiff as ad
from .autodiff import NORM_EPS, ONE_BELOW


def global_distance(a, b) -> float:
    """Epsilon-stabilized L2 distance between two feature vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"global_distance: shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sqrt(np.dot(d, d) + NORM_EPS))


def squash_distance(x):
    """(e^x - 1)/(e^x + 1): maps a raw distance into [0, 1), monotonically.

    Saturated values are capped one ulp below 1 so the half-open bound
    survives float64 rounding.
    """
    return np.minimum(np.tanh(0.5 * np.asarray(x, dtype=np.float64)), ONE_BELOW)


def part_distance_matrix(f_parts, g_parts) -> np.ndarray:
    """H x H matrix of squashed stripe distances between two stripe sets."""
    f = np.asarray(f_parts, dtype=np.float64)
    g = np.asarray(g_parts, dtype=np.float64)
    if f.ndim != 2 or g.ndim != 2 or f.shape != g.shape:
        raise ValueError(
            f"part_distance_matrix: stripe sets must share a shape, "
            f"got {f.shape} and {g.shape}"
        )
    diff = f[:, None, :] - g[None, :, :]
    raw = np.sqrt(np.sum(diff * diff, axis=-1) + NORM_EPS)
    return squash_distance(raw)


@dataclass(frozen=True)
class AlignmentPath:
    """Monotone lattice path through a distance matrix, as 0-based (i, j)."""

    steps: tuple
    costs: np.ndarray

    def offsets(self) -> np.ndarray:
        """Stripe offset j - i at every step; medians recover rigid shifts."""
        return np.array([j - i for i, j in self.steps])


@dataclass(frozen=True)
class LocalDistance:
    total: float
    path: AlignmentPath


def _dp_table(d: np.ndarray) -> np.ndarray:
    h, w = d.shape
    s = np.empty_like(d)
    s[0, :] = np.cumsum(d[0, :])
    s[:, 0] = np.cumsum(d[:, 0])
    for i in range(1, h):
        for j in range(1, w):
            s[i, j] = min(s[i - 1, j], s[i, j - 1]) + d[i, j]
    return s


def _walk_path(s: np.ndarray):
    # ties prefer the step from above, so walk up when s[i-1,j] <= s[i,j-1]
    i, j = s.shape[0] - 1, s.shape[1] - 1
    steps = [(i, j)]
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        elif s[i - 1, j] <= s[i, j - 1]:
            i -= 1
        else:
            j -= 1
        steps.append((i, j))
    steps.reverse()
    return tuple(steps)


def shortest_path(d) -> LocalDistance:
    """Cheapest monotone path through square matrix ``d`` plus its cost."""
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape[0] == 0:
        raise ValueError(f"shortest_path: need a non-empty square matrix, got {d.shape}")
    s = _dp_table(d)
    steps = _walk_path(s)
    costs = np.array([d[i, j] for i, j in steps])
    return LocalDistance(float(s[-1, -1]), AlignmentPath(steps, costs))


def shortest_path_backward(d, path: AlignmentPath, upstream: float) -> np.ndarray:
    """Subgradient of the path cost w.r.t. ``d``: upstream on path cells."""
    d = np.asarray(d, dtype=np.float64)
    grad = np.zeros_like(d)
    for i, j in path.steps:
        grad[i, j] += upstream
    return grad


def batch_shortest_path(d):
    """Vectorized DP over stacked matrices ``d`` of shape (..., H, H).

    Returns (totals, mask): path costs with shape d.shape[:-2] and a
    boolean path-membership mask of d's shape, using the same from-above
    tie preference as ``shortest_path``.
    """
    d = np.asarray(d, dtype=np.float64)
    h, w = d.shape[-2], d.shape[-1]
    if h != w or h == 0:
        raise ValueError(f"batch_shortest_path: need square matrices, got {d.shape}")
    lead = d.shape[:-2]
    dd = d.reshape(-1, h, w)
    n = dd.shape[0]
    s = np.empty_like(dd)
    s[:, 0, :] = np.cumsum(dd[:, 0, :], axis=-1)
    s[:, :, 0] = np.cumsum(dd[:, :, 0], axis=-1)
    for i in range(1, h):
        for j in range(1, w):
            s[:, i, j] = np.minimum(s[:, i - 1, j], s[:, i, j - 1]) + dd[:, i, j]

    mask = np.zeros(dd.shape, dtype=bool)
    rows = np.arange(n)
    ci = np.full(n, h - 1)
    cj = np.full(n, w - 1)
    mask[rows, ci, cj] = True
    for _ in range(2 * h - 2):
        up_ok = ci > 0
        left_ok = cj > 0
        s_up = s[rows, np.maximum(ci - 1, 0), cj]
        s_left = s[rows, ci, np.maximum(cj - 1, 0)]
        go_up = up_ok & (~left_ok | (s_up <= s_left))
        ci = ci - go_up
        cj = cj - (~go_up & left_ok)
        mask[rows, ci, cj] = True
    return s[:, -1, -1].reshape(lead), mask.reshape(d.shape)


# ---------------------------------------------------------------------------
# tape-integrated versions for training


def part_distance_node(f_node: ad.Node, g_node: ad.Node) -> ad.Node:
    """Distance-matrix graph for two (H, c) stripe nodes on one tape."""
    h, c = f_node.value.shape
    if g_node.value.shape != (h, c):
        raise ValueError(
            f"part_distance_node: stripe sets must share a shape, "
            f"got {f_node.value.shape} and {g_node.value.shape}"
        )
    fi = ad.reshape(f_node, (h, 1, c))
    gj = ad.reshape(g_node, (1, h, c))
    return ad.tanh_half(ad.l2norm(ad.sub(fi, gj), axis=-1))


def pairwise_part_distances(locals_node: ad.Node) -> ad.Node:
    """All-pairs stripe-distance tensor (N, N, H, H) for batch locals (N, H, c)."""
    n, h, c = locals_node.value.shape
    a = ad.reshape(locals_node, (n, 1, h, 1, c))
    b = ad.reshape(locals_node, (1, n, 1, h, c))
    return ad.tanh_half(ad.l2norm(ad.sub(a, b), axis=-1))


def local_distance_node(d_node: ad.Node) -> ad.Node:
    """Shortest-path cost as a tape op over (..., H, H) distance matrices.

    Backward is the min-subgradient: the upstream gradient lands on the
    cells of the recovered path and nowhere else.
    """
    totals, mask = batch_shortest_path(d_node.value)

    def backward(g):
        return (np.asarray(g)[..., None, None] * mask,)

    return d_node.tape._record("local_shortest_path", totals, (d_node,), backward)


def corresponding_distance_node(d_node_diag: ad.Node) -> ad.Node:
    """Index-aligned local distance: plain sum over stripe pairs, no DP."""
    return ad.sum_(d_node_diag, axes=(-1,))


# ---------------------------------------------------------------------------
# rendering


def render_alignment(f_parts, g_parts, path: AlignmentPath, title: str = "") -> str:
    """SVG of two stripe columns joined by the alignment path.

    Line width is inversely proportional to (1e-3 + d_ij): the closer two
    stripes match, the heavier their link is drawn.
    """
    f = np.asarray(f_parts, dtype=np.float64)
    h = f.shape[0]
    stripe_h = 24
    width, height = 360, h * stripe_h + 40
    left_x, right_x = 80, width - 80
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2:.0f}" y="16" text-anchor="middle" '
        f'font-size="12">{escape(title)}</text>',
    ]
    for k in range(h):
        y = 24 + k * stripe_h
        for x in (left_x - 40, right_x):
            parts.append(
                f'<rect x="{x}" y="{y}" width="40" height="{stripe_h - 2}" '
                f'fill="#d0d0d8" stroke="#555"/>'
            )
    for (i, j), cost in zip(path.steps, path.costs):
        yl = 24 + i * stripe_h + stripe_h / 2
        yr = 24 + j * stripe_h + stripe_h / 2
        stroke = 0.5 / (1e-3 + float(cost))
        parts.append(
            f'<line x1="{left_x}" y1="{yl:.1f}" x2="{right_x}" y2="{yr:.1f}" '
            f'stroke="black" stroke-width="{stroke:.3f}" stroke-opacity="0.75"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


def path_dump(d, path: AlignmentPath) -> str:
    """Plain-text path dump, one "i,j,d_ij" row per step."""
    d = np.asarray(d)
    return "\n".join(f"{i},{j},{d[i, j]:.6f}" for i, j in path.steps)


def stripe_features(image, num_stripes: int) -> np.ndarray:
    """Model-free stripe signatures: mean color of each horizontal band.

    Accepts a (channels, height, width) image; height must be divisible
    by ``num_stripes``.  Used by the alignment visualizer and the
    alignment-recovery checks.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"stripe_features: expected (C, H, W) image, got {img.shape}")
    c, h, w = img.shape
    if h % num_stripes:
        raise ValueError(
            f"stripe_features: height {h} not divisible into {num_stripes} stripes"
        )
    bands = img.reshape(c, num_stripes, h // num_stripes, w)
    return bands.mean(axis=(2, 3)).T.copy()
