"""Longitudinal permutation importance and confusion plots (exact t-SNE)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .architectures import extract_representation, predict
from .cohort import grids_to_arrays
from .metrics import auroc, relative_difference

P_FLOOR = 1e-12


@dataclass
class ImportanceHeatmap:
    variables: list[str]
    n_windows: int
    cells: np.ndarray  # (V, W) relative difference
    mean_permuted: np.ndarray  # (V, W)
    per_round: np.ndarray  # (V, W, rounds) permuted auROC
    baseline_auroc: float
    rounds: int
    seed: int = 0
    fallbacks: list = field(default_factory=list)

    def most_negative(self):
        v, w = np.unravel_index(int(np.argmin(self.cells)), self.cells.shape)
        return self.variables[v], int(w)


@dataclass
class EmbeddingPlot:
    patient_ids: list[str]
    points: np.ndarray  # (n, 2)
    outcomes: np.ndarray  # (n,) 0/1
    cohort_tag: str


def permutation_importance(model, test_grids, train_grids, rounds=20, seed=0, variables=None):
    """Per-(variable, window) relative change in auROC under resampling.

    For every round, each test patient's cell (w, v) is replaced by a value
    drawn with replacement from the observed standardized training values of
    the same variable and window.  When no training patient observed that
    cell, the variable's observed values pooled over all windows are used, and
    failing that its imputed values; each fallback is recorded.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    X_test, y_test = grids_to_arrays(test_grids)
    X_train, _ = grids_to_arrays(train_grids)
    mask_train = np.stack([g.mask for g in train_grids])
    n_test, W, F = X_test.shape
    if X_train.shape[1:] != (W, F):
        raise ValueError("train and test grids have different shapes")
    if variables is None:
        schema = getattr(model, "schema", None)
        variables = [v.name for v in schema] if schema else [f"var{j}" for j in range(F)]
    if len(variables) != F:
        raise ValueError("variable names do not match the feature count")

    baseline = auroc(predict(model, X_test), y_test)
    per_round = np.empty((F, W, rounds))
    fallbacks = []
    for v in range(F):
        for w in range(W):
            pool = X_train[mask_train[:, w, v], w, v]
            if pool.size == 0:
                pool = X_train[:, :, v][mask_train[:, :, v]]
                if pool.size == 0:
                    pool = X_train[:, w, v]
                fallbacks.append((variables[v], w))
            for r in range(rounds):
                rng = np.random.default_rng([seed, v, w, r])
                X = X_test.copy()
                X[:, w, v] = pool[rng.integers(pool.size, size=n_test)]
                per_round[v, w, r] = auroc(predict(model, X), y_test)
    mean = per_round.mean(axis=2)
    cells = np.vectorize(lambda m: relative_difference(m, baseline))(mean)
    return ImportanceHeatmap(list(variables), W, cells, mean, per_round, baseline,
                             rounds, seed, fallbacks)


# ----------------------------------------------------------------------- t-SNE

def _squared_distances(x):
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def conditional_probabilities(d, perplexity, tol=1e-5, max_iter=50):
    """Row-stochastic p_{j|i}; each row's precision is bisected until its
    perplexity (in bits) is within ``tol`` of the target."""
    n = d.shape[0]
    target = math.log2(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d[i], i)
        di = di - di.min()
        beta, lo, hi = 1.0, 0.0, math.inf
        for _ in range(max_iter):
            p = np.exp(-di * beta)
            s = p.sum()
            h_bits = (math.log(s) + beta * float(di @ p) / s) / math.log(2)
            if abs(h_bits - target) < tol:
                break
            if h_bits > target:
                lo = beta
                beta = beta * 2.0 if hi == math.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        P[i, np.arange(n) != i] = p / s
    return P


def joint_probabilities(x, perplexity):
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    P = conditional_probabilities(_squared_distances(x), perplexity)
    P = (P + P.T) / (2.0 * n)
    low = P < P_FLOOR
    P[low] = P_FLOOR
    # rescale the untouched mass so the total stays exactly 1
    P[~low] *= (1.0 - low.sum() * P_FLOOR) / P[~low].sum()
    return P


def _kl(P, Q):
    return float((P * np.log(P / Q)).sum())


def run_tsne(x, perplexity=30.0, iters=1000, seed=0, learning_rate=200.0,
             exaggeration=12.0, switch_iter=250):
    """Exact t-SNE.  Returns ``(Y, kl_trace)`` with the un-exaggerated KL per iteration."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < 5:
        raise ValueError("t-SNE needs at least 5 points")
    if not perplexity < (n - 1) / 3.0:
        raise ValueError(f"perplexity {perplexity} infeasible for {n} points "
                         f"(must be < {(n - 1) / 3.0:.2f})")
    P = joint_probabilities(x, perplexity)
    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    step = np.zeros_like(Y)
    kl_trace = []
    for it in range(iters):
        momentum = 0.5 if it < switch_iter else 0.8
        exag = exaggeration if it < switch_iter else 1.0
        num = 1.0 / (1.0 + _squared_distances(Y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), P_FLOOR)
        PQ = (exag * P - Q) * num
        grad = 4.0 * (PQ.sum(axis=1)[:, None] * Y - PQ @ Y)
        step = momentum * step - learning_rate * grad
        Y = Y + step
        Y = Y - Y.mean(axis=0)
        kl_trace.append(_kl(P, Q))
    if not np.all(np.isfinite(Y)):
        raise FloatingPointError("t-SNE diverged")
    return Y, kl_trace


def tsne(x, perplexity=30.0, iters=1000, seed=0):
    return run_tsne(x, perplexity, iters, seed)[0]


def confusion_plot(model, grids, cohort_tag, perplexity=30.0, iters=1000, seed=0):
    X, y = grids_to_arrays(grids)
    rep = extract_representation(model, X)
    points = tsne(rep, perplexity, iters, seed)
    return EmbeddingPlot([g.patient_id for g in grids], points, y.astype(int), cohort_tag)


# --------------------------------------------------------------------- outputs

def _num(x):
    return repr(float(x))


def write_heatmap_csv(hm: ImportanceHeatmap, path):
    with open(path, "w", newline="") as fh:
        fb = ";".join(f"{v}:w{w}" for v, w in hm.fallbacks)
        fh.write(f"# baseline_auroc={_num(hm.baseline_auroc)},rounds={hm.rounds},"
                 f"seed={hm.seed},fallbacks={fb}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variable", "window", "relative_difference", "mean_permuted_auroc"]
                        + [f"round_{r}" for r in range(hm.rounds)])
        for v, name in enumerate(hm.variables):
            for w in range(hm.n_windows):
                writer.writerow([name, w, _num(hm.cells[v, w]), _num(hm.mean_permuted[v, w])]
                                + [_num(a) for a in hm.per_round[v, w]])


def read_heatmap_csv(path):
    with open(path) as fh:
        meta = fh.readline()[2:].strip()
        rows = list(csv.DictReader(fh))
    info = dict(kv.split("=", 1) for kv in meta.split(","))
    return info, rows


def write_embedding_csv(plots, path):
    rows = []
    for plot in plots:
        for pid, (px, py), out in zip(plot.patient_ids, plot.points, plot.outcomes):
            rows.append((plot.cohort_tag, pid, px, py, int(out)))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "x", "y", "outcome", "cohort_tag"])
        for tag, pid, px, py, out in rows:
            writer.writerow([pid, _num(px), _num(py), out, tag])


def _diverging(value, vmax):
    """White at 0, red for negative (importance), blue for positive."""
    t = 0.0 if vmax == 0 else max(-1.0, min(1.0, value / vmax))
    if t < 0:
        r, g, b = 255, round(255 * (1 + t)), round(255 * (1 + t))
    else:
        r, g, b = round(255 * (1 - t)), round(255 * (1 - t)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(hm: ImportanceHeatmap, cell=48, label_width=110):
    V, W = hm.cells.shape
    vmax = float(np.abs(hm.cells).max())
    width = label_width + W * cell + 20
    height = 40 + V * cell + 30
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<text x="{label_width}" y="16">relative difference in auROC '
           f'(baseline {hm.baseline_auroc:.3f})</text>']
    for v, name in enumerate(hm.variables):
        y = 30 + v * cell
        out.append(f'<text x="{label_width - 6}" y="{y + cell / 2 + 4}" '
                   f'text-anchor="end">{name}</text>')
        for w in range(W):
            x = label_width + w * cell
            val = hm.cells[v, w]
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                       f'fill="{_diverging(val, vmax)}" stroke="#999"/>')
            out.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" '
                       f'text-anchor="middle" font-size="9">{val:+.3f}</text>')
    for w in range(W):
        out.append(f'<text x="{label_width + w * cell + cell / 2}" y="{30 + V * cell + 16}" '
                   f'text-anchor="middle">w{w}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


OUTCOME_COLORS = ("#1f77b4", "#d62728")
OUTCOME_NAMES = ("controlled", "uncontrolled")


def scatter_svg(plots, panel=360, pad=24):
    """One panel per cohort, side by side, one shared outcome legend."""
    width = len(plots) * (panel + pad) + pad
    height = panel + 2 * pad + 30
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">']
    for k, plot in enumerate(plots):
        x0 = pad + k * (panel + pad)
        out.append(f'<g class="panel" id="panel-{k}">')
        out.append(f'<rect x="{x0}" y="{pad}" width="{panel}" height="{panel}" '
                   f'fill="none" stroke="#999"/>')
        out.append(f'<text x="{x0 + panel / 2}" y="{pad - 8}" text-anchor="middle">'
                   f'{plot.cohort_tag}</text>')
        pts = plot.points
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        for (px, py), o in zip((pts - lo) / span, plot.outcomes):
            cx = x0 + 8 + px * (panel - 16)
            cy = pad + 8 + (1 - py) * (panel - 16)
            out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="2.5" '
                       f'fill="{OUTCOME_COLORS[int(o)]}" fill-opacity="0.75"/>')
        out.append("</g>")
    ly = pad + panel + 22
    for i, (color, name) in enumerate(zip(OUTCOME_COLORS, OUTCOME_NAMES)):
        lx = pad + i * 120
        out.append(f'<circle cx="{lx + 5}" cy="{ly - 4}" r="4" fill="{color}"/>')
        out.append(f'<text x="{lx + 14}" y="{ly}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
