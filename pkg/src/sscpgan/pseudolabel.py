"""GrabCut pseudo-labels: colour GMMs, an 8-connected pixel graph and exact min-cut.

Labelling convention: the source terminal is foreground. A pixel on the
source side of the cut pays its sink-arc capacity (``sink_cap``), a pixel on
the sink side pays ``source_cap``, and every neighbouring pair with different
labels pays its pairwise capacity.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

COV_FLOOR = 1e-4
HARD_CAPACITY = 1e9
DEFAULT_K = 5
DEFAULT_GAMMA = 50.0
DEFAULT_ITERS = 5
CONVERGED_FRACTION = 1e-3
_LOG_2PI = np.log(2 * np.pi)


# --------------------------------------------------------------------------
# Gaussian mixtures

@dataclass
class GMM:
    weights: np.ndarray   # (K,)
    means: np.ndarray     # (K, 3)
    covs: np.ndarray      # (K, 3, 3)
    log_likelihoods: list = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def component_log_probs(self, x: np.ndarray) -> np.ndarray:
        """``log(w_k) + log N(x | mu_k, S_k)`` for every row of ``x``; shape (n, K)."""
        n, d = x.shape
        out = np.full((n, self.n_components), -np.inf)
        for k in range(self.n_components):
            if self.weights[k] <= 0:
                continue
            chol = np.linalg.cholesky(self.covs[k])
            sol = np.linalg.solve(chol, (x - self.means[k]).T)
            maha = np.einsum("ij,ij->j", sol, sol)
            logdet = 2 * np.log(np.diag(chol)).sum()
            out[:, k] = np.log(self.weights[k]) - 0.5 * (d * _LOG_2PI + logdet + maha)
        return out

    def log_likelihood(self, x: np.ndarray) -> float:
        lp = self.component_log_probs(x)
        m = lp.max(axis=1, keepdims=True)
        return float((m[:, 0] + np.log(np.exp(lp - m).sum(axis=1))).sum())

    def hard_nll(self, x: np.ndarray) -> np.ndarray:
        """Per-pixel ``-max_k [log w_k + log N(x | k)]``."""
        return -self.component_log_probs(x).max(axis=1)

    def assign(self, x: np.ndarray) -> np.ndarray:
        return self.component_log_probs(x).argmax(axis=1)


def _floor_cov(cov: np.ndarray) -> np.ndarray:
    # Clipping eigenvalues is the ML covariance under the constraint
    # lambda_min >= COV_FLOOR, so EM/coordinate steps stay monotone.
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    return (vecs * np.maximum(vals, COV_FLOOR)) @ vecs.T


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min([((x - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        idx = rng.integers(len(x)) if total <= 0 else rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
    return np.array(centers)


def gmm_from_assignment(x: np.ndarray, labels: np.ndarray, k: int,
                        previous: GMM | None = None) -> GMM:
    """Maximum-likelihood mixture for hard component labels (empty components get weight 0)."""
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    weights = counts / counts.sum()
    means = np.zeros((k, x.shape[1]))
    covs = np.tile(np.eye(x.shape[1]) * COV_FLOOR, (k, 1, 1))
    for j in range(k):
        if counts[j] == 0:
            if previous is not None:
                means[j], covs[j] = previous.means[j], previous.covs[j]
            continue
        pts = x[labels == j]
        means[j] = pts.mean(axis=0)
        diff = pts - means[j]
        covs[j] = _floor_cov(diff.T @ diff / counts[j])
    return GMM(weights, means, covs)


def fit_gmm(pixels, k: int = DEFAULT_K, iters: int = 10, seed: int = 0) -> GMM:
    """EM fit of a full-covariance mixture to colour vectors.

    Initialised by k-means++ seeding plus hard assignment. Covariances are
    floored at ``COV_FLOOR * I`` (eigenvalue clipping), which keeps a cluster
    of identical colours well defined. ``log_likelihoods`` records the data
    log-likelihood after initialisation and after every EM iteration.
    """
    x = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(x) < k:
        raise ValueError(f"need at least {k} pixels to fit {k} components, got {len(x)}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, rng)
    labels = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2).argmin(axis=1)
    gmm = gmm_from_assignment(x, labels, k)
    history = [gmm.log_likelihood(x)]
    for _ in range(iters):
        lp = gmm.component_log_probs(x)
        m = lp.max(axis=1, keepdims=True)
        resp = np.exp(lp - m)
        resp /= resp.sum(axis=1, keepdims=True)
        nk = resp.sum(axis=0)
        weights = nk / nk.sum()
        means = gmm.means.copy()
        covs = gmm.covs.copy()
        for j in range(k):
            if nk[j] <= 1e-12:
                weights[j] = 0.0
                continue
            means[j] = resp[:, j] @ x / nk[j]
            diff = x - means[j]
            covs[j] = _floor_cov((resp[:, j, None] * diff).T @ diff / nk[j])
        gmm = GMM(weights / weights.sum(), means, covs)
        history.append(gmm.log_likelihood(x))
    gmm.log_likelihoods = history
    return gmm


# --------------------------------------------------------------------------
# graph

# (dy, dx, distance) for the four forward directions of the 8-neighbourhood
NEIGHBOUR_OFFSETS = ((0, 1, 1.0), (1, 0, 1.0), (1, 1, np.sqrt(2.0)), (1, -1, np.sqrt(2.0)))


def _pair_slices(h, w, dy, dx):
    """Slices selecting (first, second) pixel of every pair along one direction."""
    ys0, ys1 = slice(0, h - dy), slice(dy, h)
    if dx >= 0:
        xs0, xs1 = slice(0, w - dx), slice(dx, w)
    else:
        xs0, xs1 = slice(-dx, w), slice(0, w + dx)
    return (ys0, xs0), (ys1, xs1)


def neighbour_sq_diffs(z: np.ndarray) -> list[np.ndarray]:
    """Squared colour differences for each direction; ``z`` is H x W x 3."""
    h, w, _ = z.shape
    out = []
    for dy, dx, _ in NEIGHBOUR_OFFSETS:
        a, b = _pair_slices(h, w, dy, dx)
        out.append(((z[a] - z[b]) ** 2).sum(axis=-1))
    return out


def compute_beta(z: np.ndarray) -> float:
    """``1 / (2 E[|z_i - z_j|^2])`` over all unordered 8-neighbour pairs (0 for a flat image)."""
    diffs = neighbour_sq_diffs(z)
    total = sum(d.sum() for d in diffs)
    count = sum(d.size for d in diffs)
    mean = total / count if count else 0.0
    return 0.0 if mean <= 0 else 1.0 / (2.0 * mean)


@dataclass
class SegGraph:
    source_cap: np.ndarray          # (H, W) arc s->p, paid when p is background
    sink_cap: np.ndarray            # (H, W) arc p->t, paid when p is foreground
    pairwise: list[np.ndarray]      # one array per NEIGHBOUR_OFFSETS direction

    @property
    def shape(self) -> tuple:
        return self.source_cap.shape


def default_box(h: int, w: int) -> tuple[int, int, int, int]:
    """Whole image inset by 1/16 of each extent: ``(y0, x0, y1, x1)``, half-open."""
    my, mx = h // 16, w // 16
    return my, mx, h - my, w - mx


def box_mask(h: int, w: int, box) -> np.ndarray:
    y0, x0, y1, x1 = box
    if y1 <= y0 or x1 <= x0:
        raise ValueError(f"degenerate box {box}")
    inside = np.zeros((h, w), bool)
    inside[max(y0, 0):min(y1, h), max(x0, 0):min(x1, w)] = True
    if not inside.any():
        raise ValueError(f"box {box} does not overlap the {h}x{w} image")
    return inside


def pairwise_weights(z: np.ndarray, beta: float, gamma: float) -> list[np.ndarray]:
    return [gamma * np.exp(-beta * d) / dist
            for d, (_, _, dist) in zip(neighbour_sq_diffs(z), NEIGHBOUR_OFFSETS)]


def data_terms(z: np.ndarray, gmm_fg: GMM, gmm_bg: GMM) -> tuple[np.ndarray, np.ndarray]:
    h, w, _ = z.shape
    flat = z.reshape(-1, 3)
    return gmm_fg.hard_nll(flat).reshape(h, w), gmm_bg.hard_nll(flat).reshape(h, w)


def build_graph(image, gmm_fg: GMM, gmm_bg: GMM, box=None, beta: float | None = None,
                gamma: float = DEFAULT_GAMMA) -> SegGraph:
    """Pixel graph for one image (``3 x H x W`` or ``1 x 3 x H x W``).

    Pixels outside ``box`` are clamped to background with a sink capacity of
    ``HARD_CAPACITY``. Inside, each pixel's two data terms are shifted by
    their minimum so capacities stay non-negative; this changes every
    labelling's cost by the same constant.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    z = _hwc(image)
    h, w, _ = z.shape
    inside = box_mask(h, w, box if box is not None else default_box(h, w))
    if beta is None:
        beta = compute_beta(z)
    d_fg, d_bg = data_terms(z, gmm_fg, gmm_bg)
    low = np.minimum(d_fg, d_bg)
    source_cap = np.where(inside, d_bg - low, 0.0)
    sink_cap = np.where(inside, d_fg - low, HARD_CAPACITY)
    return SegGraph(source_cap, sink_cap, pairwise_weights(z, beta, gamma))


def cut_cost(graph: SegGraph, fg: np.ndarray) -> float:
    """Cost of a labelling under the graph's capacities."""
    fg = np.asarray(fg, bool)
    h, w = graph.shape
    cost = graph.sink_cap[fg].sum() + graph.source_cap[~fg].sum()
    for cap, (dy, dx, _) in zip(graph.pairwise, NEIGHBOUR_OFFSETS):
        a, b = _pair_slices(h, w, dy, dx)
        cost += cap[fg[a] != fg[b]].sum()
    return float(cost)


def segmentation_energy(d_fg, d_bg, pairwise, fg) -> float:
    """GrabCut energy: data terms of the chosen labels plus smoothness across label changes."""
    fg = np.asarray(fg, bool)
    h, w = fg.shape
    e = np.where(fg, d_fg, d_bg).sum()
    for cap, (dy, dx, _) in zip(pairwise, NEIGHBOUR_OFFSETS):
        a, b = _pair_slices(h, w, dy, dx)
        e += cap[fg[a] != fg[b]].sum()
    return float(e)


# --------------------------------------------------------------------------
# max-flow (Dinic) on a CSR residual graph

@njit(cache=True)
def _dinic(n_nodes, src, snk, start, head, cap, rev, tol):
    flow = 0.0
    level = np.empty(n_nodes, np.int64)
    queue = np.empty(n_nodes, np.int64)
    it = np.empty(n_nodes, np.int64)
    stack = np.empty(n_nodes, np.int64)   # arc used to enter each depth
    while True:
        level[:] = -1
        level[src] = 0
        qh, qt = 0, 1
        queue[0] = src
        while qh < qt:
            u = queue[qh]
            qh += 1
            for a in range(start[u], start[u + 1]):
                v = head[a]
                if level[v] < 0 and cap[a] > tol:
                    level[v] = level[u] + 1
                    queue[qt] = v
                    qt += 1
        if level[snk] < 0:
            break
        for u in range(n_nodes):
            it[u] = start[u]
        # iterative DFS for blocking flow
        depth = 0
        u = src
        while True:
            if u == snk:
                pushed = np.inf
                for i in range(depth):
                    if cap[stack[i]] < pushed:
                        pushed = cap[stack[i]]
                for i in range(depth):
                    a = stack[i]
                    cap[a] -= pushed
                    cap[rev[a]] += pushed
                flow += pushed
                # restart from the source; saturated arcs are skipped by `it`
                depth = 0
                u = src
                continue
            advanced = False
            while it[u] < start[u + 1]:
                a = it[u]
                v = head[a]
                if cap[a] > tol and level[v] == level[u] + 1:
                    stack[depth] = a
                    depth += 1
                    u = v
                    advanced = True
                    break
                it[u] += 1
            if not advanced:
                if u == src:
                    break
                level[u] = -1          # dead end
                depth -= 1
                a = stack[depth]
                u = head[rev[a]]
                it[u] += 1
    return flow


@njit(cache=True)
def _reachable(n_nodes, src, start, head, cap, tol):
    seen = np.zeros(n_nodes, np.bool_)
    todo = np.empty(n_nodes, np.int64)
    seen[src] = True
    todo[0] = src
    top = 1
    while top:
        top -= 1
        u = todo[top]
        for a in range(start[u], start[u + 1]):
            v = head[a]
            if not seen[v] and cap[a] > tol:
                seen[v] = True
                todo[top] = v
                top += 1
    return seen


def maxflow_mincut(graph: SegGraph) -> tuple[np.ndarray, float]:
    """Exact minimum cut. Returns ``(foreground mask, max-flow value)``.

    Foreground is the set of pixels still reachable from the source in the
    residual graph. Arc order is fixed, so results are deterministic.
    """
    h, w = graph.shape
    n = h * w
    src, snk = n, n + 1
    idx = np.arange(n).reshape(h, w)
    tails, heads, caps, rcaps = [idx.ravel(), idx.ravel()], [], [], []
    heads += [np.full(n, src), np.full(n, snk)]
    # arc p->s carries 0 forward / source_cap backward, i.e. s->p is its reverse
    caps += [np.zeros(n), graph.sink_cap.ravel()]
    rcaps += [graph.source_cap.ravel(), np.zeros(n)]
    for cap, (dy, dx, _) in zip(graph.pairwise, NEIGHBOUR_OFFSETS):
        a, b = _pair_slices(h, w, dy, dx)
        tails.append(idx[a].ravel())
        heads.append(idx[b].ravel())
        caps.append(cap.ravel())
        rcaps.append(cap.ravel())
    tail = np.concatenate(tails)
    head = np.concatenate(heads)
    fwd = np.concatenate(caps).astype(np.float64)
    bwd = np.concatenate(rcaps).astype(np.float64)

    m = len(tail)
    all_tail = np.concatenate([tail, head])
    all_head = np.concatenate([head, tail])
    all_cap = np.concatenate([fwd, bwd])
    order = np.argsort(all_tail, kind="stable")
    pos = np.empty(2 * m, np.int64)
    pos[order] = np.arange(2 * m)
    rev_unsorted = np.concatenate([np.arange(m, 2 * m), np.arange(m)])
    head_s = all_head[order]
    cap_s = all_cap[order].copy()
    rev_s = pos[rev_unsorted[order]]
    start = np.zeros(n + 3, np.int64)
    np.add.at(start, all_tail + 1, 1)
    start = np.cumsum(start)

    scale = max(float(np.max(all_cap[all_cap < HARD_CAPACITY], initial=0.0)), 1.0)
    tol = 1e-12 * scale
    flow = _dinic(n + 2, src, snk, start, head_s, cap_s, rev_s, tol)
    seen = _reachable(n + 2, src, start, head_s, cap_s, tol)
    return seen[:n].reshape(h, w), float(flow)


# --------------------------------------------------------------------------
# GrabCut

@dataclass
class PseudoLabel:
    mask: np.ndarray            # (H, W) float32 in {0, 1}
    iterations_run: int
    final_energy: float
    energies: list = field(default_factory=list)
    degenerate: bool = False


def _hwc(image) -> np.ndarray:
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ValueError("grabcut works on a single image")
        a = a[0]
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError(f"expected a 3 x H x W image, got {a.shape}")
    return a.transpose(1, 2, 0)


def grabcut(image, iters: int = DEFAULT_ITERS, seed: int = 0, k: int = DEFAULT_K,
            gamma: float = DEFAULT_GAMMA, box=None) -> PseudoLabel:
    """Annotation-free GrabCut seeded with the inset border box.

    Each round assigns pixels to mixture components, refits both colour
    models, rebuilds the graph and takes the min cut. Stops after ``iters``
    rounds or once fewer than 0.1% of pixels change label. An empty
    foreground returns an all-background mask with ``degenerate=True``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    z = _hwc(image)
    h, w, _ = z.shape
    inside = box_mask(h, w, box if box is not None else default_box(h, w))
    flat = z.reshape(-1, 3)
    fg = inside.copy()
    gmm_fg = fit_gmm(flat[fg.ravel()], k, seed=seed)
    gmm_bg = fit_gmm(flat[~fg.ravel()], k, seed=seed + 1)
    pairwise = pairwise_weights(z, compute_beta(z), gamma)

    energies: list[float] = []
    degenerate = False
    rounds = 0
    for rounds in range(1, iters + 1):
        sel = fg.ravel()
        gmm_fg = gmm_from_assignment(flat[sel], gmm_fg.assign(flat[sel]), k, gmm_fg)
        gmm_bg = gmm_from_assignment(flat[~sel], gmm_bg.assign(flat[~sel]), k, gmm_bg)
        d_fg, d_bg = data_terms(z, gmm_fg, gmm_bg)
        low = np.minimum(d_fg, d_bg)
        graph = SegGraph(np.where(inside, d_bg - low, 0.0),
                         np.where(inside, d_fg - low, HARD_CAPACITY), pairwise)
        new_fg, _ = maxflow_mincut(graph)
        energies.append(segmentation_energy(d_fg, d_bg, pairwise, new_fg))
        changed = np.count_nonzero(new_fg != fg)
        fg = new_fg
        if not fg.any():
            degenerate = True
            break
        if changed < CONVERGED_FRACTION * fg.size:
            break
    return PseudoLabel(fg.astype(np.float32), rounds, energies[-1], energies, degenerate)


# --------------------------------------------------------------------------
# on-disk cache

def image_key(image) -> str:
    a = np.ascontiguousarray(np.asarray(image, dtype=np.float32))
    hsh = hashlib.sha256(str(a.shape).encode())
    hsh.update(a.tobytes())
    return hsh.hexdigest()


class PseudoLabelCache:
    """Pseudo-label masks stored as ``<root>/pseudolabels/<sha256>.png`` (8-bit, 0/255).

    Writes go through a temporary file and ``os.replace`` so concurrent
    writers never leave a partial PNG.
    """

    def __init__(self, root, iters: int = DEFAULT_ITERS, seed: int = 0):
        self.dir = Path(root) / "pseudolabels"
        self.iters = iters
        self.seed = seed
        self.degenerate: dict[str, bool] = {}

    def path(self, key: str) -> Path:
        return self.dir / f"{key}.png"

    def get(self, image) -> tuple[np.ndarray, bool]:
        """Binary (H, W) mask and its degenerate flag, computing and storing on a miss."""
        from PIL import Image

        key = image_key(image)
        p = self.path(key)
        if p.exists():
            mask = (np.asarray(Image.open(p)) > 127).astype(np.float32)
            return mask, not mask.any()
        label = grabcut(image, self.iters, self.seed)
        self.dir.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.dir, suffix=".png.tmp")
        os.close(fd)
        Image.fromarray((label.mask * 255).astype(np.uint8), mode="L").save(tmp, format="PNG")
        os.replace(tmp, p)
        return label.mask, label.degenerate

    def batch(self, images) -> tuple[np.ndarray, np.ndarray]:
        """``(N, 1, H, W)`` masks and an ``(N,)`` degenerate flag array."""
        masks, flags = zip(*(self.get(im) for im in images))
        return np.stack(masks)[:, None].astype(np.float32), np.array(flags, bool)
