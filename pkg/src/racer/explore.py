"""Active exploration: choose a nearby but uncertain feature to steer towards.

Candidates are the Cartesian product of typical per-dimension values. Each
candidate gets a distance rank (near is good) and a variance rank (uncertain
is good); the target maximizes their convex combination.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyHistory, MaskMismatch
from .gp import GpModel


@dataclass(frozen=True)
class ExplorationConfig:
    alphas: tuple = (6 / 7, 5 / 7, 0.0)
    S: tuple = ()
    quantiles: tuple = (0.1, 0.3, 0.5, 0.7, 0.9)
    cap: int = 3125
    seed: int = 0
    stalemate_threshold: float = 0.05
    stalemate_window: int = 10
    freeze_steps: int = 20

    def __post_init__(self):
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ConfigError("every alpha must lie in [0, 1]")
        if any(s < 0 for s in self.S):
            raise ConfigError("S must be nonnegative")
        if not self.quantiles or self.cap < 1:
            raise ConfigError("need quantiles and a positive cap")

    def alpha(self, iteration: int) -> float:
        """Schedule value; iterations past the end repeat the last entry."""
        if not self.alphas:
            return 0.0
        return float(self.alphas[min(iteration, len(self.alphas) - 1)])


@dataclass(frozen=True)
class CandidateGrid:
    candidates: np.ndarray
    values: tuple
    scales: np.ndarray
    variances: np.ndarray = field(default=None)

    def __len__(self):
        return self.candidates.shape[0]


def build_grid(history, config: ExplorationConfig = ExplorationConfig(), dims=None, pinned=None) -> CandidateGrid:
    """Candidate grid from empirical quantiles of past features.

    ``dims`` restricts the combinatorial expansion to some feature dimensions;
    the others are held at ``pinned`` (default: their historical median).
    """
    H = np.atleast_2d(np.asarray(history, dtype=float))
    if H.size == 0 or H.shape[0] == 0:
        raise EmptyHistory("cannot build a grid without history")
    n_z = H.shape[1]
    dims = list(range(n_z)) if dims is None else list(dims)
    if pinned is None:
        pinned = np.median(H, axis=0)
    pinned = np.asarray(pinned, dtype=float)
    values = []
    for k in range(n_z):
        if k in dims:
            values.append(np.quantile(H[:, k], config.quantiles))
        else:
            values.append(np.array([pinned[k]]))
    sizes = [len(v) for v in values]
    total = int(np.prod(sizes))
    if total > config.cap:
        rng = np.random.default_rng(config.seed)
        flat = np.sort(rng.choice(total, config.cap, replace=False))
    else:
        flat = np.arange(total)
    idx = np.unravel_index(flat, sizes)
    cand = np.column_stack([values[k][idx[k]] for k in range(n_z)])
    scales = np.maximum(np.std(H, axis=0), 1e-6)
    return CandidateGrid(cand, tuple(values), scales, np.zeros(len(cand)))


def precompute_variances(model: GpModel, grid: CandidateGrid, S, inputs=None) -> CandidateGrid:
    """Attach S-weighted posterior variances to every candidate.

    ``inputs`` maps candidates to model inputs when they differ (default identity).
    """
    S = np.asarray(S, dtype=float)
    z = grid.candidates if inputs is None else inputs(grid.candidates)
    _, var = model.predict(z)
    return replace(grid, variances=var @ S)


def _lex_keys(cand):
    # last key is primary for np.lexsort; candidate values give an
    # order-independent tiebreak
    return [cand[:, k] for k in range(cand.shape[1] - 1, -1, -1)]


def ranks(grid: CandidateGrid, z_tilde, reversed_: bool = False):
    """Distances and the (D, V) rank vectors, each a permutation of 1..n."""
    cand = grid.candidates
    n = len(cand)
    d = np.linalg.norm((cand - np.asarray(z_tilde, dtype=float)) / grid.scales, axis=1)
    v = np.asarray(grid.variances, dtype=float)
    by_d = np.lexsort(_lex_keys(cand) + [d])
    D = np.empty(n, dtype=np.int64)
    D[by_d] = np.arange(1, n + 1) if reversed_ else np.arange(n, 0, -1)
    by_v = np.lexsort(_lex_keys(cand) + [-d, v])
    V = np.empty(n, dtype=np.int64)
    V[by_v] = np.arange(1, n + 1)
    return d, D, V


def select_target(z_tilde, grid: CandidateGrid, alpha: float, reversed_: bool = False):
    """Value and index of the candidate maximizing alpha*V + (1-alpha)*D."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha must lie in [0, 1]")
    d, D, V = ranks(grid, z_tilde, reversed_)
    score = alpha * V + (1.0 - alpha) * D
    top = np.flatnonzero(score == score.max())
    if top.size > 1:
        keys = _lex_keys(grid.candidates[top]) + [d[top]]
        top = top[np.lexsort(keys)]
    i = int(top[0])
    return grid.candidates[i].copy(), i


def update_reference(reference, z_ref, mask) -> np.ndarray:
    """Copy of ``reference`` with the masked entries replaced by ``z_ref``."""
    out = np.array(reference, dtype=float, copy=True)
    idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask, dtype=int)
    z_ref = np.atleast_1d(np.asarray(z_ref, dtype=float))
    if idx.size != z_ref.size or (idx.size and idx.max() >= out.size):
        raise MaskMismatch(f"mask selects {idx.size} entries, target has {z_ref.size}")
    out[idx] = z_ref
    return out


def detect_stalemate(history, threshold: float = 0.05, window: int = 10) -> bool:
    """True when the last ``window`` relative configurations barely moved."""
    if len(history) < window or window < 2:
        return False
    last = np.asarray(list(history)[-window:], dtype=float)
    steps = np.linalg.norm(np.diff(last, axis=0), axis=1)
    return bool(np.all(steps < threshold))


class StalemateTracker:
    """Switches target selection to the reversed distance rank when stuck.

    ``update`` returns "select", "reverse" (select with reversed ranks, then
    hold the target) or "hold".
    """

    def __init__(self, config: ExplorationConfig = ExplorationConfig()):
        self.config = config
        self.history = deque(maxlen=config.stalemate_window)
        self.hold = 0
        self.reversals = 0

    def update(self, rel) -> str:
        if self.hold > 0:
            self.hold -= 1
            return "hold"
        self.history.append(tuple(float(r) for r in rel))
        if detect_stalemate(self.history, self.config.stalemate_threshold, self.config.stalemate_window):
            self.hold = self.config.freeze_steps
            self.history.clear()
            self.reversals += 1
            return "reverse"
        return "select"


def export_grid_csv(grid: CandidateGrid, path, names=None) -> None:
    n_z = grid.candidates.shape[1]
    names = list(names) if names else [f"z{k}" for k in range(n_z)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["v"])
        for z, v in zip(grid.candidates, grid.variances):
            w.writerow([repr(float(x)) for x in z] + [repr(float(v))])
