"""Keep a bounded GP dataset informative.

A candidate is stored when, for some output, its posterior variance under the
current model exceeds the median leave-one-out variance of the stored points.
When the store is full it replaces the point that is best explained by the
others. Outliers are screened out before that test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .gp import GpDataset, GpModel

ADDED = "added"
REPLACED = "replaced"
REJECTED_LOW_INFO = "rejected_low_info"
REJECTED_OUTLIER = "rejected_outlier"


@dataclass(frozen=True)
class SelectionPolicy:
    capacity: int = 2000
    k_out: float = 3.0

    def __post_init__(self):
        if self.capacity < 1 or not self.k_out > 0:
            raise ConfigError("need capacity >= 1 and k_out > 0")


@dataclass(frozen=True)
class SelectionOutcome:
    decision: str
    index: int = -1
    dimension: int = -1

    @property
    def stored(self) -> bool:
        return self.decision in (ADDED, REPLACED)


def loo_variances(model: GpModel) -> np.ndarray:
    """Posterior variance at each stored input given all other stored points."""
    inv_diag = model.inverse_diagonal()
    return np.maximum(1.0 / inv_diag - model.noise[None, :], 0.0)


def reject_outlier(model: GpModel, z, y, policy: SelectionPolicy) -> bool:
    mu, var = model.predict(np.asarray(z, dtype=float))
    bound = policy.k_out * (np.sqrt(var) + np.sqrt(model.noise))
    return bool(np.any(np.abs(np.asarray(y, dtype=float) - mu) > bound))


def _replacement(cand_var, table):
    """Slot to overwrite and the output dimension that decided it."""
    mins = np.argmin(table, axis=0)
    lowest = table[mins, np.arange(table.shape[1])]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(lowest > 0, cand_var / np.where(lowest > 0, lowest, 1.0), np.inf)
    d = int(np.argmax(ratio))
    return int(mins[d]), d


def _decide(model, z, y, policy, median, table, full):
    if reject_outlier(model, z, y, policy):
        return SelectionOutcome(REJECTED_OUTLIER)
    _, var = model.predict(np.asarray(z, dtype=float))
    if not np.any(var > median):
        return SelectionOutcome(REJECTED_LOW_INFO)
    if not full:
        return SelectionOutcome(ADDED)
    if not np.any(np.isfinite(table)):
        return SelectionOutcome(REJECTED_LOW_INFO)
    i, d = _replacement(var, table)
    return SelectionOutcome(REPLACED, i, d)


def _apply(dataset: GpDataset, outcome: SelectionOutcome, z, y) -> SelectionOutcome:
    if outcome.decision == ADDED:
        return SelectionOutcome(ADDED, dataset.add(z, y))
    if outcome.decision == REPLACED:
        dataset.replace(outcome.index, z, y)
    return outcome


def consider(dataset: GpDataset, model: GpModel, z, y, policy: SelectionPolicy) -> SelectionOutcome:
    """Decide on one candidate and apply it to ``dataset``.

    ``model`` must be fitted on the current content of ``dataset``.
    """
    table = loo_variances(model)
    full = len(dataset) >= policy.capacity
    outcome = _decide(model, z, y, policy, np.median(table, axis=0), table, full)
    return _apply(dataset, outcome, z, y)


class Selector:
    """Runs :func:`consider` against a model that is only refreshed between laps.

    The LOO table and its medians come from the last refresh. Slots written
    since then are never chosen for replacement, and points appended since
    then do not enter the median.
    """

    def __init__(self, dataset: GpDataset, policy: SelectionPolicy, model: GpModel | None = None):
        if dataset.capacity < policy.capacity:
            raise ConfigError("dataset capacity smaller than the policy capacity")
        self.dataset = dataset
        self.policy = policy
        self.counts = {ADDED: 0, REPLACED: 0, REJECTED_LOW_INFO: 0, REJECTED_OUTLIER: 0}
        self.refresh(model)

    def refresh(self, model: GpModel | None) -> None:
        self.model = model
        if model is None:
            self.table = None
            return
        if len(model) != len(self.dataset):
            raise ConfigError("model must be fitted on the current dataset")
        self.table = loo_variances(model)
        self.median = np.median(self.table, axis=0)
        self._live = self.table.copy()

    def consider(self, z, y) -> SelectionOutcome:
        full = len(self.dataset) >= self.policy.capacity
        if self.model is None:
            outcome = SelectionOutcome(REJECTED_LOW_INFO if full else ADDED)
        else:
            live = self._live
            if full and len(self.dataset) > live.shape[0]:
                pad = np.full((len(self.dataset) - live.shape[0], live.shape[1]), np.inf)
                live = np.vstack([live, pad])
            outcome = _decide(self.model, z, y, self.policy, self.median, live, full)
            if outcome.decision == REPLACED and outcome.index < self._live.shape[0]:
                self._live[outcome.index] = np.inf
        outcome = _apply(self.dataset, outcome, z, y)
        self.counts[outcome.decision] += 1
        return outcome
