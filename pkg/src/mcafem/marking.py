"""Doerfler bulk marking."""

import numpy as np

from .estimator import IndicatorField


def dorfler_mark(ind: IndicatorField, theta: float) -> set:
    """Smallest set M with sum_M eta_T^2 >= theta^2 sum_T eta_T^2.

    Elements are taken by decreasing indicator, ties by ascending id, so the
    shortest qualifying prefix is both minimal and deterministic.
    """
    if not 0 < theta < 1:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    eta2 = np.asarray(ind.values, dtype=float) ** 2
    if eta2.size == 0 or not np.any(eta2 > 0):
        return set()
    order = np.lexsort((ind.ids, -eta2))
    csum = np.cumsum(eta2[order])
    n = int(np.searchsorted(csum, theta * theta * csum[-1], side="left")) + 1
    return set(ind.ids[order[:n]].tolist())
