"""Fixed quadrature rules shared by assembly and estimation."""

import numpy as np

_s = np.sqrt(15.0)
_a1, _b1 = (6 - _s) / 21, (9 + 2 * _s) / 21
_a2, _b2 = (6 + _s) / 21, (9 - 2 * _s) / 21
_w1, _w2 = (155 - _s) / 1200, (155 + _s) / 1200

#: 7-point degree-5 rule: barycentric points (7, 3), weights summing to 1.
TRI_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_b1, _a1, _a1], [_a1, _b1, _a1], [_a1, _a1, _b1],
    [_b2, _a2, _a2], [_a2, _b2, _a2], [_a2, _a2, _b2],
])
TRI_WEIGHTS = np.array([9 / 40, _w1, _w1, _w1, _w2, _w2, _w2])

#: 3-point Gauss rule on [0, 1], weights summing to 1.
EDGE_POINTS = np.array([0.5 - 0.5 * np.sqrt(0.6), 0.5, 0.5 + 0.5 * np.sqrt(0.6)])
EDGE_WEIGHTS = np.array([5 / 18, 8 / 18, 5 / 18])
