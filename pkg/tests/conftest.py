"""Shared oracles: straight-line scalar re-implementations used by many tests."""

from __future__ import annotations

import math

import numpy as np
import pytest

from fedmem.datasets import make_blobs
from fedmem.numerics import ParamSet


def central_difference(f, params: ParamSet, h: float = 1e-6) -> np.ndarray:
    """Gradient of scalar ``f(ParamSet)`` by central differences, flattened."""
    flat = params.flatten()
    out = np.zeros_like(flat)
    for i in range(len(flat)):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (f(params.unflatten(up)) - f(params.unflatten(dn))) / (2 * h)
    return out


def max_rel_error(g: np.ndarray, fd: np.ndarray) -> float:
    """``max_i |g_i - fd_i| / (|fd_i| + 1e-8)`` with ``fd`` the finite-difference estimate."""
    return float(np.max(np.abs(g - fd) / (np.abs(fd) + 1e-8)))


def scalar_forward(params: ParamSet, x: list[float]) -> list[float]:
    """One row through the MLP with explicit loops."""
    act = list(x)
    for layer in params:
        out = []
        for j in range(layer.fan_out):
            s = float(layer.bias[j])
            for i in range(layer.fan_in):
                s += act[i] * float(layer.weight[i, j])
            if layer.activation == "relu":
                s = s if s > 0 else 0.0
            elif layer.activation == "tanh":
                s = math.tanh(s)
            out.append(s)
        act = out
    return act


def scalar_ce(logits: list[float], y: int) -> float:
    m = max(logits)
    lse = m + math.log(sum(math.exp(v - m) for v in logits))
    return lse - logits[y]


def scalar_cls_loss(x_hat, labels, models: dict, alpha: np.ndarray, ids: list[int]) -> float:
    """Mean over rows of sum_k alpha[k, y] * CE of client k on the row."""
    n = len(labels)
    total = 0.0
    for i in range(n):
        y = int(labels[i])
        row = [float(v) for v in x_hat[i]]
        for idx, k in enumerate(ids):
            a = float(alpha[idx][y])
            if a == 0.0:
                continue
            total += a * scalar_ce(scalar_forward(models[k], row), y)
    return total / n


def scalar_div_one_class(x) -> float:
    n = len(x)
    s = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                s += math.sqrt(sum((float(x[i][c]) - float(x[j][c])) ** 2 for c in range(len(x[i]))))
    return -(1.0 / n) * s / (n - 1)


def scalar_div_loss(x, labels) -> float:
    classes = sorted({int(v) for v in labels if list(labels).count(v) >= 2})
    per = [scalar_div_one_class([x[i] for i in range(len(labels)) if labels[i] == c]) for c in classes]
    return sum(per) / len(per) if per else 0.0


def scalar_aggregate(updates: list[tuple[int, list[float], float]]) -> list[float]:
    """Weighted mean with weights renormalized, summed in ascending id order."""
    total_w = sum(w for _, _, w in updates)
    out = [0.0] * len(updates[0][1])
    for _, vec, w in sorted(updates, key=lambda u: u[0]):
        for i, v in enumerate(vec):
            out[i] += (w / total_w) * v
    return out


@pytest.fixture(scope="session")
def blobs():
    return make_blobs(4, 5, 60, 1.0, layout_seed=3, sample_seed=4)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, whichever tests ran."""
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
