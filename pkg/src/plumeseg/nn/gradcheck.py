"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.worst < tolerance

    def __str__(self):
        lines = [
            f"{name:24s} max_rel={err:.3e} checked={self.checked[name]} skipped={self.skipped[name]}"
            for name, err in self.max_rel_error.items()
        ]
        return "\n".join(lines)


def rel_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradient_check(fn, params, grads, h: float = 1e-5, max_per_block: int | None = None, rng=None, floor: float = 1e-8):
    """Compare ``grads`` against central differences of ``fn``.

    ``fn()`` evaluates the scalar loss at the current contents of ``params``
    (a name -> float64 array mapping that is perturbed in place) and returns
    either the loss or ``(loss, signature)``. A signature is any bytes value
    describing the piecewise-linear regime (PReLU signs, pooling argmaxes);
    coordinates whose +h and -h evaluations land in different regimes straddle
    a kink and are skipped rather than compared.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    report = GradCheckReport()

    def evaluate():
        out = fn()
        return out if isinstance(out, tuple) else (out, None)

    for name, p in params.items():
        flat = p.reshape(-1)
        g = np.asarray(grads[name]).reshape(-1)
        idx = np.arange(flat.size)
        if max_per_block is not None and flat.size > max_per_block:
            idx = np.sort(rng.choice(flat.size, max_per_block, replace=False))
        worst, n_checked, n_skipped = 0.0, 0, 0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp, sp = evaluate()
            flat[i] = orig - h
            fm, sm = evaluate()
            flat[i] = orig
            if sp != sm:
                n_skipped += 1
                continue
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, float(rel_error(g[i], numeric, floor)))
            n_checked += 1
        report.max_rel_error[name] = worst
        report.checked[name] = n_checked
        report.skipped[name] = n_skipped
    return report
