"""Central finite-difference verification of taped gradients."""
from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, backward, no_grad


class GradCheckError(RuntimeError):
    """Raised when an analytic or numeric gradient is not finite."""


def _reduce(out: Tensor, cotangent: np.ndarray | None) -> Tensor:
    if cotangent is None:
        return out.sum()
    return (out * cotangent).sum()


@dataclass
class GradCheckReport:
    error: float    # worst relative error over inputs
    probed: int     # coordinates compared
    skipped: int    # coordinates dropped as non-smooth (only with skip_kinks)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               **kw) -> float:
    """Worst relative error between taped and finite-difference gradients; see
    :func:`grad_check_report`."""
    return grad_check_report(fn, inputs, eps, **kw).error


def grad_check_report(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    *,
    seed: int = 0,
    max_coords: int | None = None,
    weighted: bool = True,
    skip_kinks: bool = False,
    kink_tol: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn(*inputs)`` with central differences.

    The output is reduced to a scalar by summing it against a fixed random
    cotangent (plain sum when ``weighted`` is False).  For every input with
    ``requires_grad`` the error is
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`` using vector
    norms over the probed coordinates; the maximum over inputs is reported.
    ``max_coords`` probes a seeded random subset of each input's entries.

    With ``skip_kinks`` each coordinate is also differenced at ``eps / 2``.  On a
    smooth coordinate the two estimates agree to O(eps^2); when a ReLU or max
    switches inside the step they do not, and the coordinate is left out of
    the comparison (the function has no derivative to check there).  The
    two estimates of the kept coordinates are combined by Richardson
    extrapolation, which tolerates sharply curved but smooth regions.
    """
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    cot = rng.standard_normal(out.shape) if weighted else None
    for t in inputs:
        t.zero_grad()
    grads = backward(_reduce(out, cot))

    worst = 0.0
    probed = skipped = 0
    for pos, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        label = t.name or f"input[{pos}]"
        analytic_full = grads.get(t)
        if analytic_full is None:
            analytic_full = np.zeros_like(t.data)
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)  # view: edits below perturb t in place
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        else:
            coords = np.arange(flat.size)
        analytic = analytic_full.reshape(-1)[coords]
        numeric = np.empty(len(coords))
        smooth = np.ones(len(coords), dtype=bool)

        def central(c, h):
            orig = flat[c]
            flat[c] = orig + h
            up = _reduce(fn(*inputs), cot).item()
            flat[c] = orig - h
            down = _reduce(fn(*inputs), cot).item()
            flat[c] = orig
            return (up - down) / (2.0 * h)

        with no_grad():
            for n, c in enumerate(coords):
                numeric[n] = central(c, eps)
                if skip_kinks:
                    half = central(c, eps / 2)
                    smooth[n] = abs(numeric[n] - half) <= kink_tol * (
                        abs(numeric[n]) + abs(half)) + 1e-9
                    numeric[n] = (4.0 * half - numeric[n]) / 3.0  # Richardson, O(eps^4)
        for name, arr in (("analytic", analytic), ("numeric", numeric)):
            bad = ~np.isfinite(arr)
            if bad.any():
                idx = tuple(int(i) for i in np.unravel_index(coords[np.argmax(bad)], t.shape))
                raise GradCheckError(f"non-finite {name} gradient for {label} at {idx}")
        skipped += int((~smooth).sum())
        probed += int(smooth.sum())
        analytic, numeric = analytic[smooth], numeric[smooth]
        err = np.linalg.norm(analytic - numeric) / (
            np.linalg.norm(analytic) + np.linalg.norm(numeric) + 1e-12)
        worst = max(worst, float(err))
    return GradCheckReport(worst, probed, skipped)
