"""Central finite-difference checks against analytic parameter gradients."""
from dataclasses import dataclass

import numpy as np

from colorflux import micronet


@dataclass
class GradReport:
    checked: int
    worst_rel: float
    worst_name: str
    failures: list

    @property
    def ok(self) -> bool:
        return not self.failures


def check_param_grads(loss_fn, params, groups, h=1e-4, rel_tol=1e-4, abs_tol=1e-8) -> GradReport:
    """Compare ``loss_fn(params).grads`` with central differences for every element.

    An element passes when ``|a - n| <= abs_tol`` or
    ``|a - n| / max(|a|, |n|) <= rel_tol``. ``loss_fn`` must be a
    deterministic function of the parameters.
    """
    analytic = loss_fn(params).grads
    checked, worst, worst_name, failures = 0, 0.0, "", []
    for name in sorted(params.arrays):
        if micronet.group_of(name) not in groups:
            continue
        arr = params.arrays[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss_fn(params).value
            arr[idx] = orig - h
            down = loss_fn(params).value
            arr[idx] = orig
            num = (up - down) / (2 * h)
            a = analytic[name][idx]
            err = abs(a - num)
            checked += 1
            if err <= abs_tol:
                continue
            rel = err / max(abs(a), abs(num))
            if rel > worst:
                worst, worst_name = rel, f"{name}{list(idx)}"
            if rel > rel_tol:
                failures.append((name, idx, a, num))
    return GradReport(checked, worst, worst_name, failures)
