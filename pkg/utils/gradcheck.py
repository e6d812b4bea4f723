from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional

import torch
import torch.nn as nn


@dataclass
class CheckResult:
    parameter: str
    index: int
    analytic: float
    numeric: float

    @property
    def relative_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric), 1e-6)
        return abs(self.analytic - self.numeric) / scale


def finite_difference_checks(
    module: nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    n_checks: int = 10,
    eps: float = 1e-6,
    generator: Optional[torch.Generator] = None,
) -> List[CheckResult]:
    """Compare autodiff against central differences on random scalar parameters.

    Run in float64; ``loss_fn`` must be a deterministic closure over ``module``.
    """
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    if not named:
        raise ValueError("module has no trainable parameters")
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    sizes = torch.tensor([p.numel() for _, p in named], dtype=torch.float64)
    picks = torch.multinomial(sizes / sizes.sum(), n_checks, replacement=True, generator=generator)
    results = []
    for k in picks.tolist():
        name, p = named[k]
        j = int(torch.randint(p.numel(), (1,), generator=generator))
        flat = p.data.view(-1)
        original = flat[j].item()
        with torch.no_grad():
            flat[j] = original + eps
            plus = float(loss_fn())
            flat[j] = original - eps
            minus = float(loss_fn())
            flat[j] = original
        g = grads[k]
        analytic = 0.0 if g is None else float(g.reshape(-1)[j])
        results.append(CheckResult(name, j, analytic, (plus - minus) / (2 * eps)))
    return results
