"""
Finite-difference gradient checking shared by the model tests.
"""
from typing import Callable, Dict, Iterable, Optional

from apps.lm.nn_core import ParameterStore, numerical_gradient, relative_error

# Entries whose gradients are smaller than this are compared absolutely.
GRADIENT_FLOOR = 1e-4
GRADIENT_TOLERANCE = 1e-5


def store_gradient_errors(
    loss: Callable[[bool], float], store: ParameterStore, names: Optional[Iterable[str]] = None
) -> Dict[str, float]:
    """
    Relative error between accumulated and central-difference gradients.

    Args:
        loss: loss(backward) evaluates the loss, accumulating gradients when backward is True
        store: Parameters the loss reads
        names: Parameters to check (all by default)
    """
    store.zero_grad()
    loss(True)
    names = list(names or store.names)
    analytic = {name: store.grad(name).copy() for name in names}
    store.zero_grad()
    return {
        name: relative_error(analytic[name], numerical_gradient(lambda: loss(False), store[name]), GRADIENT_FLOOR)
        for name in names
    }
