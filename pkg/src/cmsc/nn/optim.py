"""Parameter store with freeze flags and an Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from cmsc.errors import ContractError
from cmsc.nn.layers import Module


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamStore:
    """Named parameter arrays shared (by reference) with the modules that own them."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: dict[str, bool] = field(default_factory=dict)
    state: dict[str, AdamState] = field(default_factory=dict)

    @classmethod
    def from_modules(cls, modules: dict[str, Module]) -> "ParamStore":
        store = cls()
        for prefix, module in modules.items():
            for name, p in module.named_parameters(f"{prefix}."):
                store.add(name, p)
        return store

    def add(self, name: str, array: np.ndarray, *, frozen: bool = False) -> None:
        if name in self.params:
            msg = f"duplicate parameter name {name!r}"
            raise ContractError(msg)
        self.params[name] = array
        self.frozen[name] = frozen
        self.state[name] = AdamState(np.zeros_like(array), np.zeros_like(array))

    def set_frozen(self, prefixes: Iterable[str] | None, frozen: bool) -> None:
        """Freeze/unfreeze every parameter whose name starts with one of ``prefixes`` (None = all)."""
        prefixes = None if prefixes is None else tuple(prefixes)
        for name in self.params:
            if prefixes is None or name.startswith(prefixes):
                self.frozen[name] = frozen

    def trainable(self) -> list[str]:
        return [n for n, f in self.frozen.items() if not f]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float, *,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """In-place Adam update of every unfrozen parameter that has a gradient."""
    for name in grads:
        if name not in store.params:
            msg = f"gradient for unknown parameter {name!r}"
            raise KeyError(msg)
    for name, g in grads.items():
        if store.frozen[name]:
            continue
        st = store.state[name]
        st.step += 1
        st.m *= beta1
        st.m += (1.0 - beta1) * g
        st.v *= beta2
        st.v += (1.0 - beta2) * g * g
        m_hat = st.m / (1.0 - beta1 ** st.step)
        v_hat = st.v / (1.0 - beta2 ** st.step)
        store.params[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return store
