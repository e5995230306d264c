"""Named parameter store, Adam with bias correction, LR schedules, and the
central finite-difference gradient oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .autodiff import Tensor, no_grad


class OptimError(ValueError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParamStore:
    """Uniquely named parameters plus per-parameter Adam state.

    A store is owned by one training loop at a time; distinct stores may train
    in parallel.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, AdamState] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.params:
            raise OptimError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        self.state[name] = AdamState(m=np.zeros_like(t.data), v=np.zeros_like(t.data))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        out = ParamStore(dtype=self.dtype)
        for name, t in self.params.items():
            out.add(name, t.data.copy())
            st = self.state[name]
            out.state[name] = AdamState(m=st.m.copy(), v=st.v.copy(), step=st.step)
        return out

    def copy_values_from(self, other: "ParamStore", names: Iterable[str] | None = None) -> None:
        for name in (other.names() if names is None else names):
            self.params[name].data[...] = other.params[name].data

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    names: Iterable[str] | None = None,
) -> None:
    """Standard Adam update with bias correction (decoupled weight decay optional)."""
    for name in (store.names() if names is None else names):
        p = store.params[name]
        if p.grad is None:
            raise OptimError(f"adam_step: parameter {name!r} has no gradient")
        st = store.state[name]
        st.step += 1
        g = p.grad
        st.m *= beta1
        st.m += (1.0 - beta1) * g
        st.v *= beta2
        st.v += (1.0 - beta2) * (g * g)
        mhat = st.m / (1.0 - beta1 ** st.step)
        vhat = st.v / (1.0 - beta2 ** st.step)
        if weight_decay:
            p.data -= (lr * weight_decay) * p.data
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def cosine_lr(base_lr: float, step: int, total_steps: int, min_ratio: float = 0.1) -> float:
    """Cosine decay from base_lr to min_ratio * base_lr over total_steps."""
    if total_steps <= 1:
        return base_lr
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    lo = base_lr * min_ratio
    return lo + (base_lr - lo) * 0.5 * (1.0 + math.cos(math.pi * frac))


def schedule_lr(kind: str, base_lr: float, step: int, total_steps: int) -> float:
    if kind == "cosine":
        return cosine_lr(base_lr, step, total_steps)
    if kind == "constant":
        return base_lr
    raise OptimError(f"unknown lr schedule {kind!r}")


def finite_difference_check(
    f: Callable[[], Tensor],
    store: ParamStore,
    h: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error between backward grads and central finite differences.

    ``f`` rebuilds the loss graph from the store's current values on every
    call. With ``max_coords_per_param`` set, a seeded random subset of
    coordinates per parameter is probed instead of every entry.
    """
    if h <= 0:
        raise OptimError("h must be positive")
    store.zero_grad()
    loss = f()
    loss.backward()
    grads = {name: (store.params[name].grad.copy() if store.params[name].grad is not None
                    else np.zeros_like(store.params[name].data))
             for name in (store.names() if names is None else names)}

    def value() -> float:
        with no_grad():
            return float(f().data)

    worst = 0.0
    for name, ana in grads.items():
        p = store.params[name].data
        flat = p.reshape(-1)
        n = flat.size
        if max_coords_per_param is None or n <= max_coords_per_param:
            coords = range(n)
        else:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(n, size=max_coords_per_param, replace=False)
        ana_flat = ana.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            rel = abs(ana_flat[i] - num) / max(abs(ana_flat[i]), abs(num), 1e-3)
            worst = max(worst, rel)
    return worst
