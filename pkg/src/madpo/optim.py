"""Minimal deterministic first-order optimizers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SGD = "sgd"
ADAM = "adam"


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = ADAM
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.name not in (SGD, ADAM):
            raise ValueError(f"unknown optimizer {self.name!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("moment decay rates must lie in [0, 1)")

    def build(self):
        if self.name == SGD:
            return SgdState(self.learning_rate)
        return AdamState(self.learning_rate, self.beta1, self.beta2, self.eps)


class SgdState:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.learning_rate * grad


class AdamState:
    def __init__(self, learning_rate: float, beta1: float, beta2: float, eps: float):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
