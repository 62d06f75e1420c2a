"""Minimal Adam optimizer for the variational objective.

Kept deliberately small: one parameter vector, explicit state, and a
snapshot/restore pair so a caller can reject a step and roll both the
parameters and the moment estimates back to the last accepted point.
"""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, size: int, learning_rate: float = 1e-2,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """One descent update; returns the new parameter vector."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        return theta - self.learning_rate * mhat / (np.sqrt(vhat) + self.eps)

    def snapshot(self) -> tuple:
        return (self.m.copy(), self.v.copy(), self.t)

    def restore(self, snap: tuple) -> None:
        self.m = snap[0].copy()
        self.v = snap[1].copy()
        self.t = snap[2]
