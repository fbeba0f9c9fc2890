"""SGD with momentum over named parameter slots."""

from typing import Union

import numpy as np


Param = Union[np.ndarray, float]


class MomentumSGD:
    """
    v <- momentum * v + g (+ weight_decay * p when decay applies); p <- p - lr * v.

    Velocity buffers are keyed by slot name so every parameter group
    (weights, biases, log-steps, log-sharpness) shares one optimizer.
    """

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, Param] = {}

    def step(self, key: str, param: Param, grad: Param, lr: float, decay: bool = False) -> Param:
        if decay and self.weight_decay:
            grad = grad + self.weight_decay * param
        velocity = self.velocity.get(key)
        velocity = grad if velocity is None else self.momentum * velocity + grad
        self.velocity[key] = velocity
        return param - lr * velocity

    def state_dict(self) -> dict[str, Param]:
        return {key: np.copy(value) if isinstance(value, np.ndarray) else value
                for key, value in self.velocity.items()}
