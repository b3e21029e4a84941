"""Training-loop plumbing shared by the generator, discriminator and refiner."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

INIT_STREAM, SHUFFLE_STREAM, DROPOUT_STREAM, AUX_STREAM = 0, 1, 2, 3


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; ``last_good`` holds the models from the last finished epoch."""

    def __init__(self, message: str, last_good=None, epoch: int | None = None):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    max_grad_norm: float | None = None
    lr_decay: float = 1.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ValueError("max_grad_norm must be > 0 or None")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")

    def epoch_learning_rate(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch`` under per-epoch multiplicative decay."""
        return self.learning_rate * self.lr_decay ** (epoch - 1)

    def to_json(self) -> dict:
        return asdict(self)


def stream(seed: int, which: int, sub: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, which, sub])


def init_seed(seed: int, sub: int = 0) -> int:
    return int(stream(seed, INIT_STREAM, sub).integers(0, 2**63 - 1))


def minibatches(rng: np.random.Generator, n: int, batch_size: int):
    """Shuffled index batches covering ``range(n)``; a trailing batch of one
    row is folded into the previous batch so batch statistics stay defined."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def check_finite(value: float, what: str, epoch: int, last_good=None) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite {what} in epoch {epoch}", last_good, epoch)
