"""
Circuit breaker for training loops.

Watches per-iteration loss and gradient norm. Plateaus and loss spikes only warn
(training continues); a non-finite loss or gradient trips the breaker and raises
TrainingDiverged with a snapshot of the recent history. Tracks:
- Best loss per window of iterations
- Loss relative to the running minimum
- Finiteness of loss and gradient norm
"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum
from typing import Any


class CircuitState(Enum):
    """Circuit breaker states."""
    CLOSED = "closed"      # Normal operation
    HALF_OPEN = "half_open"  # Testing if issue resolved
    OPEN = "open"          # Problem detected, warning issued


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, snapshot: dict[str, Any]):
        self.snapshot = snapshot
        super().__init__(message)


@dataclass
class IterationMetrics:
    """Metrics collected for a single training iteration."""
    iteration: int
    total_loss: float
    grad_norm: float = 0.0
    lr: float = 0.0

    @property
    def finite(self) -> bool:
        return math.isfinite(self.total_loss) and math.isfinite(self.grad_norm)


@dataclass
class CircuitBreaker:
    """
    Circuit breaker for detecting stalled or diverging training.

    Losses are grouped into windows of `window` iterations. Thresholds (configurable):
    - no_progress_threshold: Consecutive windows without a new best loss
    - spike_ratio: Loss above this multiple of the running minimum
    """

    # Thresholds
    no_progress_threshold: int = 5
    spike_ratio: float = 50.0
    window: int = 100

    # State tracking
    state: CircuitState = field(default=CircuitState.CLOSED)
    no_progress_count: int = 0
    best_loss: float = math.inf
    window_best: float = math.inf
    metrics_history: list[IterationMetrics] = field(default_factory=list)

    # Callbacks
    on_warning: Callable[[str], None] | None = None

    def __post_init__(self) -> None:
        self.log = logging.getLogger("commonloc.circuit_breaker")

    def record_iteration(self, metrics: IterationMetrics) -> None:
        """
        Record metrics from an iteration and update circuit state.

        Raises:
            TrainingDiverged: loss or gradient norm is not finite
        """
        self.metrics_history.append(metrics)

        if not metrics.finite:
            self.state = CircuitState.OPEN
            snapshot = self.snapshot()
            self.log.error(f"Training diverged at iteration {metrics.iteration}: {snapshot}")
            raise TrainingDiverged(
                f"Non-finite loss ({metrics.total_loss}) or gradient norm ({metrics.grad_norm}) "
                f"at iteration {metrics.iteration}",
                snapshot,
            )

        self.window_best = min(self.window_best, metrics.total_loss)
        warnings = []

        # Check for loss spike against the running minimum
        if self.best_loss < math.inf and self.best_loss > 0:
            ratio = metrics.total_loss / self.best_loss
            if ratio >= self.spike_ratio:
                warnings.append(f"Loss {metrics.total_loss:.4g} is {ratio:.0f}x the best {self.best_loss:.4g}")

        # Close a window and check for progress
        if len(self.metrics_history) % self.window == 0:
            if self.window_best < self.best_loss:
                self.no_progress_count = 0
            else:
                self.no_progress_count += 1
            self.best_loss = min(self.best_loss, self.window_best)
            self.window_best = math.inf
            if self.no_progress_count >= self.no_progress_threshold:
                warnings.append(
                    f"No new best loss in {self.no_progress_count} windows of {self.window} iterations"
                )
        elif self.best_loss == math.inf:
            self.best_loss = metrics.total_loss

        self._update_state(warnings, metrics)

    def _update_state(self, warnings: list[str], metrics: IterationMetrics) -> None:
        if warnings:
            self.state = CircuitState.OPEN
            self._issue_warnings(warnings, metrics)
        elif self.state == CircuitState.OPEN:
            # Recovery detected
            self.state = CircuitState.HALF_OPEN
            self.log.info("Circuit breaker: Recovery detected, moving to HALF_OPEN")
        elif self.state == CircuitState.HALF_OPEN:
            # Confirmed recovery
            self.state = CircuitState.CLOSED
            self.log.info("Circuit breaker: Confirmed recovery, moving to CLOSED")

    def _issue_warnings(self, warnings: list[str], metrics: IterationMetrics) -> None:
        msg = (
            f"[CIRCUIT BREAKER WARNING] Iteration {metrics.iteration}: "
            f"Training may be stalled or unstable:\n"
            + "\n".join(f"  - {w}" for w in warnings)
        )

        self.log.warning(msg)

        if self.on_warning:
            self.on_warning(msg)

    def snapshot(self, last: int = 10) -> dict[str, Any]:
        """Diagnostic view of the most recent iterations."""
        recent = self.metrics_history[-last:]
        finite = [m.total_loss for m in recent if math.isfinite(m.total_loss)]
        return {
            "iteration": recent[-1].iteration if recent else None,
            "last_finite_losses": finite,
            "grad_norms": [m.grad_norm for m in recent],
            "lr": recent[-1].lr if recent else None,
            "best_loss": self.best_loss if math.isfinite(self.best_loss) else None,
        }

    def is_open(self) -> bool:
        """Check if circuit is open (problem detected)."""
        return self.state == CircuitState.OPEN

    def get_status(self) -> dict[str, str | int | bool]:
        """Get current circuit breaker status."""
        return {
            "state": self.state.value,
            "no_progress_count": self.no_progress_count,
            "iterations_recorded": len(self.metrics_history),
            "warnings_issued": self.state == CircuitState.OPEN,
        }

    def reset(self) -> None:
        """Reset circuit breaker to initial state."""
        self.state = CircuitState.CLOSED
        self.no_progress_count = 0
        self.best_loss = math.inf
        self.window_best = math.inf
        self.metrics_history.clear()


def create_circuit_breaker(
    no_progress_threshold: int = 5,
    spike_ratio: float = 50.0,
    window: int = 100,
    on_warning: Callable[[str], None] | None = None,
) -> CircuitBreaker:
    """
    Create a configured circuit breaker.

    Args:
        no_progress_threshold: Windows without a new best loss before warning
        spike_ratio: Loss multiple of the best loss that counts as a spike
        window: Iterations per progress window
        on_warning: Callback when warning is issued

    Returns:
        Configured CircuitBreaker instance
    """
    return CircuitBreaker(
        no_progress_threshold=no_progress_threshold,
        spike_ratio=spike_ratio,
        window=window,
        on_warning=on_warning,
    )
