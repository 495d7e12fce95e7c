"""Unit tests for the training circuit breaker."""

import math

import pytest

from commonloc.circuit_breaker import (
    CircuitState,
    IterationMetrics,
    TrainingDiverged,
    create_circuit_breaker,
)


def feed(breaker, losses, start=0):
    for i, loss in enumerate(losses, start=start):
        breaker.record_iteration(IterationMetrics(i, loss, 1.0, 1e-3))


class TestCircuitBreaker:
    """Tests for plateau, spike and divergence handling."""

    def test_healthy_run_stays_closed(self):
        breaker = create_circuit_breaker(window=2)
        feed(breaker, [5.0, 4.0, 3.0, 2.5, 2.0, 1.5])
        assert breaker.state is CircuitState.CLOSED
        assert not breaker.is_open()

    def test_plateau_warns(self):
        warnings = []
        breaker = create_circuit_breaker(no_progress_threshold=2, window=1, on_warning=warnings.append)
        feed(breaker, [1.0, 2.0, 2.0, 2.0])
        assert breaker.is_open()
        assert "No new best loss" in warnings[-1]

    def test_spike_warns(self):
        warnings = []
        breaker = create_circuit_breaker(spike_ratio=10.0, window=100, on_warning=warnings.append)
        feed(breaker, [1.0, 1.0, 50.0])
        assert any("x the best" in w for w in warnings)

    def test_recovery_closes(self):
        breaker = create_circuit_breaker(spike_ratio=10.0, window=100)
        feed(breaker, [1.0, 50.0, 1.0, 1.0])
        assert breaker.state is CircuitState.CLOSED

    def test_non_finite_loss_raises_with_snapshot(self):
        breaker = create_circuit_breaker(window=10)
        feed(breaker, [3.0, 2.0])
        with pytest.raises(TrainingDiverged) as exc:
            breaker.record_iteration(IterationMetrics(2, math.nan, 1.0, 1e-3))
        snapshot = exc.value.snapshot
        assert snapshot["iteration"] == 2
        assert snapshot["last_finite_losses"] == [3.0, 2.0]
        assert snapshot["lr"] == 1e-3

    def test_non_finite_gradient_raises(self):
        breaker = create_circuit_breaker()
        with pytest.raises(TrainingDiverged):
            breaker.record_iteration(IterationMetrics(0, 1.0, math.inf))

    def test_reset(self):
        breaker = create_circuit_breaker(no_progress_threshold=1, window=1)
        feed(breaker, [1.0, 2.0])
        breaker.reset()
        status = breaker.get_status()
        assert status["state"] == "closed"
        assert status["iterations_recorded"] == 0
