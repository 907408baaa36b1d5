"""Exception types shared across the simulator."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent setup."""


class IngestionError(RuntimeError):
    """Dataset file could not be parsed (bad magic, truncation, count mismatch)."""


class DivergenceError(RuntimeError):
    """Local training produced a non-finite loss."""

    def __init__(self, round_idx, client_id, step, loss):
        self.round_idx = round_idx
        self.client_id = client_id
        self.step = step
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at round {round_idx}, "
            f"client {client_id}, step {step}"
        )
