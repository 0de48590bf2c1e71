"""Exception types shared across the package."""


class SupportViolationError(ValueError):
    """Target policy puts probability on an action the behaviour policy never takes."""

    def __init__(self, state, action, message=None):
        self.state = state
        self.action = action
        if message is None:
            message = (
                f"support violation at state {state}, action {action}: "
                f"target probability is positive but behaviour probability is 0"
            )
        super().__init__(message)


class MissingWeightError(LookupError):
    """A conditional-weight lookup missed and no fallback was configured."""

    def __init__(self, key):
        self.key = key
        super().__init__(f"no conditional weight stored for key {key!r} and fallback disabled")


class EnumerationCapError(RuntimeError):
    """Trajectory enumeration would exceed the configured atom cap."""

    def __init__(self, estimated, cap):
        self.estimated = estimated
        self.cap = cap
        super().__init__(
            f"enumeration would produce an estimated {estimated} trajectories, "
            f"exceeding the cap of {cap}"
        )


class ConfigError(ValueError):
    """Invalid configuration value or config-file content."""
