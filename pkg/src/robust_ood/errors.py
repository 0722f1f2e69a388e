"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration (unknown arch, missing split, bad field)."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class CheckpointError(OSError):
    """A checkpoint could not be read or written."""

    def __init__(self, message, path):
        super().__init__(f"{message} [{path}]")
        self.path = str(path)


class AttackError(RuntimeError):
    """The attack objective or its gradient became non-finite."""

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (sample {index})")
        self.index = index


class FitError(RuntimeError):
    """A score bank could not be fitted (singular covariance, too few samples)."""


class TrainingError(RuntimeError):
    def __init__(self, message, step=None, term=None):
        parts = [message]
        if term is not None:
            parts.append(f"term={term}")
        if step is not None:
            parts.append(f"step={step}")
        super().__init__(", ".join(parts))
        self.step = step
        self.term = term


class IngestionError(ValueError):
    """A dataset source is unknown or yields data violating the ingestion contract."""


class LayoutError(ValueError):
    """A toy layout has overlapping in/out regions or is otherwise malformed."""


class EvaluationError(RuntimeError):
    """An attack or score failed inside an evaluation cell."""

    def __init__(self, message, dataset=None, setting=None):
        super().__init__(f"{message} [dataset={dataset}, setting={setting}]")
        self.dataset = dataset
        self.setting = setting
