class GeostError(Exception):
    """Base class for errors raised by geost."""


class FormatError(GeostError, ValueError):
    """A file does not follow its documented layout."""


class TrainingError(GeostError, RuntimeError):
    """Training diverged or was handed inconsistent inputs."""


class ConfigError(GeostError, ValueError):
    """Configuration is malformed or contains unknown keys."""
