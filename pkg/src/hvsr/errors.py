"""Exception types; ``UserError`` subclasses map to CLI exit code 2."""


class UserError(Exception):
    """Bad input, config or filesystem state supplied by the caller."""


class ConfigError(UserError):
    pass


class CheckpointError(UserError):
    pass


class ParentMismatchError(CheckpointError):
    pass


class TrainingAborted(RuntimeError):
    pass
