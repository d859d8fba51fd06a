"""Exception types. Each carries a short ``code`` used in CLI error lines."""


class OodkitError(Exception):
    code = "error"


class BadMagicError(OodkitError, ValueError):
    code = "bad_magic"


class VersionMismatchError(OodkitError, ValueError):
    code = "version_mismatch"


class TruncatedPayloadError(OodkitError, ValueError):
    code = "truncated_payload"


class DimensionMismatchError(OodkitError, ValueError):
    code = "dimension_mismatch"


class NonFiniteLossError(OodkitError, FloatingPointError):
    code = "non_finite_loss"


class PlanMismatchError(OodkitError, ValueError):
    code = "plan_mismatch"


class ConfigError(OodkitError, ValueError):
    code = "bad_config"


class CorruptCheckpointError(OodkitError, ValueError):
    code = "corrupt_checkpoint"
