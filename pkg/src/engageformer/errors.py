"""Exception hierarchy shared across the package."""


class EngageFormerError(Exception):
    pass


class DimensionError(EngageFormerError, ValueError):
    pass


class NumericError(EngageFormerError, ArithmeticError):
    pass


class ConfigError(EngageFormerError, ValueError):
    pass


class GeometryError(ConfigError):
    """Clip or view geometry does not fit the configured model."""


class DataError(EngageFormerError):
    pass


class BadMagicError(DataError):
    pass


class TruncatedPayloadError(DataError):
    pass


class HeaderMismatchError(DataError):
    pass


class PpmError(DataError):
    pass


class ManifestError(DataError):
    pass


class SplitError(DataError):
    pass


class CheckpointError(EngageFormerError):
    pass


class CheckpointMismatchError(CheckpointError):
    def __init__(self, name: str, message: str):
        super().__init__(f"{name}: {message}")
        self.name = name
