"""Exception types shared across the package."""


class MedboxError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(MedboxError):
    """Operands with incompatible shapes; message names both shapes."""


class NonFiniteError(MedboxError):
    """An operation produced NaN or Inf values."""


class MissingContext(MedboxError):
    """Backward called without a saved forward context."""


class ConfigError(MedboxError):
    """Invalid model or training configuration."""


class ModelFormatError(MedboxError):
    """Base for model-file parsing failures."""


class BadMagic(ModelFormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatch(ModelFormatError):
    """Model file format version is not supported."""


class TruncatedTensor(ModelFormatError):
    """Tensor data section ends before the directory says it should."""


class ManifestError(MedboxError):
    """Dataset manifest is missing, malformed, or inconsistent."""


class CatalogError(MedboxError):
    """Medicine catalog is malformed or inconsistent with the model."""
