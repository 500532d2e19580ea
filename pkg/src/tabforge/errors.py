"""Exception hierarchy shared by all tabforge modules."""


class TabForgeError(Exception):
    """Base class for every error raised by tabforge."""


class ParseError(TabForgeError):
    pass


class SchemaError(TabForgeError):
    pass


class PreprocessError(TabForgeError):
    pass


class DecodeError(TabForgeError):
    pass


class SplitError(TabForgeError):
    pass


class ShapeError(TabForgeError, ValueError):
    pass


class ConfigError(TabForgeError, ValueError):
    pass


class FoldError(TabForgeError):
    pass


class FrozenWeightsError(TabForgeError):
    """Weights that must stay frozen were modified."""


class CacheError(TabForgeError):
    pass


class TrainingError(TabForgeError):
    pass


class BindingError(TabForgeError):
    """A component bound to one schema was used with another."""


class LabelError(TabForgeError, ValueError):
    pass


class FitError(TabForgeError):
    pass


class PretrainError(TabForgeError):
    pass


class ArgumentError(TabForgeError, ValueError):
    pass


class BundleVersionError(TabForgeError):
    pass


class CorruptionError(TabForgeError):
    pass
