"""Exception types shared across the toolkit."""


class ThermoscanError(Exception):
    """Base class for all toolkit errors."""


class ManifestError(ThermoscanError):
    """A dataset manifest or image file is missing or malformed."""


class MissingPlantStats(ThermoscanError):
    """No normalization statistics are available for the requested plant."""


class DegenerateEmbedding(ThermoscanError):
    """A zero-norm vector cannot be placed on the unit hypersphere."""


class DegenerateBatch(ThermoscanError):
    """A training batch lacks normal or anomalous samples."""


class UndefinedMetric(ThermoscanError):
    """A metric is undefined for the given samples (e.g. single-class input)."""


class StoreFormatError(ThermoscanError):
    """An embedding store or checkpoint file failed to parse."""
