"""Exception types shared across the package."""


class ModasrError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ModasrError):
    """Bad topology, shape mismatch, or invalid configuration value."""


class DataError(ModasrError):
    """Invalid data fed to a model (out-of-range ids, malformed rows)."""


class TrainingError(ModasrError):
    """Training cannot proceed (non-finite gradients, empty usable data)."""


class UsageError(ModasrError):
    """API misuse: stale caches, empty eval sets, wrong unit for a model."""


class InfeasibleAlignmentError(ModasrError):
    """Label sequence cannot be aligned within the available frames."""


class OracleSizeError(ModasrError):
    """Brute-force oracle instance exceeds its enumeration guard."""


class DatasetParseError(ModasrError):
    """Malformed dataset or lexicon file; carries the offending line number."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no
