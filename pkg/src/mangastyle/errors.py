"""Exception hierarchy shared by every mangastyle module.

Each class carries an ``exit_code`` so the CLI can map failures to distinct
process exit statuses without a lookup table.
"""


class MangaStyleError(Exception):
    exit_code = 1


class ConfigError(MangaStyleError, ValueError):
    exit_code = 2


class MissingFile(MangaStyleError, FileNotFoundError):
    exit_code = 3


class MissingCheckpoint(MissingFile):
    exit_code = 3


class DimensionMismatch(MangaStyleError, ValueError):
    exit_code = 4


class CropTooLarge(MangaStyleError, ValueError):
    exit_code = 4


class EmptyDataset(MangaStyleError, ValueError):
    exit_code = 4


class CorruptCheckpoint(MangaStyleError):
    exit_code = 5


class RoleMismatch(MangaStyleError, ValueError):
    exit_code = 5


class NonFiniteLoss(MangaStyleError, ArithmeticError):
    exit_code = 6
