from __future__ import annotations


class TbadError(Exception):
    pass


class ConfigError(TbadError, ValueError):
    pass


class CaseNotFoundError(TbadError, FileNotFoundError):
    pass


class UnsupportedFormatError(TbadError, ValueError):
    pass


class AlignmentError(TbadError, ValueError):
    pass


class CorruptLabelError(TbadError, ValueError):
    pass


class InvalidIntensityError(TbadError, ValueError):
    pass


class KindMismatchError(TbadError, TypeError):
    pass


class EmptyForegroundError(TbadError, ValueError):
    pass


class PatchTooLargeError(TbadError, ValueError):
    pass


class InfeasibleSplitError(TbadError, ValueError):
    pass


class ContractError(TbadError, ValueError):
    """Caller broke a shape, length or channel contract."""


class ShapeError(ContractError):
    pass


class DegenerateTargetError(TbadError, ValueError):
    pass


class DivergedTrainingError(TbadError, RuntimeError):
    def __init__(self, message: str, last_good_checkpoint: str | None = None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


class IneligibleCaseError(TbadError, ValueError):
    """Hausdorff distance is undefined because one of the masks is empty."""


class PhantomSpecError(TbadError, ValueError):
    pass
