"""Exception hierarchy shared by every module of the package."""


class Nodule3dError(Exception):
    """Base class for all errors raised by nodule3d."""


class ShapeError(Nodule3dError, ValueError):
    """Operand shapes are inconsistent with each other."""


class GeometryError(Nodule3dError, ValueError):
    """A convolution/pooling geometry yields an empty output."""


class ConfigError(Nodule3dError, ValueError):
    """A configuration value is invalid."""


class DegenerateInputError(Nodule3dError, ValueError):
    """Input is well-formed but leaves nothing to compute (empty reduction, zero scans)."""


class GenerationError(Nodule3dError, RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class CorruptionError(Nodule3dError, RuntimeError):
    """Internal bookkeeping (e.g. an argmax map) is inconsistent."""


class DataError(Nodule3dError, IOError):
    """A data file or directory is missing or malformed."""


class NonFiniteLossError(Nodule3dError, FloatingPointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, epoch, batch, loss, loss_cls, loss_loc):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        self.loss_cls = loss_cls
        self.loss_loc = loss_loc
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}: "
            f"L={loss!r} L_cls={loss_cls!r} L_loc={loss_loc!r}"
        )
