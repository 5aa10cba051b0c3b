"""Exception hierarchy.

Everything raised on purpose derives from :class:`VolseqError`, so callers
(the CLI in particular) can tell contract violations apart from bugs.
"""


class VolseqError(Exception):
    """Base class for all library errors."""


class ShapeError(VolseqError, ValueError):
    """Operand extents are incompatible with the operation."""


class LabelError(VolseqError, ValueError):
    """A class label is outside ``[0, K)``."""


class ContractError(VolseqError, ValueError):
    """A backward pass received a cache or upstream gradient it cannot use."""


class InputError(VolseqError, ValueError):
    """Input data violates a precondition (e.g. an empty sequence)."""


class SizeError(VolseqError, ValueError):
    pass


class FormatError(VolseqError, ValueError):
    """A file is not in the expected format (bad magic, bad header)."""


class UnsupportedError(VolseqError, ValueError):
    """A valid file uses a feature this library does not read."""


class LengthError(VolseqError, ValueError):
    """A file is shorter than its header promises."""


class WriteError(VolseqError, OSError):
    pass


class TransformError(VolseqError, ValueError):
    """An affine transform is singular."""


class CapacityError(VolseqError, ValueError):
    """Augmentation cannot reach the requested per-class count."""


class DegenerateClassError(VolseqError, ValueError):
    """One-vs-rest analysis needs both positive and negative samples."""


class IntegrityError(VolseqError, ValueError):
    """Checkpoint checksum does not match its contents."""


class VersionError(VolseqError, ValueError):
    pass


class SchemaError(VolseqError, ValueError):
    """Checkpoint or manifest is missing a required entry."""


class DivergenceError(VolseqError, RuntimeError):
    """Training produced a non-finite loss."""


class GradientCheckError(VolseqError, AssertionError):
    """Analytic and numerical gradients disagree beyond tolerance."""


class StratificationWarning(UserWarning):
    """A class has too few patients to be stratified."""
