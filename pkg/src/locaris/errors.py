"""Exception hierarchy for the locaris pipeline.

Three broad families map onto CLI exit codes: configuration problems (2),
data problems (3), and numeric failures (4). Everything raised on purpose by
this package derives from LocarisError so callers can catch one type.
"""


class LocarisError(Exception):
    """Base class for all locaris errors."""


class ConfigError(LocarisError):
    """Invalid experiment/CLI configuration (exit code 2)."""


class DataError(LocarisError):
    """Invalid or unusable input data (exit code 3)."""


class SchemaError(DataError):
    """CSV/JSON input does not match the expected schema."""


class RangeError(DataError):
    """A field value lies outside its documented range."""


class EmptyDataset(DataError):
    """A dataset or split that must be non-empty is empty."""


class AllReadingsDropped(DataError):
    """An ablation removed every reading from a sample."""


class TooFewAPs(DataError):
    """Drop schedule asked for more simultaneous drops than APs exist."""


class UnknownAP(DataError):
    """A reading references an AP id outside the expected set."""


class UnknownToken(DataError):
    """Tokenizer hit text it cannot match; carries the character offset."""

    def __init__(self, text: str, offset: int):
        self.offset = offset
        snippet = text[offset : offset + 12]
        super().__init__(f"cannot tokenize at offset {offset}: {snippet!r}")


class EmptyBatch(DataError):
    """A batch operation received zero sequences."""


class NumericError(LocarisError):
    """Numeric contract violation (exit code 4)."""


class ShapeMismatch(NumericError):
    """Operands have incompatible shapes."""


class LengthMismatch(ShapeMismatch):
    """Paired lists/arrays have different lengths."""


class EmptyMaskRow(NumericError):
    """An attention-mask row sums to zero, so there is nothing to pool."""


class NotScalar(NumericError):
    """grad() needs a scalar loss tensor."""


class NoTape(NumericError):
    """grad() called on a tensor not produced under an active tape."""


class NonFinite(NumericError):
    """A NaN or Inf appeared where the contract demands finite values."""


class NonFiniteLoss(NonFinite):
    """Training loss became NaN/Inf; names the offending step."""


class SequenceTooLong(NumericError):
    """Token sequence exceeds the model's maximum context length."""


class AlreadyAdapted(LocarisError):
    """attach_lora() called on a model that already has adapters."""


class NotAdapted(LocarisError):
    """LoRA-mode training requested on a model without adapters."""


class BadTarget(ConfigError):
    """Cross-environment target index invalid or not distinct from sources."""


class UnknownPreset(ConfigError):
    """Simulator preset name not recognized."""


class EmptyErrors(DataError):
    """summarize() needs at least one error value."""


class UnsupportedBits(ConfigError):
    """Quantization width other than 8 or 4 requested."""


class BadFraction(ConfigError):
    """Few-shot fraction outside (0, 1]."""


class BadK(ConfigError):
    """KNN neighbour count must be >= 1 and <= len(train)."""


class EmptyTrain(DataError):
    """A baseline was fit on an empty training set."""
