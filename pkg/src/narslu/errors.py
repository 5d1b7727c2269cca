"""Exception types shared across the package."""


class Error(Exception):
    """Base class for all narslu errors."""


class ConfigError(Error):
    """Invalid configuration key, value, or combination."""


# --- corpus ---------------------------------------------------------------


class CorpusError(Error):
    pass


class LengthMismatchError(CorpusError):
    """Parallel files or aligned corpora disagree in length."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class MalformedTagError(CorpusError):
    """A slot tag is neither "O" nor "B-<type>" / "I-<type>"."""

    def __init__(self, tag, line=None):
        msg = f"malformed slot tag {tag!r}"
        if line is not None:
            msg += f" on line {line}"
        super().__init__(msg)
        self.tag = tag
        self.line = line


class EmptyCorpusError(CorpusError):
    pass


class SequenceTooLongError(CorpusError):
    def __init__(self, index, length, max_len):
        super().__init__(
            f"example {index} has {length} tokens, exceeding max_len={max_len}"
        )
        self.index = index


class UnknownLabelError(CorpusError):
    """A gold slot tag or intent is absent from the vocabulary."""


class VocabMismatchError(CorpusError):
    """Checkpoint was trained with a different vocabulary."""


# --- numerics -------------------------------------------------------------


class NumericsError(Error):
    pass


class AllMaskedError(NumericsError):
    """A softmax row has no unmasked element."""


class MissingGradError(NumericsError):
    def __init__(self, name):
        super().__init__(f"parameter {name!r} has no gradient")
        self.name = name


class GradMismatchError(NumericsError):
    def __init__(self, name, index, analytic, numeric, rel_err):
        super().__init__(
            f"gradient mismatch for {name!r}[{index}]: analytic={analytic:.6g} "
            f"numeric={numeric:.6g} rel_err={rel_err:.3g}"
        )
        self.name = name
        self.index = index
        self.analytic = analytic
        self.numeric = numeric


class NonFiniteTensorError(NumericsError):
    """A forward value is NaN or Inf (debug-mode check)."""


# --- model / training -----------------------------------------------------


class CalledAtInferenceError(Error):
    """The auxiliary slot-label decoder was invoked outside training."""


class NonFiniteLossError(Error):
    def __init__(self, epoch, step, detail=""):
        super().__init__(
            f"non-finite loss at epoch {epoch}, step {step}" + (f": {detail}" if detail else "")
        )
        self.epoch = epoch
        self.step = step
