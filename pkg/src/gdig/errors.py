"""Exception hierarchy. Each class carries a short code used by the CLI prefix."""


class GdigError(Exception):
    code = "E_GDIG"


class ShapeError(GdigError, ValueError):
    code = "E_SHAPE"


class SingularityError(GdigError, ArithmeticError):
    code = "E_SINGULAR"


class InputError(GdigError, ValueError):
    code = "E_INPUT"


class DegenerateInputError(InputError):
    code = "E_DEGENERATE"


class DivergenceError(GdigError, ArithmeticError):
    code = "E_DIVERGED"

    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


class SizeError(GdigError, ValueError):
    code = "E_SIZE"


class PreconditionError(GdigError, ValueError):
    code = "E_PRECONDITION"


class FormatError(GdigError, ValueError):
    code = "E_FORMAT"


class CacheError(GdigError):
    code = "E_CACHE"


class StageError(GdigError):
    """Wraps a failure inside a pipeline stage, naming the stage."""

    code = "E_STAGE"

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.code = getattr(cause, "code", "E_STAGE")
