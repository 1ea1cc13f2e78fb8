"""
Error taxonomy

Every failure the pipeline can report maps to one MosError subclass with a
stable kind name and a process exit code. The CLI prints a single
machine-parsable line for these and exits with the code.

Exit codes:
    2  ConfigError
    3  MosIOError
    4  MalformedFile
    5  NonFiniteValue
    6  IndexOutOfRange
    7  ShapeMismatch / LengthMismatch / OddDimension
    8  EmptyStack / EmptyBatch / EmptyDataset
    9  NonFiniteGradient
    10 DegenerateTrajectory / NoPositives
    11 DegenerateSpec
    12 NotOrthonormal
"""


class MosError(Exception):
    """Base class for all pipeline errors"""
    exit_code: int = 1

    @property
    def kind(self) -> str:
        return type(self).__name__

    def one_line(self) -> str:
        """Machine-parsable single-line rendering used by the CLI"""
        message = " ".join(str(self).split())
        return f"[FAILED] kind={self.kind} exit={self.exit_code} message={message}"


class ConfigError(MosError):
    exit_code = 2


class MosIOError(MosError, OSError):
    exit_code = 3


class MalformedFile(MosError, ValueError):
    exit_code = 4


class NonFiniteValue(MosError, ValueError):
    exit_code = 5


class IndexOutOfRange(MosError, IndexError):
    exit_code = 6


class ShapeMismatch(MosError, ValueError):
    exit_code = 7


class LengthMismatch(ShapeMismatch):
    pass


class OddDimension(ShapeMismatch):
    pass


class EmptyStack(MosError, ValueError):
    exit_code = 8


class EmptyBatch(MosError, ValueError):
    exit_code = 8


class EmptyDataset(MosError, ValueError):
    exit_code = 8


class NonFiniteGradient(MosError, ArithmeticError):
    exit_code = 9


class DegenerateTrajectory(MosError, ValueError):
    exit_code = 10


class NoPositives(MosError, ValueError):
    exit_code = 10


class DegenerateSpec(MosError, ValueError):
    exit_code = 11


class NotOrthonormal(MosError, ValueError):
    """Rotation block fails R^T R = I or det R = +1"""
    exit_code = 12


EXIT_CODES: dict[str, int] = {
    cls.__name__: cls.exit_code
    for cls in (
        ConfigError, MosIOError, MalformedFile, NonFiniteValue, IndexOutOfRange,
        ShapeMismatch, LengthMismatch, OddDimension, EmptyStack, EmptyBatch,
        EmptyDataset, NonFiniteGradient, DegenerateTrajectory, NoPositives,
        DegenerateSpec, NotOrthonormal,
    )
}
