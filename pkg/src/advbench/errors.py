"""Exception hierarchy shared across the package."""


class AdvbenchError(Exception):
    """Base class for every error raised by advbench."""


class ShapeError(AdvbenchError, ValueError):
    pass


class DomainError(AdvbenchError, ValueError):
    pass


class GradientError(AdvbenchError, RuntimeError):
    pass


class FormatError(AdvbenchError, ValueError):
    """Malformed input file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class CheckpointError(AdvbenchError, ValueError):
    pass


class EmptySelectionError(AdvbenchError, ValueError):
    pass


class DivergenceError(AdvbenchError, RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch, self.batch, self.loss = epoch, batch, loss
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}, batch {batch}")


class ConfigError(AdvbenchError, ValueError):
    pass
