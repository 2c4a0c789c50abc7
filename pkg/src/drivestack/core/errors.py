class ContractViolation(Exception):
    """An internal interface contract was broken."""

    def __init__(self, message: str, *, module: str | None = None, tick: int | None = None):
        super().__init__(message)
        self.module = module
        self.tick = tick


class CodecError(ValueError):
    """Serialized data does not match the expected schema."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path
