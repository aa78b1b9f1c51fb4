"""Error type shared by every module.

Each failure mode carries a stable machine-readable code so the CLI can
emit one parseable error line and tests can match on behaviour instead of
message wording.
"""


class DuwError(RuntimeError):
    """Raised for any contract violation; ``code`` is stable across releases."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


def fail(code: str, message: str) -> "DuwError":
    return DuwError(code, message)
