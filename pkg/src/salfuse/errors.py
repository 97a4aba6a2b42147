"""Error types shared across the package.

ValidationError covers malformed configuration, files, and mismatched inputs
(CLI exit code 2).  NumericsError covers non-finite values detected at
runtime (CLI exit code 3).
"""


class SalfuseError(Exception):
    pass


class ValidationError(SalfuseError):
    pass


class NumericsError(SalfuseError):
    pass
