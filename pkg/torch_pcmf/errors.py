class PCMFError(Exception):
    pass


class InputError(PCMFError, ValueError):
    """Malformed data or configuration. The CLI exits with code 2."""


class NumericalError(PCMFError, ArithmeticError):
    """Non-finite or divergent quantities during a fit. The CLI exits with code 3."""


class PCMFWarning(UserWarning):
    pass
