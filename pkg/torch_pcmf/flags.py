import os

POSITIVE_VALUES = ("1", "true", "yes")


def _flag(name: str, default: str = "0") -> bool:
    return os.environ.get(name, default).lower() in POSITIVE_VALUES


def profiling_enabled() -> bool:
    """
    Check if profiling is enabled by looking for the environment variable.
    """
    return _flag("TORCH_PCMF_PROFILE")


def verbose_enabled() -> bool:
    """
    Check if verbose mode is enabled by looking for the environment variable.
    """
    return _flag("TORCH_PCMF_VERBOSE")


def beartype_enabled() -> bool:
    return _flag("TORCH_PCMF_BEARTYPE", default="1")


def slow_tests_enabled() -> bool:
    return _flag("TORCH_PCMF_RUN_SLOW")
