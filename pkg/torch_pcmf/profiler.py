import datetime as dt
import sys
import time
from types import TracebackType

if sys.version_info >= (3, 11):
    from typing import Self
else:
    from typing_extensions import Self

from torch_pcmf.flags import profiling_enabled


class profile:
    """Prints the wall time of the block when TORCH_PCMF_PROFILE is set."""

    def __init__(self, label: str):
        self.label = label
        self.start: int | None = None

    def __enter__(self) -> Self:
        if profiling_enabled():
            self.start = time.time_ns()
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        traceback: TracebackType | None,
    ) -> None:
        if self.start is None:
            return
        duration = dt.timedelta(microseconds=(time.time_ns() - self.start) / 1000)
        self.start = None
        print(f"{self.label} in {duration}")
