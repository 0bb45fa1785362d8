import functools
import logging

from near.config import settings

logger = logging.getLogger(__name__)


def _brief(value):
    shape = getattr(value, "shape", None)
    if shape is not None:
        return f"<{type(value).__name__} shape={tuple(shape)}>"
    return repr(value)


class Debug:
    """settings.debug 가 켜져 있으면 서비스 진입점의 호출 인자를 DEBUG 로 남긴다"""

    def __init__(self, f):
        self.func = f
        functools.update_wrapper(self, f)

    def __get__(self, obj, objtype=None):
        """Support instance methods."""
        if obj is None:
            return self
        return functools.partial(self.__call__, obj)

    def __call__(self, *args, **kwargs):
        if settings.debug:
            shown = [_brief(a) for a in args]
            named = {k: _brief(v) for k, v in kwargs.items()}
            logger.debug(f"{self.func.__qualname__}() called w/ args: {shown}, kwargs: {named}")

        return self.func(*args, **kwargs)
