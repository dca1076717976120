"""Strict/lenient switch for domain violations.

Library calls raise :class:`DomainError` by default.  Path simulators run
inside :func:`lenient` so that a violation on one path turns that path's
values into NaN (and the path gets flagged) instead of aborting every path.
"""

from __future__ import annotations

import contextlib
from contextvars import ContextVar

import numpy as np

from .errors import DomainError

_LENIENT: ContextVar[bool] = ContextVar("jetsde_lenient", default=False)


@contextlib.contextmanager
def lenient():
    token = _LENIENT.set(True)
    try:
        with np.errstate(all="ignore"):
            yield
    finally:
        _LENIENT.reset(token)


def is_lenient() -> bool:
    return _LENIENT.get()


def require(ok, message: str, values) -> None:
    """Raise DomainError unless every entry of ``ok`` is true (no-op when lenient)."""
    if _LENIENT.get():
        return
    ok = np.asarray(ok)
    if ok.all():
        return
    bad = np.asarray(values)
    if bad.ndim:
        bad = bad[~np.broadcast_to(ok, bad.shape)].flat[0]
    raise DomainError(f"{message}: {float(bad)!r}", value=float(bad))
