"""Process-wide cap on worker threads for spatial-index queries."""

_threads = 1


def set_threads(n: int) -> None:
    global _threads
    if int(n) < 1:
        raise ValueError(f"thread count must be at least 1, got {n}")
    _threads = int(n)


def workers() -> int:
    return _threads
