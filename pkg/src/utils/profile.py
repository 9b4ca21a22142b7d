from functools import wraps, partial
import cProfile
import pstats
from time import perf_counter
from tabulate import tabulate
from utils.custom_logger import log


def time_this(f):
    """
    Log the wall-clock time of each call at info level.
    """

    @wraps(f)
    def decorator(*args, **kwargs):
        start = perf_counter()
        result = f(*args, **kwargs)
        log.info(f"{f.__name__} took {perf_counter() - start:.3f} s")
        return result

    return decorator


def profile_this(f=None, *, output_path="results.prof", top=10):
    """
    Decorator for profiling a function with cProfile.

    Dumps the statistics to `output_path` (open them with Snakeviz) and logs a
    table of the `top` most expensive functions at debug level.
    """
    if f is None:
        return partial(profile_this, output_path=output_path, top=top)

    @wraps(f)
    def wrapper(*args, **kwargs):
        start = perf_counter()
        with cProfile.Profile() as pr:
            result = f(*args, **kwargs)
        elapsed = round(perf_counter() - start, 3)

        stats = pstats.Stats(pr)
        stats.sort_stats(pstats.SortKey.TIME)
        stats.dump_stats(filename=output_path)

        entries = stats.stats.items()  # type: ignore[attr-defined]
        rows = []
        for (filename, line, name), (_, calls, tottime, cumtime, _) in sorted(
            entries, key=lambda item: item[1][2], reverse=True
        )[:top]:
            label = f"{name} ({filename}:{line})"
            rows.append((label, calls, round(tottime, 4), round(cumtime, 4)))
        headers = ["Function", "Calls", "Total (s)", "Cumulative (s)"]
        log.debug("\n" + tabulate(rows, headers=headers, tablefmt="psql"))

        log.info(f"Run time for {f.__name__}: {elapsed} seconds")
        log.info(f"Inspect the profile with the command: snakeviz {output_path}")
        return result

    return wrapper
