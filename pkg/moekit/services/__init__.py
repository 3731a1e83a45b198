EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def exit_code(report) -> int:
    """
    Reports that carry a ``passed`` verdict fail with ``EXIT_FAILURE``.
    """
    return EXIT_FAILURE if getattr(report, "passed", True) is False else EXIT_OK
