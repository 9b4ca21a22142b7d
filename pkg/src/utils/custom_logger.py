import logging

# Set up default logger for project
formatter = logging.Formatter("[%(levelname)s]\t %(message)s")
log = logging.getLogger("meles")
ch = logging.StreamHandler()
ch.setFormatter(formatter)
log.addHandler(ch)
log.setLevel(logging.INFO)


def set_verbosity(verbose: bool = False, quiet: bool = False):
    """Quiet wins over verbose: ERROR, DEBUG or the default INFO."""
    if quiet:
        log.setLevel(logging.ERROR)
    elif verbose:
        log.setLevel(logging.DEBUG)
    else:
        log.setLevel(logging.INFO)
