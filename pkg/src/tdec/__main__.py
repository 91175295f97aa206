"""Console entry point.

TDEC_THREADS caps BLAS fan-out; it must be exported to the numeric
libraries before they load, hence the deferred import below.
"""

import os
import sys


def main() -> None:
    threads = os.environ.get("TDEC_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    from .cli import run
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
