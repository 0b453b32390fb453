"""Support and maxima probes for the uniform and corner p0 runs."""
from _common import run

if __name__ == "__main__":
    run(["fig2"], __doc__)
