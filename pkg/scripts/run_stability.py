"""Logistic AT next to the likelihood-style gradient, watching the gap."""
from _common import run

if __name__ == "__main__":
    run(["stability"], __doc__)
