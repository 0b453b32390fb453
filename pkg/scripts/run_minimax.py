"""Particle minimax solver from uniform and corner p0."""
from _common import run

if __name__ == "__main__":
    run(["minimax"], __doc__)
