"""p0 diversity, fixed K and progressive-K ablations."""
from _common import run

if __name__ == "__main__":
    run(["p0_ablation", "k_ablation", "progressive_vs_fixed"], __doc__)
