"""Clean and worst-case OOD AUROC of an AT-trained model."""
from _common import run

if __name__ == "__main__":
    run(["ood"], __doc__)
