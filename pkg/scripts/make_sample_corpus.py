"""Regenerate the bundled sample corpus (20 synthetic 10x10 triangles, 4 lines)."""

from pathlib import Path

import numpy as np

from lossflow.simulate import sample_corpus
from lossflow.triangle import write_triangles

SEED = 20240517

if __name__ == "__main__":
    out = Path(__file__).resolve().parents[1] / "src" / "lossflow" / "data" / "sample_corpus.csv"
    write_triangles(out, sample_corpus(np.random.default_rng(SEED), per_line=5, n=10))
    print(out)
