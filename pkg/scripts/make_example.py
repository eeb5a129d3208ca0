"""Regenerate the bundled 100 x 20 example dataset (true ATE = 1)."""

from pathlib import Path

import numpy as np

from dipw.data import Dataset, logistic, write_csv
from dipw.rng import stream

n, p = 100, 20
rng = stream(2024, "example")
idx = np.arange(p)
L = np.linalg.cholesky(0.5 ** np.abs(idx[:, None] - idx[None, :]))
X = rng.standard_normal((n, p)) @ L.T
gamma = np.zeros(p)
gamma[[0, 3, 7]] = [0.8, -0.5, 0.4]
beta = np.zeros(p)
beta[:6] = [1.0, 0.5, -0.5, 0.8, 0.3, -0.2]
T = (rng.uniform(size=n) < logistic(X @ gamma)).astype(float)
Y = X @ beta + 1.0 * T + rng.standard_normal(n)
names = ["(intercept)"] + [f"x{j + 1}" for j in range(p)]
out = Path(__file__).resolve().parents[1] / "src" / "dipw" / "examples" / "example_100x20.csv"
write_csv(Dataset(np.column_stack([np.ones(n), X]), Y, T, names), out)
print(out)
