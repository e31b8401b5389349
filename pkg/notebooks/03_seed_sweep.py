# %% [markdown]
# # Seed sweep of the closed-loop experiment
# Runs the default experiment for several seeds and tallies how often the
# RankNet student matches or beats the MSE student.
# Usage: python notebooks/03_seed_sweep.py [n_seeds] [n_docs]

# %%
import sys
import time

import numpy as np

from rankdistill.pipeline import ExperimentSpec, run_distillation_experiment

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 3
n_docs = int(sys.argv[2]) if len(sys.argv) > 2 else 10_000

rows = []
for seed in range(n_seeds):
    t0 = time.perf_counter()
    res = run_distillation_experiment(ExperimentSpec(n_docs=n_docs).with_seed(seed))
    rows.append((seed, res.ndcg, res.kendall))
    print(f"seed {seed}: " + " ".join(f"{k} {v:.4f}" for k, v in res.ndcg.items())
          + f" | tau mse {res.kendall['mse']:.3f} ranknet {res.kendall['ranknet']:.3f} ({time.perf_counter() - t0:.0f}s)")

# %%
gaps = np.array([n["ranknet"] - n["mse"] for _, n, _ in rows])
print(f"ranknet >= mse in {(gaps >= 0).sum()}/{len(rows)} seeds; mean gap {gaps.mean():+.4f}, sd {gaps.std():.4f}")
