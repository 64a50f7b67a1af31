"""Dev smoke check: engine vs brute oracle on random micro instances."""
import sys
import numpy as np

sys.path.insert(0, "tests")
from oracles import brute_beta, brute_score, brute_baseline, km_censoring_oracle

from addsubhaz.dataset import ClusteredDataset, build_grid
from addsubhaz.censoring import fit_censoring_km
from addsubhaz import fit, score


def random_ds(rng, p=1, bases=None, with_ctime=True):
    n_cl = rng.integers(3, 8)
    m = rng.integers(1, 5, size=n_cl)
    N = int(m.sum())
    cluster = np.repeat(np.arange(n_cl), m)
    T = rng.exponential(1.0, N) + 0.05
    C = rng.exponential(1.5, N) + 0.05
    eps = rng.integers(1, 3, N)
    Z = np.minimum(T, C)
    st = np.where(T <= C, eps, 0)
    X = rng.normal(0, 1, (N, p))
    if not np.any(st == 1):
        i = rng.integers(0, N)
        st[i] = 1
        C[i] = Z[i] + 0.5
    bases = bases or ("constant",) * p
    return ClusteredDataset(
        cluster=cluster.tolist(), time=Z, status=st, X=X, bases=bases,
        ctime=C if with_ctime else None,
    )


rng = np.random.default_rng(42)
worst = {"beta_ipcw": 0, "beta_cc": 0, "score": 0, "base": 0, "km": 0}
for trial in range(25):
    p = int(rng.integers(1, 3))
    tv = trial % 2 == 1
    bases = tuple(rng.choice(["constant", "exp_decay"]) for _ in range(p)) if tv else None
    ds = random_ds(rng, p=p, bases=bases)
    Q = 4 if tv else 1
    # KM check
    cm = fit_censoring_km(ds)
    Go = km_censoring_oracle(ds.time, ds.status)
    for t in np.linspace(0, ds.tau, 13):
        worst["km"] = max(worst["km"], abs(cm.survival(t) - Go(t)))

    for mode in ("ipcw", "cc"):
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = fit(ds, cause=1, mode=mode, Q=Q)
        bo = brute_beta(ds, 1, ds.tau, mode=mode, Q=Q)
        err = np.max(np.abs(res.beta - bo))
        worst[f"beta_{mode}"] = max(worst[f"beta_{mode}"], err)
        # score at beta-hat should be ~0, and brute-score at package beta too
        u_pkg = res.score_at(res.beta, ds.tau)
        u_brute = brute_score(ds, 1, res.beta, ds.tau, mode=mode, Q=Q)
        worst["score"] = max(worst["score"], float(np.max(np.abs(u_pkg))), float(np.max(np.abs(u_brute))))
        # baseline at a few times
        for t in [0.3 * ds.tau, 0.7 * ds.tau, ds.tau]:
            lb = res.baseline_at(t)
            lo = brute_baseline(ds, 1, res.beta, t, mode=mode, Q=Q)
            worst["base"] = max(worst["base"], abs(lb - lo))

    if trial % 5 == 0:
        print(f"trial {trial}: ok so far {worst}")

print("FINAL", worst)
