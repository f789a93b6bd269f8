"""Reference methods: a simplified linear Invariant Causal Prediction and
the oracle-parents regression (CERM)."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .scm import EnvDataset, SettingData
from .training import RunReport, TrainConfig, train_anm


@dataclass
class IcpResult:
    """Outcome of the exhaustive invariant-subset search.

    Variable indices are 1-based throughout, matching the dataset schema.
    The intersection is the parent estimate; `no_invariant_subset` flags the
    degenerate all-rejected case instead of returning a spurious set.
    """

    accepted: list[tuple[int, ...]]
    intersection: tuple[int, ...]
    pvalues: dict[tuple[int, ...], float]
    alpha: float
    no_invariant_subset: bool
    skipped: list[tuple[int, ...]] = field(default_factory=list)


def _residual_invariance_pvalue(residuals: list[np.ndarray]) -> float:
    """Bonferroni-combined p-value over per-environment-pair mean (Welch t)
    and variance (F) tests of the residual distributions."""
    pvals = []
    for i, j in itertools.combinations(range(len(residuals)), 2):
        ri, rj = residuals[i], residuals[j]
        pvals.append(float(stats.ttest_ind(ri, rj, equal_var=False).pvalue))
        fi, fj = ri.shape[0] - 1, rj.shape[0] - 1
        f_stat = np.var(ri, ddof=1) / np.var(rj, ddof=1)
        cdf = stats.f.cdf(f_stat, fi, fj)
        pvals.append(float(2.0 * min(cdf, 1.0 - cdf)))
    return min(1.0, min(pvals) * len(pvals))


def icp_linear(envs: list[EnvDataset], target: int, alpha: float = 0.05) -> IcpResult:
    """Exhaustive linear ICP over all candidate subsets.

    For each subset, fit pooled least squares (with intercept) and accept
    the subset when the residual distribution looks identical across the
    seen environments; the parent estimate is the intersection of all
    accepted subsets.
    """
    n_vars = envs[0].x.shape[1]
    candidates = [i for i in range(n_vars) if i != target]
    if len(candidates) > 12:
        raise ValueError(f"too many candidates for exhaustive search: {len(candidates)}")
    x_pool = np.concatenate([ds.x for ds in envs], axis=0)
    y_pool = x_pool[:, target]
    bounds = np.cumsum([0] + [ds.n for ds in envs])

    accepted: list[tuple[int, ...]] = []
    pvalues: dict[tuple[int, ...], float] = {}
    skipped: list[tuple[int, ...]] = []
    for size in range(len(candidates) + 1):
        for subset in itertools.combinations(candidates, size):
            design = np.column_stack(
                [x_pool[:, list(subset)], np.ones(x_pool.shape[0])]
            )
            coef, _, rank, _ = np.linalg.lstsq(design, y_pool, rcond=None)
            if rank < design.shape[1]:
                skipped.append(tuple(s + 1 for s in subset))
                continue
            resid = y_pool - design @ coef
            per_env = [resid[bounds[k] : bounds[k + 1]] for k in range(len(envs))]
            p = _residual_invariance_pvalue(per_env)
            key = tuple(s + 1 for s in subset)
            pvalues[key] = p
            if p > alpha:
                accepted.append(key)

    if accepted:
        inter = set(accepted[0])
        for s in accepted[1:]:
            inter &= set(s)
        intersection = tuple(sorted(inter))
        no_subset = False
    else:
        intersection = ()
        no_subset = True
    return IcpResult(
        accepted=accepted,
        intersection=intersection,
        pvalues=pvalues,
        alpha=alpha,
        no_invariant_subset=no_subset,
        skipped=skipped,
    )


def icp_run(data: SettingData, alpha: float = 0.05, seed: int = 0) -> tuple[RunReport, IcpResult]:
    """ICP as a benchmark entry: detection plus a pooled linear predictor on
    the intersection set (intercept-only when the set is empty)."""
    import time

    t0 = time.perf_counter()
    setting = data.setting
    result = icp_linear(data.train, setting.target, alpha)
    cols = [v - 1 for v in result.intersection]

    x_pool = np.concatenate([ds.x for ds in data.train], axis=0)
    design = np.column_stack([x_pool[:, cols], np.ones(x_pool.shape[0])])
    coef, _, _, _ = np.linalg.lstsq(design, x_pool[:, setting.target], rcond=None)

    def mse(envs):
        x = np.concatenate([ds.x for ds in envs], axis=0)
        d = np.column_stack([x[:, cols], np.ones(x.shape[0])])
        return float(np.mean((x[:, setting.target] - d @ coef) ** 2))

    report = RunReport(
        model="icp",
        seed=seed,
        setting_id=setting.setting_id,
        target=setting.target + 1,
        mechanism=setting.mechanism,
        truth=[p + 1 for p in setting.parents],
        selected=list(result.intersection),
        metrics={
            "train_mse": mse(data.train),
            "test_mse": mse(data.test),
            "dg_mse": mse([data.dg]),
            "no_invariant_subset": float(result.no_invariant_subset),
        },
        wall_clock=time.perf_counter() - t0,
    )
    return report, result


def cerm_train(data: SettingData, cfg: TrainConfig | None = None) -> tuple[RunReport, object]:
    """Oracle-parents regression: the ANM loop restricted to the true parents
    with the invariance penalty off and pooled environment losses."""
    if cfg is None:
        cfg = TrainConfig(model="cerm")
    if cfg.model != "cerm":
        raise ValueError(f"cerm_train got model kind {cfg.model!r}")
    return train_anm(data, cfg)
