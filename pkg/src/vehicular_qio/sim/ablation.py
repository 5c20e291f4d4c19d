"""Variant x scenario x replication matrices and their summary statistics."""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from .engine import simulate
from .scenarios import VARIANTS, scenario

METRICS = ("mean_latency_ms", "pdr_pct", "reliability_pct", "att_min", "nci_pct")


def _value(report, metric):
    v = getattr(report, metric)
    return np.nan if v is None else float(v)


@dataclass
class AblationTable:
    """Reports indexed by ``(scenario, variant)``, one per replication.

    Replication ``i`` of every variant uses seed ``base_seed + i``, so the
    reports of two variants at the same scenario and index are paired.
    """

    scenarios: list
    variants: list
    replications: int
    reports: dict = field(default_factory=dict)

    @property
    def shape(self):
        return len(self.variants), len(self.scenarios)

    def values(self, scenario_name, variant, metric="mean_latency_ms"):
        return np.array([_value(r, metric) for r in self.reports[(scenario_name, variant)]])

    def mean(self, metric="mean_latency_ms"):
        """Per-cell mean, shape ``(n_variants, n_scenarios)``; NaN entries are skipped."""
        out = np.full(self.shape, np.nan)
        for i, v in enumerate(self.variants):
            for j, s in enumerate(self.scenarios):
                x = self.values(s, v, metric)
                x = x[np.isfinite(x)]
                if x.size:
                    out[i, j] = x.mean()
        return out

    def std(self, metric="mean_latency_ms"):
        """Per-cell sample standard deviation (ddof=1); NaN below two values."""
        out = np.full(self.shape, np.nan)
        for i, v in enumerate(self.variants):
            for j, s in enumerate(self.scenarios):
                x = self.values(s, v, metric)
                x = x[np.isfinite(x)]
                if x.size > 1:
                    out[i, j] = x.std(ddof=1)
        return out

    def pooled(self, variant, metric="mean_latency_ms"):
        """Values of ``variant`` over every scenario and replication, in a fixed order."""
        return np.concatenate([self.values(s, variant, metric) for s in self.scenarios])

    def sign_test(self, better, worse, metric="mean_latency_ms"):
        """One-sided sign test that ``worse`` exceeds ``better`` on paired runs.

        Ties and pairs with a missing value are dropped. Returns
        ``(n_worse_higher, n_pairs, p_value)``.
        """
        a = self.pooled(better, metric)
        b = self.pooled(worse, metric)
        ok = np.isfinite(a) & np.isfinite(b) & (a != b)
        n = int(ok.sum())
        k = int((b[ok] > a[ok]).sum())
        p = binomtest(k, n, 0.5, alternative="greater").pvalue if n else 1.0
        return k, n, float(p)

    def rows(self, metrics=METRICS):
        """One dict per cell with the mean and sample std of every metric."""
        means = {m: self.mean(m) for m in metrics}
        stds = {m: self.std(m) for m in metrics}
        for j, s in enumerate(self.scenarios):
            for i, v in enumerate(self.variants):
                row = {"scenario": s, "variant": v, "n": len(self.reports[(s, v)])}
                for m in metrics:
                    row[f"{m}_mean"] = means[m][i, j]
                    row[f"{m}_std"] = stds[m][i, j]
                yield row


def _job(cfg):
    return simulate(cfg)


def ablate(base, variants=VARIANTS, replications=1, scenarios=None, scale="desk", n_jobs=1):
    """Run every variant on every scenario ``replications`` times.

    Parameters
    ----------
    base : ScenarioConfig
        Used as is when ``scenarios`` is None; otherwise only its seed is
        kept and each scenario given by name starts from its canonical preset.
    variants : sequence of str
    replications : int
        Replication ``i`` runs with seed ``base.seed + i``.
    scenarios : sequence of str or ScenarioConfig, optional
    scale : {"desk", "paper"}
    n_jobs : int
        Worker processes. Results do not depend on it.

    Returns
    -------
    AblationTable
    """
    replications = int(replications)
    if replications < 1:
        raise ValueError("replications must be >= 1")
    variants = list(variants)
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ValueError(f"unknown variants {bad}; valid options: {', '.join(VARIANTS)}")
    if scenarios is None:
        configs = {base.name: base}
    else:
        configs = {}
        for s in scenarios:
            cfg = scenario(s, scale, seed=base.seed) if isinstance(s, str) else s
            configs[cfg.name] = cfg

    jobs = []
    for s, cfg in configs.items():
        for v in variants:
            for i in range(replications):
                jobs.append(((s, v), cfg.replace(variant=v, seed=int(cfg.seed) + i)))
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=int(n_jobs)) as pool:
            results = list(pool.map(_job, [c for _, c in jobs], chunksize=4))
    else:
        results = [_job(c) for _, c in jobs]

    table = AblationTable(list(configs), variants, replications)
    for (key, _), rep in zip(jobs, results):
        table.reports.setdefault(key, []).append(rep)
    return table
