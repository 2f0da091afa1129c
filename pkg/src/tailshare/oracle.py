"""Monte-Carlo ground truth for the proxy: resampled pipeline runs scored
by the exact task-wise KL risk, compared against proxy totals by rank.

A study fixes one mixture generator, one evaluation sample of feature
points (drawn once, so grid cells differ only through training
randomness), and the head/tail split implied by the generator's priors.
Each resample draws a fresh i.i.d. training set and runs the pipeline
stages at every requested grid point; Stage 1 is shared across the whole
grid and each Stage-2 run is shared across shared-depth candidates, which
keeps full-grid studies tractable.

Seed layout: the study seed drives the evaluation draws; resample m uses
data seed = seed + 1000 + m and shifts the stage shuffle seeds by m while
keeping the init seed fixed, so the measured randomness is the training
data (plus batch order), matching an expectation over training sets.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
import json
from pathlib import Path

import numpy as np
from scipy import stats as _scipy_stats

from .errors import ConfigError, TrainingDivergenceError
from .datagen import MixtureGenerator, sample_iid, split_classes
from .infotheory import taskwise_risk
from .pipeline import (
    RunConfig,
    assemble,
    build_task_data,
    evaluate,
    refine_decoders,
    select_structure,
    stage1,
    stage2,
)

_RESAMPLE_SEED_OFFSET = 1000


def spearman(x, y) -> float | None:
    """Spearman rank correlation with average ranks on ties.

    Returns None (not 0) when either input is constant or too short for a
    correlation to be defined.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size:
        raise ConfigError("rank correlation needs equally long vectors")
    if x.size < 2 or np.unique(x).size < 2 or np.unique(y).size < 2:
        return None
    return float(_scipy_stats.spearmanr(x, y).statistic)


def _per_resample_config(run_cfg: RunConfig, m: int) -> RunConfig:
    refine_opt = run_cfg.refine_opt
    if refine_opt is not None:
        refine_opt = replace(refine_opt, seed=refine_opt.seed + m)
    return replace(
        run_cfg,
        stage1_opt=replace(run_cfg.stage1_opt, seed=run_cfg.stage1_opt.seed + m),
        stage2_opt=replace(run_cfg.stage2_opt, seed=run_cfg.stage2_opt.seed + m),
        refine_opt=refine_opt,
    )


def _run_resample(args) -> tuple:
    """One resample: fresh data, shared Stage 1, per-w Stage 2, per-c assembly.

    Returns (m, risks[nc, nw], acc[nc, nw, 3]); failed cells are NaN.
    With refine=True each assembled model gets the decoder-only fine-tune
    before being measured.
    """
    (gen, run_cfg, split, priors, eval_points, bal_features, bal_labels,
     c_values, w_values, n_train, seed, m, restrict, refine) = args
    nc, nw = len(c_values), len(w_values)
    risks = np.full((nc, nw), np.nan)
    accs = np.full((nc, nw, 3), np.nan)
    dataset = sample_iid(gen, n_train, seed + _RESAMPLE_SEED_OFFSET + m)
    td = build_task_data(dataset, split, priors)
    cfg_m = _per_resample_config(run_cfg, m)
    try:
        s1 = stage1(cfg_m, td)
    except TrainingDivergenceError:
        return m, risks, accs
    for wi, w in enumerate(w_values):
        try:
            s2 = stage2(cfg_m, td, w, s1)
        except TrainingDivergenceError:
            continue
        for ci, c in enumerate(c_values):
            model = assemble(run_cfg.spec, c, s2.params, s1, split, priors)
            if refine:
                try:
                    model = refine_decoders(model, td, cfg_m.refine_opt,
                                            cfg_m.tau, cfg_m.logit_adjust)
                except TrainingDivergenceError:
                    continue
            risks[ci, wi] = taskwise_risk(gen, split, model.branch_logits, eval_points, restrict)
            if bal_features is not None:
                rep = evaluate(model, bal_features, bal_labels)
                accs[ci, wi] = (rep.overall_accuracy, rep.head_accuracy, rep.tail_accuracy)
    return m, risks, accs


def _collect_resamples(
    gen, run_cfg, split, priors, eval_points, bal_features, bal_labels,
    c_values, w_values, m_resamples, n_train, seed, restrict, jobs,
    refine: bool = False,
) -> tuple:
    tasks = [
        (gen, run_cfg, split, priors, eval_points, bal_features, bal_labels,
         c_values, w_values, n_train, seed, m, restrict, refine)
        for m in range(m_resamples)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_resample, tasks))
    else:
        results = [_run_resample(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    risks = np.stack([r[1] for r in results])     # (M, nc, nw)
    accs = np.stack([r[2] for r in results])      # (M, nc, nw, 3)
    return risks, accs


def _mean_stderr(values: np.ndarray, axis: int = 0) -> tuple:
    ok = np.isfinite(values)
    n_ok = ok.sum(axis=axis)
    with np.errstate(invalid="ignore"):
        mean = np.where(n_ok > 0, np.nanmean(np.where(ok, values, np.nan), axis=axis), np.nan)
        std = np.where(n_ok > 1, np.nanstd(np.where(ok, values, np.nan), axis=axis, ddof=1), np.nan)
        stderr = np.where(n_ok > 1, std / np.sqrt(np.maximum(n_ok, 1)), np.nan)
    return mean, stderr, n_ok


@dataclass
class CellStats:
    """MC risk summary at one grid point, with per-resample values kept."""

    mean: float
    stderr: float
    n_ok: int
    m_resamples: int
    risks: np.ndarray

    @property
    def valid(self) -> bool:
        return self.n_ok >= 0.8 * self.m_resamples


def mc_gen_error(
    gen: MixtureGenerator,
    run_cfg: RunConfig,
    c: int,
    w_a: float,
    m_resamples: int,
    n_train: int,
    seed: int = 0,
    n_eval: int = 2000,
    restrict: bool = True,
    jobs: int = 1,
) -> CellStats:
    """Mean and standard error of the task-wise KL risk at one (c, w_a)."""
    if m_resamples < 2:
        raise ConfigError("need at least 2 resamples")
    rng = np.random.default_rng(seed)
    eval_points = gen.sample_features(n_eval, rng)
    split = split_classes(gen.priors)
    risks, _ = _collect_resamples(
        gen, run_cfg, split, gen.priors, eval_points, None, None,
        (c,), (w_a,), m_resamples, n_train, seed, restrict, jobs,
    )
    flat = risks[:, 0, 0]
    mean, stderr, n_ok = _mean_stderr(flat)
    return CellStats(float(mean), float(stderr), int(n_ok), m_resamples, flat)


@dataclass
class OracleReport:
    """Full-grid MC risks next to proxy totals, plus their rank agreement."""

    c_values: tuple
    w_values: tuple
    risk_mean: np.ndarray
    risk_stderr: np.ndarray
    n_ok: np.ndarray
    m_resamples: int
    proxy_total: np.ndarray
    spearman_rho: float | None
    oracle_best: tuple | None
    proxy_best: tuple
    n_train: int
    n_eval: int
    seed: int

    @property
    def valid(self) -> np.ndarray:
        return self.n_ok >= 0.8 * self.m_resamples

    def to_json(self) -> str:
        payload = {
            "format": "tailshare-oracle-report-v1",
            "c_values": list(self.c_values),
            "w_values": list(self.w_values),
            "risk_mean": self.risk_mean.tolist(),
            "risk_stderr": self.risk_stderr.tolist(),
            "n_ok": self.n_ok.tolist(),
            "m_resamples": self.m_resamples,
            "proxy_total": self.proxy_total.tolist(),
            "spearman_rho": self.spearman_rho,
            "oracle_best": list(self.oracle_best) if self.oracle_best is not None else None,
            "proxy_best": list(self.proxy_best),
            "n_train": self.n_train,
            "n_eval": self.n_eval,
            "seed": self.seed,
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "OracleReport":
        d = json.loads(text)
        return cls(
            c_values=tuple(d["c_values"]),
            w_values=tuple(d["w_values"]),
            risk_mean=np.asarray(d["risk_mean"], dtype=np.float64),
            risk_stderr=np.asarray(d["risk_stderr"], dtype=np.float64),
            n_ok=np.asarray(d["n_ok"], dtype=np.int64),
            m_resamples=d["m_resamples"],
            proxy_total=np.asarray(d["proxy_total"], dtype=np.float64),
            spearman_rho=d["spearman_rho"],
            oracle_best=tuple(d["oracle_best"]) if d["oracle_best"] is not None else None,
            proxy_best=tuple(d["proxy_best"]),
            n_train=d["n_train"],
            n_eval=d["n_eval"],
            seed=d["seed"],
        )

    def to_csv(self, path) -> None:
        path = Path(path)
        valid = self.valid
        with path.open("w") as fh:
            fh.write("C,w_A,risk_mean,risk_stderr,proxy_total,n_ok,valid\n")
            for ci, c in enumerate(self.c_values):
                for wi, w in enumerate(self.w_values):
                    fh.write(
                        f"{c},{w!r},{self.risk_mean[ci, wi]!r},{self.risk_stderr[ci, wi]!r},"
                        f"{self.proxy_total[ci, wi]!r},{int(self.n_ok[ci, wi])},"
                        f"{int(valid[ci, wi])}\n"
                    )


def grid_compare(
    gen: MixtureGenerator,
    run_cfg: RunConfig,
    c_values,
    w_values,
    m_resamples: int,
    n_train: int,
    seed: int = 0,
    n_eval: int = 2000,
    restrict: bool = True,
    jobs: int = 1,
) -> OracleReport:
    """Fill the oracle grid by resampling, recompute the proxy grid from one
    representative Stage-1 run, and report Spearman rank agreement.

    Cells with under 80% successful resamples are excluded from the
    correlation and from the oracle argmin.
    """
    c_values = tuple(int(c) for c in c_values)
    w_values = tuple(float(w) for w in w_values)
    if not c_values or not w_values:
        raise ConfigError("candidate grids must be nonempty")
    rng = np.random.default_rng(seed)
    eval_points = gen.sample_features(n_eval, rng)
    split = split_classes(gen.priors)
    risks, _ = _collect_resamples(
        gen, run_cfg, split, gen.priors, eval_points, None, None,
        c_values, w_values, m_resamples, n_train, seed, restrict, jobs,
    )
    risk_mean, risk_stderr, n_ok = _mean_stderr(risks)

    # Proxy grid from the first resample's Stage-1 statistics.
    rep_dataset = sample_iid(gen, n_train, seed + _RESAMPLE_SEED_OFFSET)
    rep_td = build_task_data(rep_dataset, split, gen.priors)
    rep_s1 = stage1(_per_resample_config(run_cfg, 0), rep_td)
    grid = select_structure(rep_s1, n_train, run_cfg.spec, c_values, w_values)
    proxy_total = np.array(
        [[grid.cell(c, w).total for w in w_values] for c in c_values], dtype=np.float64
    )

    valid = n_ok >= 0.8 * m_resamples
    rho = None
    if valid.any():
        rho = spearman(proxy_total[valid], risk_mean[valid])
    oracle_best = None
    if valid.any():
        masked = np.where(valid, risk_mean, np.inf)
        ci, wi = np.unravel_index(int(masked.argmin()), masked.shape)
        oracle_best = (c_values[ci], w_values[wi])
    return OracleReport(
        c_values=c_values,
        w_values=w_values,
        risk_mean=risk_mean,
        risk_stderr=risk_stderr,
        n_ok=n_ok.astype(np.int64),
        m_resamples=m_resamples,
        proxy_total=proxy_total,
        spearman_rho=rho,
        oracle_best=oracle_best,
        proxy_best=(grid.c_star, grid.w_star),
        n_train=n_train,
        n_eval=n_eval,
        seed=seed,
    )


@dataclass
class SweepReport:
    """Per-weight accuracy and risk at a fixed shared depth."""

    c: int
    w_values: tuple
    overall_mean: np.ndarray
    overall_stderr: np.ndarray
    head_mean: np.ndarray
    head_stderr: np.ndarray
    tail_mean: np.ndarray
    tail_stderr: np.ndarray
    risk_mean: np.ndarray
    risk_stderr: np.ndarray
    n_ok: np.ndarray
    m_resamples: int
    n_train: int
    seed: int

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w") as fh:
            fh.write(
                "w_A,overall_mean,overall_stderr,head_mean,head_stderr,"
                "tail_mean,tail_stderr,risk_mean,risk_stderr,n_ok\n"
            )
            for wi, w in enumerate(self.w_values):
                fh.write(
                    f"{w!r},{self.overall_mean[wi]!r},{self.overall_stderr[wi]!r},"
                    f"{self.head_mean[wi]!r},{self.head_stderr[wi]!r},"
                    f"{self.tail_mean[wi]!r},{self.tail_stderr[wi]!r},"
                    f"{self.risk_mean[wi]!r},{self.risk_stderr[wi]!r},{int(self.n_ok[wi])}\n"
                )

    def to_json(self) -> str:
        payload = {
            "format": "tailshare-sweep-report-v1",
            "c": self.c,
            "w_values": list(self.w_values),
            "overall_mean": self.overall_mean.tolist(),
            "overall_stderr": self.overall_stderr.tolist(),
            "head_mean": self.head_mean.tolist(),
            "head_stderr": self.head_stderr.tolist(),
            "tail_mean": self.tail_mean.tolist(),
            "tail_stderr": self.tail_stderr.tolist(),
            "risk_mean": self.risk_mean.tolist(),
            "risk_stderr": self.risk_stderr.tolist(),
            "n_ok": self.n_ok.tolist(),
            "m_resamples": self.m_resamples,
            "n_train": self.n_train,
            "seed": self.seed,
        }
        return json.dumps(payload, sort_keys=True, indent=1)


def weight_sweep(
    gen: MixtureGenerator,
    run_cfg: RunConfig,
    c: int,
    w_values,
    m_resamples: int,
    n_train: int,
    seed: int = 0,
    n_eval: int = 2000,
    eval_per_class: int = 40,
    restrict: bool = True,
    jobs: int = 1,
    refine: bool = False,
) -> SweepReport:
    """Accuracy and risk as a function of the head weight at fixed depth.

    Accuracy is measured on a balanced per-class evaluation set (drawn
    once), the usual protocol when test-time class frequencies are uniform;
    risk uses feature draws from the training marginal. With refine=True
    every assembled model gets the decoder-only fine-tune before being
    measured, which reads the accuracy of the deployable model rather than
    of the raw splice.
    """
    w_values = tuple(float(w) for w in w_values)
    if refine and run_cfg.refine_opt is None:
        raise ConfigError("refine=True requires run_cfg.refine_opt")
    rng = np.random.default_rng(seed)
    eval_points = gen.sample_features(n_eval, rng)
    k = gen.n_classes
    bal_features = np.vstack([gen.sample_class_features(i, eval_per_class, rng) for i in range(k)])
    bal_labels = np.zeros((k * eval_per_class, k))
    bal_labels[np.arange(k * eval_per_class), np.repeat(np.arange(k), eval_per_class)] = 1.0
    split = split_classes(gen.priors)
    risks, accs = _collect_resamples(
        gen, run_cfg, split, gen.priors, eval_points, bal_features, bal_labels,
        (c,), w_values, m_resamples, n_train, seed, restrict, jobs, refine,
    )
    risk_mean, risk_stderr, n_ok = _mean_stderr(risks[:, 0, :])
    o_mean, o_stderr, _ = _mean_stderr(accs[:, 0, :, 0])
    h_mean, h_stderr, _ = _mean_stderr(accs[:, 0, :, 1])
    t_mean, t_stderr, _ = _mean_stderr(accs[:, 0, :, 2])
    return SweepReport(
        c=c, w_values=w_values,
        overall_mean=o_mean, overall_stderr=o_stderr,
        head_mean=h_mean, head_stderr=h_stderr,
        tail_mean=t_mean, tail_stderr=t_stderr,
        risk_mean=risk_mean, risk_stderr=risk_stderr,
        n_ok=n_ok.astype(np.int64), m_resamples=m_resamples,
        n_train=n_train, seed=seed,
    )


@dataclass
class AnchorStats:
    """MC mean KL risk of a well-specified logistic model vs d/(2N)."""

    mean: float
    stderr: float
    expected: float
    n_ok: int
    n_fail: int


def _newton_logistic(x: np.ndarray, z: np.ndarray, max_iter: int = 100, tol: float = 1e-12):
    """Logistic-regression MLE by Newton iteration; None when it fails."""
    n, d = x.shape
    theta = np.zeros(d)
    for _ in range(max_iter):
        u = x @ theta
        p = 1.0 / (1.0 + np.exp(-np.clip(u, -500, 500)))
        g = x.T @ (z - p) / n
        if np.max(np.abs(g)) < tol:
            return theta
        w = np.maximum(p * (1.0 - p), 1e-12)
        h = (x * w[:, None]).T @ x / n
        try:
            step = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(step)):
            return None
        theta = theta + step
    return theta if np.max(np.abs(g)) < 1e-6 else None


def bernoulli_logit_anchor(
    n_params: int,
    n_train: int,
    m_resamples: int,
    seed: int = 0,
    n_eval: int = 20000,
) -> AnchorStats:
    """Classical-asymptotics sanity anchor.

    Data come from a logistic model with n_params coefficients (intercept
    plus Gaussian features), the MLE is computed exactly by Newton
    iteration, and the KL between true and fitted Bernoulli conditionals is
    averaged over a fixed feature sample. First-order theory puts the mean
    at d/(2N), so the MC mean should land inside a modest multiplicative
    band around it.
    """
    if n_params < 2:
        raise ConfigError("need at least an intercept and one feature")
    rng = np.random.default_rng(seed)
    d = n_params
    theta0 = rng.normal(size=d) * (1.2 / np.sqrt(d))
    eval_x = np.concatenate([np.ones((n_eval, 1)), rng.normal(size=(n_eval, d - 1))], axis=1)
    u0 = eval_x @ theta0
    p0 = 1.0 / (1.0 + np.exp(-u0))
    sp = np.logaddexp
    risks = []
    n_fail = 0
    for _ in range(m_resamples):
        x = np.concatenate([np.ones((n_train, 1)), rng.normal(size=(n_train, d - 1))], axis=1)
        z = (rng.random(n_train) < 1.0 / (1.0 + np.exp(-(x @ theta0)))).astype(np.float64)
        theta = _newton_logistic(x, z)
        if theta is None:
            n_fail += 1
            continue
        u1 = eval_x @ theta
        kl = p0 * (sp(0.0, -u1) - sp(0.0, -u0)) + (1.0 - p0) * (sp(0.0, u1) - sp(0.0, u0))
        risks.append(float(kl.mean()))
    risks = np.asarray(risks)
    mean, stderr, n_ok = _mean_stderr(risks)
    return AnchorStats(float(mean), float(stderr), d / (2.0 * n_train), int(n_ok), n_fail)
