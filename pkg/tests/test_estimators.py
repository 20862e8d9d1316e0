"""Estimator tests.

Oracles: the warm-up pattern-stratified estimator is transcribed directly
from its closed form; tuning optimality is checked against random
perturbations; estimating-function validity is checked by Monte Carlo with
population pattern weights.
"""

import numpy as np
import pytest

from blockmiss import errors
from blockmiss.data import ObservedDataset, Schema
from blockmiss.estfun import LinearRegression, OutcomeMean
from blockmiss.estimators import (
    TRACE,
    EstimateReport,
    Scalarization,
    adaptive_qp,
    assemble_G_L,
    augmentation_index,
    confidence_interval,
    cross_fit,
    diagonal_efficiency_gains,
    estimate_G_L,
    fit_adaptive,
    fold_moments,
    ibm_solve,
    naive_estimate,
    optimal_alpha,
    ppi_estimate,
    ppi_pp_estimate,
    quadratic_value,
    zscore,
)
from blockmiss.patterns import (
    PS,
    RAY,
    WeightScheme,
    alpha_characterization,
    gamma_eta,
    omega,
    table_from_proportions,
)
from blockmiss.predictors import (
    EstimatingFunctionProxy,
    LinearPredictorMap,
    MeanProxy,
    PredictorBank,
    TablePointPredictor,
)
from blockmiss.simulation import (
    MASK_FULL,
    MASK_X1,
    MASK_X1X2,
    MASK_X1Y,
    MeanDesign,
    OLSDesign,
    generate,
    mean_target_bank,
    ols_oracle_bank,
    oracle_mean_points,
)

MEAN_EF = OutcomeMean("Y")


def small_design(**kw):
    defaults = dict(n_complete=120, n_x1y=110, n_x1x2=300, n_x1=290, p1=3, p2=4)
    defaults.update(kw)
    return MeanDesign(**defaults)


def mean_setup(seed=0, **kw):
    design = small_design(**kw)
    ds, theta_star = generate(design, seed)
    f, g = oracle_mean_points(design)
    bank = mean_target_bank(design, f, g)
    return design, ds, theta_star, f, g, bank


class TestNaive:
    def test_sample_mean(self):
        schema = Schema(("X1", "Y"), {"X1": ("a",), "Y": ("y",)})
        ds = ObservedDataset(
            schema,
            np.array([0b11, 0b11, 0b11, 0b11, 0b01]),
            {"X1": np.zeros((5, 1)), "Y": np.array([[1.0], [2.0], [3.0], [6.0], [np.nan]])},
            np.arange(5),
        )
        report = naive_estimate(ds, MEAN_EF)
        assert report.theta_hat[0] == pytest.approx(3.0, abs=1e-12)

    def test_variance_is_vy_over_labeled(self):
        _, ds, _, _, _, _ = mean_setup(seed=3)
        report = naive_estimate(ds, MEAN_EF)
        labeled = ~np.isnan(ds.blocks["Y"][:, 0])
        v_y = np.var(ds.blocks["Y"][labeled, 0], ddof=1)
        oracle = v_y / labeled.sum()  # variance of the labeled sample mean
        assert report.sigma_hat[0, 0] / ds.n_rows == pytest.approx(oracle, rel=1e-12)

    def test_ols_noiseless_exact(self):
        design = OLSDesign(n_complete=50, n_x1y=10, n_x1x2=10, n_x1=10, noise_sd=1.0)
        ds, _ = generate(design, 1)
        # overwrite y with a noiseless linear signal on complete rows
        beta = np.array([1.0, -2.0, 0.5, 3.0])
        x = np.hstack([ds.blocks["X1"], ds.blocks["X2"]])
        sel = ds.rows_matching(0b111)
        ds.blocks["Y"][sel] = (x[sel] @ beta)[:, None]
        ef = LinearRegression(("X1", "X2"), "Y", dims=(2, 2))
        report = naive_estimate(ds, ef)
        np.testing.assert_allclose(report.theta_hat, beta, atol=1e-10)

    def test_insufficient_data(self):
        schema = Schema(("Y",), {"Y": ("y",)})
        ds = ObservedDataset(schema, np.array([1]), {"Y": np.array([[1.0]])}, np.array([0]))
        with pytest.raises(errors.InsufficientData):
            naive_estimate(ds, MEAN_EF)


class TestPPI:
    def test_constant_predictor_reduces_to_naive(self):
        design, ds, _, _, _, _ = mean_setup(seed=4)
        const = LinearPredictorMap(("X1",), ("Y",), (1,), np.zeros((design.p1, 1)), np.array([9.0]))
        naive = naive_estimate(ds, MEAN_EF)
        for fn in (ppi_estimate, ppi_pp_estimate):
            report = fn(ds, MEAN_EF, const)
            assert report.theta_hat[0] == pytest.approx(naive.theta_hat[0], abs=1e-12)

    def test_oracle_predictor_variance_split(self):
        # noiseless outcome equal to f(X1): PPI variance ~ V(f)/|D_U|
        # (the labeled-residual term vanishes; the match is statistical since
        # the pooled and labeled-only variance estimates differ by sampling)
        design = MeanDesign(n_complete=2000, n_x1y=2000, n_x1x2=2000, n_x1=2000, p1=3, p2=1)
        ds, _ = generate(design, 5)
        f = LinearPredictorMap(("X1",), ("Y",), (1,), np.ones((design.p1, 1)), np.zeros(1))
        labeled = ~np.isnan(ds.blocks["Y"][:, 0])
        x1 = ds.blocks["X1"]
        ds.blocks["Y"][labeled] = f.predict({"X1": x1[labeled]}, ds.row_ids[labeled])
        report = ppi_estimate(ds, MEAN_EF, f)
        pi_u = 1 - labeled.mean()
        v_f = np.var(f.predict({"X1": x1}, ds.row_ids), ddof=1)
        assert report.sigma_hat[0, 0] == pytest.approx(v_f / pi_u, rel=0.1)

    def test_tuned_never_worse(self):
        for seed in range(8):
            _, ds, _, f, _, _ = mean_setup(seed=seed)
            naive = naive_estimate(ds, MEAN_EF)
            plain = ppi_estimate(ds, MEAN_EF, f)
            tuned = ppi_pp_estimate(ds, MEAN_EF, f)
            assert tuned.sigma_hat[0, 0] <= naive.sigma_hat[0, 0] + 1e-8
            assert tuned.sigma_hat[0, 0] <= plain.sigma_hat[0, 0] + 1e-8

    def test_not_mean_target(self):
        design = OLSDesign(n_complete=30, n_x1y=10, n_x1x2=10, n_x1=10)
        ds, _ = generate(design, 2)
        ef = LinearRegression(("X1", "X2"), "Y", dims=(2, 2))
        f = LinearPredictorMap(("X1",), ("Y",), (1,), np.zeros((2, 1)), np.zeros(1))
        with pytest.raises(errors.NotMeanTarget):
            ppi_estimate(ds, ef, f)

    def test_no_unlabeled_rows(self):
        design = small_design(n_x1x2=0, n_x1=0)
        ds, _ = generate(design, 6)
        f = LinearPredictorMap(("X1",), ("Y",), (1,), np.zeros((3, 1)), np.zeros(1))
        with pytest.raises(errors.NoUnlabeledRows):
            ppi_estimate(ds, MEAN_EF, f)


class ZeroProxy:
    """Augmentation proxy that is identically zero (with zero Jacobian)."""

    d = 1
    inputs = ()

    def values(self, blocks, row_ids, theta):
        return np.zeros((len(row_ids), 1))

    def jacobian(self, blocks, row_ids, theta):
        return np.zeros((len(row_ids), 1, 1))


def zero_bank():
    entries = {r: ZeroProxy() for r in (MASK_X1, MASK_X1X2, MASK_X1Y)}
    return PredictorBank(mode="expectation", entries=entries, d=1)


def orthogonal_table_bank(ds):
    """Bank whose proxy columns are exactly uncorrelated on complete rows."""
    rng = np.random.default_rng(99)
    n = ds.n_rows
    complete = ds.rows_matching(MASK_FULL)
    cols = rng.standard_normal((n, 3))
    sub = cols[complete]
    sub = sub - sub.mean(axis=0)
    q, _ = np.linalg.qr(sub)
    cols[complete] = q * np.array([3.0, 1.5, 2.0])  # uncorrelated, unequal scales
    entries = {}
    for j, r in enumerate((MASK_X1, MASK_X1X2, MASK_X1Y)):
        values = {int(i): cols[i, j : j + 1] for i in range(n)}
        entries[r] = MeanProxy(TablePointPredictor(values=values, width=1))
    return PredictorBank(mode="expectation", entries=entries, d=1)


class TestGLEstimate:
    def test_orthogonal_predictors_give_diagonal_G(self):
        _, ds, _, _, _, _ = mean_setup(seed=7)
        bank = orthogonal_table_bank(ds)
        table = ds.pattern_table(min_count=0)
        for scheme in (PS, RAY):
            gl = estimate_G_L(ds, MEAN_EF, bank, scheme, table=table)
            off = gl.G - np.diag(np.diag(gl.G))
            np.testing.assert_allclose(off, 0.0, atol=1e-10 * np.abs(gl.G).max())
            alpha, _ = optimal_alpha(gl)
            np.testing.assert_allclose(alpha, -gl.L / np.diag(gl.G), atol=1e-10)

    def test_zero_predictors(self):
        _, ds, _, _, _, _ = mean_setup(seed=8)
        bank = zero_bank()
        table = ds.pattern_table(min_count=0)
        gl = estimate_G_L(ds, MEAN_EF, bank, RAY, table=table)
        np.testing.assert_allclose(gl.L, 0.0, atol=1e-12)
        alpha, gain = optimal_alpha(gl)
        np.testing.assert_allclose(alpha, 0.0, atol=1e-12)
        assert gain == pytest.approx(0.0, abs=1e-12)
        theta, _, _ = ibm_solve(ds, MEAN_EF, bank, RAY, alpha=alpha, table=table)
        complete = ds.rows_matching(MASK_FULL)
        assert theta[0] == pytest.approx(ds.blocks["Y"][complete, 0].mean(), abs=1e-10)

    def test_ps_worse_conditioned_when_complete_rare(self):
        # rare complete pattern (pi = 0.02) with weak predictors: the
        # pattern-stratified tuning matrix is closer to rank deficiency
        from blockmiss.predictors import NoisyMixturePredictor

        design = MeanDesign(n_complete=50, n_x1y=50, n_x1x2=1200, n_x1=1200, p1=3, p2=4)
        ds, _ = generate(design, 31)
        f0, g0 = oracle_mean_points(design)
        f = NoisyMixturePredictor(base=f0, q=1.0, noise_sd=2.0, seed=41)
        g = NoisyMixturePredictor(base=g0, q=1.0, noise_sd=2.0, seed=42)
        bank = mean_target_bank(design, f, g)
        table = ds.pattern_table(min_count=0)
        cond_ps = estimate_G_L(ds, MEAN_EF, bank, PS, table=table).cond_g
        cond_ray = estimate_G_L(ds, MEAN_EF, bank, RAY, table=table).cond_g
        assert cond_ps > cond_ray

    def test_insufficient_complete_rows(self):
        _, ds, _, _, _, bank = mean_setup(seed=11)
        few = ds.subset(np.flatnonzero(ds.masks != MASK_FULL)[:50].tolist() + [int(np.flatnonzero(ds.masks == MASK_FULL)[0])])
        with pytest.raises((errors.InsufficientCompleteRows, errors.InsufficientData)):
            estimate_G_L(few, MEAN_EF, bank, RAY, table=ds.pattern_table(min_count=0))


class TestOptimalAlpha:
    def test_zero_L(self):
        gl_g = np.diag([2.0, 3.0])
        gl = _fake_gl(gl_g, np.zeros(2))
        alpha, gain = optimal_alpha(gl)
        np.testing.assert_allclose(alpha, 0.0)
        assert gain == 0.0

    def test_scalar_case(self):
        gl = _fake_gl(np.array([[2.0]]), np.array([-1.0]))
        alpha, gain = optimal_alpha(gl)
        assert alpha[0] == pytest.approx(0.5)
        assert gain == pytest.approx(0.5)

    def test_quadratic_minimality(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            k = rng.integers(1, 6)
            z = rng.standard_normal((k, k))
            G = z @ z.T + 0.1 * np.eye(k)
            L = rng.standard_normal(k)
            gl = _fake_gl(G, L)
            alpha, gain = optimal_alpha(gl)
            assert gain >= -1e-12
            base = quadratic_value(gl, alpha)
            for _ in range(100):
                delta = rng.standard_normal(k) * rng.uniform(0.01, 1.0)
                assert base <= quadratic_value(gl, alpha + delta) + 1e-10


def _fake_gl(G, L):
    from blockmiss.estimators import GLEstimate

    return GLEstimate(
        G=G,
        L=L,
        a_hat=np.eye(1),
        index=tuple(range(len(L))),
        scalarization=TRACE,
        c0=10.0,
        cond_g=1.0,
        ridged=False,
        pi_full=0.1,
    )


class TestIbmSolve:
    def test_zero_alpha_is_complete_case(self):
        _, ds, _, _, _, bank = mean_setup(seed=13)
        table = ds.pattern_table(min_count=0)
        for scheme in (PS, RAY):
            theta, _, _ = ibm_solve(ds, MEAN_EF, bank, scheme, alpha=np.zeros(3), table=table)
            complete = ds.rows_matching(MASK_FULL)
            assert theta[0] == pytest.approx(ds.blocks["Y"][complete, 0].mean(), abs=1e-10)

    def test_warmup_ps_matches_direct_transcription(self):
        # closed form: labeled mean + alpha_f * ps-weighted f + alpha_g * ps-weighted g
        design, ds, _, f, g, bank = mean_setup(seed=14)
        table = ds.pattern_table(min_count=0)
        alpha_f, alpha_g = 0.37, -0.81
        m, n = ds.masks, ds.n_rows
        pi = {mask: float(np.mean(m == mask)) for mask in table.masks}
        pi_l = pi[MASK_FULL] + pi[MASK_X1Y]
        y = np.nan_to_num(ds.blocks["Y"][:, 0])
        labeled = (m == MASK_FULL) | (m == MASK_X1Y)
        fv = f.predict({"X1": np.nan_to_num(ds.blocks["X1"])}, ds.row_ids)[:, 0]
        gsel = (m & MASK_X1X2) == MASK_X1X2
        gv = np.zeros(n)
        gv[gsel] = g.predict(
            {"X1": ds.blocks["X1"][gsel], "X2": ds.blocks["X2"][gsel]}, ds.row_ids[gsel]
        )[:, 0]
        w_f = (m == MASK_X1) / pi[MASK_X1] - (m == MASK_FULL) / pi[MASK_FULL]
        w_g = (m == MASK_X1X2) / pi[MASK_X1X2] - (m == MASK_FULL) / pi[MASK_FULL]
        direct = (
            (labeled * y / pi_l).sum() / n
            + alpha_f * (w_f * fv).sum() / n
            + alpha_g * (w_g * gv).sum() / n
        )
        # the pooled labeled-mean term equals weight pi_x1y / pi_l on the
        # residual proxy of the {X1, Y} pattern
        alpha = np.array([alpha_f, alpha_g, pi[MASK_X1Y] / pi_l])
        theta, _, _ = ibm_solve(ds, MEAN_EF, bank, PS, alpha=alpha, table=table)
        assert theta[0] == pytest.approx(direct, abs=1e-12)

    def test_sandwich_psd_and_symmetric(self):
        design = OLSDesign(n_complete=150, n_x1y=150, n_x1x2=150, n_x1=150)
        ds, _ = generate(design, 15)
        bank = ols_oracle_bank(design)
        ef = LinearRegression(("X1", "X2"), "Y", dims=(2, 2))
        table = ds.pattern_table(min_count=0)
        gl = estimate_G_L(ds, ef, bank, RAY, table=table)
        alpha, _ = optimal_alpha(gl)
        _, sigma, _ = ibm_solve(ds, ef, bank, RAY, alpha=alpha, table=table)
        np.testing.assert_allclose(sigma, sigma.T, atol=1e-12)
        assert np.linalg.eigvalsh(sigma).min() > -1e-10

    def test_perfect_predictors_beat_naive_variance(self):
        design, ds, _, _, _, bank = mean_setup(
            seed=16, n_complete=300, n_x1y=300, n_x1x2=1500, n_x1=1500
        )
        table = ds.pattern_table(min_count=0)
        gl = estimate_G_L(ds, MEAN_EF, bank, RAY, table=table)
        alpha, gain = optimal_alpha(gl)
        _, sigma, _ = ibm_solve(ds, MEAN_EF, bank, RAY, alpha=alpha, table=table)
        naive = naive_estimate(ds, MEAN_EF)
        assert gain > 0
        assert sigma[0, 0] < naive.sigma_hat[0, 0]


class TestAdaptive:
    def test_constraint_feasibility(self):
        _, ds, _, _, _, bank = mean_setup(seed=17)
        table = ds.pattern_table(min_count=0)
        fit = fit_adaptive(ds, MEAN_EF, bank, table=table)
        assert fit.constraint_residual <= 1e-10
        rows = {}
        for (r, _), v in fit.alpha.items():
            rows[r] = rows.get(r, 0.0) + v
        for total in rows.values():
            assert abs(total) <= 1e-10

    def test_dominates_embedded_schemes(self):
        for seed in range(6):
            _, ds, _, _, _, bank = mean_setup(seed=100 + seed)
            table = ds.pattern_table(min_count=0)
            index = augmentation_index(table, bank)
            moments = fold_moments(ds, MEAN_EF, bank, index)
            fit = fit_adaptive(ds, MEAN_EF, bank, TRACE, table, moments=moments)
            for kind in ("ps", "ray"):
                gl = estimate_G_L(
                    ds, MEAN_EF, bank, WeightScheme(kind), TRACE, table, moments=moments
                )
                a_opt, _ = optimal_alpha(gl)
                char = alpha_characterization(kind, table)
                embedded = {
                    (r, s): a_opt[index.index(r)] * v for (r, s), v in char.items() if r in index
                }
                point = fit.embed(embedded)
                # embedded objective equals the scheme quadratic at its optimum
                assert fit.objective(point) == pytest.approx(
                    quadratic_value(gl, a_opt), rel=1e-9, abs=1e-9
                )
                assert fit.objective_value <= fit.objective(point) + 1e-9

    def test_zero_predictors_zero_alpha(self):
        _, ds, _, _, _, _ = mean_setup(seed=18)
        bank = zero_bank()
        table = ds.pattern_table(min_count=0)
        alpha, theta, _ = adaptive_qp(ds, MEAN_EF, bank, table=table)
        np.testing.assert_allclose(sorted(abs(v) for v in alpha.values()), 0.0, atol=1e-10)
        complete = ds.rows_matching(MASK_FULL)
        assert theta[0] == pytest.approx(ds.blocks["Y"][complete, 0].mean(), abs=1e-8)

    def test_degenerate_program(self):
        _, ds, _, _, _, _ = mean_setup(seed=19)
        bank = PredictorBank(mode="expectation", entries={}, d=1)
        with pytest.raises(errors.DegenerateProgram):
            fit_adaptive(ds, MEAN_EF, bank, table=ds.pattern_table(min_count=0))


class TestValidityMonteCarlo:
    """Mean of the augmented residual at the truth is zero for any weights."""

    def run_scheme(self, kind, n=20000, seed=20):
        design = MeanDesign(
            n_complete=int(n * 0.15),
            n_x1y=int(n * 0.25),
            n_x1x2=int(n * 0.3),
            n_x1=n - int(n * 0.15) - int(n * 0.25) - int(n * 0.3),
            p1=2,
            p2=3,
            multinomial_patterns=True,
        )
        ds, theta_star = generate(design, seed)
        counts = design.counts_by_mask()
        masks = sorted(counts)
        pop = table_from_proportions(masks, [counts[m] / n for m in masks], 3)
        f0, g0 = oracle_mean_points(design)
        # deliberately biased proxies
        f = LinearPredictorMap(("X1",), ("Y",), (1,), f0.coef * 1.4, f0.intercept + 1.7)
        g = LinearPredictorMap(("X1", "X2"), ("Y",), (1,), g0.coef * 0.6, g0.intercept - 2.3)
        bank = mean_target_bank(design, f, g)
        index = augmentation_index(pop, bank)
        if kind == "adaptive":
            rng = np.random.default_rng(seed)
            alpha_map = {}
            for r in index:
                admissible = [s for s in pop.masks if s & r == r]
                vals = rng.standard_normal(len(admissible))
                vals -= vals.mean()
                for s, v in zip(admissible, vals):
                    alpha_map[(r, s)] = v
            scheme = WeightScheme("adaptive", alpha=alpha_map)
            weights = np.array(
                [[omega(scheme, p, r, pop) for p in pop.masks] for r in index]
            )
        else:
            scheme = WeightScheme(kind)
            base = np.array([0.6, -0.4, 0.8])
            weights = base[:, None] * np.array(
                [[omega(scheme, p, r, pop) for p in pop.masks] for r in index]
            )
        pat_idx = np.searchsorted(pop.masks, ds.masks)
        terms = np.zeros(ds.n_rows)
        complete = ds.rows_matching(MASK_FULL)
        terms[complete] = (
            MEAN_EF.evaluate({"Y": ds.blocks["Y"][complete]}, theta_star)[:, 0]
            / pop.pi_full
        )
        for j, r in enumerate(index):
            w_rows = weights[j, pat_idx]
            sel = w_rows != 0.0
            if sel.any():
                vals = bank.evaluate(r, ds, sel, theta_star)[:, 0]
                terms[sel] += w_rows[sel] * vals
        mean = terms.mean()
        se = terms.std(ddof=1) / np.sqrt(ds.n_rows)
        assert abs(mean) < 4 * se, f"{kind}: |{mean:.4g}| vs 4*{se:.4g}"

    @pytest.mark.parametrize("kind", ["ps", "ray", "adaptive"])
    def test_mean_zero(self, kind):
        self.run_scheme(kind)


class TestCrossFit:
    def test_deterministic(self):
        _, ds, _, _, _, bank = mean_setup(seed=21)
        a = cross_fit(ds, MEAN_EF, bank, scheme="ray", seed=5)
        b = cross_fit(ds, MEAN_EF, bank, scheme="ray", seed=5)
        assert a.to_json() == b.to_json()
        c = cross_fit(ds, MEAN_EF, bank, scheme="ray", seed=6)
        assert a.to_json() != c.to_json()

    def test_theta_between_folds(self):
        _, ds, _, _, _, bank = mean_setup(seed=22)
        report = cross_fit(ds, MEAN_EF, bank, scheme="ps", seed=1)
        folds = np.array(report.diagnostics["fold_thetas"]).ravel()
        assert min(folds) - 1e-12 <= report.theta_hat[0] <= max(folds) + 1e-12
        assert report.theta_hat[0] == pytest.approx(folds.mean(), abs=1e-12)

    def test_fold_degenerate(self):
        design = small_design(n_complete=30, n_x1y=3, n_x1x2=40, n_x1=40)
        ds, _ = generate(design, 23)
        f, g = oracle_mean_points(design)
        bank = mean_target_bank(design, f, g)
        with pytest.raises(errors.FoldDegenerate):
            cross_fit(ds, MEAN_EF, bank, scheme="ray", seed=2)

    def test_safety_gain_nonnegative(self):
        for seed in range(5):
            _, ds, _, _, _, bank = mean_setup(seed=200 + seed)
            for scheme in ("ps", "ray", "adaptive"):
                report = cross_fit(ds, MEAN_EF, bank, scheme=scheme, seed=seed)
                for gain in report.diagnostics["gain"]:
                    assert gain >= -1e-8

    def test_plain_split_flag(self):
        _, ds, _, _, _, bank = mean_setup(seed=24)
        report = cross_fit(ds, MEAN_EF, bank, scheme="ray", seed=3, split="plain")
        assert report.diagnostics["fold_sizes"][0] + report.diagnostics["fold_sizes"][1] == ds.n_rows

    def test_adaptive_alpha_reported(self):
        _, ds, _, _, _, bank = mean_setup(seed=25)
        report = cross_fit(ds, MEAN_EF, bank, scheme="adaptive", seed=4)
        assert any("->" in k for k in report.alpha)
        assert report.diagnostics["scheme"] == "adaptive"


class TestConfidenceInterval:
    def test_z_value(self):
        assert zscore(0.95) == pytest.approx(1.959964, abs=5e-7)

    def test_degenerate_sigma(self):
        report = EstimateReport(
            estimator="x",
            theta_hat=np.array([1.0]),
            sigma_hat=np.zeros((1, 1)),
            n_rows=10,
            level=0.95,
        )
        np.testing.assert_allclose(report.ci, [[1.0, 1.0]])

    def test_invalid_level(self):
        report = EstimateReport(
            estimator="x",
            theta_hat=np.array([1.0]),
            sigma_hat=np.eye(1),
            n_rows=10,
            level=0.95,
        )
        with pytest.raises(errors.InvalidLevel):
            confidence_interval(report, 1.5)

    def test_width_matches_formula(self):
        report = EstimateReport(
            estimator="x",
            theta_hat=np.array([2.0]),
            sigma_hat=np.array([[9.0]]),
            n_rows=36,
            level=0.9,
        )
        half = zscore(0.9) * np.sqrt(9.0 / 36)
        np.testing.assert_allclose(report.ci, [[2.0 - half, 2.0 + half]])


class TestScalarization:
    def test_contrast_matches_trace_in_1d(self):
        _, ds, _, _, _, bank = mean_setup(seed=26)
        table = ds.pattern_table(min_count=0)
        gl_t = estimate_G_L(ds, MEAN_EF, bank, RAY, TRACE, table)
        gl_c = estimate_G_L(
            ds, MEAN_EF, bank, RAY, Scalarization("contrast", np.array([1.0])), table
        )
        np.testing.assert_allclose(gl_t.G, gl_c.G, rtol=1e-12)
        np.testing.assert_allclose(gl_t.L, gl_c.L, rtol=1e-12)

    def test_contrast_ols(self):
        design = OLSDesign(n_complete=200, n_x1y=200, n_x1x2=200, n_x1=200)
        ds, _ = generate(design, 27)
        bank = ols_oracle_bank(design)
        ef = LinearRegression(("X1", "X2"), "Y", dims=(2, 2))
        c = np.array([1.0, -1.0, 0.5, 0.0])
        report = cross_fit(
            ds, ef, bank, scheme="adaptive", scalarization=Scalarization("contrast", c), seed=9
        )
        assert report.theta_hat.shape == (4,)


def test_assemble_G_L_oracle():
    rng = np.random.default_rng(30)
    K = rng.standard_normal((4, 4))
    K = (K + K.T) / 2
    gamma = rng.standard_normal(3)
    eta = rng.standard_normal((3, 3))
    eta = (eta + eta.T) / 2
    G, L = assemble_G_L(K, gamma, eta)
    for a in range(3):
        assert L[a] == pytest.approx(gamma[a] * K[0, a + 1])
        for b in range(3):
            assert G[a, b] == pytest.approx(eta[a, b] * K[a + 1, b + 1])


def test_diagonal_efficiency_gains_diagnostic():
    table = table_from_proportions(
        (MASK_X1, MASK_X1X2, MASK_X1Y, MASK_FULL), (0.3, 0.3, 0.2, 0.2), 3
    )
    ell = {MASK_X1: 1.0, MASK_X1X2: 0.5, MASK_X1Y: 2.0}
    out = diagonal_efficiency_gains(table, ell)
    assert out["gain_ps"] > 0 and out["gain_ray"] > 0
    # the exact second moment matches the union-form closed expression but
    # not the intersection-form variant
    assert out["eta_ray_exact_vs_union_max_abs_diff"] < 1e-10
    assert out["eta_ray_union_vs_intersection_max_abs_diff"] > 1e-3
