//! Conditional statistic estimators built from locality weights or from
//! two-stage regressions on half-splits of an arm.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    fit_forest, fit_ols, BandwidthRule, ForestParams, ForestTask, KernelWeights, LinearModel, Regressor, WeightSource,
};
use crate::dataset::Dataset;
use crate::error::{CdteError, Result};
use crate::linalg::least_squares;
use crate::rng::rng_from_seed;
use crate::statistics::{
    evar_of_atoms, quantile_of_atoms, superquantile_of_atoms, weighted_quantile, weighted_superquantile, Evar,
    Superquantile,
};

/// Lower bound applied to density-at-quantile predictions.
pub const DENSITY_FLOOR: f64 = 1e-3;

/// Weighted empirical statistics of one arm's outcomes, localized at `x` by a
/// weight source fit on that arm's covariates.
#[derive(Clone)]
pub struct LocalStatistic {
    source: Arc<dyn WeightSource>,
    order: Vec<usize>,
    sorted: Vec<f64>,
}

impl LocalStatistic {
    pub fn new(source: Arc<dyn WeightSource>, values: &[f64]) -> Result<Self> {
        if source.n_train() != values.len() {
            return Err(CdteError::Precondition(format!(
                "weight source has {} rows but {} values were given",
                source.n_train(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CdteError::domain("values must be finite"));
        }
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let sorted = order.iter().map(|&i| values[i]).collect();
        Ok(LocalStatistic { source, order, sorted })
    }

    fn atoms(&self, x: &[f64]) -> Vec<(f64, f64)> {
        let w = self.source.weights(x);
        let w = w.as_slice();
        self.order
            .iter()
            .zip(&self.sorted)
            .filter_map(|(&i, &v)| (w[i] > 0.0).then_some((v, w[i])))
            .collect()
    }

    pub fn quantile(&self, x: &[f64], tau: f64) -> f64 {
        quantile_of_atoms(&self.atoms(x), tau)
    }

    pub fn superquantile(&self, x: &[f64], tau: f64) -> Superquantile {
        superquantile_of_atoms(&self.atoms(x), tau)
    }

    pub fn evar(&self, x: &[f64], delta: f64) -> Result<Evar> {
        evar_of_atoms(&self.atoms(x), delta)
    }
}

/// A `LocalStatistic` read off at a fixed level as a regressor of the quantile.
#[derive(Clone)]
pub struct LocalQuantile {
    pub stat: Arc<LocalStatistic>,
    pub tau: f64,
    d: usize,
}

impl Regressor for LocalQuantile {
    fn predict(&self, x: &[f64]) -> f64 {
        self.stat.quantile(x, self.tau)
    }
    fn n_features(&self) -> usize {
        self.d
    }
    fn n_train(&self) -> usize {
        self.stat.sorted.len()
    }
}

pub fn qrf_quantile(source: &dyn WeightSource, x: &[f64], values: &[f64], tau: f64) -> Result<f64> {
    weighted_quantile(values, source.weights(x).as_slice(), tau)
}

pub fn sqrf_superquantile(source: &dyn WeightSource, x: &[f64], values: &[f64], tau: f64) -> Result<f64> {
    Ok(weighted_superquantile(values, source.weights(x).as_slice(), tau)?.mu)
}

/// How conditional quantiles are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileMethod {
    /// Quantile regression forest.
    Forest,
    /// Linear quantile regression.
    Linear,
    /// Gaussian-kernel weights with Silverman bandwidths.
    Kernel,
}

/// Plain conditional-mean regressors used for second stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressorKind {
    Ols,
    Forest,
}

pub fn fit_regressor(kind: RegressorKind, x: &[Vec<f64>], y: &[f64], seed: u64) -> Result<Arc<dyn Regressor>> {
    Ok(match kind {
        RegressorKind::Ols => Arc::new(fit_ols(x, y)?),
        RegressorKind::Forest => {
            let d = x.first().map_or(0, |r| r.len());
            Arc::new(fit_forest(
                x,
                y,
                &ForestParams::defaults(y.len(), d, ForestTask::Regression, seed),
            )?)
        }
    })
}

/// Fit a conditional `tau`-quantile model of `y` on `x`.
pub fn fit_quantile_model(
    method: QuantileMethod,
    x: &[Vec<f64>],
    y: &[f64],
    tau: f64,
    seed: u64,
) -> Result<Arc<dyn Regressor>> {
    let d = x.first().map_or(0, |r| r.len());
    let source: Arc<dyn WeightSource> = match method {
        QuantileMethod::Linear => return Ok(Arc::new(fit_linear_quantile(x, y, tau)?)),
        QuantileMethod::Forest => Arc::new(fit_forest(
            x,
            y,
            &ForestParams::defaults(y.len(), d, ForestTask::Regression, seed),
        )?),
        QuantileMethod::Kernel => Arc::new(KernelWeights::fit(x, BandwidthRule::Silverman)?),
    };
    Ok(Arc::new(LocalQuantile {
        stat: Arc::new(LocalStatistic::new(source, y)?),
        tau,
        d,
    }))
}

/// Linear model of a conditional quantile.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearQuantileModel {
    pub inner: LinearModel,
    pub tau: f64,
    pub iterations: usize,
}

impl Regressor for LinearQuantileModel {
    fn predict(&self, x: &[f64]) -> f64 {
        self.inner.predict(x)
    }
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }
    fn n_train(&self) -> usize {
        self.inner.n_train()
    }
}

const LQR_MAX_ITER: usize = 200;
const LQR_TOL: f64 = 1e-8;
const LQR_EPS: f64 = 1e-6;

/// Linear quantile regression: minimizes the check loss
/// `sum_i r_i (tau - I[r_i < 0])` by iteratively reweighted least squares,
/// starting from the OLS fit.
pub fn fit_linear_quantile(x: &[Vec<f64>], y: &[f64], tau: f64) -> Result<LinearQuantileModel> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(CdteError::config(format!("tau must lie in (0, 1), got {tau}")));
    }
    let start = fit_ols(x, y)?;
    let n = y.len();
    let p = start.coef.len();
    let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    let target = DVector::from_column_slice(y);
    let mut coef = DVector::from_vec(start.coef.clone());
    let mut iterations = 0;
    for _ in 0..LQR_MAX_ITER {
        iterations += 1;
        let resid = &target - &design * &coef;
        let sw: Vec<f64> = resid
            .iter()
            .map(|&r| {
                let side = if r >= 0.0 { tau } else { 1.0 - tau };
                (side / r.abs().max(LQR_EPS)).sqrt()
            })
            .collect();
        let wx = DMatrix::from_fn(n, p, |i, j| design[(i, j)] * sw[i]);
        let wy = DVector::from_fn(n, |i, _| target[i] * sw[i]);
        let next = least_squares(&wx, &wy, true, None)?.coef;
        let change = (&next - &coef).norm() / coef.norm().max(1.0);
        coef = next;
        if change < LQR_TOL {
            break;
        }
    }
    Ok(LinearQuantileModel {
        inner: LinearModel::new(coef.iter().copied().collect(), n),
        tau,
        iterations,
    })
}

/// Deterministic two-way split of an arm's rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArmSplit {
    /// Even within-arm positions form the first half, odd the second.
    #[default]
    EvenOdd,
    /// Positions are shuffled with the seed before the even/odd split.
    Shuffled { seed: u64 },
}

impl ArmSplit {
    pub fn halves(&self, n: usize) -> (Vec<usize>, Vec<usize>) {
        let mut pos: Vec<usize> = (0..n).collect();
        if let ArmSplit::Shuffled { seed } = *self {
            pos.shuffle(&mut rng_from_seed(seed));
        }
        let first = pos.iter().step_by(2).copied().collect();
        let second = pos.iter().skip(1).step_by(2).copied().collect();
        (first, second)
    }
}

fn arm_xy(train: &Dataset, arm: u8) -> (Vec<Vec<f64>>, Vec<f64>) {
    let sub = train.arm(arm);
    (sub.features(), sub.outcomes())
}

fn pick<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

/// Superquantile by regressing `(1 - tau)^-1 Y I[Y >= qhat(X)]` on `X`, with
/// `qhat` fit on the first half of the arm and the regression on the second.
pub fn two_stage_superquantile(
    train: &Dataset,
    arm: u8,
    tau: f64,
    quantile: QuantileMethod,
    final_stage: RegressorKind,
    split: ArmSplit,
    seed: u64,
) -> Result<Arc<dyn Regressor>> {
    let (x, y) = arm_xy(train, arm);
    if y.len() < 4 {
        return Err(CdteError::DegenerateSplit(format!(
            "arm {arm} has {} rows; the two-stage superquantile needs at least 4",
            y.len()
        )));
    }
    let (h1, h2) = split.halves(y.len());
    let q = fit_quantile_model(quantile, &pick(&x, &h1), &pick(&y, &h1), tau, seed)?;
    let x2 = pick(&x, &h2);
    let omega: Vec<f64> = h2
        .iter()
        .zip(&x2)
        .map(|(&i, xi)| if y[i] >= q.predict(xi) { y[i] / (1.0 - tau) } else { 0.0 })
        .collect();
    fit_regressor(final_stage, &x2, &omega, seed ^ 0x5eed)
}

/// Density of `Y | X, A = arm` at a conditional quantile, floored at
/// [`DENSITY_FLOOR`].
#[derive(Clone)]
pub struct DensityModel {
    inner: Arc<dyn Regressor>,
}

impl DensityModel {
    /// The floored prediction and whether the floor was active.
    pub fn predict_checked(&self, x: &[f64]) -> (f64, bool) {
        let raw = self.inner.predict(x);
        if raw >= DENSITY_FLOOR {
            (raw, false)
        } else {
            (DENSITY_FLOOR, true)
        }
    }
}

impl Regressor for DensityModel {
    fn predict(&self, x: &[f64]) -> f64 {
        self.predict_checked(x).0
    }
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }
    fn n_train(&self) -> usize {
        self.inner.n_train()
    }
}

fn gaussian_kernel(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Regress `K((Y - qhat(X)) / b) / b` on `X` over the second half of the arm.
/// `qhat` is expected to come from the first half (see [`ArmSplit::halves`]).
pub fn density_at_quantile(
    train: &Dataset,
    arm: u8,
    qhat: &dyn Regressor,
    bandwidth: f64,
    final_stage: RegressorKind,
    split: ArmSplit,
    seed: u64,
) -> Result<DensityModel> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(CdteError::config(format!(
            "density bandwidth must be positive, got {bandwidth}"
        )));
    }
    let (x, y) = arm_xy(train, arm);
    if y.len() < 4 {
        return Err(CdteError::DegenerateSplit(format!(
            "arm {arm} has {} rows; the density estimate needs at least 4",
            y.len()
        )));
    }
    let (_, h2) = split.halves(y.len());
    let x2 = pick(&x, &h2);
    let omega: Vec<f64> = h2
        .iter()
        .zip(&x2)
        .map(|(&i, xi)| gaussian_kernel((y[i] - qhat.predict(xi)) / bandwidth) / bandwidth)
        .collect();
    Ok(DensityModel {
        inner: fit_regressor(final_stage, &x2, &omega, seed ^ 0xde75)?,
    })
}

/// Kernel-localized EVaR of one arm at `x`.
pub fn kernel_evar(train: &Dataset, arm: u8, delta: f64, x: &[f64]) -> Result<Evar> {
    let (xs, y) = arm_xy(train, arm);
    if y.is_empty() {
        return Err(CdteError::DegenerateSplit(format!("arm {arm} has no rows")));
    }
    if y.len() == 1 {
        return crate::statistics::weighted_evar(&y, &[1.0], delta);
    }
    let source = Arc::new(KernelWeights::fit(&xs, BandwidthRule::Silverman)?);
    LocalStatistic::new(source, &y)?.evar(x, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Observation;
    use crate::learners::{forest_weights, UniformWeights};
    use crate::rng::rng_from_seed;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn dataset(rows: Vec<(Vec<f64>, u8, f64)>) -> Dataset {
        Dataset::new(rows.into_iter().map(|(x, a, y)| Observation::new(x, a, y)).collect()).unwrap()
    }

    /// Simulation design, one arm only: X ~ U[0,1]^10, Y = exp(x0 + a x1 + 0.2 Z).
    fn lognormal_arm(n: usize, arm: u8, seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        let z = Normal::new(0.0, 0.2).unwrap();
        dataset(
            (0..n)
                .map(|_| {
                    let x: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
                    let y = (x[0] + f64::from(arm) * x[1] + z.sample(&mut rng)).exp();
                    (x, arm, y)
                })
                .collect(),
        )
    }

    const Z75: f64 = 0.674_489_750_196_081_7;

    #[test]
    fn uniform_weights_reduce_to_sample_statistics() {
        let vals = [1.0, 2.0, 3.0, 4.0];
        let u = UniformWeights(4);
        assert_eq!(qrf_quantile(&u, &[0.0], &vals, 0.5).unwrap(), 2.0);
        assert_eq!(sqrf_superquantile(&u, &[0.0], &vals, 0.5).unwrap(), 3.5);
        assert_eq!(qrf_quantile(&u, &[0.0], &vals, 1e-9).unwrap(), 1.0);
    }

    #[test]
    fn local_statistic_matches_direct_weighted_estimators() {
        let data = lognormal_arm(400, 1, 3);
        let (x, y) = (data.features(), data.outcomes());
        let forest = Arc::new(fit_forest(&x, &y, &ForestParams::defaults(400, 10, ForestTask::Regression, 1)).unwrap());
        let stat = LocalStatistic::new(forest.clone(), &y).unwrap();
        let q = [0.3; 10];
        let w = forest_weights(&forest, &q);
        assert_eq!(
            stat.quantile(&q, 0.75),
            weighted_quantile(&y, w.as_slice(), 0.75).unwrap()
        );
        let s = weighted_superquantile(&y, w.as_slice(), 0.75).unwrap();
        assert!((stat.superquantile(&q, 0.75).mu - s.mu).abs() < 1e-12);
        assert!(stat.superquantile(&q, 0.75).mu >= stat.quantile(&q, 0.75));
    }

    #[test]
    fn qrf_recovers_lognormal_quantile() {
        // leaves of n/20 rows smooth over e^{x0 + x1} enough to bias the
        // estimate at the center by about 0.2, so use smaller leaves here
        let data = lognormal_arm(5000, 1, 5);
        let (x, y) = (data.features(), data.outcomes());
        let params = ForestParams {
            min_leaf: 50,
            ..ForestParams::defaults(y.len(), 10, ForestTask::Regression, 9)
        };
        let forest = fit_forest(&x, &y, &params).unwrap();
        let truth = (1.0 + 0.2 * Z75).exp();
        let est = qrf_quantile(&forest, &[0.5; 10], &y, 0.75).unwrap();
        assert!((est - truth).abs() < 0.15, "{est} vs {truth}");
    }

    #[test]
    fn two_stage_superquantile_on_constant_outcomes() {
        let data = dataset((0..20).map(|i| (vec![i as f64 / 20.0], 1, 2.0)).collect());
        let m = two_stage_superquantile(
            &data,
            1,
            0.75,
            QuantileMethod::Linear,
            RegressorKind::Ols,
            ArmSplit::EvenOdd,
            0,
        )
        .unwrap();
        // every Y sits on its quantile, so omega = Y / (1 - tau) = 4 Y
        assert!((m.predict(&[0.3]) - 8.0).abs() < 1e-9);
    }

    #[test]
    fn two_stage_superquantile_tracks_oracle() {
        // Y = 2 x0 - 1 + Z: the conditional superquantile is linear in x, so
        // linear quantile regression followed by OLS is well specified. The
        // target Y 1{Y >= q} moves with first-stage error in proportion to q,
        // so the design keeps q near zero.
        let mut rng = rng_from_seed(6);
        let data = dataset(
            (0..10_000)
                .map(|_| {
                    let x: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
                    let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                    let y = 2.0 * x[0] - 1.0 + z;
                    (x, 1, y)
                })
                .collect(),
        );
        let m = two_stage_superquantile(
            &data,
            1,
            0.75,
            QuantileMethod::Linear,
            RegressorKind::Ols,
            ArmSplit::EvenOdd,
            2,
        )
        .unwrap();
        let phi = (-Z75 * Z75 / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        for x0 in [0.2, 0.5, 0.8] {
            let truth = 2.0 * x0 - 1.0 + phi / 0.25;
            let est = m.predict(&[x0, 0.5, 0.5]);
            assert!((est - truth).abs() < 0.2, "{est} vs {truth} at {x0}");
        }
    }

    #[test]
    fn two_stage_needs_four_rows() {
        let data = dataset(
            (0..3)
                .map(|i| (vec![i as f64], 1, 1.0))
                .chain([(vec![0.0], 0, 0.0)])
                .collect(),
        );
        assert!(matches!(
            two_stage_superquantile(
                &data,
                1,
                0.5,
                QuantileMethod::Linear,
                RegressorKind::Ols,
                ArmSplit::EvenOdd,
                0
            ),
            Err(CdteError::DegenerateSplit(_))
        ));
    }

    struct Fixed(f64);
    impl Regressor for Fixed {
        fn predict(&self, _x: &[f64]) -> f64 {
            self.0
        }
        fn n_features(&self) -> usize {
            1
        }
        fn n_train(&self) -> usize {
            0
        }
    }

    #[test]
    fn density_of_uniform_outcomes() {
        let mut rng = rng_from_seed(8);
        let data = dataset(
            (0..5000)
                .map(|_| (vec![rng.random::<f64>()], 1, rng.random::<f64>()))
                .collect(),
        );
        let f = density_at_quantile(&data, 1, &Fixed(0.5), 0.1, RegressorKind::Forest, ArmSplit::EvenOdd, 3).unwrap();
        let est = f.predict(&[0.5]);
        assert!((est - 1.0).abs() < 0.15, "{est}");
    }

    #[test]
    fn density_floor_applies() {
        let mut rng = rng_from_seed(9);
        let data = dataset(
            (0..200)
                .map(|_| (vec![rng.random::<f64>()], 1, rng.random::<f64>()))
                .collect(),
        );
        let f = density_at_quantile(&data, 1, &Fixed(1e3), 0.1, RegressorKind::Ols, ArmSplit::EvenOdd, 3).unwrap();
        assert_eq!(f.predict_checked(&[0.5]), (DENSITY_FLOOR, true));
        assert!(density_at_quantile(&data, 1, &Fixed(0.0), 0.0, RegressorKind::Ols, ArmSplit::EvenOdd, 3).is_err());
    }

    #[test]
    fn gaussian_kernel_integrates_to_one() {
        for b in [0.05, 1.0, 3.0] {
            let h = 1e-3 * b;
            let total: f64 = (-20_000..20_000)
                .map(|i| gaussian_kernel(i as f64 * h / b) / b * h)
                .sum();
            assert!((total - 1.0).abs() < 1e-9, "{total}");
        }
    }

    #[test]
    fn kernel_evar_edge_cases() {
        let one = dataset(vec![(vec![0.1], 1, 3.5), (vec![0.2], 0, 1.0)]);
        assert_eq!(kernel_evar(&one, 1, 0.7, &[0.5]).unwrap().risk, 3.5);
        let data = dataset((0..30).map(|i| (vec![i as f64 / 30.0], 1, (i % 7) as f64)).collect());
        let x = [0.4];
        let w = KernelWeights::fit(&data.features(), BandwidthRule::Silverman)
            .unwrap()
            .weights(&x);
        let mean: f64 = w.as_slice().iter().zip(data.outcomes()).map(|(w, y)| w * y).sum();
        assert!((kernel_evar(&data, 1, 0.0, &x).unwrap().risk - mean).abs() < 1e-9);
    }

    #[test]
    fn linear_quantile_on_exact_line() {
        let mut rng = rng_from_seed(10);
        let x: Vec<Vec<f64>> = (0..400).map(|_| vec![rng.random::<f64>()]).collect();
        let noise = Normal::new(0.0, 1.0).unwrap();
        let y: Vec<f64> = x.iter().map(|r| 1.0 + 2.0 * r[0] + noise.sample(&mut rng)).collect();
        let m = fit_linear_quantile(&x, &y, 0.75).unwrap();
        // population line is 1 + Z75 + 2 x
        assert!((m.inner.coef[0] - (1.0 + Z75)).abs() < 0.35, "{:?}", m.inner.coef);
        assert!((m.inner.coef[1] - 2.0).abs() < 0.6, "{:?}", m.inner.coef);
        let below = x.iter().zip(&y).filter(|(r, t)| **t <= m.predict(r)).count() as f64 / 400.0;
        assert!((below - 0.75).abs() < 0.03, "{below}");
    }

    #[test]
    fn arm_split_halves_partition() {
        let (a, b) = ArmSplit::EvenOdd.halves(5);
        assert_eq!(a, vec![0, 2, 4]);
        assert_eq!(b, vec![1, 3]);
        let (c, d) = ArmSplit::Shuffled { seed: 4 }.halves(9);
        let mut all: Vec<usize> = c.into_iter().chain(d).collect();
        all.sort();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
    }
}
