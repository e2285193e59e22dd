use nalgebra::{Cholesky, DMatrix, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::kernel::{squared_exponential, KernelParams};
use crate::error::{Error, Result};

/// How observation noise enters the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NoiseMode {
    /// Interpolating model; only the jitter schedule touches the diagonal.
    Noiseless,
    /// Known noise variance, in the original output units.
    Fixed { variance: f64 },
    /// Noise variance fitted with the other hyperparameters, within bounds
    /// expressed on standardized outputs.
    Learned { lower: f64, upper: f64 },
}

/// Diagonal jitter escalation used when a factorization fails.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterSchedule {
    pub initial: f64,
    pub factor: f64,
    pub max: f64,
}

impl Default for JitterSchedule {
    fn default() -> Self {
        Self { initial: 1e-8, factor: 10.0, max: 1e-2 }
    }
}

/// Settings shared by fitting, conditioning and likelihood evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpSettings {
    /// Domain bounds used to scale inputs to `[0, 1]`. When absent the
    /// training data range is used and frozen into the model.
    pub input_bounds: Option<Vec<(f64, f64)>>,
    pub noise: NoiseMode,
    pub jitter: JitterSchedule,
    pub variance_floor: f64,
}

impl Default for GpSettings {
    fn default() -> Self {
        Self {
            input_bounds: None,
            noise: NoiseMode::Noiseless,
            jitter: JitterSchedule::default(),
            variance_floor: 1e-12,
        }
    }
}

/// Per-dimension affine map onto `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    lower: Vec<f64>,
    range: Vec<f64>,
}

impl InputScaling {
    pub fn from_bounds(bounds: &[(f64, f64)]) -> Result<Self> {
        if bounds.iter().any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && hi > lo)) {
            return Err(Error::InvalidParameter(format!("invalid input bounds {bounds:?}")));
        }
        Ok(Self {
            lower: bounds.iter().map(|b| b.0).collect(),
            range: bounds.iter().map(|b| b.1 - b.0).collect(),
        })
    }

    pub fn from_data(inputs: &[Vec<f64>], dims: usize) -> Self {
        let mut lower = vec![f64::INFINITY; dims];
        let mut upper = vec![f64::NEG_INFINITY; dims];
        for x in inputs {
            for d in 0..dims {
                lower[d] = lower[d].min(x[d]);
                upper[d] = upper[d].max(x[d]);
            }
        }
        let range = lower
            .iter()
            .zip(&upper)
            .map(|(lo, hi)| if hi - lo > 0.0 { hi - lo } else { 1.0 })
            .collect();
        let lower = lower.into_iter().map(|v| if v.is_finite() { v } else { 0.0 }).collect();
        Self { lower, range }
    }

    pub(crate) fn for_settings(settings: &GpSettings, dataset: &Dataset) -> Result<Self> {
        match &settings.input_bounds {
            Some(b) => {
                if b.len() != dataset.dims() {
                    return Err(Error::DimensionMismatch { expected: dataset.dims(), got: b.len() });
                }
                Self::from_bounds(b)
            }
            None => Ok(Self::from_data(dataset.inputs(), dataset.dims())),
        }
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn range(&self) -> &[f64] {
        &self.range
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for d in 0..self.lower.len() {
            out[d] = (x[d] - self.lower[d]) / self.range[d];
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.apply_into(x, &mut out);
        out
    }
}

/// Posterior mean and latent variance at a query point, in original units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorPrediction {
    pub mean: f64,
    pub variance: f64,
}

impl PosteriorPrediction {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Training data mapped to working coordinates.
pub(crate) struct Prepared {
    pub x: Vec<f64>,
    pub n: usize,
    pub dims: usize,
    pub y: Vec<f64>,
    pub mean: f64,
    pub scale: f64,
}

impl Prepared {
    pub fn new(dataset: &Dataset, k: usize, scaling: &InputScaling) -> Result<Self> {
        if k >= dataset.constraint_count() {
            return Err(Error::InvalidParameter(format!(
                "constraint index {k} out of range for {} constraints",
                dataset.constraint_count()
            )));
        }
        if scaling.dims() != dataset.dims() {
            return Err(Error::DimensionMismatch { expected: dataset.dims(), got: scaling.dims() });
        }
        let n = dataset.len();
        let dims = dataset.dims();
        let mut x = vec![0.0; n * dims];
        for (i, row) in dataset.inputs().iter().enumerate() {
            scaling.apply_into(row, &mut x[i * dims..(i + 1) * dims]);
        }
        let raw = dataset.observations(k);
        let mean = raw.iter().sum::<f64>() / n.max(1) as f64;
        let var = raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
        let scale = if var.sqrt() > 1e-12 * mean.abs().max(1.0) { var.sqrt() } else { 1.0 };
        let y = raw.iter().map(|v| (v - mean) / scale).collect();
        Ok(Self { x, n, dims, y, mean, scale })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dims..(i + 1) * self.dims]
    }

    pub fn kernel_matrix(&self, params: &KernelParams) -> DMatrix<f64> {
        let inv = params.inverse_squared_lengthscales();
        let mut k = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            k[(i, i)] = params.signal_variance;
            for j in 0..i {
                let v = squared_exponential(self.row(i), self.row(j), &inv, params.signal_variance);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    /// Standardized noise variance implied by the noise mode.
    pub fn noise_for(&self, noise: &NoiseMode, fallback: f64) -> f64 {
        match noise {
            NoiseMode::Noiseless => 0.0,
            NoiseMode::Fixed { variance } => variance / (self.scale * self.scale),
            NoiseMode::Learned { .. } => fallback,
        }
    }
}

/// Factorizes `K + (noise + jitter) I`, escalating jitter on failure.
pub(crate) fn factorize(
    k: &DMatrix<f64>,
    noise: f64,
    schedule: &JitterSchedule,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut jitter = schedule.initial;
    loop {
        let mut m = k.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += noise + jitter;
        }
        if let Some(ch) = Cholesky::new(m) {
            return Ok((ch, jitter));
        }
        jitter *= schedule.factor;
        if jitter <= 0.0 || schedule.factor <= 1.0 || jitter > schedule.max * (1.0 + 1e-9) {
            return Err(Error::IllConditioned { max_jitter: schedule.max });
        }
    }
}

/// Gaussian log marginal likelihood of standardized observations of
/// constraint `k` under `params`.
pub fn log_marginal_likelihood(
    dataset: &Dataset,
    k: usize,
    params: &KernelParams,
    settings: &GpSettings,
) -> Result<f64> {
    if dataset.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: dataset.len() });
    }
    params.validate()?;
    if params.lengthscales.len() != dataset.dims() {
        return Err(Error::DimensionMismatch { expected: dataset.dims(), got: params.lengthscales.len() });
    }
    let scaling = InputScaling::for_settings(settings, dataset)?;
    let prep = Prepared::new(dataset, k, &scaling)?;
    let kmat = prep.kernel_matrix(params);
    let (ch, _) = factorize(&kmat, params.noise_variance, &settings.jitter)?;
    Ok(lml_from_factor(&ch, &prep.y))
}

pub(crate) fn lml_from_factor(ch: &Cholesky<f64, Dyn>, y: &[f64]) -> f64 {
    let n = y.len();
    let yv = nalgebra::DVector::from_column_slice(y);
    let alpha = ch.solve(&yv);
    let log_det_half: f64 = ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    -0.5 * yv.dot(&alpha) - log_det_half - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// A Gaussian process conditioned on one constraint's observations.
///
/// Immutable once built; conditioning on new data produces a new model.
#[derive(Clone, Debug)]
pub struct GpModel {
    params: KernelParams,
    settings: GpSettings,
    input_scaling: InputScaling,
    training_inputs: Vec<Vec<f64>>,
    x: Vec<f64>,
    n: usize,
    dims: usize,
    prior_mean: f64,
    output_scale: f64,
    alpha: Vec<f64>,
    /// Column-major lower factor of `K + (noise + jitter) I`.
    factor: Vec<f64>,
    jitter: f64,
    inv_ls2: Vec<f64>,
}

impl GpModel {
    /// Conditions a model on constraint `k` of `dataset` with fixed hyperparameters.
    ///
    /// With [`NoiseMode::Fixed`] the noise variance in `params` is replaced by
    /// the one implied by the known noise level. An empty dataset yields the
    /// zero-mean prior.
    pub fn condition(
        dataset: &Dataset,
        k: usize,
        params: KernelParams,
        scaling: InputScaling,
        settings: &GpSettings,
    ) -> Result<Self> {
        if params.lengthscales.len() != dataset.dims() {
            return Err(Error::DimensionMismatch { expected: dataset.dims(), got: params.lengthscales.len() });
        }
        let prep = Prepared::new(dataset, k, &scaling)?;
        let mut params = params;
        params.noise_variance = prep.noise_for(&settings.noise, params.noise_variance);
        params.validate()?;
        let kmat = prep.kernel_matrix(&params);
        let (ch, jitter) = factorize(&kmat, params.noise_variance, &settings.jitter)?;
        let alpha = ch.solve(&nalgebra::DVector::from_column_slice(&prep.y));
        let factor = ch.unpack();
        Ok(Self {
            inv_ls2: params.inverse_squared_lengthscales(),
            params,
            settings: settings.clone(),
            input_scaling: scaling,
            training_inputs: dataset.inputs().to_vec(),
            x: prep.x,
            n: prep.n,
            dims: prep.dims,
            prior_mean: prep.mean,
            output_scale: prep.scale,
            alpha: alpha.as_slice().to_vec(),
            factor: factor.as_slice().to_vec(),
            jitter,
        })
    }

    /// Re-conditions on new data keeping hyperparameters and input scaling.
    pub fn recondition(&self, dataset: &Dataset, k: usize) -> Result<Self> {
        Self::condition(dataset, k, self.params.clone(), self.input_scaling.clone(), &self.settings)
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn settings(&self) -> &GpSettings {
        &self.settings
    }

    pub fn input_scaling(&self) -> &InputScaling {
        &self.input_scaling
    }

    pub fn training_inputs(&self) -> &[Vec<f64>] {
        &self.training_inputs
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Constant prior mean, in original units.
    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    /// Prior (signal) variance, in original units.
    pub fn prior_variance(&self) -> f64 {
        self.params.signal_variance * self.output_scale * self.output_scale
    }

    /// Standard deviation used to standardize the training outputs.
    pub fn output_scale(&self) -> f64 {
        self.output_scale
    }

    /// Jitter that was needed for the factorization to succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Diagonal term added to the kernel matrix, in original units.
    pub fn effective_noise_variance(&self) -> f64 {
        (self.params.noise_variance + self.jitter) * self.output_scale * self.output_scale
    }

    /// Lower-triangular factor as a dense matrix.
    pub fn factor(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n, self.n, &self.factor)
    }

    /// Precomputed `(K + sigma^2 I)^-1 (y - mu)` in standardized units.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn predict(&self, query: &[f64]) -> Result<PosteriorPrediction> {
        if query.len() != self.dims {
            return Err(Error::DimensionMismatch { expected: self.dims, got: query.len() });
        }
        let mut scratch = Scratch::new(self.n, self.dims);
        let (mean, var) = self.predict_with(query, &mut scratch);
        Ok(self.clamp(mean, var))
    }

    /// Mean and the unclamped latent variance, in original units.
    pub fn predict_raw(&self, query: &[f64]) -> Result<(f64, f64)> {
        if query.len() != self.dims {
            return Err(Error::DimensionMismatch { expected: self.dims, got: query.len() });
        }
        let mut scratch = Scratch::new(self.n, self.dims);
        Ok(self.predict_with(query, &mut scratch))
    }

    /// Predicts every query in parallel; dimensions must match.
    pub fn predict_many(&self, queries: &[&[f64]]) -> Result<Vec<PosteriorPrediction>> {
        if let Some(q) = queries.iter().find(|q| q.len() != self.dims) {
            return Err(Error::DimensionMismatch { expected: self.dims, got: q.len() });
        }
        Ok(queries
            .par_iter()
            .map_init(
                || Scratch::new(self.n, self.dims),
                |s, q| {
                    let (m, v) = self.predict_with(q, s);
                    self.clamp(m, v)
                },
            )
            .collect())
    }

    fn clamp(&self, mean: f64, var: f64) -> PosteriorPrediction {
        PosteriorPrediction { mean, variance: var.max(self.settings.variance_floor) }
    }

    fn predict_with(&self, query: &[f64], s: &mut Scratch) -> (f64, f64) {
        let n = self.n;
        self.input_scaling.apply_into(query, &mut s.q);
        let sv = self.params.signal_variance;
        let mut mean = 0.0;
        for i in 0..n {
            let kv = squared_exponential(&s.q, &self.x[i * self.dims..(i + 1) * self.dims], &self.inv_ls2, sv);
            s.v[i] = kv;
            mean += kv * self.alpha[i];
        }
        // forward substitution L v = k, walking contiguous columns
        let l = &self.factor;
        let mut quad = 0.0;
        for j in 0..n {
            let col = &l[j * n..(j + 1) * n];
            let vj = s.v[j] / col[j];
            quad += vj * vj;
            for i in j + 1..n {
                s.v[i] -= col[i] * vj;
            }
        }
        let scale2 = self.output_scale * self.output_scale;
        (self.prior_mean + self.output_scale * mean, (sv - quad) * scale2)
    }
}

struct Scratch {
    q: Vec<f64>,
    v: Vec<f64>,
}

impl Scratch {
    fn new(n: usize, dims: usize) -> Self {
        Self { q: vec![0.0; dims], v: vec![0.0; n] }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        Dataset::from_rows(
            vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![0.3, 0.9]],
            vec![vec![1.0], vec![-2.0], vec![0.5]],
        )
        .unwrap()
    }

    #[test]
    fn single_point_interpolates() {
        let ds = Dataset::from_rows(vec![vec![0.4]], vec![vec![2.5]]).unwrap();
        // The residual variance at a training point equals the jitter to first order.
        let settings = GpSettings {
            input_bounds: Some(vec![(0.0, 1.0)]),
            jitter: JitterSchedule { initial: 1e-12, ..Default::default() },
            ..Default::default()
        };
        let scaling = InputScaling::for_settings(&settings, &ds).unwrap();
        let m = GpModel::condition(&ds, 0, KernelParams::isotropic(1, 1.0, 1.0, 0.0), scaling, &settings)
            .unwrap();
        let p = m.predict(&[0.4]).unwrap();
        assert!((p.mean - 2.5).abs() < 1e-12);
        assert!(p.variance <= 1e-10);
    }

    #[test]
    fn empty_dataset_gives_the_prior() {
        let ds = Dataset::new(2, 1).unwrap();
        let settings = GpSettings { input_bounds: Some(vec![(0.0, 1.0); 2]), ..Default::default() };
        let scaling = InputScaling::for_settings(&settings, &ds).unwrap();
        let m = GpModel::condition(&ds, 0, KernelParams::isotropic(2, 0.3, 1.3, 0.0), scaling, &settings)
            .unwrap();
        let p = m.predict(&[0.2, 0.7]).unwrap();
        assert_eq!(p.mean, 0.0);
        assert!((p.variance - 1.3).abs() < 1e-15);
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let ds = toy();
        let settings = GpSettings { input_bounds: Some(vec![(0.0, 1.0); 2]), ..Default::default() };
        let scaling = InputScaling::for_settings(&settings, &ds).unwrap();
        let m = GpModel::condition(&ds, 0, KernelParams::isotropic(2, 0.3, 1.3, 0.0), scaling, &settings)
            .unwrap();
        let p = m.predict(&[1e3, -1e3]).unwrap();
        assert!((p.mean - m.prior_mean()).abs() < 1e-6);
        assert!((p.variance - m.prior_variance()).abs() < 1e-6);
    }

    #[test]
    fn factor_reproduces_kernel_matrix() {
        let ds = toy();
        let settings = GpSettings { noise: NoiseMode::Fixed { variance: 0.01 }, ..Default::default() };
        let scaling = InputScaling::for_settings(&settings, &ds).unwrap();
        let m = GpModel::condition(&ds, 0, KernelParams::isotropic(2, 0.7, 1.0, 0.0), scaling.clone(), &settings)
            .unwrap();
        let prep = Prepared::new(&ds, 0, &scaling).unwrap();
        let mut kmat = prep.kernel_matrix(m.params());
        for i in 0..3 {
            kmat[(i, i)] += m.params().noise_variance + m.jitter();
        }
        let l = m.factor();
        let rel = (&l * l.transpose() - &kmat).norm() / kmat.norm();
        assert!(rel < 1e-8, "relative Frobenius error {rel}");
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let ds = toy();
        let settings = GpSettings::default();
        let scaling = InputScaling::for_settings(&settings, &ds).unwrap();
        let m = GpModel::condition(&ds, 0, KernelParams::isotropic(2, 0.5, 1.0, 0.0), scaling, &settings)
            .unwrap();
        assert!(matches!(m.predict(&[0.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn lml_needs_two_points() {
        let ds = Dataset::from_rows(vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        let r = log_marginal_likelihood(&ds, 0, &KernelParams::isotropic(1, 1.0, 1.0, 0.0), &GpSettings::default());
        assert!(matches!(r, Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn singular_kernel_reports_ill_conditioning() {
        let mut ds = Dataset::new(1, 1).unwrap().with_duplicates(true);
        ds.push(vec![0.5], &[1.0]).unwrap();
        ds.push(vec![0.5], &[2.0]).unwrap();
        let settings = GpSettings {
            input_bounds: Some(vec![(0.0, 1.0)]),
            jitter: JitterSchedule { initial: 1e-300, factor: 10.0, max: 1e-299 },
            ..Default::default()
        };
        let scaling = InputScaling::for_settings(&settings, &ds).unwrap();
        let r = GpModel::condition(&ds, 0, KernelParams::isotropic(1, 1.0, 1.0, 0.0), scaling.clone(), &settings);
        assert!(matches!(r, Err(Error::IllConditioned { .. })));

        // the default schedule recovers by escalating jitter
        let settings = GpSettings { input_bounds: Some(vec![(0.0, 1.0)]), ..Default::default() };
        let m = GpModel::condition(&ds, 0, KernelParams::isotropic(1, 1.0, 1.0, 0.0), scaling, &settings).unwrap();
        assert!(m.jitter() >= 1e-8);
    }
}
