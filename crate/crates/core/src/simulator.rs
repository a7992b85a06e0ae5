//! Synthetic cohorts with known ground truth.
//!
//! The parameter-level generator draws edge estimates directly from the
//! additive model
//!
//! ```text
//! estimate = Z_i + W_iv + U            per edge
//! Z_i  ~ Normal(mu, between_var)       stable subject trait
//! W_iv ~ Normal(0, state_var)          session state, fresh per visit
//! U    ~ Normal(0, c / ell)            sampling noise at scan length ell
//! ```
//!
//! Half-length estimates carry noise of variance `2c/ell`. The odd/even
//! pair shares the session state `W_iv` (interleaved samples cover the
//! same period); the first/second-half pair gets independent state draws
//! (different periods). These are exactly the contrasts the
//! single-session estimator inverts.
//!
//! The time-series generator instead builds a per-subject correlation
//! matrix from a latent factor loading `A_i = G + E_i` and draws
//! Gaussian series from it, so the full pipeline (truncation,
//! correlation, subsampling) can run end to end on files.
//!
//! All randomness derives from one 64-bit seed. Every (subject, visit,
//! component, scan length) combination gets its own counter-derived
//! ChaCha8 stream, so generation order and parallelism cannot affect
//! output.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::connectivity::{devectorize, edge_count, EdgeVector};
use crate::error::{Error, Result};
use crate::timeseries::{default_region_ids, TimeSeriesMatrix};

/// Generative model parameters. Per-edge vectors follow canonical edge
/// order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerativeParams {
    pub n_subjects: usize,
    pub q: usize,
    /// Group-mean connectivity per edge, each in (-1, 1).
    pub mu: Vec<f64>,
    /// Between-subject variance of the stable trait per edge.
    pub between_var: Vec<f64>,
    /// Session-state variance per edge.
    pub state_var: Vec<f64>,
    /// Sampling-noise coefficient per edge: noise variance is `c / ell`.
    pub sampling_coeff: Vec<f64>,
    pub scan_lengths: Vec<usize>,
    pub seed: u64,
}

fn expect_len(field: &'static str, v: &[f64], m: usize) -> Result<()> {
    if v.len() != m {
        return Err(Error::InvalidParams {
            field: field.into(),
            message: format!("expected {m} per-edge values, got {}", v.len()),
        });
    }
    Ok(())
}

fn expect_nonneg(field: &'static str, v: &[f64]) -> Result<()> {
    for (i, &x) in v.iter().enumerate() {
        if !x.is_finite() || x < 0.0 {
            return Err(Error::InvalidParams {
                field: field.into(),
                message: format!("entry {i} is {x}, must be finite and >= 0"),
            });
        }
    }
    Ok(())
}

impl GenerativeParams {
    pub fn n_edges(&self) -> usize {
        edge_count(self.q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::InvalidParams {
                field: "n_subjects".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.q < 2 {
            return Err(Error::InvalidParams {
                field: "q".into(),
                message: format!("need at least 2 regions, got {}", self.q),
            });
        }
        let m = self.n_edges();
        expect_len("mu", &self.mu, m)?;
        for (i, &x) in self.mu.iter().enumerate() {
            if !x.is_finite() || x.abs() >= 1.0 {
                return Err(Error::InvalidParams {
                    field: "mu".into(),
                    message: format!("entry {i} is {x}, must lie in (-1, 1)"),
                });
            }
        }
        expect_len("between_var", &self.between_var, m)?;
        expect_nonneg("between_var", &self.between_var)?;
        expect_len("state_var", &self.state_var, m)?;
        expect_nonneg("state_var", &self.state_var)?;
        expect_len("sampling_coeff", &self.sampling_coeff, m)?;
        expect_nonneg("sampling_coeff", &self.sampling_coeff)?;
        if self.scan_lengths.is_empty() {
            return Err(Error::InvalidParams {
                field: "scan_lengths".into(),
                message: "must list at least one scan length".into(),
            });
        }
        let mut prev = 1;
        for (i, &ell) in self.scan_lengths.iter().enumerate() {
            if ell < 2 {
                return Err(Error::InvalidParams {
                    field: "scan_lengths".into(),
                    message: format!("entry {i} is {ell}, must be >= 2"),
                });
            }
            if ell <= prev && i > 0 {
                return Err(Error::InvalidParams {
                    field: "scan_lengths".into(),
                    message: format!("entry {i} ({ell}) must exceed entry {} ({prev})", i - 1),
                });
            }
            prev = ell;
        }
        Ok(())
    }

    /// Parse from TOML. Per-edge fields accept either a single number
    /// (broadcast to every edge) or a full-length list.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        #[derive(serde::Deserialize)]
        #[serde(untagged)]
        enum PerEdge {
            Scalar(f64),
            List(Vec<f64>),
        }
        #[derive(serde::Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            n_subjects: usize,
            q: usize,
            mu: PerEdge,
            between_var: PerEdge,
            state_var: PerEdge,
            sampling_coeff: PerEdge,
            scan_lengths: Vec<usize>,
            seed: u64,
            // consumed by the CLI layer, tolerated here
            #[serde(default)]
            #[allow(dead_code)]
            t_total: Option<usize>,
        }
        let raw: Raw = toml::from_str(text).map_err(|e| Error::Schema {
            context: "params".into(),
            message: e.to_string(),
        })?;
        let m = edge_count(raw.q.max(2));
        let expand = |p: PerEdge| -> Vec<f64> {
            match p {
                PerEdge::Scalar(v) => vec![v; m],
                PerEdge::List(v) => v,
            }
        };
        let params = GenerativeParams {
            n_subjects: raw.n_subjects,
            q: raw.q,
            mu: expand(raw.mu),
            between_var: expand(raw.between_var),
            state_var: expand(raw.state_var),
            sampling_coeff: expand(raw.sampling_coeff),
            scan_lengths: raw.scan_lengths,
            seed: raw.seed,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Optional `t_total` field of a params file (series length for the
/// time-series generator; defaults to the largest scan length).
pub fn t_total_from_toml_str(text: &str) -> Result<Option<usize>> {
    #[derive(serde::Deserialize)]
    struct Raw {
        t_total: Option<usize>,
    }
    let raw: Raw = toml::from_str(text).map_err(|e| Error::Schema {
        context: "params".into(),
        message: e.to_string(),
    })?;
    Ok(raw.t_total)
}

const SALT_SUBJECT: u64 = 0xA076_1D64_78BD_642F;
const SALT_VISIT: u64 = 0xE703_7ED1_A0B4_28DB;
const SALT_COMPONENT: u64 = 0x8EBC_6AF0_9C88_C6E3;
const SALT_LENGTH: u64 = 0x5899_65CC_7537_4CC3;

/// Stream components. Each value keys an independent random stream.
#[derive(Debug, Clone, Copy)]
enum StreamTag {
    LongTerm = 1,
    SessionDeviation = 2,
    NoiseFull = 3,
    NoiseOdd = 4,
    NoiseEven = 5,
    HalfDeviation1 = 6,
    HalfDeviation2 = 7,
    NoiseHalf1 = 8,
    NoiseHalf2 = 9,
    LoadingStable = 10,
    Series = 11,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the ChaCha8 stream for one (subject, visit, component, scan
/// length) cell. Subject-level draws use `visit = 0`; length-independent
/// draws use `length_idx = usize::MAX` mapped to counter 0.
fn stream_rng(seed: u64, subject: usize, visit: usize, tag: StreamTag, length_idx: usize) -> ChaCha8Rng {
    let len_counter = if length_idx == usize::MAX { 0 } else { length_idx as u64 + 1 };
    let mut s = seed;
    s = splitmix64(s ^ SALT_SUBJECT.wrapping_add(subject as u64));
    s = splitmix64(s ^ SALT_VISIT.wrapping_add(visit as u64));
    s = splitmix64(s ^ SALT_COMPONENT.wrapping_add(tag as u64));
    s = splitmix64(s ^ SALT_LENGTH.wrapping_add(len_counter));
    ChaCha8Rng::seed_from_u64(s)
}

/// `len` standard normal draws from one derived stream.
fn normals(seed: u64, subject: usize, visit: usize, tag: StreamTag, length_idx: usize, len: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, subject, visit, tag, length_idx);
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Latent truth for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTruth {
    /// Stable trait `Z_i` per edge.
    pub long_term: Vec<f64>,
    /// Session deviation `W_iv` per visit (index 0 = visit 1).
    pub session_deviation: [Vec<f64>; 2],
}

/// The five derived estimates for one (subject, visit, scan length).
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateBundle {
    pub full: EdgeVector,
    pub odd: EdgeVector,
    pub even: EdgeVector,
    pub first_half: EdgeVector,
    pub second_half: EdgeVector,
}

/// Which of the five estimates in a bundle to select.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateSelector {
    Full,
    Odd,
    Even,
    FirstHalf,
    SecondHalf,
}

impl EstimateBundle {
    pub fn get(&self, sel: EstimateSelector) -> &EdgeVector {
        match sel {
            EstimateSelector::Full => &self.full,
            EstimateSelector::Odd => &self.odd,
            EstimateSelector::Even => &self.even,
            EstimateSelector::FirstHalf => &self.first_half,
            EstimateSelector::SecondHalf => &self.second_half,
        }
    }
}

/// A generated cohort: latent truth plus every derived estimate for two
/// visits at every requested scan length.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub params: GenerativeParams,
    pub subject_ids: Vec<String>,
    pub truth: Vec<SubjectTruth>,
    /// `estimates[subject][visit - 1][length_idx]`
    pub estimates: Vec<[Vec<EstimateBundle>; 2]>,
}

impl SyntheticCohort {
    /// `(subject_id, estimate)` pairs for one visit, scan length, and
    /// estimate flavor, in subject order.
    pub fn collect_at(
        &self,
        visit: usize,
        length_idx: usize,
        sel: EstimateSelector,
    ) -> Result<Vec<(String, EdgeVector)>> {
        if visit != 1 && visit != 2 {
            return Err(Error::OutOfRange(format!("visit {visit} not in {{1, 2}}")));
        }
        if length_idx >= self.params.scan_lengths.len() {
            return Err(Error::OutOfRange(format!(
                "scan length index {length_idx} out of range"
            )));
        }
        Ok(self
            .subject_ids
            .iter()
            .zip(&self.estimates)
            .map(|(id, visits)| (id.clone(), visits[visit - 1][length_idx].get(sel).clone()))
            .collect())
    }
}

/// Zero-padded subject ids `s0001..`.
pub fn subject_ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("s{i:04}")).collect()
}

fn noisy(center: &[f64], var: &[f64], noise: &[f64], region_ids: &[String]) -> EdgeVector {
    let values: Vec<f64> = (0..center.len())
        .map(|e| center[e] + var[e].sqrt() * noise[e])
        .collect();
    EdgeVector::from_values(values, region_ids.to_vec()).expect("finite by construction")
}

/// Draw a full cohort of edge estimates from the additive model.
/// Deterministic in `params.seed`; per-subject work is parallel and
/// order-independent.
pub fn simulate_parameter_level(params: &GenerativeParams) -> Result<SyntheticCohort> {
    params.validate()?;
    let m = params.n_edges();
    let ids = subject_ids(params.n_subjects);
    let region_ids = default_region_ids(params.q);
    let seed = params.seed;
    let per_subject = |i: usize| -> (SubjectTruth, [Vec<EstimateBundle>; 2]) {
        let z_noise = normals(seed, i, 0, StreamTag::LongTerm, usize::MAX, m);
        let z: Vec<f64> = (0..m)
            .map(|e| params.mu[e] + params.between_var[e].sqrt() * z_noise[e])
            .collect();
        let mut visits: [Vec<EstimateBundle>; 2] = [Vec::new(), Vec::new()];
        let mut deviations: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for v in 1..=2usize {
            let w_noise = normals(seed, i, v, StreamTag::SessionDeviation, usize::MAX, m);
            let w: Vec<f64> = (0..m)
                .map(|e| params.state_var[e].sqrt() * w_noise[e])
                .collect();
            let wh1_noise = normals(seed, i, v, StreamTag::HalfDeviation1, usize::MAX, m);
            let wh2_noise = normals(seed, i, v, StreamTag::HalfDeviation2, usize::MAX, m);
            let session: Vec<f64> = (0..m).map(|e| z[e] + w[e]).collect();
            let half1: Vec<f64> = (0..m)
                .map(|e| z[e] + params.state_var[e].sqrt() * wh1_noise[e])
                .collect();
            let half2: Vec<f64> = (0..m)
                .map(|e| z[e] + params.state_var[e].sqrt() * wh2_noise[e])
                .collect();
            let mut bundles = Vec::with_capacity(params.scan_lengths.len());
            for (j, &ell) in params.scan_lengths.iter().enumerate() {
                let var_full: Vec<f64> =
                    (0..m).map(|e| params.sampling_coeff[e] / ell as f64).collect();
                let var_half: Vec<f64> = var_full.iter().map(|v| 2.0 * v).collect();
                let full = noisy(
                    &session,
                    &var_full,
                    &normals(seed, i, v, StreamTag::NoiseFull, j, m),
                    &region_ids,
                );
                let odd = noisy(
                    &session,
                    &var_half,
                    &normals(seed, i, v, StreamTag::NoiseOdd, j, m),
                    &region_ids,
                );
                let even = noisy(
                    &session,
                    &var_half,
                    &normals(seed, i, v, StreamTag::NoiseEven, j, m),
                    &region_ids,
                );
                let first_half = noisy(
                    &half1,
                    &var_half,
                    &normals(seed, i, v, StreamTag::NoiseHalf1, j, m),
                    &region_ids,
                );
                let second_half = noisy(
                    &half2,
                    &var_half,
                    &normals(seed, i, v, StreamTag::NoiseHalf2, j, m),
                    &region_ids,
                );
                bundles.push(EstimateBundle {
                    full,
                    odd,
                    even,
                    first_half,
                    second_half,
                });
            }
            visits[v - 1] = bundles;
            deviations[v - 1] = w;
        }
        (
            SubjectTruth {
                long_term: z,
                session_deviation: deviations,
            },
            visits,
        )
    };
    let generated: Vec<(SubjectTruth, [Vec<EstimateBundle>; 2])> =
        (0..params.n_subjects).into_par_iter().map(per_subject).collect();
    let mut truth = Vec::with_capacity(params.n_subjects);
    let mut estimates = Vec::with_capacity(params.n_subjects);
    for (t, e) in generated {
        truth.push(t);
        estimates.push(e);
    }
    Ok(SyntheticCohort {
        params: params.clone(),
        subject_ids: ids,
        truth,
        estimates,
    })
}

/// Population shrinkage weight per edge at scan length `ell`:
/// `(state_var + c/ell) / (state_var + c/ell + between_var)`, taken as 0
/// when every term vanishes.
pub fn ground_truth_lambda(params: &GenerativeParams, ell: usize) -> Result<Vec<f64>> {
    params.validate()?;
    if ell < 2 {
        return Err(Error::InvalidParams {
            field: "ell".into(),
            message: format!("scan length {ell} must be >= 2"),
        });
    }
    Ok((0..params.n_edges())
        .map(|e| {
            let noise = params.state_var[e] + params.sampling_coeff[e] / ell as f64;
            let denom = noise + params.between_var[e];
            if denom == 0.0 {
                0.0
            } else {
                noise / denom
            }
        })
        .collect())
}

/// Relative eigenvalue floor for the factor construction.
const FACTOR_TOLERANCE: f64 = 1e-10;
/// Diagonal jitter keeping subject covariances positive definite.
const DIAG_FLOOR: f64 = 1e-6;

/// Shared loading matrix `G` with `G Gᵀ` equal to the positive part of
/// the target matrix built from `mu`.
fn group_loading(mu: &EdgeVector) -> Result<DMatrix<f64>> {
    let target = devectorize(mu);
    let eig = SymmetricEigen::new(target.matrix().clone());
    let max_ev = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    if max_ev.is_nan() || max_ev <= 0.0 {
        return Err(Error::RankDeficient(
            "connectivity target has no positive eigenvalues".into(),
        ));
    }
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&k| eig.eigenvalues[k] > FACTOR_TOLERANCE * max_ev)
        .collect();
    let q = target.n_regions();
    let mut g = DMatrix::zeros(q, keep.len());
    for (col, &k) in keep.iter().enumerate() {
        let scale = eig.eigenvalues[k].sqrt();
        for row in 0..q {
            g[(row, col)] = eig.eigenvectors[(row, k)] * scale;
        }
    }
    Ok(g)
}

/// Entry variance for the subject loading perturbation `E_i` that
/// induces approximately the requested between-subject variance of the
/// correlations (first-order delta method: `Var(corr) ~ 2 tau^2 (1 -
/// rho^2)` for unit-diagonal targets).
fn loading_tau(params: &GenerativeParams) -> f64 {
    let m = params.n_edges() as f64;
    let mean_bv: f64 = params.between_var.iter().sum::<f64>() / m;
    if mean_bv == 0.0 {
        return 0.0;
    }
    let mean_rho2: f64 = params.mu.iter().map(|r| r * r).sum::<f64>() / m;
    let spread = (1.0 - mean_rho2).max(0.05);
    (mean_bv / (2.0 * spread)).sqrt()
}

/// Correlation matrix induced by loading `a`: normalize `a aᵀ + floor·I`.
fn correlation_from_loading(a: &DMatrix<f64>) -> DMatrix<f64> {
    let q = a.nrows();
    let mut sigma = a * a.transpose();
    for d in 0..q {
        sigma[(d, d)] += DIAG_FLOOR;
    }
    let inv_sd: Vec<f64> = (0..q).map(|d| 1.0 / sigma[(d, d)].sqrt()).collect();
    let mut corr = DMatrix::identity(q, q);
    for a_ in 0..q {
        for b in a_ + 1..q {
            let v = sigma[(a_, b)] * inv_sd[a_] * inv_sd[b];
            corr[(a_, b)] = v;
            corr[(b, a_)] = v;
        }
    }
    corr
}

/// The correlation matrix every subject shares when `between_var` is
/// zero (useful as the convergence target in tests).
pub fn degenerate_target_correlation(params: &GenerativeParams) -> Result<DMatrix<f64>> {
    params.validate()?;
    let mu = EdgeVector::from_values(params.mu.clone(), default_region_ids(params.q))?;
    Ok(correlation_from_loading(&group_loading(&mu)?))
}

/// Generate per-subject-visit Gaussian time series of `t_total` rows
/// whose population correlation is the subject's latent matrix.
///
/// Subject heterogeneity enters through the loading perturbation `E_i`,
/// calibrated from `between_var`. Visits share the subject's matrix:
/// visit-to-visit differences at this level are sampling-only, so
/// `state_var` does not participate (it drives the parameter-level
/// generator). Returns `(subject_id, [visit1, visit2])` in subject
/// order.
pub fn simulate_timeseries_level(
    params: &GenerativeParams,
    t_total: usize,
) -> Result<Vec<(String, [TimeSeriesMatrix; 2])>> {
    params.validate()?;
    let max_ell = *params.scan_lengths.last().expect("validated nonempty");
    if t_total < max_ell {
        return Err(Error::InvalidParams {
            field: "t_total".into(),
            message: format!("{t_total} is shorter than the largest scan length {max_ell}"),
        });
    }
    let mu = EdgeVector::from_values(params.mu.clone(), default_region_ids(params.q))?;
    let g = group_loading(&mu)?;
    let tau = loading_tau(params);
    let q = params.q;
    let k = g.ncols();
    let seed = params.seed;
    let region_ids = default_region_ids(q);
    let ids = subject_ids(params.n_subjects);
    let per_subject = |i: usize| -> Result<[TimeSeriesMatrix; 2]> {
        let e_noise = normals(seed, i, 0, StreamTag::LoadingStable, usize::MAX, q * k);
        let mut a = g.clone();
        for (idx, n) in e_noise.iter().enumerate() {
            a[(idx / k, idx % k)] += tau * n;
        }
        let corr = correlation_from_loading(&a);
        let chol = nalgebra::Cholesky::new(corr.clone())
            .or_else(|| {
                let mut jittered = corr.clone();
                for d in 0..q {
                    jittered[(d, d)] += 1e-10;
                }
                nalgebra::Cholesky::new(jittered)
            })
            .ok_or_else(|| {
                Error::RankDeficient(format!("subject {i}: correlation matrix is not positive definite"))
            })?;
        let l = chol.l();
        let mut visits = Vec::with_capacity(2);
        for v in 1..=2usize {
            let draws = normals(seed, i, v, StreamTag::Series, usize::MAX, t_total * q);
            let mut data = DMatrix::zeros(t_total, q);
            for t in 0..t_total {
                for col in 0..q {
                    // x = L n, accumulated left to right
                    let mut acc = 0.0;
                    for s in 0..=col {
                        acc += l[(col, s)] * draws[t * q + s];
                    }
                    data[(t, col)] = acc;
                }
            }
            visits.push(TimeSeriesMatrix::new(data, region_ids.clone(), 1.0)?);
        }
        let [v1, v2]: [TimeSeriesMatrix; 2] = visits.try_into().expect("two visits");
        Ok([v1, v2])
    };
    let generated: Vec<Result<[TimeSeriesMatrix; 2]>> =
        (0..params.n_subjects).into_par_iter().map(per_subject).collect();
    let mut out = Vec::with_capacity(params.n_subjects);
    for (id, r) in ids.into_iter().zip(generated) {
        out.push((id, r?));
    }
    Ok(out)
}

#[derive(Serialize)]
struct LambdaRow {
    scan_length: usize,
    lambda: Vec<f64>,
}

#[derive(Serialize)]
struct GroundTruthDoc<'a> {
    params: &'a GenerativeParams,
    region_ids: Vec<String>,
    /// Population shrinkage weight per scan length (canonical edge order).
    lambda_by_length: Vec<LambdaRow>,
}

/// Serialize the params echo plus the per-length population shrinkage
/// weights as pretty JSON.
pub fn ground_truth_json(params: &GenerativeParams) -> Result<String> {
    params.validate()?;
    let lambda_by_length = params
        .scan_lengths
        .iter()
        .map(|&ell| {
            Ok(LambdaRow {
                scan_length: ell,
                lambda: ground_truth_lambda(params, ell)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let doc = GroundTruthDoc {
        params,
        region_ids: default_region_ids(params.q),
        lambda_by_length,
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Schema {
        context: "ground truth".into(),
        message: e.to_string(),
    })
}

/// Write [`ground_truth_json`] to a file with a trailing newline.
pub fn write_ground_truth(params: &GenerativeParams, path: &Path) -> Result<()> {
    let mut text = ground_truth_json(params)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::pearson_matrix;
    use proptest::prelude::*;

    fn small_params() -> GenerativeParams {
        GenerativeParams {
            n_subjects: 6,
            q: 3,
            mu: vec![0.3, 0.2, 0.1],
            between_var: vec![0.04; 3],
            state_var: vec![0.01; 3],
            sampling_coeff: vec![6.0; 3],
            scan_lengths: vec![100, 200, 400],
            seed: 7,
        }
    }

    #[test]
    fn zero_variance_collapses_to_mu() {
        let params = GenerativeParams {
            between_var: vec![0.0; 3],
            state_var: vec![0.0; 3],
            sampling_coeff: vec![0.0; 3],
            ..small_params()
        };
        let cohort = simulate_parameter_level(&params).unwrap();
        for visits in &cohort.estimates {
            for bundles in visits {
                for b in bundles {
                    for sel in [
                        EstimateSelector::Full,
                        EstimateSelector::Odd,
                        EstimateSelector::Even,
                        EstimateSelector::FirstHalf,
                        EstimateSelector::SecondHalf,
                    ] {
                        assert_eq!(b.get(sel).values(), params.mu.as_slice());
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let params = small_params();
        let a = simulate_parameter_level(&params).unwrap();
        let b = simulate_parameter_level(&params).unwrap();
        assert_eq!(a, b);
        let other = GenerativeParams {
            seed: 8,
            ..params
        };
        let c = simulate_parameter_level(&other).unwrap();
        assert_ne!(a.estimates, c.estimates);
    }

    #[test]
    fn output_independent_of_thread_count() {
        let params = GenerativeParams {
            n_subjects: 24,
            ..small_params()
        };
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| simulate_parameter_level(&params).unwrap());
        let many = rayon::ThreadPoolBuilder::new()
            .num_threads(8)
            .build()
            .unwrap()
            .install(|| simulate_parameter_level(&params).unwrap());
        assert_eq!(single, many);
    }

    #[test]
    fn ground_truth_lambda_hand_values() {
        let mut params = small_params();
        params.between_var = vec![0.04; 3];
        params.state_var = vec![0.01; 3];
        params.sampling_coeff = vec![6.0; 3];
        // c/ell = 0.02 at ell = 300
        let lams = ground_truth_lambda(&params, 300).unwrap();
        for l in lams {
            assert!((l - 0.03 / 0.07).abs() < 1e-12);
        }
        params.state_var = vec![0.0; 3];
        params.sampling_coeff = vec![0.0; 3];
        let lams = ground_truth_lambda(&params, 300).unwrap();
        assert_eq!(lams, vec![0.0; 3]);
        params.state_var = vec![0.02; 3];
        params.between_var = vec![0.04; 3];
        params.sampling_coeff = vec![6.0; 3];
        let lams = ground_truth_lambda(&params, 300).unwrap();
        for l in lams {
            assert!((l - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_strictly_decreasing_when_noisy() {
        let params = small_params();
        let grid = [100usize, 200, 400, 800];
        let mut prev: Option<Vec<f64>> = None;
        for &ell in &grid {
            let lam = ground_truth_lambda(&params, ell).unwrap();
            if let Some(p) = prev {
                for (now, before) in lam.iter().zip(&p) {
                    assert!(now < before);
                }
            }
            prev = Some(lam);
        }
    }

    #[test]
    fn validation_names_offending_field() {
        let mut params = small_params();
        params.between_var[1] = -0.1;
        match params.validate() {
            Err(Error::InvalidParams { field, .. }) => assert_eq!(field, "between_var"),
            other => panic!("expected InvalidParams, got {other:?}"),
        }
        let mut params = small_params();
        params.scan_lengths = vec![200, 100];
        match params.validate() {
            Err(Error::InvalidParams { field, .. }) => assert_eq!(field, "scan_lengths"),
            other => panic!("expected InvalidParams, got {other:?}"),
        }
        let mut params = small_params();
        params.mu[0] = 1.5;
        assert!(matches!(
            params.validate(),
            Err(Error::InvalidParams { .. })
        ));
    }

    #[test]
    fn params_toml_broadcast_and_lists() {
        let text = r#"
            n_subjects = 4
            q = 3
            mu = 0.3
            between_var = [0.04, 0.03, 0.02]
            state_var = 0.0
            sampling_coeff = 6.0
            scan_lengths = [100, 200]
            seed = 9
        "#;
        let p = GenerativeParams::from_toml_str(text).unwrap();
        assert_eq!(p.mu, vec![0.3; 3]);
        assert_eq!(p.between_var, vec![0.04, 0.03, 0.02]);
        assert_eq!(p.sampling_coeff, vec![6.0; 3]);

        let bad = r#"
            n_subjects = 4
            q = 3
            mu = 0.3
            between_var = -0.1
            state_var = 0.0
            sampling_coeff = 6.0
            scan_lengths = [100, 200]
            seed = 9
        "#;
        assert!(matches!(
            GenerativeParams::from_toml_str(bad),
            Err(Error::InvalidParams { field, .. }) if field == "between_var"
        ));
    }

    #[test]
    fn moment_identities_single_replication() {
        // loose single-run sanity; the tight multi-replication checks
        // live in the integration suite
        let params = GenerativeParams {
            n_subjects: 2000,
            q: 3,
            mu: vec![0.3, 0.2, 0.1],
            between_var: vec![0.04; 3],
            state_var: vec![0.01; 3],
            sampling_coeff: vec![6.0; 3],
            scan_lengths: vec![300],
            seed: 11,
        };
        let cohort = simulate_parameter_level(&params).unwrap();
        let n = params.n_subjects;
        let var = |xs: &[f64]| {
            let mean = xs.iter().sum::<f64>() / n as f64;
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        };
        for e in 0..3 {
            let full: Vec<f64> = cohort
                .estimates
                .iter()
                .map(|v| v[0][0].full.values()[e])
                .collect();
            let expected = 0.04 + 0.01 + 0.02;
            assert!((var(&full) - expected).abs() / expected < 0.2);
            let d_oe: Vec<f64> = cohort
                .estimates
                .iter()
                .map(|v| v[0][0].odd.values()[e] - v[0][0].even.values()[e])
                .collect();
            let expected = 4.0 * 0.02;
            assert!((var(&d_oe) - expected).abs() / expected < 0.2);
            let d_fs: Vec<f64> = cohort
                .estimates
                .iter()
                .map(|v| v[0][0].first_half.values()[e] - v[0][0].second_half.values()[e])
                .collect();
            let expected = 2.0 * 0.01 + 4.0 * 0.02;
            assert!((var(&d_fs) - expected).abs() / expected < 0.2);
        }
    }

    #[test]
    fn degenerate_timeseries_converges_to_shared_matrix() {
        let params = GenerativeParams {
            n_subjects: 2,
            q: 3,
            mu: vec![0.3, 0.2, 0.1],
            between_var: vec![0.0; 3],
            state_var: vec![0.0; 3],
            sampling_coeff: vec![0.0; 3],
            scan_lengths: vec![100],
            seed: 5,
        };
        let target = degenerate_target_correlation(&params).unwrap();
        // the diagonally dominant target is PSD, so the factor route
        // reproduces mu up to the diagonal floor
        assert!((target[(0, 1)] - 0.3).abs() < 1e-4);
        let cohort = simulate_timeseries_level(&params, 10_000).unwrap();
        for (_, visits) in &cohort {
            let cm = pearson_matrix(&visits[0]).unwrap();
            for a in 0..3 {
                for b in 0..3 {
                    assert!(
                        (cm.matrix()[(a, b)] - target[(a, b)]).abs() < 0.05,
                        "({a},{b}): {} vs {}",
                        cm.matrix()[(a, b)],
                        target[(a, b)]
                    );
                }
            }
        }
    }

    #[test]
    fn timeseries_same_seed_bit_identical() {
        let params = GenerativeParams {
            n_subjects: 3,
            q: 3,
            mu: vec![0.3, 0.2, 0.1],
            between_var: vec![0.02; 3],
            state_var: vec![0.0; 3],
            sampling_coeff: vec![0.0; 3],
            scan_lengths: vec![50],
            seed: 13,
        };
        let a = simulate_timeseries_level(&params, 200).unwrap();
        let b = simulate_timeseries_level(&params, 200).unwrap();
        for ((_, va), (_, vb)) in a.iter().zip(&b) {
            for (x, y) in va.iter().zip(vb.iter()) {
                assert_eq!(x.data(), y.data());
            }
        }
    }

    #[test]
    fn timeseries_estimate_variance_shrinks_with_length() {
        let params = GenerativeParams {
            n_subjects: 150,
            q: 3,
            mu: vec![0.3, 0.2, 0.1],
            between_var: vec![0.0; 3],
            state_var: vec![0.0; 3],
            sampling_coeff: vec![0.0; 3],
            scan_lengths: vec![300, 600, 1200, 2400],
            seed: 17,
        };
        let cohort = simulate_timeseries_level(&params, 2400).unwrap();
        let mut prev = f64::MAX;
        for &ell in &params.scan_lengths {
            let mut per_edge = vec![Vec::new(); 3];
            for (_, visits) in &cohort {
                let truncated = crate::timeseries::truncate(&visits[0], ell).unwrap();
                let ev = crate::connectivity::vectorize(&pearson_matrix(&truncated).unwrap());
                for (dest, v) in per_edge.iter_mut().zip(ev.values()) {
                    dest.push(*v);
                }
            }
            let mean_var: f64 = per_edge
                .iter()
                .map(|xs| {
                    let n = xs.len() as f64;
                    let mean = xs.iter().sum::<f64>() / n;
                    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
                })
                .sum::<f64>()
                / 3.0;
            assert!(
                mean_var < prev,
                "variance should fall with scan length: {mean_var} at {ell} vs {prev}"
            );
            prev = mean_var;
        }
    }

    #[test]
    fn t_total_must_cover_grid() {
        let params = small_params();
        assert!(matches!(
            simulate_timeseries_level(&params, 300),
            Err(Error::InvalidParams { field, .. }) if field == "t_total"
        ));
    }

    #[test]
    fn ground_truth_json_is_stable() {
        let params = small_params();
        let a = ground_truth_json(&params).unwrap();
        let b = ground_truth_json(&params).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("lambda_by_length"));
        assert!(a.contains("scan_length"));
    }

    proptest! {
        #[test]
        fn streams_are_stable_under_tag_changes(
            seed in any::<u64>(),
            subject in 0usize..64,
            visit in 0usize..3,
            len_idx in 0usize..8,
        ) {
            let a = normals(seed, subject, visit, StreamTag::NoiseFull, len_idx, 4);
            let b = normals(seed, subject, visit, StreamTag::NoiseFull, len_idx, 4);
            prop_assert_eq!(&a, &b);
            let other = normals(seed, subject, visit, StreamTag::NoiseOdd, len_idx, 4);
            prop_assert_ne!(&a, &other);
            let shifted = normals(seed, subject + 1, visit, StreamTag::NoiseFull, len_idx, 4);
            prop_assert_ne!(&a, &shifted);
        }

        #[test]
        fn lambda_in_unit_interval(
            bv in 0.0f64..0.2,
            sv in 0.0f64..0.2,
            c in 0.0f64..20.0,
            ell in 2usize..4000,
        ) {
            let params = GenerativeParams {
                n_subjects: 2,
                q: 2,
                mu: vec![0.2],
                between_var: vec![bv],
                state_var: vec![sv],
                sampling_coeff: vec![c],
                scan_lengths: vec![2],
                seed: 1,
            };
            let lam = ground_truth_lambda(&params, ell).unwrap();
            prop_assert!((0.0..=1.0).contains(&lam[0]));
        }
    }
}
