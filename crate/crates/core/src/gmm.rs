//! Per-class diagonal-covariance Gaussian mixtures over MFCC frames.

use log::{debug, warn};
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{self, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GmmError {
    #[error("{frames} frames cannot fit {k} components")]
    TooFewFrames { frames: usize, k: usize },
    #[error("dimension mismatch: model has {expected}, frames have {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("mixture bank is empty")]
    EmptyBank,
    #[error("invalid GMM options: {0}")]
    InvalidOptions(String),
    #[error("malformed GMM bank: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = GmmError> = std::result::Result<T, E>;

pub const ASCG_MAGIC: &[u8; 4] = b"ASCG";
pub const ASCG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub components: usize,
    pub max_iters: usize,
    /// Stop once the average log-likelihood gains less than this.
    pub tol: f64,
    /// Variance floor as a fraction of each dimension's global variance.
    pub var_floor: f64,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            components: 32,
            max_iters: 100,
            tol: 1e-4,
            var_floor: 1e-3,
            kmeans_iters: 10,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub weights: Array1<f64>,
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
}

/// Result of [`em_fit`] with the per-iteration average log-likelihood.
#[derive(Clone, Debug)]
pub struct EmFit {
    pub mixture: GaussianMixture,
    /// Entry `i` is measured after `i` M-steps (entry 0 is the k-means start).
    pub avg_log_likelihood: Vec<f64>,
    pub reseeded: usize,
}

impl GaussianMixture {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// `[T x K]` of `ln w_k + ln N(x_t; mu_k, sigma_k^2)`.
    fn joint_log_density(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let inv = self.variances.mapv(|v| 1.0 / v);
        let d = self.dim() as f64;
        // Expand sum_d (x - mu)^2 / var into three matrix products.
        let konst: Array1<f64> = (0..self.components())
            .map(|k| {
                let row_mu = self.means.row(k);
                let row_iv = inv.row(k);
                let maha0: f64 = row_mu.iter().zip(row_iv).map(|(m, iv)| m * m * iv).sum();
                let log_det: f64 = self.variances.row(k).iter().map(|v| v.ln()).sum();
                self.weights[k].ln() - 0.5 * (d * (2.0 * PI).ln() + log_det + maha0)
            })
            .collect();
        let mu_iv = &self.means * &inv;
        let x2 = x.mapv(|v| v * v);
        let mut out = x.dot(&mu_iv.t());
        out.zip_mut_with(&x2.dot(&inv.t()), |o, &q| *o -= 0.5 * q);
        out += &konst;
        out
    }

    pub fn check_dim(&self, frames: ArrayView2<'_, f64>) -> Result<()> {
        if frames.ncols() != self.dim() {
            return Err(GmmError::DimensionMismatch {
                expected: self.dim(),
                got: frames.ncols(),
            });
        }
        Ok(())
    }

    /// Per-frame log-likelihoods.
    pub fn frame_log_likelihood(&self, frames: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.check_dim(frames)?;
        Ok(self.joint_log_density(frames).map_axis(Axis(1), |row| log_sum_exp(row.iter().copied())))
    }

    /// `sum_t log sum_k w_k N(x_t; mu_k, sigma_k^2)`.
    pub fn segment_log_likelihood(&self, frames: ArrayView2<'_, f64>) -> Result<f64> {
        Ok(self.frame_log_likelihood(frames)?.sum())
    }

    /// Row-normalised responsibilities `[T x K]`.
    pub fn responsibilities(&self, frames: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_dim(frames)?;
        let mut r = self.joint_log_density(frames);
        for mut row in r.axis_iter_mut(Axis(0)) {
            let lse = log_sum_exp(row.iter().copied());
            row.mapv_inplace(|v| (v - lse).exp());
        }
        Ok(r)
    }
}

pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn column_variance(x: ArrayView2<'_, f64>) -> Array1<f64> {
    let mean = x.mean_axis(Axis(0)).unwrap();
    let mut var = Array1::zeros(x.ncols());
    for row in x.rows() {
        Zip::from(&mut var).and(&row).and(&mean).for_each(|v, &a, &m| *v += (a - m) * (a - m));
    }
    var / x.nrows() as f64
}

fn kmeans(x: ArrayView2<'_, f64>, k: usize, iters: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>) {
    let t = x.nrows();
    let mut idx = sample(rng, t, k).into_vec();
    idx.sort_unstable();
    let mut centers = x.select(Axis(0), &idx);
    let mut assign = vec![0usize; t];
    for _ in 0..iters.max(1) {
        // Squared distances up to the per-frame constant |x|^2.
        let c2: Array1<f64> = centers.rows().into_iter().map(|c| c.dot(&c)).collect();
        let cross = x.dot(&centers.t());
        for (ti, row) in cross.rows().into_iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (ki, &xc) in row.iter().enumerate() {
                let d = c2[ki] - 2.0 * xc;
                if d < best.0 {
                    best = (d, ki);
                }
            }
            assign[ti] = best.1;
        }
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (ti, &a) in assign.iter().enumerate() {
            sums.row_mut(a).zip_mut_with(&x.row(ti), |s, &v| *s += v);
            counts[a] += 1;
        }
        for ki in 0..k {
            if counts[ki] > 0 {
                centers.row_mut(ki).assign(&(&sums.row(ki) / counts[ki] as f64));
            }
        }
    }
    (centers, assign)
}

/// Seeded k-means start, then EM with a variance floor. Components whose
/// weight collapses are re-seeded at the frame farthest from the global mean.
pub fn em_fit(frames: ArrayView2<'_, f64>, opts: &EmOptions) -> Result<EmFit> {
    let (t, d) = frames.dim();
    let k = opts.components;
    if k == 0 || opts.var_floor <= 0.0 {
        return Err(GmmError::InvalidOptions(format!(
            "need components >= 1 and var_floor > 0, got {k} and {}",
            opts.var_floor
        )));
    }
    if t < k || t == 0 {
        return Err(GmmError::TooFewFrames { frames: t, k });
    }
    let global_var = column_variance(frames);
    let floor = global_var.mapv(|v| (v * opts.var_floor).max(1e-12));
    let global_mean = frames.mean_axis(Axis(0)).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (centers, assign) = kmeans(frames, k, opts.kmeans_iters, &mut rng);
    let mut resp = Array2::<f64>::zeros((t, k));
    for (ti, &a) in assign.iter().enumerate() {
        resp[[ti, a]] = 1.0;
    }
    let mut gmm = GaussianMixture {
        weights: Array1::from_elem(k, 1.0 / k as f64),
        means: centers,
        variances: Array2::from_shape_fn((k, d), |(_, j)| global_var[j].max(floor[j])),
    };
    let mut reseeded = 0;
    m_step(&mut gmm, frames, &resp, &floor, &global_var, &global_mean, &mut reseeded);

    let mut history = vec![gmm.frame_log_likelihood(frames)?.mean().unwrap()];
    for it in 0..opts.max_iters {
        let resp = gmm.responsibilities(frames)?;
        m_step(&mut gmm, frames, &resp, &floor, &global_var, &global_mean, &mut reseeded);
        let ll = gmm.frame_log_likelihood(frames)?.mean().unwrap();
        let gain = ll - history.last().unwrap();
        history.push(ll);
        if gain < opts.tol {
            debug!("EM converged after {} iterations (gain {gain:.3e})", it + 1);
            break;
        }
    }
    Ok(EmFit {
        mixture: gmm,
        avg_log_likelihood: history,
        reseeded,
    })
}

fn m_step(
    gmm: &mut GaussianMixture,
    x: ArrayView2<'_, f64>,
    resp: &Array2<f64>,
    floor: &Array1<f64>,
    global_var: &Array1<f64>,
    global_mean: &Array1<f64>,
    reseeded: &mut usize,
) {
    let t = x.nrows() as f64;
    let nk = resp.sum_axis(Axis(0));
    let sx = resp.t().dot(&x);
    let sxx = resp.t().dot(&x.mapv(|v| v * v));
    for k in 0..gmm.components() {
        if nk[k] / t < 1e-8 {
            let far = x
                .rows()
                .into_iter()
                .map(|row| {
                    row.iter()
                        .zip(global_mean)
                        .zip(global_var)
                        .map(|((a, m), v)| (a - m) * (a - m) / v.max(1e-300))
                        .sum::<f64>()
                })
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            warn!("GMM component {k} collapsed; re-seeding at frame {far}");
            gmm.means.row_mut(k).assign(&x.row(far));
            gmm.variances.row_mut(k).assign(global_var);
            gmm.weights[k] = 1.0 / gmm.components() as f64;
            *reseeded += 1;
            continue;
        }
        gmm.weights[k] = nk[k] / t;
        for j in 0..gmm.dim() {
            let mu = sx[[k, j]] / nk[k];
            let var = sxx[[k, j]] / nk[k] - mu * mu;
            gmm.means[[k, j]] = mu;
            gmm.variances[[k, j]] = var.max(floor[j]);
        }
    }
    let total = gmm.weights.sum();
    gmm.weights.mapv_inplace(|w| w / total);
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmBank {
    pub class_names: Vec<String>,
    pub mixtures: Vec<GaussianMixture>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub class: usize,
    pub log_likelihoods: Vec<f64>,
    pub tie: bool,
}

impl GmmBank {
    /// Highest segment log-likelihood wins; ties go to the lowest index.
    pub fn classify_segment(&self, frames: ArrayView2<'_, f64>) -> Result<Classification> {
        if self.mixtures.is_empty() {
            return Err(GmmError::EmptyBank);
        }
        let lls = self
            .mixtures
            .iter()
            .map(|g| g.segment_log_likelihood(frames))
            .collect::<Result<Vec<_>>>()?;
        let best = lls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let class = lls.iter().position(|&v| v == best).unwrap_or(0);
        let tie = lls.iter().filter(|&&v| v == best).count() > 1;
        if tie {
            debug!("GMM tie between classes; choosing {class}");
        }
        Ok(Classification {
            class,
            log_likelihoods: lls,
            tie,
        })
    }

    pub fn write_ascg<W: Write>(&self, mut w: W) -> Result<()> {
        let (k, d) = self
            .mixtures
            .first()
            .map_or((0, 0), |g| (g.components(), g.dim()));
        if self.mixtures.iter().any(|g| g.components() != k || g.dim() != d) {
            return Err(GmmError::Malformed("mixtures differ in size".into()));
        }
        w.write_all(ASCG_MAGIC)?;
        for v in [ASCG_VERSION, self.mixtures.len() as u32, d as u32, k as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for g in &self.mixtures {
            for v in g.weights.iter().chain(g.means.iter()).chain(g.variances.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads the binary body; class names come from the sidecar and default
    /// to `class{i}`.
    pub fn read_ascg<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 20];
        r.read_exact(&mut head).map_err(|_| GmmError::Malformed("truncated header".into()))?;
        if &head[..4] != ASCG_MAGIC {
            return Err(GmmError::Malformed("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap()) as usize;
        if word(4) != ASCG_VERSION as usize {
            return Err(GmmError::Malformed(format!("unsupported version {}", word(4))));
        }
        let (classes, d, k) = (word(8), word(12), word(16));
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let per = k + 2 * k * d;
        if body.len() != classes * per * 8 {
            return Err(GmmError::Malformed(format!(
                "expected {} body bytes, found {}",
                classes * per * 8,
                body.len()
            )));
        }
        let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mixtures = vals
            .chunks_exact(per.max(1))
            .take(classes)
            .map(|c| GaussianMixture {
                weights: Array1::from(c[..k].to_vec()),
                means: Array2::from_shape_vec((k, d), c[k..k + k * d].to_vec()).unwrap(),
                variances: Array2::from_shape_vec((k, d), c[k + k * d..].to_vec()).unwrap(),
            })
            .collect();
        Ok(GmmBank {
            class_names: (0..classes).map(|i| format!("class{i}")).collect(),
            mixtures,
        })
    }

    pub fn labels_sidecar(&self) -> String {
        let mut s = String::from("# kind=mfcc60\n");
        for n in &self.class_names {
            s.push_str(n);
            s.push('\n');
        }
        s
    }

    pub fn apply_labels_sidecar(&mut self, text: &str) -> Result<()> {
        let names: Vec<String> = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.is_empty())
            .map(str::to_string)
            .collect();
        if names.len() != self.mixtures.len() {
            return Err(GmmError::Malformed(format!(
                "{} labels for {} mixtures",
                names.len(),
                self.mixtures.len()
            )));
        }
        self.class_names = names;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn unit_model(d: usize) -> GaussianMixture {
        GaussianMixture {
            weights: Array1::from(vec![1.0]),
            means: Array2::zeros((1, d)),
            variances: Array2::ones((1, d)),
        }
    }

    #[test]
    fn frame_at_mean_of_unit_gaussian() {
        let g = unit_model(60);
        let ll = g.segment_log_likelihood(Array2::zeros((1, 60)).view()).unwrap();
        assert!((ll - (-30.0 * (2.0 * PI).ln())).abs() < 1e-12);
        assert!((ll + 55.136).abs() < 1e-3);
        assert!(matches!(
            g.segment_log_likelihood(Array2::zeros((1, 59)).view()),
            Err(GmmError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn repeating_frames_doubles_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((7, 4), |_| rng.random_range(-2.0..2.0));
        let xx = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let g = GaussianMixture {
            weights: Array1::from(vec![0.3, 0.7]),
            means: Array2::from_shape_fn((2, 4), |(k, j)| k as f64 - j as f64 * 0.1),
            variances: Array2::from_elem((2, 4), 0.8),
        };
        let a = g.segment_log_likelihood(x.view()).unwrap();
        let b = g.segment_log_likelihood(xx.view()).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn matches_probability_domain_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (k, d) = (3, 5);
        let g = GaussianMixture {
            weights: Array1::from(vec![0.2, 0.5, 0.3]),
            means: Array2::from_shape_fn((k, d), |_| rng.random_range(-1.0..1.0)),
            variances: Array2::from_shape_fn((k, d), |_| rng.random_range(0.5..2.0)),
        };
        let x = Array2::from_shape_fn((6, d), |_| rng.random_range(-1.5..1.5));
        let mut naive = 0.0;
        for row in x.rows() {
            let mut p = 0.0;
            for c in 0..k {
                let mut dens = g.weights[c];
                for j in 0..d {
                    let v = g.variances[[c, j]];
                    dens *= (-(row[j] - g.means[[c, j]]).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
                }
                p += dens;
            }
            naive += p.ln();
        }
        assert!((g.segment_log_likelihood(x.view()).unwrap() - naive).abs() < 1e-6);
        let r = g.responsibilities(x.view()).unwrap();
        assert!(r.rows().into_iter().all(|row| (row.sum() - 1.0).abs() < 1e-9));
    }

    #[test]
    fn single_component_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((200, 3), |(_, j)| rng.random_range(-1.0..1.0) * (j + 1) as f64);
        let fit = em_fit(x.view(), &EmOptions { components: 1, ..EmOptions::default() }).unwrap();
        let mean = x.mean_axis(Axis(0)).unwrap();
        let var = column_variance(x.view());
        for j in 0..3 {
            assert!((fit.mixture.means[[0, j]] - mean[j]).abs() < 1e-12);
            assert!((fit.mixture.variances[[0, j]] - var[j]).abs() < 1e-10);
        }
        assert_eq!(fit.mixture.weights[0], 1.0);
    }

    #[test]
    fn two_clusters_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let x = Array2::from_shape_fn((1000, 1), |(i, _)| if i < 500 { -5.0 } else { 5.0 } + noise.sample(&mut rng));
        let fit = em_fit(x.view(), &EmOptions { components: 2, seed: 1, ..EmOptions::default() }).unwrap();
        let g = fit.mixture;
        let (lo, hi) = if g.means[[0, 0]] < g.means[[1, 0]] { (0, 1) } else { (1, 0) };
        assert!((g.means[[lo, 0]] + 5.0).abs() < 0.2);
        assert!((g.means[[hi, 0]] - 5.0).abs() < 0.2);
        assert!((g.weights[0] - 0.5).abs() < 0.05);
    }

    #[test]
    fn errors() {
        let x = Array2::<f64>::zeros((3, 2));
        assert!(matches!(em_fit(x.view(), &EmOptions::default()), Err(GmmError::TooFewFrames { .. })));
        let bank = GmmBank { class_names: vec![], mixtures: vec![] };
        assert!(matches!(bank.classify_segment(x.view()), Err(GmmError::EmptyBank)));
    }

    #[test]
    fn identical_mixtures_tie_to_first() {
        let bank = GmmBank {
            class_names: vec!["a".into(), "b".into()],
            mixtures: vec![unit_model(3), unit_model(3)],
        };
        let c = bank.classify_segment(Array2::ones((4, 3)).view()).unwrap();
        assert_eq!((c.class, c.tie), (0, true));
    }

    #[test]
    fn ascg_round_trip() {
        let bank = GmmBank {
            class_names: vec!["x".into(), "y".into()],
            mixtures: vec![
                GaussianMixture {
                    weights: Array1::from(vec![0.25, 0.75]),
                    means: Array2::from_shape_fn((2, 3), |(a, b)| a as f64 + 0.1 * b as f64),
                    variances: Array2::from_elem((2, 3), 1.0 / 3.0),
                },
                unit_model(3).clone(),
            ],
        };
        // The second mixture has one component; sizes must agree.
        assert!(bank.write_ascg(Vec::new()).is_err());
        let bank = GmmBank {
            mixtures: vec![bank.mixtures[0].clone(), bank.mixtures[0].clone()],
            ..bank
        };
        let mut a = Vec::new();
        bank.write_ascg(&mut a).unwrap();
        let mut back = GmmBank::read_ascg(&a[..]).unwrap();
        back.apply_labels_sidecar(&bank.labels_sidecar()).unwrap();
        assert_eq!(back, bank);
        let mut b = Vec::new();
        back.write_ascg(&mut b).unwrap();
        assert_eq!(a, b);
        assert!(GmmBank::read_ascg(&a[..a.len() - 1]).is_err());
    }
}
