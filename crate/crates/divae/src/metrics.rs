//! Evaluation quantities: distributional alignment (KS, Wasserstein-1),
//! coverage and posterior divergences, entropies, and OOD shifts.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synthgen::Gmm2dSpec;
use crate::tensor::{mean, pairwise_sum, std_dev, Tensor};
use crate::vae::{Encoder, Prior, LN_2PI};

/// Two-sample Kolmogorov-Smirnov statistic: the sup-distance between the
/// right-continuous empirical CDFs over the merged support.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("ks_two_sample needs non-empty samples"));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut sup: f64 = 0.0;
    while i < n || j < m {
        let v = match (xs.get(i), ys.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        while i < n && xs[i] == v {
            i += 1;
        }
        while j < m && ys[j] == v {
            j += 1;
        }
        let diff = (i as f64 / n as f64 - j as f64 / m as f64).abs();
        if diff > sup {
            sup = diff;
        }
    }
    Ok(sup)
}

/// 1D Wasserstein distance via exact quantile-function integration; supports
/// unequal sample sizes. For equal sizes this is the mean absolute difference
/// of the sorted samples.
pub fn wasserstein1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("wasserstein1d needs non-empty samples"));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (n, m) = (xs.len() as u64, ys.len() as u64);
    // Quantile breakpoints live on the grid 1/(n*m); integer arithmetic keeps
    // the segment boundaries exact.
    let total = n * m;
    let (mut i, mut j) = (0u64, 0u64);
    let mut last = 0u64;
    let mut acc = 0.0;
    while i < n && j < m {
        let qa = (i + 1) * m;
        let qb = (j + 1) * n;
        let q = qa.min(qb);
        acc += (q - last) as f64 / total as f64 * (xs[i as usize] - ys[j as usize]).abs();
        last = q;
        if qa == q {
            i += 1;
        }
        if qb == q {
            j += 1;
        }
    }
    Ok(acc)
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Coverage divergence `KL(p2 || p_Z)` by Monte Carlo over draws from the
/// true mixture. Penalizes priors that miss regions where the generator puts
/// mass. Synthetic regime only: the prior must live on a 2D latent space.
pub fn kl_coverage(
    p2: &Gmm2dSpec,
    prior: &Prior,
    encoder: Option<&Encoder>,
    n_mc: usize,
    rng: &mut Rng,
) -> Result<McEstimate> {
    let prior_dim = match prior {
        Prior::Standard { dim } => *dim,
        Prior::Gmm { means, .. } => means.shape()[1],
        Prior::Vamp { .. } => encoder.map(|e| e.latent_dim).unwrap_or(0),
    };
    if prior_dim != 2 {
        return Err(Error::contract(format!(
            "coverage KL compares 2D densities; prior has dim {prior_dim}"
        )));
    }
    let (us, _) = crate::synthgen::sample_gmm2d(p2, n_mc, rng);
    let mut flat = Vec::with_capacity(n_mc * 2);
    for u in &us {
        flat.push(u[0]);
        flat.push(u[1]);
    }
    let z = Tensor::matrix(n_mc, 2, flat);
    let log_prior = prior.prepare(encoder).logpdf_batch(&z);
    let diffs: Vec<f64> = us
        .iter()
        .zip(&log_prior)
        .map(|(u, lp)| p2.logpdf(*u) - lp)
        .collect();
    Ok(McEstimate {
        value: mean(&diffs),
        std_error: std_dev(&diffs) / (n_mc as f64).sqrt(),
    })
}

/// Per-point `KL(q(.|x) || p2)` by Monte Carlo: `E_q[log q(z) - log p2(z)]`
/// for a diagonal-Gaussian posterior given by one row of (mu, logvar).
pub fn kl_q_p2(mu: &[f64], logvar: &[f64], p2: &Gmm2dSpec, n_mc: usize, rng: &mut Rng) -> f64 {
    assert_eq!(mu.len(), 2, "kl_q_p2 is defined on 2D latents");
    let mut acc = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let mut z = [0.0; 2];
        let mut log_q = 0.0;
        for j in 0..2 {
            let e = rng.normal();
            z[j] = mu[j] + (0.5 * logvar[j]).exp() * e;
            log_q += -0.5 * e * e - 0.5 * logvar[j] - 0.5 * LN_2PI;
        }
        acc.push(log_q - p2.logpdf(z));
    }
    mean(&acc)
}

/// Per-point posterior-prior divergence `KL(q(.|x) || p_Z)`: analytic for the
/// standard prior, Monte Carlo otherwise. Mixture priors go through a
/// [`crate::vae::PreparedPrior`] so Vamp pseudo-inputs are encoded once.
pub fn kl_q_prior(
    mu: &[f64],
    logvar: &[f64],
    prior: &crate::vae::PreparedPrior,
    n_mc: usize,
    rng: &mut Rng,
) -> f64 {
    let d = mu.len();
    match prior {
        crate::vae::PreparedPrior::Standard { .. } => (0..d)
            .map(|j| 0.5 * (mu[j] * mu[j] + logvar[j].exp() - 1.0 - logvar[j]))
            .sum(),
        _ => {
            let mut zs = vec![0.0; n_mc * d];
            let mut log_qs = vec![0.0; n_mc];
            for i in 0..n_mc {
                for j in 0..d {
                    let e = rng.normal();
                    zs[i * d + j] = mu[j] + (0.5 * logvar[j]).exp() * e;
                    log_qs[i] += -0.5 * e * e - 0.5 * logvar[j] - 0.5 * LN_2PI;
                }
            }
            let lp = prior.logpdf_batch(&Tensor::matrix(n_mc, d, zs));
            let diffs: Vec<f64> = log_qs.iter().zip(&lp).map(|(q, p)| q - p).collect();
            mean(&diffs)
        }
    }
}

/// Closed-form entropy of a diagonal Gaussian posterior row:
/// `(d/2)(1 + ln 2pi) + sum_j ln sigma_j`.
pub fn posterior_entropy(logvar: &[f64]) -> f64 {
    let d = logvar.len() as f64;
    0.5 * d * (1.0 + LN_2PI) + 0.5 * pairwise_sum(logvar)
}

/// Aggregated evaluation quantities for one (prior, method, seed) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub prior: String,
    pub method: String,
    pub seed: u64,
    pub elbo_mean: f64,
    pub elbo_std: f64,
    pub s_mean: f64,
    pub s_std: f64,
    pub ks: f64,
    pub w1: f64,
    /// Coverage KL and its MC standard error; synthetic + GMM prior only.
    pub coverage_kl: Option<McEstimate>,
    /// Mean per-point KL(q, p2); synthetic only.
    pub kl_q_p2: Option<f64>,
    pub entropy: f64,
    /// Mean per-point KL(q, p_Z), the OOD shift ingredient.
    pub kl_q_prior: f64,
    pub n_points: usize,
    pub config_hash: String,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "prior,method,seed,elbo_mean,elbo_std,s_mean,s_std,ks,w1,coverage_kl,coverage_kl_se,kl_q_p2,entropy,kl_q_prior,n_points,config_hash";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.prior,
            self.method,
            self.seed,
            self.elbo_mean,
            self.elbo_std,
            self.s_mean,
            self.s_std,
            self.ks,
            self.w1,
            opt(self.coverage_kl.map(|e| e.value)),
            opt(self.coverage_kl.map(|e| e.std_error)),
            opt(self.kl_q_p2),
            self.entropy,
            self.kl_q_prior,
            self.n_points,
            self.config_hash,
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<MetricsReport> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 16 {
            return Err(Error::Format(format!(
                "metrics row has {} fields, expected 16",
                fields.len()
            )));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("bad float `{s}` in metrics row")))
        };
        let opt_f = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() { Ok(None) } else { f(s).map(Some) }
        };
        let coverage = match (opt_f(fields[9])?, opt_f(fields[10])?) {
            (Some(v), Some(se)) => Some(McEstimate { value: v, std_error: se }),
            (None, None) => None,
            _ => return Err(Error::Format("coverage value/se must appear together".into())),
        };
        Ok(MetricsReport {
            prior: fields[0].to_string(),
            method: fields[1].to_string(),
            seed: fields[2].parse().map_err(|_| Error::Format("bad seed".into()))?,
            elbo_mean: f(fields[3])?,
            elbo_std: f(fields[4])?,
            s_mean: f(fields[5])?,
            s_std: f(fields[6])?,
            ks: f(fields[7])?,
            w1: f(fields[8])?,
            coverage_kl: coverage,
            kl_q_p2: opt_f(fields[11])?,
            entropy: f(fields[12])?,
            kl_q_prior: f(fields[13])?,
            n_points: fields[14].parse().map_err(|_| Error::Format("bad n_points".into()))?,
            config_hash: fields[15].to_string(),
        })
    }
}

/// OOD-minus-in-distribution shifts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OodShifts {
    pub d_elbo: f64,
    pub d_s: f64,
    /// Shift of the posterior-prior divergence KL(q || p_Z).
    pub d_kl: f64,
    pub d_entropy: f64,
}

/// Shifts between an in-distribution report and an OOD report produced by
/// the same model (same config hash).
pub fn ood_shifts(in_report: &MetricsReport, ood_report: &MetricsReport) -> Result<OodShifts> {
    if in_report.config_hash != ood_report.config_hash {
        return Err(Error::contract(format!(
            "reports come from different models: {} vs {}",
            in_report.config_hash, ood_report.config_hash
        )));
    }
    Ok(OodShifts {
        d_elbo: ood_report.elbo_mean - in_report.elbo_mean,
        d_s: ood_report.s_mean - in_report.s_mean,
        d_kl: ood_report.kl_q_prior - in_report.kl_q_prior,
        d_entropy: ood_report.entropy - in_report.entropy,
    })
}
