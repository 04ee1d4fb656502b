//! External log-density teachers over PCA projections.
//!
//! Every teacher attaches to each point a log-density `rho_i` (nats) and a
//! standard error `sigma_i`; the aligners turn the latter into precision
//! weights. Estimation is brute-force and exact: correctness before speed.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::synthgen::{ancestor_logpdf, SyntheticDataset};
use crate::tensor::{logsumexp, Tensor};

/// Linear projector onto the top-`d` principal components.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjector {
    /// Data mean, length D.
    pub mean: Vec<f64>,
    /// d x D, orthonormal rows ordered by non-increasing variance.
    pub components: Tensor,
    /// Variance captured by each component.
    pub explained_variance: Vec<f64>,
}

impl PcaProjector {
    pub fn input_dim(&self) -> usize {
        self.components.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.components.shape()[0]
    }

    /// u = W (x - m) for every row of `x`.
    pub fn project(&self, x: &Tensor) -> Tensor {
        let (n, big_d) = (x.shape()[0], x.shape()[1]);
        assert_eq!(big_d, self.input_dim(), "projector dimension mismatch");
        let d = self.output_dim();
        let w = self.components.data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = x.row(i);
            for c in 0..d {
                let mut s = 0.0;
                for j in 0..big_d {
                    s += w[c * big_d + j] * (row[j] - self.mean[j]);
                }
                out[i * d + c] = s;
            }
        }
        Tensor::matrix(n, d, out)
    }

    /// x_hat = W^T u + m; exact for points inside the span.
    pub fn reconstruct(&self, u: &Tensor) -> Tensor {
        let (n, d) = (u.shape()[0], u.shape()[1]);
        assert_eq!(d, self.output_dim());
        let big_d = self.input_dim();
        let w = self.components.data();
        let mut out = vec![0.0; n * big_d];
        for i in 0..n {
            for j in 0..big_d {
                let mut s = self.mean[j];
                for c in 0..d {
                    s += w[c * big_d + j] * u.data()[i * d + c];
                }
                out[i * big_d + j] = s;
            }
        }
        Tensor::matrix(n, big_d, out)
    }
}

/// Which estimator produced a [`DensityEstimate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorTag {
    Oracle,
    Kde,
    KnnAdaptive,
}

impl EstimatorTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorTag::Oracle => "oracle",
            EstimatorTag::Kde => "kde",
            EstimatorTag::KnnAdaptive => "knn-adaptive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "oracle" => Some(EstimatorTag::Oracle),
            "kde" => Some(EstimatorTag::Kde),
            "knn-adaptive" => Some(EstimatorTag::KnnAdaptive),
            _ => None,
        }
    }
}

/// Per-point external log-densities with uncertainties.
#[derive(Clone, Debug)]
pub struct DensityEstimate {
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
    pub estimator: EstimatorTag,
    pub projector: PcaProjector,
    /// Set when the adaptive kNN rule had to fall back on duplicates.
    pub duplicate_fallback: bool,
}

impl DensityEstimate {
    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho.len() != self.sigma.len() {
            return Err(Error::contract("rho/sigma length mismatch"));
        }
        if self.rho.iter().any(|r| !r.is_finite()) {
            return Err(Error::contract("non-finite rho"));
        }
        if self.sigma.iter().any(|&s| s <= 0.0) {
            return Err(Error::contract("sigma must be positive"));
        }
        Ok(())
    }
}

/// Top-`d` PCA of the rows of `x` via eigendecomposition of the sample
/// covariance. Component signs are fixed so the largest-magnitude entry of
/// each row is positive.
pub fn fit_pca(x: &Tensor, d: usize) -> Result<PcaProjector> {
    let (n, big_d) = (x.shape()[0], x.shape()[1]);
    if d < 1 || d > big_d {
        return Err(Error::contract(format!("pca output dim {d} out of range for D={big_d}")));
    }
    if n <= d {
        return Err(Error::contract(format!("pca needs more samples than components ({n} <= {d})")));
    }
    let mut mean = vec![0.0; big_d];
    for i in 0..n {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += x.at(i, j);
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; big_d * big_d];
    for i in 0..n {
        let row = x.row(i);
        for a in 0..big_d {
            let da = row[a] - mean[a];
            if da == 0.0 {
                continue;
            }
            for b in a..big_d {
                cov[a * big_d + b] += da * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..big_d {
        for b in a..big_d {
            cov[a * big_d + b] /= denom;
            cov[b * big_d + a] = cov[a * big_d + b];
        }
    }
    let m = DMatrix::from_row_slice(big_d, big_d, &cov);
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..big_d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let mut components = vec![0.0; d * big_d];
    let mut explained = vec![0.0; d];
    for (c, &src) in order.iter().take(d).enumerate() {
        let col = eig.eigenvectors.column(src);
        let mut best = 0usize;
        for j in 0..big_d {
            if col[j].abs() > col[best].abs() {
                best = j;
            }
        }
        let sign = if col[best] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..big_d {
            components[c * big_d + j] = sign * col[j];
        }
        explained[c] = eig.eigenvalues[src].max(0.0);
    }
    Ok(PcaProjector {
        mean,
        components: Tensor::matrix(d, big_d, components),
        explained_variance: explained,
    })
}

/// Silverman-style scalar bandwidth: `sigma_bar * (4 / ((d+2) N))^(1/(d+4))`
/// with `sigma_bar` the root mean per-dimension variance.
pub fn silverman_bandwidth(u: &Tensor) -> f64 {
    let (n, d) = (u.shape()[0], u.shape()[1]);
    let mut var_sum = 0.0;
    for j in 0..d {
        let mut m = 0.0;
        for i in 0..n {
            m += u.at(i, j);
        }
        m /= n as f64;
        let mut v = 0.0;
        for i in 0..n {
            let dx = u.at(i, j) - m;
            v += dx * dx;
        }
        var_sum += v / (n - 1).max(1) as f64;
    }
    let sigma_bar = (var_sum / d as f64).sqrt();
    sigma_bar * (4.0 / ((d as f64 + 2.0) * n as f64)).powf(1.0 / (d as f64 + 4.0))
}

/// Leave-one-out Gaussian KDE log-densities at the sample points.
///
/// `rho_i = logsumexp_{j != i} (-||u_i - u_j||^2 / (2 h^2))
///          - ln(N-1) - (d/2) ln(2 pi h^2)`, `sigma_i = 1`.
pub fn kde_logdensity(u: &Tensor, projector: &PcaProjector, h: f64) -> Result<DensityEstimate> {
    let (n, d) = (u.shape()[0], u.shape()[1]);
    if n < 2 {
        return Err(Error::contract("kde needs at least two points"));
    }
    if h <= 0.0 {
        return Err(Error::contract("kde bandwidth must be positive"));
    }
    let norm = -((n - 1) as f64).ln() - 0.5 * d as f64 * (2.0 * std::f64::consts::PI * h * h).ln();
    let inv2h2 = 1.0 / (2.0 * h * h);
    let ud = u.data();
    let mut rho = vec![0.0; n];
    let mut kernel = vec![0.0; n - 1];
    for i in 0..n {
        let ui = &ud[i * d..(i + 1) * d];
        let mut w = 0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let uj = &ud[j * d..(j + 1) * d];
            let mut sq = 0.0;
            for c in 0..d {
                let diff = ui[c] - uj[c];
                sq += diff * diff;
            }
            kernel[w] = -sq * inv2h2;
            w += 1;
        }
        rho[i] = logsumexp(&kernel) + norm;
    }
    Ok(DensityEstimate {
        rho,
        sigma: vec![1.0; n],
        estimator: EstimatorTag::Kde,
        projector: projector.clone(),
        duplicate_fallback: false,
    })
}

/// Volume of the d-dimensional unit ball.
pub fn unit_ball_volume(d: usize) -> f64 {
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * std::f64::consts::PI / d as f64 * unit_ball_volume(d - 2),
    }
}

fn knn_point_estimate(k: usize, n: usize, d: usize, radius: f64) -> (f64, f64) {
    let rho =
        (k as f64).ln() - (n as f64).ln() - (unit_ball_volume(d) * radius.powi(d as i32)).ln();
    (rho, (k as f64).powf(-0.5))
}

/// Plain kNN density at fixed k: `rho_i = ln k - ln N - ln(omega_d r_k^d)`.
pub fn knn_logdensity_fixed(u: &Tensor, projector: &PcaProjector, k: usize) -> Result<DensityEstimate> {
    let (n, d) = (u.shape()[0], u.shape()[1]);
    if n <= k || k < 1 {
        return Err(Error::contract(format!("fixed kNN needs N > k >= 1, got N={n} k={k}")));
    }
    let mut rho = vec![0.0; n];
    let mut sigma = vec![0.0; n];
    for i in 0..n {
        let dists = neighbor_distances(u, i, k);
        let r = dists[k - 1];
        if r <= 0.0 {
            return Err(Error::contract(format!("point {i} has {k} coincident neighbors")));
        }
        let (rh, sg) = knn_point_estimate(k, n, d, r);
        rho[i] = rh;
        sigma[i] = sg;
    }
    Ok(DensityEstimate {
        rho,
        sigma,
        estimator: EstimatorTag::KnnAdaptive,
        projector: projector.clone(),
        duplicate_fallback: false,
    })
}

/// Sorted distances from point `i` to its `k` nearest neighbors (self excluded).
fn neighbor_distances(u: &Tensor, i: usize, k: usize) -> Vec<f64> {
    let (n, d) = (u.shape()[0], u.shape()[1]);
    let ud = u.data();
    let ui = &ud[i * d..(i + 1) * d];
    let mut dists: Vec<f64> = Vec::with_capacity(n - 1);
    for j in 0..n {
        if j == i {
            continue;
        }
        let uj = &ud[j * d..(j + 1) * d];
        let mut sq = 0.0;
        for c in 0..d {
            let diff = ui[c] - uj[c];
            sq += diff * diff;
        }
        dists.push(sq);
    }
    let k = k.min(dists.len());
    dists.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
    let mut head: Vec<f64> = dists[..k].to_vec();
    head.sort_by(|a, b| a.partial_cmp(b).unwrap());
    head.iter().map(|sq| sq.sqrt()).collect()
}

/// Adaptive kNN log-densities: per point, k grows through powers of two
/// (4, 8, 16, ...) up to `k_max` while the density stays locally constant
/// under `|rho(k) - rho(k_prev)| <= z (sigma(k) + sigma(k_prev))`, z = 2.
/// `sigma_i = k_hat^{-1/2}`. Points whose k_max-neighborhood is entirely
/// coincident fall back to k = k_max at the smallest positive radius and
/// raise the `duplicate_fallback` flag.
pub fn knn_logdensity_adaptive(
    u: &Tensor,
    projector: &PcaProjector,
    k_max: usize,
) -> Result<DensityEstimate> {
    let (n, d) = (u.shape()[0], u.shape()[1]);
    if k_max < 4 || n <= k_max {
        return Err(Error::contract(format!(
            "adaptive kNN needs N > k_max >= 4, got N={n} k_max={k_max}"
        )));
    }
    const Z: f64 = 2.0;
    let mut rho = vec![0.0; n];
    let mut sigma = vec![0.0; n];
    let mut fallback = false;
    for i in 0..n {
        let dists = neighbor_distances(u, i, k_max);
        let mut chosen: Option<(f64, f64)> = None;
        let mut prev: Option<(f64, f64)> = None;
        let mut k = 4usize;
        while k <= k_max {
            let r = dists[k - 1];
            if r <= 0.0 {
                // Coincident run; a larger neighborhood may still resolve it.
                k *= 2;
                continue;
            }
            let (rh, sg) = knn_point_estimate(k, n, d, r);
            if let Some((prh, psg)) = prev {
                if (rh - prh).abs() > Z * (sg + psg) {
                    break;
                }
            }
            chosen = Some((rh, sg));
            prev = Some((rh, sg));
            k *= 2;
        }
        let (rh, sg) = match chosen {
            Some(v) => v,
            None => {
                // Duplicates past every ladder rung: fixed k = k_max at the
                // smallest positive radius, searching the whole sample if the
                // k_max-neighborhood is entirely coincident.
                fallback = true;
                let r = match dists.iter().find(|&&r| r > 0.0) {
                    Some(&r) => r,
                    None => {
                        let all = neighbor_distances(u, i, n - 1);
                        match all.iter().find(|&&r| r > 0.0) {
                            Some(&r) => r,
                            None => {
                                return Err(Error::contract(format!(
                                    "point {i}: every other point coincides with it"
                                )))
                            }
                        }
                    }
                };
                knn_point_estimate(k_max, n, d, r)
            }
        };
        rho[i] = rh;
        sigma[i] = sg;
    }
    Ok(DensityEstimate {
        rho,
        sigma,
        estimator: EstimatorTag::KnnAdaptive,
        projector: projector.clone(),
        duplicate_fallback: fallback,
    })
}

/// Ground-truth teacher for synthetic data: the 2D generator density at each
/// point's ancestor, with unit sigma. The projector still comes from PCA so
/// downstream flow training has its projection space.
pub fn oracle_teacher(ds: &SyntheticDataset, projector: &PcaProjector) -> DensityEstimate {
    let n = ds.len();
    let rho: Vec<f64> = (0..n).map(|i| ancestor_logpdf(ds.x.row(i), ds)).collect();
    DensityEstimate {
        rho,
        sigma: vec![1.0; n],
        estimator: EstimatorTag::Oracle,
        projector: projector.clone(),
        duplicate_fallback: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_2PI: f64 = 1.8378770664093453;
    use crate::rng::Rng;
    use crate::synthgen::{build_dataset, Gmm2dSpec};
    use crate::tensor::mean;

    fn randn_matrix(rng: &mut Rng, n: usize, d: usize) -> Tensor {
        Tensor::matrix(n, d, rng.normal_vec(n * d))
    }

    /// Embed 2D data into R^big_d through two fixed orthonormal directions.
    fn planar_data(rng: &mut Rng, n: usize, big_d: usize) -> (Tensor, Tensor) {
        let u = randn_matrix(rng, n, 2);
        let mut basis = vec![0.0; 2 * big_d];
        basis[0] = 1.0; // e0
        basis[big_d + 3] = 1.0; // e3
        let mut x = vec![0.0; n * big_d];
        for i in 0..n {
            for j in 0..big_d {
                x[i * big_d + j] = 3.0 * u.at(i, 0) * basis[j] + 1.5 * u.at(i, 1) * basis[big_d + j] + 0.25;
            }
        }
        (Tensor::matrix(n, big_d, x), u)
    }

    #[test]
    fn pca_captures_exact_plane() {
        let mut rng = Rng::new(1, 1);
        let (x, _) = planar_data(&mut rng, 500, 10);
        let p = fit_pca(&x, 2).unwrap();
        let total: f64 = {
            // Total variance = trace of covariance; recompute directly.
            let n = 500;
            let mut mean = vec![0.0; 10];
            for i in 0..n {
                for j in 0..10 {
                    mean[j] += x.at(i, j) / n as f64;
                }
            }
            let mut tr = 0.0;
            for i in 0..n {
                for j in 0..10 {
                    let d = x.at(i, j) - mean[j];
                    tr += d * d;
                }
            }
            tr / (n - 1) as f64
        };
        let captured: f64 = p.explained_variance.iter().sum();
        assert!(captured / total >= 0.9999, "captured {} of {}", captured, total);

        // Reconstruction of in-span points is lossless.
        let u = p.project(&x);
        let back = p.reconstruct(&u);
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-8);
        }

        // Orthonormal rows.
        let w = p.components.data();
        for a in 0..2 {
            for b in 0..2 {
                let mut s = 0.0;
                for j in 0..10 {
                    s += w[a * 10 + j] * w[b * 10 + j];
                }
                let t = if a == b { 1.0 } else { 0.0 };
                assert!((s - t).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pca_matches_power_iteration_oracle() {
        // Independent route: power iteration with deflation on the explicit
        // covariance.
        let mut rng = Rng::new(2, 1);
        let n = 400;
        let d = 6;
        // Anisotropic data so eigenvalues are distinct.
        let mut x = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                x[i * d + j] = rng.normal() * (1.0 + j as f64);
            }
        }
        let x = Tensor::matrix(n, d, x);
        let p = fit_pca(&x, 2).unwrap();

        // Explicit covariance.
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += x.at(i, j) / n as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for i in 0..n {
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += (x.at(i, a) - mean[a]) * (x.at(i, b) - mean[b]) / (n - 1) as f64;
                }
            }
        }
        let mut deflated = cov.clone();
        for c in 0..2 {
            // Power iteration.
            let mut v = vec![1.0; d];
            for _ in 0..10_000 {
                let mut nv = vec![0.0; d];
                for a in 0..d {
                    for b in 0..d {
                        nv[a] += deflated[a * d + b] * v[b];
                    }
                }
                let norm: f64 = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
                for a in 0..d {
                    v[a] = nv[a] / norm;
                }
            }
            let lam: f64 = {
                let mut av = vec![0.0; d];
                for a in 0..d {
                    for b in 0..d {
                        av[a] += deflated[a * d + b] * v[b];
                    }
                }
                av.iter().zip(&v).map(|(a, b)| a * b).sum()
            };
            // Sign-align and compare with the fitted component.
            let w = p.components.row(c);
            let dot: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
            let sign = if dot < 0.0 { -1.0 } else { 1.0 };
            for j in 0..d {
                assert!(
                    (w[j] - sign * v[j]).abs() < 1e-6,
                    "component {c} coord {j}: {} vs {}",
                    w[j],
                    sign * v[j]
                );
            }
            assert!((p.explained_variance[c] - lam).abs() / lam < 1e-6);
            // Deflate.
            for a in 0..d {
                for b in 0..d {
                    deflated[a * d + b] -= lam * v[a] * v[b];
                }
            }
        }
    }

    #[test]
    fn pca_rejects_bad_dims() {
        let x = Tensor::matrix(5, 3, vec![0.0; 15]);
        assert!(fit_pca(&x, 4).is_err());
        assert!(fit_pca(&x, 0).is_err());
    }

    fn dummy_projector(d: usize) -> PcaProjector {
        let mut comp = vec![0.0; d * d];
        for i in 0..d {
            comp[i * d + i] = 1.0;
        }
        PcaProjector {
            mean: vec![0.0; d],
            components: Tensor::matrix(d, d, comp),
            explained_variance: vec![1.0; d],
        }
    }

    #[test]
    fn kde_coincident_pair() {
        let u = Tensor::matrix(2, 2, vec![0.3, -0.1, 0.3, -0.1]);
        let h = 0.5;
        let est = kde_logdensity(&u, &dummy_projector(2), h).unwrap();
        let expect = -(2.0 * std::f64::consts::PI * h * h).ln(); // d=2, N-1=1, kernel at 0
        for r in est.rho {
            assert!((r - expect).abs() < 1e-12, "{r} vs {expect}");
        }
    }

    #[test]
    fn kde_tracks_gaussian_truth() {
        let mut rng = Rng::new(10, 1);
        let n = 10_000;
        let u = randn_matrix(&mut rng, n, 2);
        let est = kde_logdensity(&u, &dummy_projector(2), 0.2).unwrap();
        let mut errs = Vec::new();
        for i in 0..n {
            let (a, b) = (u.at(i, 0), u.at(i, 1));
            if (a * a + b * b).sqrt() < 2.0 {
                let truth = -LN_2PI - 0.5 * (a * a + b * b);
                errs.push((est.rho[i] - truth).abs());
            }
        }
        let m = mean(&errs);
        assert!(m < 0.15, "mean abs error {m} over {} points", errs.len());
    }

    #[test]
    fn kde_scale_equivariance() {
        let mut rng = Rng::new(11, 1);
        let n = 200;
        let u = randn_matrix(&mut rng, n, 2);
        let c = 3.0;
        let scaled = u.map(|x| c * x);
        let base = kde_logdensity(&u, &dummy_projector(2), 0.4).unwrap();
        let shifted = kde_logdensity(&scaled, &dummy_projector(2), 0.4 * c).unwrap();
        for (a, b) in base.rho.iter().zip(&shifted.rho) {
            assert!((b - (a - 2.0 * c.ln())).abs() < 1e-9, "{b} vs {}", a - 2.0 * c.ln());
        }
    }

    #[test]
    fn knn_uniform_disc_density() {
        // Uniform on the unit disc has density 1/pi.
        let mut rng = Rng::new(12, 1);
        let n = 10_000;
        let mut pts = Vec::with_capacity(n * 2);
        while pts.len() < n * 2 {
            let x = rng.uniform_in(-1.0, 1.0);
            let y = rng.uniform_in(-1.0, 1.0);
            if x * x + y * y <= 1.0 {
                pts.push(x);
                pts.push(y);
            }
        }
        let u = Tensor::matrix(n, 2, pts);
        let est = knn_logdensity_adaptive(&u, &dummy_projector(2), 64).unwrap();
        let mut inner = Vec::new();
        for i in 0..n {
            if (u.at(i, 0).powi(2) + u.at(i, 1).powi(2)).sqrt() < 0.8 {
                inner.push(est.rho[i]);
            }
        }
        let m = mean(&inner);
        let truth = -std::f64::consts::PI.ln();
        assert!((m - truth).abs() < 0.1, "mean rho {m} vs {truth}");
    }

    #[test]
    fn adaptive_with_minimal_ladder_matches_fixed_formula() {
        let mut rng = Rng::new(13, 1);
        let u = randn_matrix(&mut rng, 64, 2);
        // k_max = 4 leaves a single rung, so adaptivity must reduce to the
        // plain fixed-k estimator.
        let adaptive = knn_logdensity_adaptive(&u, &dummy_projector(2), 4).unwrap();
        let fixed = knn_logdensity_fixed(&u, &dummy_projector(2), 4).unwrap();
        for (a, b) in adaptive.rho.iter().zip(&fixed.rho) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for s in &adaptive.sigma {
            assert_eq!(*s, 0.5); // 4^{-1/2}
        }
    }

    #[test]
    fn sigma_decreases_with_khat() {
        let mut rng = Rng::new(14, 1);
        let u = randn_matrix(&mut rng, 2000, 2);
        let est = knn_logdensity_adaptive(&u, &dummy_projector(2), 128).unwrap();
        // sigma = k^{-1/2} over the ladder is non-increasing in k.
        let ladder = [4usize, 8, 16, 32, 64, 128];
        for w in ladder.windows(2) {
            assert!((w[1] as f64).powf(-0.5) <= (w[0] as f64).powf(-0.5));
        }
        // Every sigma is on the ladder.
        for s in &est.sigma {
            assert!(ladder.iter().any(|&k| (s - (k as f64).powf(-0.5)).abs() < 1e-12));
        }
    }

    #[test]
    fn duplicate_heavy_input_falls_back_with_flag() {
        // 12 copies of one point + a spread cloud; k_max = 8 < 12 duplicates.
        let mut rng = Rng::new(15, 1);
        let mut data = Vec::new();
        for _ in 0..12 {
            data.extend_from_slice(&[5.0, 5.0]);
        }
        for _ in 0..40 {
            data.push(rng.normal());
            data.push(rng.normal());
        }
        let u = Tensor::matrix(52, 2, data);
        let est = knn_logdensity_adaptive(&u, &dummy_projector(2), 8).unwrap();
        assert!(est.duplicate_fallback);
        assert!(est.rho.iter().all(|r| r.is_finite()));
    }

    #[test]
    fn estimators_are_permutation_equivariant() {
        let mut rng = Rng::new(16, 1);
        let n = 120;
        let u = randn_matrix(&mut rng, n, 2);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let mut pd = vec![0.0; n * 2];
        for (dst, &src) in perm.iter().enumerate() {
            pd[dst * 2] = u.at(src, 0);
            pd[dst * 2 + 1] = u.at(src, 1);
        }
        let permuted = Tensor::matrix(n, 2, pd);

        let base_kde = kde_logdensity(&u, &dummy_projector(2), 0.3).unwrap();
        let perm_kde = kde_logdensity(&permuted, &dummy_projector(2), 0.3).unwrap();
        let base_knn = knn_logdensity_adaptive(&u, &dummy_projector(2), 16).unwrap();
        let perm_knn = knn_logdensity_adaptive(&permuted, &dummy_projector(2), 16).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert!((base_kde.rho[src] - perm_kde.rho[dst]).abs() < 1e-12);
            assert!((base_knn.rho[src] - perm_knn.rho[dst]).abs() < 1e-12);
            assert!((base_knn.sigma[src] - perm_knn.sigma[dst]).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_rmse_improves_with_sample_size() {
        let truth = |a: f64, b: f64| -LN_2PI - 0.5 * (a * a + b * b);
        let mut rmse = Vec::new();
        for &n in &[1000usize, 10_000] {
            let mut rng = Rng::new(17, 1);
            let u = randn_matrix(&mut rng, n, 2);
            let est = knn_logdensity_adaptive(&u, &dummy_projector(2), 64).unwrap();
            let mut sq = 0.0;
            for i in 0..n {
                let e = est.rho[i] - truth(u.at(i, 0), u.at(i, 1));
                sq += e * e;
            }
            rmse.push((sq / n as f64).sqrt());
        }
        assert!(rmse[1] < rmse[0], "rmse did not improve: {rmse:?}");
    }

    #[test]
    fn oracle_teacher_passthrough() {
        let spec = Gmm2dSpec::circle(4, 5.0, 0.4);
        let (train, _) = build_dataset(&spec, 20, 0.02, 500, 10, 3);
        let projector = fit_pca(&train.x, 2).unwrap();
        let est = oracle_teacher(&train, &projector);
        assert!(est.sigma.iter().all(|&s| s == 1.0));
        for i in 0..train.len() {
            assert_eq!(est.rho[i], ancestor_logpdf(train.x.row(i), &train));
        }
        // Recomputed mean agrees with the teacher's mean.
        let direct: Vec<f64> = (0..train.len()).map(|i| ancestor_logpdf(train.x.row(i), &train)).collect();
        assert!((mean(&est.rho) - mean(&direct)).abs() < 1e-12);
    }

    #[test]
    fn pca_recovers_generator_plane_on_synthetic_data() {
        let spec = Gmm2dSpec::circle(4, 5.0, 0.4);
        let (train, _) = build_dataset(&spec, 50, 0.02, 4000, 10, 7);
        let p = fit_pca(&train.x, 2).unwrap();
        let u_pca = p.project(&train.x);
        // Ancestors.
        let n = train.len();
        let mut u_anc = vec![0.0; n * 2];
        for i in 0..n {
            let x = train.x.row(i);
            for c in 0..2 {
                let mut s = 0.0;
                for j in 0..50 {
                    s += train.projector.data()[c * 50 + j] * x[j];
                }
                u_anc[i * 2 + c] = s;
            }
        }
        // Least-squares 2x2 map from PCA coords (centered) to ancestors
        // (centered), then per-coordinate correlation.
        let mean_pca = [
            (0..n).map(|i| u_pca.at(i, 0)).sum::<f64>() / n as f64,
            (0..n).map(|i| u_pca.at(i, 1)).sum::<f64>() / n as f64,
        ];
        let mean_anc = [
            (0..n).map(|i| u_anc[i * 2]).sum::<f64>() / n as f64,
            (0..n).map(|i| u_anc[i * 2 + 1]).sum::<f64>() / n as f64,
        ];
        let mut gram = [[0.0; 2]; 2];
        let mut cross = [[0.0; 2]; 2];
        for i in 0..n {
            let pc = [u_pca.at(i, 0) - mean_pca[0], u_pca.at(i, 1) - mean_pca[1]];
            let an = [u_anc[i * 2] - mean_anc[0], u_anc[i * 2 + 1] - mean_anc[1]];
            for a in 0..2 {
                for b in 0..2 {
                    gram[a][b] += pc[a] * pc[b];
                    cross[a][b] += pc[a] * an[b];
                }
            }
        }
        let det = gram[0][0] * gram[1][1] - gram[0][1] * gram[1][0];
        let ginv = [
            [gram[1][1] / det, -gram[0][1] / det],
            [-gram[1][0] / det, gram[0][0] / det],
        ];
        // A = G^{-1} C maps centered PCA coords onto ancestors.
        let mut a_map = [[0.0; 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                a_map[r][c] = ginv[r][0] * cross[0][c] + ginv[r][1] * cross[1][c];
            }
        }
        for c in 0..2 {
            let mut pred = Vec::with_capacity(n);
            let mut actual = Vec::with_capacity(n);
            for i in 0..n {
                let pc = [u_pca.at(i, 0) - mean_pca[0], u_pca.at(i, 1) - mean_pca[1]];
                pred.push(pc[0] * a_map[0][c] + pc[1] * a_map[1][c]);
                actual.push(u_anc[i * 2 + c] - mean_anc[c]);
            }
            let mp = mean(&pred);
            let ma = mean(&actual);
            let mut num = 0.0;
            let mut dp = 0.0;
            let mut da = 0.0;
            for i in 0..n {
                num += (pred[i] - mp) * (actual[i] - ma);
                dp += (pred[i] - mp).powi(2);
                da += (actual[i] - ma).powi(2);
            }
            let corr = num / (dp * da).sqrt();
            assert!(corr > 0.99, "coordinate {c}: correlation {corr}");
        }
    }
}
