//! Synthetic datasets: a 2D Gaussian mixture padded with low-variance filler
//! dimensions and spun through a random rotation, together with the
//! closed-form oracle log-densities of the construction.

use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use crate::tensor::{logsumexp, Tensor};

const LN_2PI: f64 = 1.8378770664093453;

/// 2D Gaussian mixture: weights, means, full symmetric covariances.
#[derive(Clone, Debug, PartialEq)]
pub struct Gmm2dSpec {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub covs: Vec<[[f64; 2]; 2]>,
}

impl Gmm2dSpec {
    /// Default generator: `k` equal-weight components with means equally
    /// spaced on a circle of radius `radius` and isotropic covariance
    /// `var * I`.
    pub fn circle(k: usize, radius: f64, var: f64) -> Self {
        assert!(k >= 1);
        let weights = vec![1.0 / k as f64; k];
        let means = (0..k)
            .map(|i| {
                let theta = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                [radius * theta.cos(), radius * theta.sin()]
            })
            .collect();
        let covs = vec![[[var, 0.0], [0.0, var]]; k];
        Gmm2dSpec { weights, means, covs }
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty()
            || self.weights.len() != self.means.len()
            || self.weights.len() != self.covs.len()
        {
            return Err(Error::contract("mixture spec fields have mismatched lengths"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("mixture weights sum to {total}, expected 1")));
        }
        if self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::contract("negative mixture weight"));
        }
        for (i, c) in self.covs.iter().enumerate() {
            let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
            if (c[0][1] - c[1][0]).abs() > 1e-12 {
                return Err(Error::contract(format!("covariance {i} is not symmetric")));
            }
            if det <= 0.0 || c[0][0] + c[1][1] <= 0.0 {
                return Err(Error::contract(format!("covariance {i} is not positive-definite")));
            }
        }
        Ok(())
    }

    /// log p2(u), every mixture evaluation through logsumexp.
    pub fn logpdf(&self, u: [f64; 2]) -> f64 {
        let terms: Vec<f64> = (0..self.components())
            .map(|k| self.weights[k].ln() + gauss2_logpdf(u, self.means[k], self.covs[k]))
            .collect();
        logsumexp(&terms)
    }

    /// Monte-Carlo mean of `log p2` under the mixture itself (negated
    /// differential entropy estimate).
    pub fn mc_mean_logpdf(&self, n: usize, rng: &mut Rng) -> f64 {
        let (us, _) = sample_gmm2d(self, n, rng);
        let vals: Vec<f64> = us.iter().map(|&u| self.logpdf(u)).collect();
        crate::tensor::mean(&vals)
    }
}

fn gauss2_logpdf(u: [f64; 2], mean: [f64; 2], cov: [[f64; 2]; 2]) -> f64 {
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let inv = [
        [cov[1][1] / det, -cov[0][1] / det],
        [-cov[1][0] / det, cov[0][0] / det],
    ];
    let d0 = u[0] - mean[0];
    let d1 = u[1] - mean[1];
    let q = d0 * (inv[0][0] * d0 + inv[0][1] * d1) + d1 * (inv[1][0] * d0 + inv[1][1] * d1);
    -LN_2PI - 0.5 * det.ln() - 0.5 * q
}

/// log N(w; 0, sigma^2)
fn gauss1_logpdf(w: f64, sigma: f64) -> f64 {
    -0.5 * LN_2PI - sigma.ln() - 0.5 * (w / sigma) * (w / sigma)
}

/// Which half of a generated pair a dataset belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Samples plus everything needed to evaluate exact densities on them.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    /// N x D samples.
    pub x: Tensor,
    /// Mixture component of each sample.
    pub labels: Vec<u32>,
    /// D x D orthogonal rotation with det +1.
    pub rotation: Tensor,
    /// 2 x D ancestor projector, the first two rows of `rotation` transposed.
    pub projector: Tensor,
    pub sigma_pad: f64,
    pub spec: Gmm2dSpec,
    pub split: Split,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }
}

/// Draw `n` points from the mixture: component per weights, then a Gaussian
/// draw inside the component. Deterministic given the RNG stream.
pub fn sample_gmm2d(spec: &Gmm2dSpec, n: usize, rng: &mut Rng) -> (Vec<[f64; 2]>, Vec<u32>) {
    assert!(n >= 1, "sample_gmm2d needs n >= 1");
    spec.validate().expect("invalid mixture spec");
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.categorical(&spec.weights);
        let c = spec.covs[k];
        // Cholesky of a 2x2 SPD matrix.
        let l00 = c[0][0].sqrt();
        let l10 = c[1][0] / l00;
        let l11 = (c[1][1] - l10 * l10).sqrt();
        let e0 = rng.normal();
        let e1 = rng.normal();
        points.push([
            spec.means[k][0] + l00 * e0,
            spec.means[k][1] + l10 * e0 + l11 * e1,
        ]);
        labels.push(k as u32);
    }
    (points, labels)
}

/// Random orthogonal `D x D` matrix with det +1, from modified Gram-Schmidt
/// on a Gaussian matrix (orthogonalized twice), sign-fixed via one column
/// flip when the determinant comes out negative.
pub fn random_rotation(dim: usize, seed: u64) -> Tensor {
    assert!(dim >= 2, "rotation needs dim >= 2");
    let mut rng = Rng::new(seed, stream::ROTATION);
    // Columns of `q` are built in place.
    let mut q = vec![0.0; dim * dim];
    for v in q.iter_mut() {
        *v = rng.normal();
    }
    for pass in 0..2 {
        let _ = pass;
        for j in 0..dim {
            for i in 0..j {
                let mut dot = 0.0;
                for r in 0..dim {
                    dot += q[r * dim + i] * q[r * dim + j];
                }
                for r in 0..dim {
                    q[r * dim + j] -= dot * q[r * dim + i];
                }
            }
            let mut norm = 0.0;
            for r in 0..dim {
                norm += q[r * dim + j] * q[r * dim + j];
            }
            let norm = norm.sqrt();
            for r in 0..dim {
                q[r * dim + j] /= norm;
            }
        }
    }
    if det_sign(&q, dim) < 0.0 {
        for r in 0..dim {
            q[r * dim] = -q[r * dim];
        }
    }
    Tensor::matrix(dim, dim, q)
}

/// Sign of the determinant via LU with partial pivoting.
fn det_sign(m: &[f64], dim: usize) -> f64 {
    let mut a = m.to_vec();
    let mut sign = 1.0;
    for col in 0..dim {
        let mut piv = col;
        for r in col + 1..dim {
            if a[r * dim + col].abs() > a[piv * dim + col].abs() {
                piv = r;
            }
        }
        if a[piv * dim + col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            for j in 0..dim {
                a.swap(col * dim + j, piv * dim + j);
            }
            sign = -sign;
        }
        if a[col * dim + col] < 0.0 {
            sign = -sign;
        }
        for r in col + 1..dim {
            let f = a[r * dim + col] / a[col * dim + col];
            for j in col..dim {
                a[r * dim + j] -= f * a[col * dim + j];
            }
        }
    }
    sign
}

/// Build train/val splits sharing one rotation: `x = R [u; w]` with
/// `w ~ N(0, sigma_pad^2 I)`.
pub fn build_dataset(
    spec: &Gmm2dSpec,
    dim: usize,
    sigma_pad: f64,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> (SyntheticDataset, SyntheticDataset) {
    let rotation = random_rotation(dim, seed);
    let train = build_split(spec, &rotation, dim, sigma_pad, n_train, seed, Split::Train);
    let val = build_split(spec, &rotation, dim, sigma_pad, n_val, seed, Split::Val);
    (train, val)
}

/// Same as [`build_dataset`] but with a caller-supplied rotation.
pub fn build_split(
    spec: &Gmm2dSpec,
    rotation: &Tensor,
    dim: usize,
    sigma_pad: f64,
    n: usize,
    seed: u64,
    split: Split,
) -> SyntheticDataset {
    assert!(dim >= 2);
    assert_eq!(rotation.shape(), &[dim, dim]);
    let stream_id = match split {
        Split::Train => stream::DATA_TRAIN,
        Split::Val => stream::DATA_VAL,
    };
    let mut rng = Rng::new(seed, stream_id);
    let (us, labels) = sample_gmm2d(spec, n, &mut rng);
    let m = dim - 2;
    let rd = rotation.data();
    let mut x = vec![0.0; n * dim];
    let mut z = vec![0.0; dim];
    for (i, u) in us.iter().enumerate() {
        z[0] = u[0];
        z[1] = u[1];
        for zj in z.iter_mut().skip(2).take(m) {
            *zj = sigma_pad * rng.normal();
        }
        // x = R z
        for r in 0..dim {
            let mut s = 0.0;
            for (c, zc) in z.iter().enumerate() {
                s += rd[r * dim + c] * zc;
            }
            x[i * dim + r] = s;
        }
    }
    let mut projector = vec![0.0; 2 * dim];
    for i in 0..2 {
        for j in 0..dim {
            projector[i * dim + j] = rd[j * dim + i];
        }
    }
    SyntheticDataset {
        x: Tensor::matrix(n, dim, x),
        labels,
        rotation: rotation.clone(),
        projector: Tensor::matrix(2, dim, projector),
        sigma_pad,
        spec: spec.clone(),
        split,
    }
}

/// Exact log-density of the generative construction at `x`:
/// `log p2(u) + sum_j log N(w_j; 0, sigma_pad^2)` with `(u, w) = R^T x`.
pub fn oracle_logpdf(x: &[f64], ds: &SyntheticDataset) -> f64 {
    let dim = ds.dim();
    assert_eq!(x.len(), dim, "point dimension mismatch");
    let rd = ds.rotation.data();
    // z = R^T x
    let mut u = [0.0; 2];
    let mut filler = 0.0;
    for c in 0..dim {
        let mut s = 0.0;
        for (r, xr) in x.iter().enumerate() {
            s += rd[r * dim + c] * xr;
        }
        if c < 2 {
            u[c] = s;
        } else {
            filler += gauss1_logpdf(s, ds.sigma_pad);
        }
    }
    ds.spec.logpdf(u) + filler
}

/// 2D generator density of the ancestor of `x`: `log p2(Pi x)`.
pub fn ancestor_logpdf(x: &[f64], ds: &SyntheticDataset) -> f64 {
    let dim = ds.dim();
    assert_eq!(x.len(), dim, "point dimension mismatch");
    let pd = ds.projector.data();
    let mut u = [0.0; 2];
    for (i, ui) in u.iter_mut().enumerate() {
        let mut s = 0.0;
        for (j, xj) in x.iter().enumerate() {
            s += pd[i * dim + j] * xj;
        }
        *ui = s;
    }
    ds.spec.logpdf(u)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(dim: usize) -> Tensor {
        let mut d = vec![0.0; dim * dim];
        for i in 0..dim {
            d[i * dim + i] = 1.0;
        }
        Tensor::matrix(dim, dim, d)
    }

    #[test]
    fn single_gaussian_moments() {
        let spec = Gmm2dSpec { weights: vec![1.0], means: vec![[0.0, 0.0]], covs: vec![[[1.0, 0.0], [0.0, 1.0]]] };
        let mut rng = Rng::new(0, 1);
        let n = 100_000;
        let (us, _) = sample_gmm2d(&spec, n, &mut rng);
        let mx = us.iter().map(|u| u[0]).sum::<f64>() / n as f64;
        let my = us.iter().map(|u| u[1]).sum::<f64>() / n as f64;
        assert!(mx.abs() < 0.02 && my.abs() < 0.02, "mean ({mx}, {my})");
        let mut cov = [0.0f64; 4];
        for u in &us {
            let d = [u[0] - mx, u[1] - my];
            cov[0] += d[0] * d[0];
            cov[1] += d[0] * d[1];
            cov[2] += d[1] * d[0];
            cov[3] += d[1] * d[1];
        }
        for c in cov.iter_mut() {
            *c /= n as f64;
        }
        assert!((cov[0] - 1.0).abs() < 0.05 && (cov[3] - 1.0).abs() < 0.05);
        assert!(cov[1].abs() < 0.05 && cov[2].abs() < 0.05);
    }

    #[test]
    fn degenerate_weights_pin_labels() {
        let spec = Gmm2dSpec {
            weights: vec![1.0, 0.0],
            means: vec![[0.0, 0.0], [9.0, 9.0]],
            covs: vec![[[1.0, 0.0], [0.0, 1.0]]; 2],
        };
        let mut rng = Rng::new(5, 1);
        let (_, labels) = sample_gmm2d(&spec, 500, &mut rng);
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let spec = Gmm2dSpec::circle(4, 5.0, 0.4);
        let mut r1 = Rng::new(3, 1);
        let mut r2 = Rng::new(3, 1);
        let (a, la) = sample_gmm2d(&spec, 100, &mut r1);
        let (b, lb) = sample_gmm2d(&spec, 100, &mut r2);
        assert_eq!(la, lb);
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p[0].to_bits(), q[0].to_bits());
            assert_eq!(p[1].to_bits(), q[1].to_bits());
        }
    }

    #[test]
    fn rotation_is_orthogonal_and_proper() {
        for (dim, seed) in [(2usize, 0u64), (5, 1), (30, 2), (50, 3)] {
            let r = random_rotation(dim, seed);
            let rd = r.data();
            // ||R^T R - I||_max
            let mut max_dev: f64 = 0.0;
            for i in 0..dim {
                for j in 0..dim {
                    let mut s = 0.0;
                    for k in 0..dim {
                        s += rd[k * dim + i] * rd[k * dim + j];
                    }
                    let target = if i == j { 1.0 } else { 0.0 };
                    max_dev = max_dev.max((s - target).abs());
                }
            }
            assert!(max_dev < 1e-10, "dim {dim}: orthogonality dev {max_dev}");
            assert!(det_sign(rd, dim) > 0.0, "dim {dim}: det sign");
            // Norm preservation on a random vector.
            let mut rng = Rng::new(99, 7);
            let v = rng.normal_vec(dim);
            let mut rv = vec![0.0; dim];
            for i in 0..dim {
                for j in 0..dim {
                    rv[i] += rd[i * dim + j] * v[j];
                }
            }
            let n0: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n1: f64 = rv.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n0 - n1).abs() < 1e-12, "norms {n0} vs {n1}");
        }
    }

    #[test]
    fn identity_rotation_degenerates_to_padding() {
        let spec = Gmm2dSpec::circle(3, 5.0, 0.4);
        let ds = build_split(&spec, &identity(6), 6, 1e-12, 64, 11, Split::Train);
        let mut rng = Rng::new(11, stream::DATA_TRAIN);
        let (us, _) = sample_gmm2d(&spec, 64, &mut rng);
        for i in 0..64 {
            assert!((ds.x.at(i, 0) - us[i][0]).abs() < 1e-9);
            assert!((ds.x.at(i, 1) - us[i][1]).abs() < 1e-9);
            for j in 2..6 {
                assert!(ds.x.at(i, j).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projector_recovers_ancestors() {
        let spec = Gmm2dSpec::circle(4, 5.0, 0.4);
        let (train, _) = build_dataset(&spec, 50, 0.02, 256, 8, 21);
        let mut rng = Rng::new(21, stream::DATA_TRAIN);
        let (us, _) = sample_gmm2d(&spec, 256, &mut rng);
        let dim = train.dim();
        let pd = train.projector.data();
        for i in 0..256 {
            let x = train.x.row(i);
            for c in 0..2 {
                let mut s = 0.0;
                for j in 0..dim {
                    s += pd[c * dim + j] * x[j];
                }
                assert!((s - us[i][c]).abs() < 1e-10, "row {i} coord {c}");
            }
        }
        // Pi Pi^T = I_2
        for a in 0..2 {
            for b in 0..2 {
                let mut s = 0.0;
                for j in 0..dim {
                    s += pd[a * dim + j] * pd[b * dim + j];
                }
                let target = if a == b { 1.0 } else { 0.0 };
                assert!((s - target).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn oracle_closed_form_at_origin() {
        let spec = Gmm2dSpec { weights: vec![1.0], means: vec![[0.0, 0.0]], covs: vec![[[1.0, 0.0], [0.0, 1.0]]] };
        let ds = build_split(&spec, &identity(3), 3, 0.02, 4, 1, Split::Train);
        let got = oracle_logpdf(&[0.0, 0.0, 0.0], &ds);
        let expect = -LN_2PI - 0.5 * (2.0 * std::f64::consts::PI * 0.02f64 * 0.02).ln();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        assert!((expect - 1.1552).abs() < 1e-4);
    }

    #[test]
    fn oracle_is_rotation_invariant() {
        let spec = Gmm2dSpec::circle(4, 5.0, 0.4);
        let (train, _) = build_dataset(&spec, 7, 0.02, 32, 4, 13);
        let mut rng = Rng::new(13, stream::DATA_TRAIN);
        let (us, _) = sample_gmm2d(&spec, 32, &mut rng);
        for i in 0..32 {
            // Recompute the factorized density from the pre-rotation coordinates.
            let x = train.x.row(i);
            let rd = train.rotation.data();
            let dim = 7;
            let mut filler = 0.0;
            for c in 2..dim {
                let mut s = 0.0;
                for r in 0..dim {
                    s += rd[r * dim + c] * x[r];
                }
                filler += gauss1_logpdf(s, 0.02);
            }
            let expect = spec.logpdf(us[i]) + filler;
            let got = oracle_logpdf(x, &train);
            assert!((got - expect).abs() < 1e-10, "row {i}: {got} vs {expect}");
        }
    }

    #[test]
    fn ancestor_equals_oracle_minus_filler_on_generated_points() {
        let spec = Gmm2dSpec::circle(4, 5.0, 0.4);
        let (train, _) = build_dataset(&spec, 12, 0.02, 64, 4, 17);
        let dim = 12;
        let rd = train.rotation.data();
        for i in 0..64 {
            let x = train.x.row(i);
            let mut filler = 0.0;
            for c in 2..dim {
                let mut s = 0.0;
                for r in 0..dim {
                    s += rd[r * dim + c] * x[r];
                }
                filler += gauss1_logpdf(s, 0.02);
            }
            let lhs = ancestor_logpdf(x, &train);
            let rhs = oracle_logpdf(x, &train) - filler;
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn symmetric_two_component_midpoint() {
        let spec = Gmm2dSpec {
            weights: vec![0.5, 0.5],
            means: vec![[1.0, 0.0], [-1.0, 0.0]],
            covs: vec![[[1.0, 0.0], [0.0, 1.0]]; 2],
        };
        let got = spec.logpdf([0.0, 0.0]);
        let expect = -LN_2PI - 0.5;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn oracle_density_integrates_to_one() {
        // D=3, k=1 standard Gaussian ancestor, MC quadrature over a box that
        // carries essentially all the mass.
        let spec = Gmm2dSpec { weights: vec![1.0], means: vec![[0.0, 0.0]], covs: vec![[[1.0, 0.0], [0.0, 1.0]]] };
        let rotation = random_rotation(3, 4);
        let ds = build_split(&spec, &rotation, 3, 0.02, 4, 4, Split::Train);
        let mut rng = Rng::new(100, stream::METRIC_MC);
        let n = 2_000_000;
        // Box in pre-rotation coordinates, then rotated into x-space.
        let rd = rotation.data();
        let mut acc = 0.0;
        let (bu, bw) = (4.5, 0.12);
        let volume = (2.0 * bu) * (2.0 * bu) * (2.0 * bw);
        for _ in 0..n {
            let z = [
                rng.uniform_in(-bu, bu),
                rng.uniform_in(-bu, bu),
                rng.uniform_in(-bw, bw),
            ];
            let mut x = [0.0; 3];
            for r in 0..3 {
                for c in 0..3 {
                    x[r] += rd[r * 3 + c] * z[c];
                }
            }
            acc += oracle_logpdf(&x, &ds).exp();
        }
        let integral = volume * acc / n as f64;
        assert!((integral - 1.0).abs() < 0.02, "integral {integral}");
    }

    #[test]
    fn ancestor_mean_matches_large_mc_reference() {
        let spec = Gmm2dSpec::circle(4, 5.0, 0.4);
        // Reference: negated differential entropy from a 10^6-draw MC run.
        let mut ref_rng = Rng::new(777, stream::METRIC_MC);
        let reference = spec.mc_mean_logpdf(1_000_000, &mut ref_rng);
        // Fresh 10^5-sample dataset mean of ancestor log-densities.
        let (train, _) = build_dataset(&spec, 10, 0.02, 100_000, 4, 31);
        let vals: Vec<f64> = (0..train.len())
            .map(|i| ancestor_logpdf(train.x.row(i), &train))
            .collect();
        let mean = crate::tensor::mean(&vals);
        let sd = crate::tensor::std_dev(&vals);
        let se = sd / (vals.len() as f64).sqrt();
        assert!(
            (mean - reference).abs() < 3.0 * se + 3.0 * sd / 1000.0,
            "mean {mean} vs reference {reference} (se {se})"
        );
    }
}
