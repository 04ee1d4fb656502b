//! Encoder/decoder networks, the three priors, reparameterized sampling,
//! the per-point ELBO and the log-prior probability s(z).
//!
//! Every forward quantity exists twice: a taped version for training and a
//! plain version for evaluation. The two must agree to float precision; a
//! test pins that.

use crate::autodiff::{Tape, Var};
use crate::rng::Rng;
use crate::tensor::{logsumexp, Tensor};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Clamp range for log-variances.
const LOGVAR_LO: f64 = -10.0;
const LOGVAR_HI: f64 = 10.0;
/// Bernoulli head output clamp.
const BERNOULLI_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// One-hidden-layer MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub activation: Activation,
}

impl Mlp {
    /// Uniform fan-in init, biases zero.
    pub fn init(input: usize, hidden: usize, output: usize, activation: Activation, rng: &mut Rng) -> Self {
        let bound1 = 1.0 / (input as f64).sqrt();
        let bound2 = 1.0 / (hidden as f64).sqrt();
        let w1 = Tensor::matrix(input, hidden, (0..input * hidden).map(|_| rng.uniform_in(-bound1, bound1)).collect());
        let w2 = Tensor::matrix(hidden, output, (0..hidden * output).map(|_| rng.uniform_in(-bound2, bound2)).collect());
        Mlp {
            w1,
            b1: Tensor::zeros(vec![hidden]),
            w2,
            b2: Tensor::zeros(vec![output]),
            activation,
        }
    }

    pub fn forward_plain(&self, x: &Tensor) -> Tensor {
        let (n, input) = (x.shape()[0], x.shape()[1]);
        assert_eq!(input, self.w1.shape()[0]);
        let hidden = self.w1.shape()[1];
        let output = self.w2.shape()[1];
        let mut h = vec![0.0; n * hidden];
        crate::tensor::matmul(x, &self.w1, &mut h);
        for i in 0..n {
            for j in 0..hidden {
                let v = h[i * hidden + j] + self.b1.data()[j];
                h[i * hidden + j] = match self.activation {
                    Activation::Tanh => v.tanh(),
                    Activation::Identity => v,
                };
            }
        }
        let ht = Tensor::matrix(n, hidden, h);
        let mut o = vec![0.0; n * output];
        crate::tensor::matmul(&ht, &self.w2, &mut o);
        for i in 0..n {
            for j in 0..output {
                o[i * output + j] += self.b2.data()[j];
            }
        }
        Tensor::matrix(n, output, o)
    }
}

/// Tape handles for one MLP.
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub activation: Activation,
}

pub fn bind_mlp(tape: &mut Tape, mlp: &Mlp) -> MlpVars {
    MlpVars {
        w1: tape.param(mlp.w1.clone()),
        b1: tape.param(mlp.b1.clone()),
        w2: tape.param(mlp.w2.clone()),
        b2: tape.param(mlp.b2.clone()),
        activation: mlp.activation,
    }
}

pub fn mlp_forward(tape: &mut Tape, vars: &MlpVars, x: Var) -> Var {
    let h0 = tape.matmul(x, vars.w1);
    let h1 = tape.add_row(h0, vars.b1);
    let h = match vars.activation {
        Activation::Tanh => tape.tanh(h1),
        Activation::Identity => h1,
    };
    let o0 = tape.matmul(h, vars.w2);
    tape.add_row(o0, vars.b2)
}

/// Diagonal-Gaussian encoder; the MLP emits `(mu, log sigma^2)` stacked.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub net: Mlp,
    pub latent_dim: usize,
}

impl Encoder {
    pub fn new(input: usize, hidden: usize, latent_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        Encoder { net: Mlp::init(input, hidden, 2 * latent_dim, activation, rng), latent_dim }
    }

    /// Returns `(mu, logvar)` with logvar clamped to [-10, 10].
    pub fn forward_plain(&self, x: &Tensor) -> (Tensor, Tensor) {
        let out = self.net.forward_plain(x);
        let (n, d) = (out.shape()[0], self.latent_dim);
        let mut mu = vec![0.0; n * d];
        let mut logvar = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                mu[i * d + j] = out.at(i, j);
                logvar[i * d + j] = out.at(i, d + j).clamp(LOGVAR_LO, LOGVAR_HI);
            }
        }
        (Tensor::matrix(n, d, mu), Tensor::matrix(n, d, logvar))
    }
}

pub fn encode(tape: &mut Tape, vars: &MlpVars, latent_dim: usize, x: Var) -> (Var, Var) {
    let out = mlp_forward(tape, vars, x);
    let mu = tape.slice_last(out, 0, latent_dim);
    let raw_logvar = tape.slice_last(out, latent_dim, latent_dim);
    let logvar = tape.clamp(raw_logvar, LOGVAR_LO, LOGVAR_HI);
    (mu, logvar)
}

/// z = mu + sigma * eps with sigma = exp(logvar / 2).
pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, eps: Var) -> Var {
    let half = tape.scale(logvar, 0.5);
    let sigma = tape.exp(half);
    let noise = tape.mul(sigma, eps);
    tape.add(mu, noise)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecoderHead {
    Gaussian { sigma_x: f64 },
    Bernoulli,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub net: Mlp,
    pub head: DecoderHead,
}

impl Decoder {
    pub fn new(latent: usize, hidden: usize, output: usize, head: DecoderHead, activation: Activation, rng: &mut Rng) -> Self {
        Decoder { net: Mlp::init(latent, hidden, output, activation, rng), head }
    }

    /// Per-point log-likelihood log p(x | z), plain path.
    pub fn loglik_plain(&self, x: &Tensor, z: &Tensor) -> Vec<f64> {
        let out = self.net.forward_plain(z);
        let (n, d) = (x.shape()[0], x.shape()[1]);
        assert_eq!(out.shape(), x.shape());
        let mut ll = vec![0.0; n];
        match self.head {
            DecoderHead::Gaussian { sigma_x } => {
                let c = -0.5 * (2.0 * std::f64::consts::PI * sigma_x * sigma_x).ln();
                for i in 0..n {
                    let mut s = 0.0;
                    for j in 0..d {
                        let r = x.at(i, j) - out.at(i, j);
                        s += -r * r / (2.0 * sigma_x * sigma_x) + c;
                    }
                    ll[i] = s;
                }
            }
            DecoderHead::Bernoulli => {
                for i in 0..n {
                    let mut s = 0.0;
                    for j in 0..d {
                        let t = x.at(i, j);
                        assert!((0.0..=1.0).contains(&t), "Bernoulli target {t} outside [0,1]");
                        let p = sigmoid(out.at(i, j)).clamp(BERNOULLI_EPS, 1.0 - BERNOULLI_EPS);
                        s += t * p.ln() + (1.0 - t) * (1.0 - p).ln();
                    }
                    ll[i] = s;
                }
            }
        }
        ll
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Taped per-point log-likelihood rows.
pub fn decoder_loglik(tape: &mut Tape, vars: &MlpVars, head: DecoderHead, x_const: Var, z: Var) -> Var {
    let out = mlp_forward(tape, vars, z);
    let d = tape.value(x_const).shape()[1];
    match head {
        DecoderHead::Gaussian { sigma_x } => {
            let r = tape.sub(x_const, out);
            let sq = tape.square(r);
            let ssq = tape.sum_rows(sq);
            let scaled = tape.scale(ssq, -1.0 / (2.0 * sigma_x * sigma_x));
            let c = -0.5 * (2.0 * std::f64::consts::PI * sigma_x * sigma_x).ln();
            tape.add_const(scaled, d as f64 * c)
        }
        DecoderHead::Bernoulli => {
            assert!(
                tape.value(x_const).data().iter().all(|t| (0.0..=1.0).contains(t)),
                "Bernoulli targets outside [0,1]"
            );
            let p0 = tape.sigmoid(out);
            let p = tape.clamp(p0, BERNOULLI_EPS, 1.0 - BERNOULLI_EPS);
            let lp = tape.ln(p);
            let t1 = tape.mul(x_const, lp);
            let negp = tape.scale(p, -1.0);
            let one_minus_p = tape.add_const(negp, 1.0);
            let lq = tape.ln(one_minus_p);
            let negx = tape.scale(x_const, -1.0);
            let one_minus_x = tape.add_const(negx, 1.0);
            let t2 = tape.mul(one_minus_x, lq);
            let s = tape.add(t1, t2);
            tape.sum_rows(s)
        }
    }
}

/// Latent prior. The Vamp variant evaluates through the encoder.
#[derive(Clone, Debug)]
pub enum Prior {
    Standard { dim: usize },
    Gmm {
        /// Unnormalized component log-weights, length k.
        logits: Tensor,
        /// k x d component means.
        means: Tensor,
        /// k x d per-dimension log-scales.
        log_scales: Tensor,
    },
    Vamp {
        /// K x input_dim learnable pseudo-inputs.
        pseudo: Tensor,
    },
}

impl Prior {
    pub fn standard(dim: usize) -> Self {
        Prior::Standard { dim }
    }

    pub fn gmm_init(k: usize, d: usize, rng: &mut Rng) -> Self {
        Prior::Gmm {
            logits: Tensor::zeros(vec![k]),
            means: Tensor::matrix(k, d, rng.normal_vec(k * d)),
            log_scales: Tensor::zeros(vec![k, d]),
        }
    }

    pub fn vamp_init(k: usize, input_dim: usize, center: f64, rng: &mut Rng) -> Self {
        let data = (0..k * input_dim).map(|_| center + 0.1 * rng.normal()).collect();
        Prior::Vamp { pseudo: Tensor::matrix(k, input_dim, data) }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            Prior::Standard { .. } => "standard",
            Prior::Gmm { .. } => "gmm",
            Prior::Vamp { .. } => "vamp",
        }
    }

    /// log p_Z(z) for each row of `z`. Vamp needs the encoder.
    pub fn logpdf_plain(&self, z: &Tensor, encoder: Option<&Encoder>) -> Vec<f64> {
        self.prepare(encoder).logpdf_batch(z)
    }

    /// Resolve everything needed for repeated density evaluations. For the
    /// Vamp prior this runs the encoder over the pseudo-inputs once, which
    /// matters when a metric evaluates the prior thousands of times.
    pub fn prepare(&self, encoder: Option<&Encoder>) -> PreparedPrior {
        match self {
            Prior::Standard { dim } => PreparedPrior::Standard { dim: *dim },
            Prior::Gmm { logits, means, log_scales } => {
                let lse = logsumexp(logits.data());
                PreparedPrior::Mixture {
                    log_weights: logits.data().iter().map(|l| l - lse).collect(),
                    means: means.clone(),
                    // Stored as log sigma per dimension.
                    log_sigmas: log_scales.clone(),
                }
            }
            Prior::Vamp { pseudo } => {
                let enc = encoder.expect("vamp prior evaluation needs the encoder");
                let (mu_p, logvar_p) = enc.forward_plain(pseudo);
                let k = pseudo.shape()[0];
                let d = mu_p.shape()[1];
                let log_sigmas =
                    Tensor::matrix(k, d, logvar_p.data().iter().map(|lv| 0.5 * lv).collect());
                PreparedPrior::Mixture {
                    log_weights: vec![-(k as f64).ln(); k],
                    means: mu_p,
                    log_sigmas,
                }
            }
        }
    }
}

/// A prior with all derived quantities resolved for plain evaluation.
#[derive(Clone, Debug)]
pub enum PreparedPrior {
    Standard { dim: usize },
    Mixture {
        log_weights: Vec<f64>,
        /// k x d.
        means: Tensor,
        /// k x d log standard deviations.
        log_sigmas: Tensor,
    },
}

impl PreparedPrior {
    pub fn dim(&self) -> usize {
        match self {
            PreparedPrior::Standard { dim } => *dim,
            PreparedPrior::Mixture { means, .. } => means.shape()[1],
        }
    }

    /// log p_Z at each row of `z`.
    pub fn logpdf_batch(&self, z: &Tensor) -> Vec<f64> {
        let (n, d) = (z.shape()[0], z.shape()[1]);
        match self {
            PreparedPrior::Standard { dim } => {
                assert_eq!(*dim, d);
                (0..n)
                    .map(|i| {
                        let mut q = 0.0;
                        for j in 0..d {
                            q += z.at(i, j) * z.at(i, j);
                        }
                        -0.5 * d as f64 * LN_2PI - 0.5 * q
                    })
                    .collect()
            }
            PreparedPrior::Mixture { log_weights, means, log_sigmas } => {
                assert_eq!(means.shape()[1], d);
                let k = log_weights.len();
                let mut comps = vec![0.0; k];
                (0..n)
                    .map(|i| {
                        for (c, comp) in comps.iter_mut().enumerate() {
                            let mut q = 0.0;
                            let mut sum_ls = 0.0;
                            for j in 0..d {
                                let ls = log_sigmas.at(c, j);
                                let r = (z.at(i, j) - means.at(c, j)) / ls.exp();
                                q += r * r;
                                sum_ls += ls;
                            }
                            *comp =
                                log_weights[c] - 0.5 * q - sum_ls - 0.5 * d as f64 * LN_2PI;
                        }
                        logsumexp(&comps)
                    })
                    .collect()
            }
        }
    }
}

/// Tape handles for a prior.
#[derive(Clone, Debug)]
pub enum PriorVars {
    Standard { dim: usize },
    Gmm { logits: Var, means: Var, log_scales: Var, k: usize },
    Vamp { pseudo: Var, encoder: MlpVars, latent_dim: usize, k: usize },
}

/// Bind prior parameters. For Vamp the encoder vars must be the same leaves
/// used by the recognition path so gradients pool correctly.
pub fn bind_prior(tape: &mut Tape, prior: &Prior, encoder_vars: Option<(&MlpVars, usize)>) -> PriorVars {
    match prior {
        Prior::Standard { dim } => PriorVars::Standard { dim: *dim },
        Prior::Gmm { logits, means, log_scales } => PriorVars::Gmm {
            logits: tape.param(logits.clone()),
            means: tape.param(means.clone()),
            log_scales: tape.param(log_scales.clone()),
            k: logits.numel(),
        },
        Prior::Vamp { pseudo } => {
            let (enc, latent_dim) = encoder_vars.expect("vamp prior binding needs encoder vars");
            PriorVars::Vamp {
                pseudo: tape.param(pseudo.clone()),
                encoder: *enc,
                latent_dim,
                k: pseudo.shape()[0],
            }
        }
    }
}

/// Taped log p_Z(z) rows: the one-sample log-prior probability `s_i`.
pub fn prior_logpdf(tape: &mut Tape, prior: &PriorVars, z: Var) -> Var {
    let d = tape.value(z).shape()[1];
    match prior {
        PriorVars::Standard { dim } => {
            assert_eq!(*dim, d);
            let sq = tape.square(z);
            let ssq = tape.sum_rows(sq);
            let half = tape.scale(ssq, -0.5);
            tape.add_const(half, -0.5 * d as f64 * LN_2PI)
        }
        PriorVars::Gmm { logits, means, log_scales, k } => {
            // log-softmax of the component logits
            let logits_row = tape.reshape(*logits, vec![1, *k]);
            let lse = tape.logsumexp_rows(logits_row);
            let neg_lse = tape.scale(lse, -1.0);
            let log_pi = tape.badd(*logits, neg_lse);
            let mut cols = Vec::with_capacity(*k);
            for c in 0..*k {
                let mu_row = tape.slice_rows(*means, c, 1);
                let ls_row = tape.slice_rows(*log_scales, c, 1);
                let neg_mu = tape.scale(mu_row, -1.0);
                let centered = tape.add_row(z, neg_mu);
                let neg_ls = tape.scale(ls_row, -1.0);
                let inv_scale = tape.exp(neg_ls);
                let std = tape.mul_row(centered, inv_scale);
                let sq = tape.square(std);
                let q = tape.sum_rows(sq);
                let qh = tape.scale(q, -0.5);
                let sum_ls = tape.sum_all(ls_row);
                let neg_sum_ls = tape.scale(sum_ls, -1.0);
                let t1 = tape.badd(qh, neg_sum_ls);
                let lpi_c = tape.slice_last(log_pi, c, 1);
                let t2 = tape.badd(t1, lpi_c);
                let t3 = tape.add_const(t2, -0.5 * d as f64 * LN_2PI);
                let n = tape.value(t3).numel();
                cols.push(tape.reshape(t3, vec![n, 1]));
            }
            let stacked = tape.concat_last(&cols);
            tape.logsumexp_rows(stacked)
        }
        PriorVars::Vamp { pseudo, encoder, latent_dim, k } => {
            let (mu_p, logvar_p) = encode(tape, encoder, *latent_dim, *pseudo);
            let mut cols = Vec::with_capacity(*k);
            for c in 0..*k {
                let mu_row = tape.slice_rows(mu_p, c, 1);
                let lv_row = tape.slice_rows(logvar_p, c, 1);
                let neg_mu = tape.scale(mu_row, -1.0);
                let centered = tape.add_row(z, neg_mu);
                let neg_half_lv = tape.scale(lv_row, -0.5);
                let inv_sigma = tape.exp(neg_half_lv);
                let std = tape.mul_row(centered, inv_sigma);
                let sq = tape.square(std);
                let q = tape.sum_rows(sq);
                let qh = tape.scale(q, -0.5);
                let half_lv = tape.scale(lv_row, 0.5);
                let sum_ls = tape.sum_all(half_lv);
                let neg_sum_ls = tape.scale(sum_ls, -1.0);
                let t1 = tape.badd(qh, neg_sum_ls);
                let t2 = tape.add_const(t1, -0.5 * d as f64 * LN_2PI - (*k as f64).ln());
                let n = tape.value(t2).numel();
                cols.push(tape.reshape(t2, vec![n, 1]));
            }
            let stacked = tape.concat_last(&cols);
            tape.logsumexp_rows(stacked)
        }
    }
}

/// The full model.
#[derive(Clone, Debug)]
pub struct VaeModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub prior: Prior,
}

impl VaeModel {
    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim
    }

    /// Stable name -> tensor map, used by the optimizer and checkpoints.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("enc/w1".to_string(), &self.encoder.net.w1),
            ("enc/b1".to_string(), &self.encoder.net.b1),
            ("enc/w2".to_string(), &self.encoder.net.w2),
            ("enc/b2".to_string(), &self.encoder.net.b2),
            ("dec/w1".to_string(), &self.decoder.net.w1),
            ("dec/b1".to_string(), &self.decoder.net.b1),
            ("dec/w2".to_string(), &self.decoder.net.w2),
            ("dec/b2".to_string(), &self.decoder.net.b2),
        ];
        match &self.prior {
            Prior::Standard { .. } => {}
            Prior::Gmm { logits, means, log_scales } => {
                out.push(("prior/logits".to_string(), logits));
                out.push(("prior/means".to_string(), means));
                out.push(("prior/log_scales".to_string(), log_scales));
            }
            Prior::Vamp { pseudo } => out.push(("prior/pseudo".to_string(), pseudo)),
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("enc/w1".to_string(), &mut self.encoder.net.w1),
            ("enc/b1".to_string(), &mut self.encoder.net.b1),
            ("enc/w2".to_string(), &mut self.encoder.net.w2),
            ("enc/b2".to_string(), &mut self.encoder.net.b2),
            ("dec/w1".to_string(), &mut self.decoder.net.w1),
            ("dec/b1".to_string(), &mut self.decoder.net.b1),
            ("dec/w2".to_string(), &mut self.decoder.net.w2),
            ("dec/b2".to_string(), &mut self.decoder.net.b2),
        ];
        match &mut self.prior {
            Prior::Standard { .. } => {}
            Prior::Gmm { logits, means, log_scales } => {
                out.push(("prior/logits".to_string(), logits));
                out.push(("prior/means".to_string(), means));
                out.push(("prior/log_scales".to_string(), log_scales));
            }
            Prior::Vamp { pseudo } => out.push(("prior/pseudo".to_string(), pseudo)),
        }
        out
    }
}

/// Tape bindings for the whole model, in `named_params` order.
pub struct VaeVars {
    pub encoder: MlpVars,
    pub decoder: MlpVars,
    pub prior: PriorVars,
    pub latent_dim: usize,
    pub head: DecoderHead,
}

impl VaeVars {
    /// `(name, var)` pairs matching [`VaeModel::named_params`] order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = vec![
            ("enc/w1".to_string(), self.encoder.w1),
            ("enc/b1".to_string(), self.encoder.b1),
            ("enc/w2".to_string(), self.encoder.w2),
            ("enc/b2".to_string(), self.encoder.b2),
            ("dec/w1".to_string(), self.decoder.w1),
            ("dec/b1".to_string(), self.decoder.b1),
            ("dec/w2".to_string(), self.decoder.w2),
            ("dec/b2".to_string(), self.decoder.b2),
        ];
        match &self.prior {
            PriorVars::Standard { .. } => {}
            PriorVars::Gmm { logits, means, log_scales, .. } => {
                out.push(("prior/logits".to_string(), *logits));
                out.push(("prior/means".to_string(), *means));
                out.push(("prior/log_scales".to_string(), *log_scales));
            }
            PriorVars::Vamp { pseudo, .. } => out.push(("prior/pseudo".to_string(), *pseudo)),
        }
        out
    }
}

pub fn bind_vae(tape: &mut Tape, model: &VaeModel) -> VaeVars {
    let encoder = bind_mlp(tape, &model.encoder.net);
    let decoder = bind_mlp(tape, &model.decoder.net);
    let latent_dim = model.latent_dim();
    let prior = bind_prior(tape, &model.prior, Some((&encoder, latent_dim)));
    VaeVars { encoder, decoder, prior, latent_dim, head: model.decoder.head }
}

/// Everything the losses need from one taped VAE pass.
pub struct VaeForward {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    /// Per-point reconstruction log-likelihood, `[B]`.
    pub recon_ll: Var,
    /// Per-point KL term (analytic for the standard prior, one-sample
    /// otherwise), `[B]`.
    pub kl: Var,
    /// Per-point log-prior probability s_i = log p_Z(z_i), `[B]`.
    pub s: Var,
}

/// Build the taped forward pass for one batch.
pub fn vae_forward(tape: &mut Tape, vars: &VaeVars, x_const: Var, eps_const: Var) -> VaeForward {
    let (mu, logvar) = encode(tape, &vars.encoder, vars.latent_dim, x_const);
    let z = reparameterize(tape, mu, logvar, eps_const);
    let recon_ll = decoder_loglik(tape, &vars.decoder, vars.head, x_const, z);
    let s = prior_logpdf(tape, &vars.prior, z);
    let kl = match vars.prior {
        PriorVars::Standard { .. } => {
            // 0.5 * sum(mu^2 + sigma^2 - 1 - logvar)
            let mu2 = tape.square(mu);
            let sig2 = tape.exp(logvar);
            let sum = tape.add(mu2, sig2);
            let lv1 = tape.add_const(logvar, 1.0);
            let inner = tape.sub(sum, lv1);
            let ssum = tape.sum_rows(inner);
            tape.scale(ssum, 0.5)
        }
        _ => {
            // One-sample estimate: log q(z|x) - log p_Z(z). With z = mu +
            // sigma*eps the density term reduces to -(||eps||^2 + sum logvar
            // + d ln 2pi)/2 where eps is the recorded noise.
            let d = vars.latent_dim;
            let eps_t = tape.value(eps_const).clone();
            let n = eps_t.shape()[0];
            let mut c_rows = vec![0.0; n];
            for i in 0..n {
                let mut sq = 0.0;
                for j in 0..d {
                    sq += eps_t.at(i, j) * eps_t.at(i, j);
                }
                c_rows[i] = -0.5 * sq - 0.5 * d as f64 * LN_2PI;
            }
            let c = tape.constant(Tensor::vector(c_rows));
            let slv = tape.sum_rows(logvar);
            let neg_half_slv = tape.scale(slv, -0.5);
            let log_q = tape.add(neg_half_slv, c);
            tape.sub(log_q, s)
        }
    };
    VaeForward { mu, logvar, z, recon_ll, kl, s }
}

/// Plain-path per-point quantities for evaluation: `(elbo, s, mu, logvar, z)`.
pub struct PlainForward {
    pub elbo: Vec<f64>,
    pub s: Vec<f64>,
    pub mu: Tensor,
    pub logvar: Tensor,
    pub z: Tensor,
}

pub fn forward_plain(model: &VaeModel, x: &Tensor, eps: &Tensor) -> PlainForward {
    let (mu, logvar) = model.encoder.forward_plain(x);
    let (n, d) = (mu.shape()[0], mu.shape()[1]);
    let mut z = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            z[i * d + j] = mu.at(i, j) + (0.5 * logvar.at(i, j)).exp() * eps.at(i, j);
        }
    }
    let z = Tensor::matrix(n, d, z);
    let recon = model.decoder.loglik_plain(x, &z);
    let s = model.prior.logpdf_plain(&z, Some(&model.encoder));
    let mut elbo = vec![0.0; n];
    match model.prior {
        Prior::Standard { .. } => {
            for i in 0..n {
                let mut kl = 0.0;
                for j in 0..d {
                    let lv = logvar.at(i, j);
                    kl += 0.5 * (mu.at(i, j).powi(2) + lv.exp() - 1.0 - lv);
                }
                elbo[i] = recon[i] - kl;
            }
        }
        _ => {
            for i in 0..n {
                let mut log_q = 0.0;
                for j in 0..d {
                    let lv = logvar.at(i, j);
                    log_q += -0.5 * eps.at(i, j).powi(2) - 0.5 * lv - 0.5 * LN_2PI;
                }
                elbo[i] = recon[i] - (log_q - s[i]);
            }
        }
    }
    PlainForward { elbo, s, mu, logvar, z }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::rng::Rng;
    use crate::tensor::mean;

    fn small_model(prior: Prior, input: usize, latent: usize, rng: &mut Rng) -> VaeModel {
        VaeModel {
            encoder: Encoder::new(input, 4, latent, Activation::Tanh, rng),
            decoder: Decoder::new(latent, 4, input, DecoderHead::Gaussian { sigma_x: 0.5 }, Activation::Tanh, rng),
            prior,
        }
    }

    #[test]
    fn zero_noise_returns_mean() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::matrix(2, 2, vec![0.3, -0.1, 1.0, 2.0]));
        let logvar = tape.constant(Tensor::matrix(2, 2, vec![0.5, -0.5, 0.0, 1.0]));
        let eps = tape.constant(Tensor::zeros(vec![2, 2]));
        let z = reparameterize(&mut tape, mu, logvar, eps);
        assert_eq!(tape.value(z).data(), tape.value(mu).data());
    }

    #[test]
    fn tiny_variance_pins_z_near_mu() {
        let mut rng = Rng::new(1, 1);
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::matrix(1, 4, vec![0.0; 4]));
        let logvar = tape.constant(Tensor::filled(vec![1, 4], -10.0));
        let eps_t = Tensor::matrix(1, 4, rng.normal_vec(4));
        let eps_norm: f64 = eps_t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let eps = tape.constant(eps_t);
        let z = reparameterize(&mut tape, mu, logvar, eps);
        let z_norm: f64 = tape.value(z).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(z_norm <= 1e-2 * eps_norm, "z {z_norm} vs eps {eps_norm}");
    }

    #[test]
    fn encoder_gradients_pass_finite_differences() {
        let mut rng = Rng::new(2, 1);
        let enc = Encoder::new(5, 4, 2, Activation::Tanh, &mut rng);
        let x = Tensor::matrix(3, 5, rng.normal_vec(15));
        let eps = Tensor::matrix(3, 2, rng.normal_vec(6));
        let params = [enc.net.w1.clone(), enc.net.b1.clone(), enc.net.w2.clone(), enc.net.b2.clone()];
        let r = gradcheck::check(
            &params,
            &|t, v| {
                let vars = MlpVars { w1: v[0], b1: v[1], w2: v[2], b2: v[3], activation: Activation::Tanh };
                let xc = t.constant(x.clone());
                let ec = t.constant(eps.clone());
                let (mu, logvar) = encode(t, &vars, 2, xc);
                let z = reparameterize(t, mu, logvar, ec);
                let sq = t.square(z);
                t.sum_all(sq)
            },
            1e-4,
        );
        assert!(r.max_rel_err < 1e-5, "rel err {}", r.max_rel_err);
    }

    #[test]
    fn gaussian_loglik_constant_at_perfect_reconstruction() {
        // One output dim, x == xhat: the density constant remains.
        let mut rng = Rng::new(3, 1);
        let dec = Decoder::new(2, 4, 1, DecoderHead::Gaussian { sigma_x: 0.02 }, Activation::Tanh, &mut rng);
        let z = Tensor::matrix(1, 2, vec![0.3, -0.4]);
        let xhat = dec.net.forward_plain(&z);
        let ll = dec.loglik_plain(&xhat, &z);
        let expect = -0.5 * (2.0 * std::f64::consts::PI * 0.0004).ln();
        assert!((ll[0] - expect).abs() < 1e-10, "{} vs {expect}", ll[0]);
        assert!((expect - 2.9931).abs() < 1e-4);
    }

    #[test]
    fn bernoulli_loglik_at_half() {
        // xhat = 0.5 over 784 dims: -784 ln 2 regardless of targets.
        let mut rng = Rng::new(4, 1);
        let mut dec = Decoder::new(2, 4, 784, DecoderHead::Bernoulli, Activation::Tanh, &mut rng);
        // Zero final layer -> logits 0 -> sigmoid 0.5.
        dec.net.w2 = Tensor::zeros(dec.net.w2.shape().to_vec());
        dec.net.b2 = Tensor::zeros(dec.net.b2.shape().to_vec());
        let z = Tensor::matrix(1, 2, vec![0.1, 0.2]);
        let x = Tensor::matrix(1, 784, (0..784).map(|i| (i % 2) as f64).collect());
        let ll = dec.loglik_plain(&x, &z);
        let expect = -784.0 * std::f64::consts::LN_2;
        assert!((ll[0] - expect).abs() < 1e-9, "{} vs {expect}", ll[0]);
    }

    #[test]
    fn decoder_gradients_pass_finite_differences() {
        let mut rng = Rng::new(5, 1);
        let dec = Decoder::new(2, 4, 3, DecoderHead::Gaussian { sigma_x: 0.3 }, Activation::Tanh, &mut rng);
        let x = Tensor::matrix(4, 3, rng.normal_vec(12));
        let z = Tensor::matrix(4, 2, rng.normal_vec(8));
        let params = [dec.net.w1.clone(), dec.net.b1.clone(), dec.net.w2.clone(), dec.net.b2.clone()];
        let r = gradcheck::check(
            &params,
            &|t, v| {
                let vars = MlpVars { w1: v[0], b1: v[1], w2: v[2], b2: v[3], activation: Activation::Tanh };
                let xc = t.constant(x.clone());
                let zc = t.constant(z.clone());
                let ll = decoder_loglik(t, &vars, DecoderHead::Gaussian { sigma_x: 0.3 }, xc, zc);
                t.mean_all(ll)
            },
            1e-4,
        );
        assert!(r.max_rel_err < 1e-5, "rel err {}", r.max_rel_err);
    }

    #[test]
    fn standard_prior_at_origin() {
        let prior = Prior::standard(2);
        let z = Tensor::matrix(1, 2, vec![0.0, 0.0]);
        let lp = prior.logpdf_plain(&z, None);
        assert!((lp[0] + LN_2PI).abs() < 1e-12, "{}", lp[0]);
    }

    #[test]
    fn single_component_gmm_equals_gaussian() {
        let prior = Prior::Gmm {
            logits: Tensor::vector(vec![0.7]), // any single logit normalizes away
            means: Tensor::matrix(1, 2, vec![0.4, -0.2]),
            log_scales: Tensor::matrix(1, 2, vec![0.3, -0.1]),
        };
        let z = Tensor::matrix(1, 2, vec![1.0, 0.5]);
        let lp = prior.logpdf_plain(&z, None)[0];
        let mut expect = -LN_2PI;
        for (zj, (m, ls)) in [(1.0, (0.4, 0.3)), (0.5, (-0.2, -0.1))] {
            let s: f64 = (ls as f64).exp();
            let r: f64 = (zj - m) / s;
            expect += -0.5 * r * r - ls;
        }
        assert!((lp - expect).abs() < 1e-12, "{lp} vs {expect}");
    }

    #[test]
    fn gmm_logsumexp_matches_naive_sum() {
        let mut rng = Rng::new(6, 1);
        let prior = Prior::gmm_init(4, 2, &mut rng);
        let z = Tensor::matrix(8, 2, rng.normal_vec(16));
        let lp = prior.logpdf_plain(&z, None);
        // Naive route: sum of component densities in linear space.
        if let Prior::Gmm { logits, means, log_scales } = &prior {
            let lse = crate::tensor::logsumexp(logits.data());
            for i in 0..8 {
                let mut total = 0.0;
                for c in 0..4 {
                    let pi = (logits.data()[c] - lse).exp();
                    let mut dens = 1.0;
                    for j in 0..2 {
                        let s = log_scales.at(c, j).exp();
                        let r = (z.at(i, j) - means.at(c, j)) / s;
                        dens *= (-0.5 * r * r).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
                    }
                    total += pi * dens;
                }
                assert!((lp[i] - total.ln()).abs() < 1e-10, "row {i}");
            }
        }
    }

    #[test]
    fn taped_priors_match_plain_path() {
        let mut rng = Rng::new(7, 1);
        let z = Tensor::matrix(5, 2, rng.normal_vec(10));
        for prior in [
            Prior::standard(2),
            Prior::gmm_init(3, 2, &mut rng),
            Prior::vamp_init(3, 6, 0.0, &mut rng),
        ] {
            let enc = Encoder::new(6, 4, 2, Activation::Tanh, &mut rng);
            let mut tape = Tape::new();
            let enc_vars = bind_mlp(&mut tape, &enc.net);
            let pv = bind_prior(&mut tape, &prior, Some((&enc_vars, 2)));
            let zc = tape.constant(z.clone());
            let lp = prior_logpdf(&mut tape, &pv, zc);
            let plain = prior.logpdf_plain(&z, Some(&enc));
            for (a, b) in tape.value(lp).data().iter().zip(&plain) {
                assert!((a - b).abs() < 1e-12, "taped {a} vs plain {b} ({})", prior.variant_name());
            }
        }
    }

    #[test]
    fn prior_gradients_pass_finite_differences() {
        let mut rng = Rng::new(8, 1);
        let z = Tensor::matrix(4, 2, rng.normal_vec(8));
        let prior = Prior::gmm_init(3, 2, &mut rng);
        let (logits, means, log_scales) = match &prior {
            Prior::Gmm { logits, means, log_scales } => (logits.clone(), means.clone(), log_scales.clone()),
            _ => unreachable!(),
        };
        let r = gradcheck::check(
            &[logits, means, log_scales],
            &|t, v| {
                let pv = PriorVars::Gmm { logits: v[0], means: v[1], log_scales: v[2], k: 3 };
                let zc = t.constant(z.clone());
                let lp = prior_logpdf(t, &pv, zc);
                t.mean_all(lp)
            },
            1e-4,
        );
        assert!(r.max_rel_err < 1e-5, "rel err {}", r.max_rel_err);
    }

    #[test]
    fn standard_prior_kl_closed_forms() {
        // mu=0, sigma=1 -> KL 0; d=1, mu=1, sigma=1 -> KL 0.5.
        let mut rng = Rng::new(9, 1);
        let model = small_model(Prior::standard(2), 3, 2, &mut rng);
        let mut tape = Tape::new();
        let vars = bind_vae(&mut tape, &model);
        let mu = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]));
        let logvar = tape.constant(Tensor::zeros(vec![1, 2]));
        // KL formula evaluated directly.
        let mu2 = tape.square(mu);
        let sig2 = tape.exp(logvar);
        let sum = tape.add(mu2, sig2);
        let lv1 = tape.add_const(logvar, 1.0);
        let inner = tape.sub(sum, lv1);
        let ssum = tape.sum_rows(inner);
        let kl = tape.scale(ssum, 0.5);
        assert!(tape.value(kl).data()[0].abs() < 1e-12);
        let _ = vars;

        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::matrix(1, 1, vec![1.0]));
        let logvar = tape.constant(Tensor::zeros(vec![1, 1]));
        let mu2 = tape.square(mu);
        let sig2 = tape.exp(logvar);
        let sum = tape.add(mu2, sig2);
        let lv1 = tape.add_const(logvar, 1.0);
        let inner = tape.sub(sum, lv1);
        let ssum = tape.sum_rows(inner);
        let kl = tape.scale(ssum, 0.5);
        assert!((tape.value(kl).data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_sample_kl_is_unbiased_for_matching_gmm() {
        // GMM prior that equals the standard normal: the MC mean of the
        // one-sample KL estimate must approach the analytic KL.
        let mu: [f64; 2] = [0.7, -0.3];
        let logvar: [f64; 2] = [-0.4, 0.2];
        let analytic: f64 = (0..2)
            .map(|j| 0.5 * (mu[j] * mu[j] + logvar[j].exp() - 1.0 - logvar[j]))
            .sum();
        let prior = Prior::Gmm {
            logits: Tensor::vector(vec![0.0]),
            means: Tensor::matrix(1, 2, vec![0.0, 0.0]),
            log_scales: Tensor::matrix(1, 2, vec![0.0, 0.0]),
        };
        let mut rng = Rng::new(10, 1);
        let n = 10_000;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let eps = [rng.normal(), rng.normal()];
            let z = [
                mu[0] + (0.5 * logvar[0]).exp() * eps[0],
                mu[1] + (0.5 * logvar[1]).exp() * eps[1],
            ];
            let log_q: f64 = (0..2)
                .map(|j| -0.5 * eps[j] * eps[j] - 0.5 * logvar[j] - 0.5 * LN_2PI)
                .sum();
            let zt = Tensor::matrix(1, 2, z.to_vec());
            let log_p = prior.logpdf_plain(&zt, None)[0];
            samples.push(log_q - log_p);
        }
        let m = mean(&samples);
        let se = crate::tensor::std_dev(&samples) / (n as f64).sqrt();
        assert!((m - analytic).abs() < 3.0 * se, "mc {m} vs analytic {analytic} (se {se})");
    }

    #[test]
    fn gmm_prior_integrates_to_one() {
        let mut rng = Rng::new(11, 1);
        let prior = Prior::Gmm {
            logits: Tensor::vector(vec![0.3, -0.2]),
            means: Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.5]),
            log_scales: Tensor::matrix(2, 2, vec![-0.3, 0.1, 0.0, -0.5]),
        };
        let n = 400_000;
        let b = 6.0;
        let mut acc = 0.0;
        for _ in 0..n {
            let z = Tensor::matrix(1, 2, vec![rng.uniform_in(-b, b), rng.uniform_in(-b, b)]);
            acc += prior.logpdf_plain(&z, None)[0].exp();
        }
        let integral = (2.0 * b) * (2.0 * b) * acc / n as f64;
        assert!((integral - 1.0).abs() < 0.02, "integral {integral}");
    }

    #[test]
    fn elbo_lower_bounds_quadrature_marginal() {
        // Tiny linear-decoder model where p(x) = ∫ N(x; Wz+b, σ²I) N(z; 0, I) dz
        // is computable by 2D quadrature.
        let mut rng = Rng::new(12, 1);
        let model = VaeModel {
            encoder: Encoder::new(3, 4, 2, Activation::Tanh, &mut rng),
            decoder: Decoder::new(2, 4, 3, DecoderHead::Gaussian { sigma_x: 0.5 }, Activation::Identity, &mut rng),
            prior: Prior::standard(2),
        };
        let x = Tensor::matrix(1, 3, vec![0.4, -0.2, 0.1]);

        // Quadrature for log p(x).
        let step = 0.02;
        let lim = 6.0;
        let mut total = 0.0;
        let mut zq = -lim;
        while zq <= lim {
            let mut zq2 = -lim;
            while zq2 <= lim {
                let z = Tensor::matrix(1, 2, vec![zq, zq2]);
                let ll = model.decoder.loglik_plain(&x, &z)[0];
                let pz = -LN_2PI - 0.5 * (zq * zq + zq2 * zq2);
                total += (ll + pz).exp() * step * step;
                zq2 += step;
            }
            zq += step;
        }
        let log_px = total.ln();

        // MC ELBO.
        let n = 4000;
        let mut elbos = Vec::with_capacity(n);
        for _ in 0..n {
            let eps = Tensor::matrix(1, 2, rng.normal_vec(2));
            let f = forward_plain(&model, &x, &eps);
            elbos.push(f.elbo[0]);
        }
        let m = mean(&elbos);
        let se = crate::tensor::std_dev(&elbos) / (n as f64).sqrt();
        assert!(
            m <= log_px + 3.0 * se,
            "elbo {m} exceeds log p(x) {log_px} beyond MC error {se}"
        );
    }

    #[test]
    fn taped_forward_matches_plain_forward() {
        let mut rng = Rng::new(13, 1);
        for prior in [
            Prior::standard(2),
            Prior::gmm_init(3, 2, &mut rng),
            Prior::vamp_init(2, 5, 0.0, &mut rng),
        ] {
            let model = VaeModel {
                encoder: Encoder::new(5, 4, 2, Activation::Tanh, &mut rng),
                decoder: Decoder::new(2, 4, 5, DecoderHead::Gaussian { sigma_x: 0.3 }, Activation::Tanh, &mut rng),
                prior,
            };
            let x = Tensor::matrix(4, 5, rng.normal_vec(20));
            let eps = Tensor::matrix(4, 2, rng.normal_vec(8));
            let plain = forward_plain(&model, &x, &eps);

            let mut tape = Tape::new();
            let vars = bind_vae(&mut tape, &model);
            let xc = tape.constant(x.clone());
            let ec = tape.constant(eps.clone());
            let fwd = vae_forward(&mut tape, &vars, xc, ec);
            for i in 0..4 {
                let taped_elbo = tape.value(fwd.recon_ll).data()[i] - tape.value(fwd.kl).data()[i];
                assert!((taped_elbo - plain.elbo[i]).abs() < 1e-10, "elbo row {i}");
                assert!((tape.value(fwd.s).data()[i] - plain.s[i]).abs() < 1e-10, "s row {i}");
            }
        }
    }

    #[test]
    fn full_elbo_gradients_pass_finite_differences() {
        // End-to-end -ELBO through encoder, decoder, and gmm prior.
        let mut rng = Rng::new(14, 1);
        let model = VaeModel {
            encoder: Encoder::new(4, 3, 2, Activation::Tanh, &mut rng),
            decoder: Decoder::new(2, 3, 4, DecoderHead::Gaussian { sigma_x: 0.4 }, Activation::Tanh, &mut rng),
            prior: Prior::gmm_init(2, 2, &mut rng),
        };
        let x = Tensor::matrix(3, 4, rng.normal_vec(12));
        let eps = Tensor::matrix(3, 2, rng.normal_vec(6));
        let params: Vec<Tensor> = model.named_params().iter().map(|(_, t)| (*t).clone()).collect();
        let head = model.decoder.head;
        let r = gradcheck::check(
            &params,
            &|t, v| {
                let enc = MlpVars { w1: v[0], b1: v[1], w2: v[2], b2: v[3], activation: Activation::Tanh };
                let dec = MlpVars { w1: v[4], b1: v[5], w2: v[6], b2: v[7], activation: Activation::Tanh };
                let pv = PriorVars::Gmm { logits: v[8], means: v[9], log_scales: v[10], k: 2 };
                let vars = VaeVars { encoder: enc, decoder: dec, prior: pv, latent_dim: 2, head };
                let xc = t.constant(x.clone());
                let ec = t.constant(eps.clone());
                let fwd = vae_forward(t, &vars, xc, ec);
                let elbo = t.sub(fwd.recon_ll, fwd.kl);
                let m = t.mean_all(elbo);
                t.scale(m, -1.0)
            },
            1e-4,
        );
        assert!(r.max_rel_err < 1e-4, "rel err {}", r.max_rel_err);
    }
}
