//! Precision-weighted robust alignment of latent log-prior probabilities to
//! external log-densities, plus warm-up schedules and the total objective.

use crate::autodiff::{Tape, Var};
use crate::flow::{flow_forward, flow_mle_loss, FlowVars};
use crate::tensor::Tensor;
use crate::vae::{prior_logpdf, vae_forward, VaeVars};

/// Which alignment term the objective carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignMethod {
    None,
    Direct,
    Flow,
}

impl AlignMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            AlignMethod::None => "none",
            AlignMethod::Direct => "direct",
            AlignMethod::Flow => "flow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(AlignMethod::None),
            "direct" => Some(AlignMethod::Direct),
            "flow" => Some(AlignMethod::Flow),
            _ => None,
        }
    }
}

/// Alignment hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AlignConfig {
    pub method: AlignMethod,
    /// Huber threshold.
    pub delta: f64,
    /// Block encoder gradients through the alignment term.
    pub detach_encoder: bool,
    /// KL warm-up range, reached at half of training.
    pub kl_warmup_from: f64,
    pub kl_warmup_to: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            method: AlignMethod::None,
            delta: 1.0,
            detach_encoder: false,
            kl_warmup_from: 0.1,
            kl_warmup_to: 1.0,
        }
    }
}

/// Huber penalty: quadratic within `delta`, linear outside, C1 at the joint.
pub fn huber(e: f64, delta: f64) -> f64 {
    assert!(delta > 0.0, "huber delta must be positive");
    if e.abs() <= delta {
        0.5 * e * e
    } else {
        delta * (e.abs() - 0.5 * delta)
    }
}

/// Per-epoch warm-up factors: linear ramp of the alignment weight over the
/// whole run, KL factor ramp over the first half.
pub fn schedules(epoch: usize, total_epochs: usize, config: &AlignConfig) -> (f64, f64) {
    assert!(epoch < total_epochs, "epoch {epoch} out of {total_epochs}");
    let gamma = if total_epochs <= 1 {
        1.0
    } else {
        (epoch as f64 / (total_epochs - 1) as f64).clamp(0.0, 1.0)
    };
    let half = total_epochs as f64 / 2.0;
    let ramp = (epoch as f64 / half).min(1.0);
    let kl = config.kl_warmup_from + (config.kl_warmup_to - config.kl_warmup_from) * ramp;
    (gamma, kl)
}

/// sqrt of the precision-weighted mean Huber penalty of `residual`.
/// The sqrt has subgradient 0 at an exactly zero loss.
fn weighted_huber(tape: &mut Tape, residual: Var, sigma: &[f64], delta: f64) -> Var {
    let n = tape.value(residual).numel();
    assert!(n > 0, "empty alignment batch");
    assert_eq!(n, sigma.len(), "sigma length mismatch");
    assert!(sigma.iter().all(|&s| s > 0.0), "sigma must be positive");
    let w = tape.constant(Tensor::vector(sigma.iter().map(|s| 1.0 / (s * s)).collect()));
    let h = tape.huber(residual, delta);
    let wh = tape.mul(w, h);
    let m = tape.mean_all(wh);
    tape.sqrt(m)
}

/// Direct alignment: `sqrt((1/B) sum w_i huber(s_i - rho_i))`.
pub fn direct_align_loss(tape: &mut Tape, s: Var, rho: &[f64], sigma: &[f64], delta: f64) -> Var {
    let rho_c = tape.constant(Tensor::vector(rho.to_vec()));
    let r = tape.sub(s, rho_c);
    weighted_huber(tape, r, sigma, delta)
}

/// Flow-corrected alignment on the residual `s_i - rho_i - logdet J_f(z_i)`,
/// with the log-det term behind a stop-gradient: the flow is trained only by
/// its own maximum-likelihood loss.
pub fn flow_align_loss(
    tape: &mut Tape,
    s: Var,
    rho: &[f64],
    sigma: &[f64],
    logdet: Var,
    delta: f64,
) -> Var {
    let ld = tape.stop_gradient(logdet);
    flow_align_loss_raw(tape, s, rho, sigma, ld, delta)
}

/// Same residual without the stop-gradient; exists so tests can compare the
/// gradient flow of the two variants.
pub fn flow_align_loss_raw(
    tape: &mut Tape,
    s: Var,
    rho: &[f64],
    sigma: &[f64],
    logdet: Var,
    delta: f64,
) -> Var {
    let rho_c = tape.constant(Tensor::vector(rho.to_vec()));
    let r0 = tape.sub(s, rho_c);
    let r = tape.sub(r0, logdet);
    weighted_huber(tape, r, sigma, delta)
}

/// Per-batch loss value breakdown.
#[derive(Clone, Copy, Debug, Default)]
pub struct BatchDiagnostics {
    /// Mean single-sample ELBO with the full (un-warmed) KL.
    pub elbo: f64,
    pub align_loss: f64,
    pub flow_ml: f64,
    pub gamma: f64,
    pub kl_factor: f64,
}

/// Assemble the training objective for one batch.
///
/// `none`: -ELBO. `direct`: adds `gamma_t *` Eq.-style direct alignment.
/// `flow`: adds `gamma_t *` flow-corrected alignment plus the (unscaled)
/// flow maximum-likelihood term. The KL inside the ELBO is scaled by the
/// KL warm-up factor.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    model: &VaeVars,
    flow: Option<&FlowVars>,
    x_const: Var,
    eps_const: Var,
    u_const: Option<Var>,
    rho: &[f64],
    sigma: &[f64],
    config: &AlignConfig,
    epoch: usize,
    total_epochs: usize,
) -> (Var, BatchDiagnostics) {
    let (gamma, kl_factor) = schedules(epoch, total_epochs, config);
    let fwd = vae_forward(tape, model, x_const, eps_const);

    let scaled_kl = tape.scale(fwd.kl, kl_factor);
    let warmed_elbo = tape.sub(fwd.recon_ll, scaled_kl);
    let warmed_mean = tape.mean_all(warmed_elbo);
    let neg_elbo = tape.scale(warmed_mean, -1.0);

    // Full-KL ELBO for reporting.
    let full_elbo = {
        let e = tape.sub(fwd.recon_ll, fwd.kl);
        let m = tape.mean_all(e);
        tape.value(m).item()
    };

    let mut diag = BatchDiagnostics { elbo: full_elbo, gamma, kl_factor, ..Default::default() };

    if config.method == AlignMethod::None {
        return (neg_elbo, diag);
    }

    assert_eq!(rho.len(), tape.value(fwd.recon_ll).numel(), "teacher values missing for batch");

    // Alignment sees s through the encoder unless detached; the prior
    // parameters always receive alignment gradient.
    let s_align = if config.detach_encoder {
        let z_d = tape.stop_gradient(fwd.z);
        prior_logpdf(tape, &model.prior, z_d)
    } else {
        fwd.s
    };

    match config.method {
        AlignMethod::None => unreachable!(),
        AlignMethod::Direct => {
            let al = direct_align_loss(tape, s_align, rho, sigma, config.delta);
            diag.align_loss = tape.value(al).item();
            let scaled = tape.scale(al, gamma);
            (tape.add(neg_elbo, scaled), diag)
        }
        AlignMethod::Flow => {
            let fv = flow.expect("flow method needs a flow model");
            let u = u_const.expect("flow method needs projected batch coordinates");
            let (_, logdet) = flow_forward(tape, fv, fwd.z);
            let al = flow_align_loss(tape, s_align, rho, sigma, logdet, config.delta);
            let fml = flow_mle_loss(tape, fv, &model.prior, u);
            diag.align_loss = tape.value(al).item();
            diag.flow_ml = tape.value(fml).item();
            let scaled = tape.scale(al, gamma);
            let with_align = tape.add(neg_elbo, scaled);
            (tape.add(with_align, fml), diag)
        }
    }
}
