//! Training loop and evaluation driver for one (prior, method, seed) cell.

use crate::align::{total_loss, AlignMethod};
use crate::autodiff::{AdamState, Tape};
use crate::config::{DatasetKind, ExperimentConfig, PriorKind};
use crate::error::{Error, Result};
use crate::flow::{bind_flow, FlowModel};
use crate::io::Checkpoint;
use crate::metrics::{
    kl_coverage, kl_q_p2, kl_q_prior, ks_two_sample, posterior_entropy, wasserstein1d,
    MetricsReport,
};
use crate::rng::{stream, Rng};
use crate::synthgen::Gmm2dSpec;
use crate::tensor::{mean, std_dev, Tensor};
use crate::vae::{
    bind_vae, forward_plain, Decoder, DecoderHead, Encoder, Prior, VaeModel,
};

/// Wall-clock helper that degrades to zero where no monotonic clock exists
/// (wasm targets), keeping the training loop portable.
mod clock {
    #[cfg(not(target_arch = "wasm32"))]
    pub fn now() -> Option<std::time::Instant> {
        Some(std::time::Instant::now())
    }

    #[cfg(target_arch = "wasm32")]
    pub fn now() -> Option<()> {
        None
    }

    #[cfg(not(target_arch = "wasm32"))]
    pub fn seconds_since(start: &Option<std::time::Instant>) -> f64 {
        start.map(|s| s.elapsed().as_secs_f64()).unwrap_or(0.0)
    }

    #[cfg(target_arch = "wasm32")]
    pub fn seconds_since(_start: &Option<()>) -> f64 {
        0.0
    }
}

/// Training inputs for one cell. `rho`/`sigma` may be empty for the plain
/// ELBO method; `u` carries PCA projections of every training row and is
/// required by the flow method.
pub struct TrainData {
    pub x: Tensor,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
    pub u: Option<Tensor>,
}

/// Per-epoch diagnostics, one row of the epoch CSV.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub elbo: f64,
    pub align_loss: f64,
    pub flow_ml: f64,
    pub gamma: f64,
    pub kl_factor: f64,
    pub batch_secs: f64,
    pub epoch_secs: f64,
}

impl EpochStats {
    pub const CSV_HEADER: &'static str =
        "epoch,elbo,align_loss,flow_ml,gamma,kl_factor,batch_secs,epoch_secs";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.elbo,
            self.align_loss,
            self.flow_ml,
            self.gamma,
            self.kl_factor,
            self.batch_secs,
            self.epoch_secs
        )
    }
}

pub struct Trainer {
    pub model: VaeModel,
    pub flow: Option<FlowModel>,
    pub adam: AdamState,
    pub rng: Rng,
    /// Next epoch to run.
    pub epoch: usize,
    pub total_epochs: usize,
    batch_size: usize,
    align: crate::align::AlignConfig,
    run_hash: String,
}

/// Build the model architecture the config describes.
pub fn build_model(cfg: &ExperimentConfig, input_dim: usize, rng: &mut Rng) -> VaeModel {
    let hidden = cfg.hidden_width(input_dim);
    let d = cfg.latent_dim;
    let act = cfg.hidden_activation;
    let head = match cfg.dataset {
        DatasetKind::Synthetic => DecoderHead::Gaussian { sigma_x: cfg.sigma_x },
        DatasetKind::Mnist => DecoderHead::Bernoulli,
    };
    let encoder = Encoder::new(input_dim, hidden, d, act, rng);
    let decoder = Decoder::new(d, hidden, input_dim, head, act, rng);
    let prior = match cfg.prior {
        PriorKind::Standard => Prior::standard(d),
        PriorKind::Gmm => Prior::gmm_init(cfg.prior_components, d, rng),
        PriorKind::Vamp => {
            let center = match head {
                DecoderHead::Bernoulli => 0.5,
                DecoderHead::Gaussian { .. } => 0.0,
            };
            Prior::vamp_init(cfg.prior_components, input_dim, center, rng)
        }
    };
    VaeModel { encoder, decoder, prior }
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, input_dim: usize, seed: u64) -> Self {
        let mut init_rng = Rng::new(seed, stream::MODEL_INIT);
        let model = build_model(cfg, input_dim, &mut init_rng);
        let flow = (cfg.method == AlignMethod::Flow).then(|| {
            FlowModel::init(cfg.latent_dim, cfg.flow_layers, cfg.flow_hidden, cfg.flow_scale_bound, &mut init_rng)
        });
        Trainer {
            model,
            flow,
            adam: AdamState::new(cfg.lr),
            rng: Rng::new(seed, stream::TRAIN_LOOP),
            epoch: 0,
            total_epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            align: cfg.align_config(),
            run_hash: cfg.run_hash(seed),
        }
    }

    /// Resume from a checkpoint produced by [`Trainer::checkpoint`].
    pub fn from_checkpoint(cfg: &ExperimentConfig, ck: Checkpoint) -> Result<Self> {
        if ck.config_hash != cfg.run_hash(0) && !ck.config_hash.is_empty() {
            // Seed differences are legitimate (the hash embeds the seed), so
            // only a structural mismatch is fatal; detect it cheaply.
            if ck.method != cfg.method {
                return Err(Error::contract(format!(
                    "checkpoint was trained with method {}, config says {}",
                    ck.method.as_str(),
                    cfg.method.as_str()
                )));
            }
        }
        Ok(Trainer {
            model: ck.model,
            flow: ck.flow,
            adam: ck.adam.unwrap_or_else(|| AdamState::new(cfg.lr)),
            rng: Rng::from_state(&ck.rng_state),
            epoch: ck.epoch as usize,
            total_epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            align: cfg.align_config(),
            run_hash: ck.config_hash,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            flow: self.flow.clone(),
            method: self.align.method,
            epoch: self.epoch as u64,
            adam: Some(self.adam.clone()),
            rng_state: self.rng.state(),
            config_hash: self.run_hash.clone(),
        }
    }

    pub fn run_hash(&self) -> &str {
        &self.run_hash
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.total_epochs
    }

    /// One pass over the training set.
    pub fn run_epoch(&mut self, data: &TrainData) -> Result<EpochStats> {
        assert!(self.epoch < self.total_epochs, "training already finished");
        let n = data.x.shape()[0];
        let d = self.model.latent_dim();
        if self.align.method != AlignMethod::None {
            assert_eq!(data.rho.len(), n, "teacher values must cover the training set");
            assert_eq!(data.sigma.len(), n, "teacher errors must cover the training set");
        }
        if self.align.method == AlignMethod::Flow {
            assert!(data.u.is_some(), "flow training needs projected coordinates");
        }

        let epoch_start = clock::now();
        let mut order: Vec<usize> = (0..n).collect();
        self.rng.shuffle(&mut order);

        let mut elbo_acc = Vec::new();
        let mut align_acc = Vec::new();
        let mut flow_ml_acc = Vec::new();
        let mut batch_secs = Vec::new();
        let mut gamma = 0.0;
        let mut kl_factor = 0.0;

        for chunk in order.chunks(self.batch_size) {
            let batch_start = clock::now();
            let xb = gather_rows(&data.x, chunk);
            let eps = Tensor::matrix(chunk.len(), d, self.rng.normal_vec(chunk.len() * d));
            let (rho_b, sigma_b) = if self.align.method == AlignMethod::None {
                (Vec::new(), Vec::new())
            } else {
                (
                    chunk.iter().map(|&i| data.rho[i]).collect(),
                    chunk.iter().map(|&i| data.sigma[i]).collect(),
                )
            };

            let mut tape = Tape::new();
            let mv = bind_vae(&mut tape, &self.model);
            let fv = self.flow.as_ref().map(|f| bind_flow(&mut tape, f));
            let xc = tape.constant(xb);
            let ec = tape.constant(eps);
            let uc = match (&data.u, self.align.method) {
                (Some(u), AlignMethod::Flow) => Some(tape.constant(gather_rows(u, chunk))),
                _ => None,
            };
            let (loss, diag) = total_loss(
                &mut tape,
                &mv,
                fv.as_ref(),
                xc,
                ec,
                uc,
                &rho_b,
                &sigma_b,
                &self.align,
                self.epoch,
                self.total_epochs,
            );
            tape.backward(loss)?;

            let mut grads: Vec<(String, Tensor)> = mv
                .named_vars()
                .iter()
                .map(|(name, v)| (name.clone(), tape.grad(*v)))
                .collect();
            if let Some(fv) = &fv {
                grads.extend(fv.named_vars().iter().map(|(name, v)| (name.clone(), tape.grad(*v))));
            }

            let mut params = self.model.named_params_mut();
            if let Some(flow) = &mut self.flow {
                params.extend(flow.named_params_mut());
            }
            debug_assert_eq!(params.len(), grads.len());
            self.adam.step(params.iter_mut().zip(&grads).map(|((name, p), (gname, g))| {
                debug_assert_eq!(name, gname);
                (name.as_str(), &mut **p, g)
            }));

            elbo_acc.push(diag.elbo);
            align_acc.push(diag.align_loss);
            flow_ml_acc.push(diag.flow_ml);
            gamma = diag.gamma;
            kl_factor = diag.kl_factor;
            batch_secs.push(clock::seconds_since(&batch_start));
        }

        let stats = EpochStats {
            epoch: self.epoch,
            elbo: mean(&elbo_acc),
            align_loss: mean(&align_acc),
            flow_ml: mean(&flow_ml_acc),
            gamma,
            kl_factor,
            batch_secs: mean(&batch_secs),
            epoch_secs: clock::seconds_since(&epoch_start),
        };
        self.epoch += 1;
        Ok(stats)
    }
}

pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let c = x.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::matrix(idx.len(), c, data)
}

/// One evaluated point for the latent-coordinates dump.
#[derive(Clone, Debug)]
pub struct LatentRow {
    pub index: usize,
    pub z: Vec<f64>,
    pub s: f64,
    pub reference: f64,
}

pub struct EvalResult {
    pub report: MetricsReport,
    pub latents: Vec<LatentRow>,
}

/// Evaluate a trained model on a validation set.
///
/// `reference` is the per-point ground-truth counterpart of `s`: the 2D
/// generator log-density for synthetic data, the external teacher for real
/// data. `p2` enables the synthetic-only divergences.
pub fn evaluate(
    model: &VaeModel,
    cfg: &ExperimentConfig,
    seed: u64,
    x: &Tensor,
    reference: &[f64],
    p2: Option<&Gmm2dSpec>,
) -> Result<EvalResult> {
    let n = x.shape()[0];
    let d = model.latent_dim();
    if reference.len() != n {
        return Err(Error::contract(format!(
            "reference vector has {} entries for {n} points",
            reference.len()
        )));
    }
    // One z-sample per validation point with a fixed evaluation stream.
    let mut eval_rng = Rng::new(seed, stream::EVAL);
    let eps = Tensor::matrix(n, d, eval_rng.normal_vec(n * d));
    let fwd = forward_plain(model, x, &eps);

    let ks = ks_two_sample(&fwd.s, reference)?;
    let w1 = wasserstein1d(&fwd.s, reference)?;

    let prepared = model.prior.prepare(Some(&model.encoder));
    let mut mc_rng = Rng::new(seed, stream::METRIC_MC);

    let coverage_kl = match (p2, &model.prior) {
        (Some(p2), Prior::Gmm { .. }) => {
            Some(kl_coverage(p2, &model.prior, Some(&model.encoder), cfg.eval_mc_coverage, &mut mc_rng)?)
        }
        _ => None,
    };

    let kl_q_p2_mean = match p2 {
        Some(p2) if d == 2 => {
            let vals: Vec<f64> = (0..n)
                .map(|i| {
                    kl_q_p2(fwd.mu.row(i), fwd.logvar.row(i), p2, cfg.eval_mc_posterior, &mut mc_rng)
                })
                .collect();
            Some(mean(&vals))
        }
        _ => None,
    };

    let kl_prior_vals: Vec<f64> = (0..n)
        .map(|i| {
            kl_q_prior(fwd.mu.row(i), fwd.logvar.row(i), &prepared, cfg.eval_mc_posterior, &mut mc_rng)
        })
        .collect();
    let entropy_vals: Vec<f64> = (0..n).map(|i| posterior_entropy(fwd.logvar.row(i))).collect();

    let report = MetricsReport {
        prior: cfg.prior.as_str().to_string(),
        method: cfg.method.as_str().to_string(),
        seed,
        elbo_mean: mean(&fwd.elbo),
        elbo_std: std_dev(&fwd.elbo),
        s_mean: mean(&fwd.s),
        s_std: std_dev(&fwd.s),
        ks,
        w1,
        coverage_kl,
        kl_q_p2: kl_q_p2_mean,
        entropy: mean(&entropy_vals),
        kl_q_prior: mean(&kl_prior_vals),
        n_points: n,
        config_hash: cfg.run_hash(seed),
    };

    let latents = (0..n)
        .map(|i| LatentRow {
            index: i,
            z: fwd.z.row(i).to_vec(),
            s: fwd.s[i],
            reference: reference[i],
        })
        .collect();

    Ok(EvalResult { report, latents })
}
