//! Pipeline orchestration: artifact layout, the seven pipeline stages, and
//! report aggregation. The CLI subcommands are thin wrappers over these.

use std::fs;
use std::path::{Path, PathBuf};

use crate::align::AlignMethod;
use crate::config::{DatasetKind, ExperimentConfig};
use crate::density::{
    fit_pca, kde_logdensity, knn_logdensity_adaptive, oracle_teacher, silverman_bandwidth,
    DensityEstimate, EstimatorTag,
};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{ood_shifts, MetricsReport, OodShifts};
use crate::synthgen::{ancestor_logpdf, build_dataset, Gmm2dSpec, SyntheticDataset};
use crate::tensor::{mean, std_dev, Tensor};
use crate::train::{evaluate, EpochStats, TrainData, Trainer};

/// Where one seed's data artifacts live.
pub fn data_dir(out: &Path, seed: u64) -> PathBuf {
    out.join("data").join(format!("seed{seed}"))
}

/// Where one (prior, method, seed) cell's run artifacts live.
pub fn cell_dir(out: &Path, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    out.join("runs")
        .join(format!("{}-{}-seed{}", cfg.prior.as_str(), cfg.method.as_str(), seed))
}

pub fn train_dataset_path(out: &Path, seed: u64) -> PathBuf {
    data_dir(out, seed).join("train.divd")
}

pub fn val_dataset_path(out: &Path, seed: u64) -> PathBuf {
    data_dir(out, seed).join("val.divd")
}

pub fn teacher_path(out: &Path, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    data_dir(out, seed).join(format!("teacher-{}.divr", cfg.teacher.as_str()))
}

pub fn val_teacher_path(out: &Path, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    data_dir(out, seed).join(format!("teacher-{}-val.divr", cfg.teacher.as_str()))
}

fn missing(stage: &str, path: &Path) -> Error {
    Error::MissingStage(format!("`{}` not found; run `divae {stage}` first", path.display()))
}

/// Generate and persist the synthetic train/val splits for every seed.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    if cfg.dataset != DatasetKind::Synthetic {
        return Err(Error::Config(vec![
            "gen-data applies to synthetic datasets; MNIST is read straight from mnist_dir".into(),
        ]));
    }
    let spec = Gmm2dSpec::circle(cfg.synth_components, 5.0, 0.4);
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        let dir = data_dir(out, seed);
        fs::create_dir_all(&dir)?;
        let (train, val) =
            build_dataset(&spec, cfg.synth_dim, cfg.sigma_pad, cfg.n_train, cfg.n_val, seed);
        let tp = train_dataset_path(out, seed);
        let vp = val_dataset_path(out, seed);
        io::save_dataset(&tp, &train)?;
        io::save_dataset(&vp, &val)?;
        written.push(tp);
        written.push(vp);
    }
    Ok(written)
}

/// MNIST split loaded from the standard IDX files.
pub struct MnistData {
    pub train: Tensor,
    pub val: Tensor,
}

pub fn load_mnist(cfg: &ExperimentConfig) -> Result<MnistData> {
    let dir = Path::new(&cfg.mnist_dir);
    let train_path = dir.join("train-images-idx3-ubyte");
    let val_path = dir.join("t10k-images-idx3-ubyte");
    for p in [&train_path, &val_path] {
        if !p.exists() {
            return Err(Error::MissingStage(format!(
                "`{}` not found; download the IDX files (train-images-idx3-ubyte, \
                 t10k-images-idx3-ubyte) into mnist_dir, e.g. from \
                 https://ossci-datasets.s3.amazonaws.com/mnist/",
                p.display()
            )));
        }
    }
    let train_all = io::parse_idx_images(&train_path)?;
    let val_all = io::parse_idx_images(&val_path)?;
    let n_train = cfg.n_train.min(train_all.count);
    let n_val = cfg.n_val.min(val_all.count);
    let d = train_all.rows * train_all.cols;
    let train = Tensor::matrix(n_train, d, train_all.pixels.data()[..n_train * d].to_vec());
    let val = Tensor::matrix(n_val, d, val_all.pixels.data()[..n_val * d].to_vec());
    Ok(MnistData { train, val })
}

/// Run the configured teacher over a point set (rows of `x`).
pub fn run_teacher(
    cfg: &ExperimentConfig,
    x: &Tensor,
    synthetic: Option<&SyntheticDataset>,
) -> Result<DensityEstimate> {
    let projector = fit_pca(x, cfg.latent_dim.min(x.shape()[1]))?;
    match cfg.teacher {
        EstimatorTag::Oracle => {
            let ds = synthetic.ok_or_else(|| {
                Error::contract("oracle teacher needs a synthetic dataset with generator metadata")
            })?;
            Ok(oracle_teacher(ds, &projector))
        }
        EstimatorTag::Kde => {
            let u = projector.project(x);
            let h = if cfg.teacher_bandwidth > 0.0 {
                cfg.teacher_bandwidth
            } else {
                silverman_bandwidth(&u)
            };
            kde_logdensity(&u, &projector, h)
        }
        EstimatorTag::KnnAdaptive => {
            let u = projector.project(x);
            knn_logdensity_adaptive(&u, &projector, cfg.teacher_k_max.min(u.shape()[0] - 1))
        }
    }
}

/// Estimate external densities for every seed and persist them.
pub fn estimate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        let dir = data_dir(out, seed);
        fs::create_dir_all(&dir)?;
        match cfg.dataset {
            DatasetKind::Synthetic => {
                let tp = train_dataset_path(out, seed);
                if !tp.exists() {
                    return Err(missing("gen-data", &tp));
                }
                let train = io::load_dataset(&tp)?;
                let est = run_teacher(cfg, &train.x, Some(&train))?;
                est.validate()?;
                let path = teacher_path(out, cfg, seed);
                io::save_density(&path, &est)?;
                written.push(path);
            }
            DatasetKind::Mnist => {
                let data = load_mnist(cfg)?;
                let est = run_teacher(cfg, &data.train, None)?;
                est.validate()?;
                let path = teacher_path(out, cfg, seed);
                io::save_density(&path, &est)?;
                written.push(path);
                // Evaluation compares against the teacher on the validation
                // split in this regime.
                let val_est = run_teacher(cfg, &data.val, None)?;
                val_est.validate()?;
                let vp = val_teacher_path(out, cfg, seed);
                io::save_density(&vp, &val_est)?;
                written.push(vp);
            }
        }
    }
    Ok(written)
}

fn load_train_inputs(
    cfg: &ExperimentConfig,
    out: &Path,
    seed: u64,
) -> Result<(TrainData, Vec<(String, String)>, Option<String>)> {
    let mut hashes = Vec::new();
    let (x, teacher, teacher_hash) = match cfg.dataset {
        DatasetKind::Synthetic => {
            let tp = train_dataset_path(out, seed);
            if !tp.exists() {
                return Err(missing("gen-data", &tp));
            }
            hashes.push(("train".to_string(), io::file_sha256(&tp)?));
            let ds = io::load_dataset(&tp)?;
            let (teacher, th) = if cfg.method == AlignMethod::None {
                (None, None)
            } else {
                let dp = teacher_path(out, cfg, seed);
                if !dp.exists() {
                    return Err(missing("estimate", &dp));
                }
                let hash = io::file_sha256(&dp)?;
                (Some(io::load_density(&dp)?), Some(hash))
            };
            (ds.x, teacher, th)
        }
        DatasetKind::Mnist => {
            let data = load_mnist(cfg)?;
            let (teacher, th) = if cfg.method == AlignMethod::None {
                (None, None)
            } else {
                let dp = teacher_path(out, cfg, seed);
                if !dp.exists() {
                    return Err(missing("estimate", &dp));
                }
                let hash = io::file_sha256(&dp)?;
                (Some(io::load_density(&dp)?), Some(hash))
            };
            (data.train, teacher, th)
        }
    };

    let (rho, sigma, u) = match &teacher {
        None => (Vec::new(), Vec::new(), None),
        Some(est) => {
            if est.len() != x.shape()[0] {
                return Err(Error::contract(format!(
                    "teacher covers {} points but the training set has {}",
                    est.len(),
                    x.shape()[0]
                )));
            }
            let u = (cfg.method == AlignMethod::Flow).then(|| est.projector.project(&x));
            (est.rho.clone(), est.sigma.clone(), u)
        }
    };
    Ok((TrainData { x, rho, sigma, u }, hashes, teacher_hash))
}

/// Artifacts produced by training one cell.
pub struct TrainedCell {
    pub checkpoint_path: PathBuf,
    pub epochs_csv_path: PathBuf,
    pub manifest_path: PathBuf,
    pub stats: Vec<EpochStats>,
}

/// Train one (prior, method, seed) cell end to end and persist everything.
pub fn train_cell(
    cfg: &ExperimentConfig,
    out: &Path,
    seed: u64,
    git_describe: &str,
) -> Result<TrainedCell> {
    let phase_start = std::time::Instant::now();
    let (data, hashes, teacher_hash) = load_train_inputs(cfg, out, seed)?;
    let load_secs = phase_start.elapsed().as_secs_f64();

    let dir = cell_dir(out, cfg, seed);
    fs::create_dir_all(&dir)?;
    let input_dim = data.x.shape()[1];
    let mut trainer = Trainer::new(cfg, input_dim, seed);
    let mut stats = Vec::with_capacity(cfg.epochs);
    let train_start = std::time::Instant::now();
    while !trainer.finished() {
        stats.push(trainer.run_epoch(&data)?);
    }
    let train_secs = train_start.elapsed().as_secs_f64();

    let epochs_csv_path = dir.join("epochs.csv");
    let mut csv = String::from(EpochStats::CSV_HEADER);
    csv.push('\n');
    for s in &stats {
        csv.push_str(&s.csv_row());
        csv.push('\n');
    }
    io::write_atomic(&epochs_csv_path, csv.as_bytes())?;

    let checkpoint_path = dir.join("checkpoint.divm");
    io::save_checkpoint(&checkpoint_path, &trainer.checkpoint())?;

    let manifest = io::RunManifest {
        config_text: cfg.to_text(),
        seed,
        dataset_hashes: hashes,
        teacher_hash,
        git_describe: git_describe.to_string(),
        timings: vec![("load".into(), load_secs), ("train".into(), train_secs)],
    };
    let manifest_path = dir.join("manifest.txt");
    io::write_atomic(&manifest_path, manifest.to_text().as_bytes())?;

    Ok(TrainedCell { checkpoint_path, epochs_csv_path, manifest_path, stats })
}

/// Load the evaluation inputs (validation points, reference log-densities,
/// and the generator spec when synthetic).
fn load_eval_inputs(
    cfg: &ExperimentConfig,
    out: &Path,
    seed: u64,
) -> Result<(Tensor, Vec<f64>, Option<Gmm2dSpec>)> {
    match cfg.dataset {
        DatasetKind::Synthetic => {
            let vp = val_dataset_path(out, seed);
            if !vp.exists() {
                return Err(missing("gen-data", &vp));
            }
            let val = io::load_dataset(&vp)?;
            let reference: Vec<f64> =
                (0..val.len()).map(|i| ancestor_logpdf(val.x.row(i), &val)).collect();
            Ok((val.x.clone(), reference, Some(val.spec.clone())))
        }
        DatasetKind::Mnist => {
            let data = load_mnist(cfg)?;
            let vp = val_teacher_path(out, cfg, seed);
            if !vp.exists() {
                return Err(missing("estimate", &vp));
            }
            let est = io::load_density(&vp)?;
            if est.len() != data.val.shape()[0] {
                return Err(Error::contract(format!(
                    "validation teacher covers {} points, split has {}",
                    est.len(),
                    data.val.shape()[0]
                )));
            }
            Ok((data.val, est.rho, None))
        }
    }
}

/// Evaluate one trained cell; writes metrics.csv and latents.csv.
pub fn eval_cell(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<MetricsReport> {
    let dir = cell_dir(out, cfg, seed);
    let ckp = dir.join("checkpoint.divm");
    if !ckp.exists() {
        return Err(missing("train", &ckp));
    }
    let ck = io::load_checkpoint(&ckp)?;
    let (x, reference, p2) = load_eval_inputs(cfg, out, seed)?;
    let result = evaluate(&ck.model, cfg, seed, &x, &reference, p2.as_ref())?;

    let metrics_path = dir.join("metrics.csv");
    let mut csv = String::from(MetricsReport::CSV_HEADER);
    csv.push('\n');
    csv.push_str(&result.report.csv_row());
    csv.push('\n');
    io::write_atomic(&metrics_path, csv.as_bytes())?;

    let latents_path = dir.join("latents.csv");
    let d = ck.model.latent_dim();
    let mut csv = String::from("index");
    for j in 0..d {
        csv.push_str(&format!(",z{j}"));
    }
    csv.push_str(",s,reference\n");
    for row in &result.latents {
        csv.push_str(&row.index.to_string());
        for v in &row.z {
            csv.push_str(&format!(",{v}"));
        }
        csv.push_str(&format!(",{},{}\n", row.s, row.reference));
    }
    io::write_atomic(&latents_path, csv.as_bytes())?;

    Ok(result.report)
}

/// Evaluate a trained cell on an out-of-distribution dataset (a DIVD file)
/// and report both the OOD metrics and the OOD-minus-in-distribution shifts.
pub fn ood_cell(
    cfg: &ExperimentConfig,
    out: &Path,
    seed: u64,
    ood_dataset: &Path,
) -> Result<(MetricsReport, OodShifts)> {
    let dir = cell_dir(out, cfg, seed);
    let ckp = dir.join("checkpoint.divm");
    if !ckp.exists() {
        return Err(missing("train", &ckp));
    }
    let ck = io::load_checkpoint(&ckp)?;

    // In-distribution report: reuse the persisted row, otherwise compute it.
    let metrics_path = dir.join("metrics.csv");
    let in_report = if metrics_path.exists() {
        let text = fs::read_to_string(&metrics_path)?;
        let row = text.lines().nth(1).ok_or_else(|| Error::Format("empty metrics.csv".into()))?;
        MetricsReport::parse_csv_row(row)?
    } else {
        eval_cell(cfg, out, seed)?
    };

    if !ood_dataset.exists() {
        return Err(Error::MissingStage(format!(
            "`{}` not found; generate the OOD dataset first (gen-data with its own config/out)",
            ood_dataset.display()
        )));
    }
    let ood = io::load_dataset(ood_dataset)?;
    let reference: Vec<f64> = (0..ood.len()).map(|i| ancestor_logpdf(ood.x.row(i), &ood)).collect();
    let ood_result = evaluate(&ck.model, cfg, seed, &ood.x, &reference, Some(&ood.spec))?;
    let shifts = ood_shifts(&in_report, &ood_result.report)?;

    let ood_path = dir.join("ood-metrics.csv");
    let mut csv = String::from(MetricsReport::CSV_HEADER);
    csv.push('\n');
    csv.push_str(&ood_result.report.csv_row());
    csv.push('\n');
    csv.push_str("# shifts: d_elbo,d_s,d_kl,d_entropy\n");
    csv.push_str(&format!(
        "# {},{},{},{}\n",
        shifts.d_elbo, shifts.d_s, shifts.d_kl, shifts.d_entropy
    ));
    io::write_atomic(&ood_path, csv.as_bytes())?;

    Ok((ood_result.report, shifts))
}

/// Run `f` for every seed, `jobs` cells at a time. Cells are independent by
/// construction (each writes only its own directory), so outputs do not
/// depend on the degree of parallelism.
pub fn for_each_seed<T: Send>(
    cfg: &ExperimentConfig,
    jobs: usize,
    f: impl Fn(u64) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let jobs = jobs.max(1);
    let mut outputs = Vec::new();
    for wave in cfg.seeds.chunks(jobs) {
        let mut results: Vec<Option<Result<T>>> = (0..wave.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for &seed in wave {
                let f = &f;
                handles.push(scope.spawn(move || f(seed)));
            }
            for (slot, handle) in results.iter_mut().zip(handles) {
                *slot = Some(handle.join().expect("cell worker panicked"));
            }
        });
        for r in results.into_iter().flatten() {
            outputs.push(r?);
        }
    }
    Ok(outputs)
}

/// Train every seed of the config.
pub fn train_cells(cfg: &ExperimentConfig, out: &Path, jobs: usize, git: &str) -> Result<Vec<TrainedCell>> {
    for_each_seed(cfg, jobs, |seed| train_cell(cfg, out, seed, git))
}

/// Train and evaluate every seed of the config.
pub fn run_cells(cfg: &ExperimentConfig, out: &Path, jobs: usize, git: &str) -> Result<Vec<MetricsReport>> {
    for_each_seed(cfg, jobs, |seed| {
        train_cell(cfg, out, seed, git)?;
        eval_cell(cfg, out, seed)
    })
}

/// Aggregated rows: per-seed entries plus one mean±std row per (prior, method).
pub struct ReportTable {
    pub rows: Vec<MetricsReport>,
    pub text: String,
    pub csv: String,
}

pub fn aggregate_report(out: &Path) -> Result<ReportTable> {
    let runs = out.join("runs");
    if !runs.exists() {
        return Err(missing("train/eval", &runs));
    }
    let mut rows = Vec::new();
    let mut dirs: Vec<PathBuf> = fs::read_dir(&runs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let metrics = dir.join("metrics.csv");
        if !metrics.exists() {
            continue;
        }
        let text = fs::read_to_string(&metrics)?;
        for line in text.lines().skip(1) {
            if !line.is_empty() {
                rows.push(MetricsReport::parse_csv_row(line)?);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::MissingStage(format!(
            "no metrics.csv under `{}`; run `divae eval` first",
            runs.display()
        )));
    }

    // Group by (prior, method), preserving first-seen order.
    let mut groups: Vec<((String, String), Vec<MetricsReport>)> = Vec::new();
    for row in &rows {
        let key = (row.prior.clone(), row.method.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(row.clone()),
            None => groups.push((key, vec![row.clone()])),
        }
    }

    let mut csv = String::from("prior,method,seed,elbo_mean,elbo_std,s_mean,s_std,ks,w1,coverage_kl,kl_q_p2,entropy\n");
    let mut text = format!(
        "{:<9} {:<7} {:>6} {:>20} {:>20} {:>8} {:>8} {:>12} {:>10} {:>9}\n",
        "prior", "method", "seed", "elbo", "s", "KS", "W", "covKL", "KL(q,p2)", "H(q)"
    );
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    for ((prior, method), members) in &groups {
        for r in members {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.prior,
                r.method,
                r.seed,
                r.elbo_mean,
                r.elbo_std,
                r.s_mean,
                r.s_std,
                r.ks,
                r.w1,
                r.coverage_kl.map(|e| e.value.to_string()).unwrap_or_default(),
                r.kl_q_p2.map(|v| v.to_string()).unwrap_or_default(),
                r.entropy,
            ));
            text.push_str(&format!(
                "{:<9} {:<7} {:>6} {:>9.3} ± {:>7.3} {:>9.3} ± {:>7.3} {:>8.4} {:>8.4} {:>12} {:>10} {:>9.3}\n",
                r.prior,
                r.method,
                r.seed,
                r.elbo_mean,
                r.elbo_std,
                r.s_mean,
                r.s_std,
                r.ks,
                r.w1,
                fmt_opt(r.coverage_kl.map(|e| e.value)),
                fmt_opt(r.kl_q_p2),
                r.entropy,
            ));
        }
        // Aggregate row over seeds.
        let col = |f: &dyn Fn(&MetricsReport) -> f64| -> (f64, f64) {
            let vals: Vec<f64> = members.iter().map(|r| f(r)).collect();
            (mean(&vals), std_dev(&vals))
        };
        let (elbo_m, elbo_s) = col(&|r| r.elbo_mean);
        let (s_m, s_s) = col(&|r| r.s_mean);
        let (ks_m, _) = col(&|r| r.ks);
        let (w_m, _) = col(&|r| r.w1);
        let cov: Vec<f64> = members.iter().filter_map(|r| r.coverage_kl.map(|e| e.value)).collect();
        let klqp2: Vec<f64> = members.iter().filter_map(|r| r.kl_q_p2).collect();
        let (h_m, _) = col(&|r| r.entropy);
        csv.push_str(&format!(
            "{prior},{method},mean,{elbo_m},{elbo_s},{s_m},{s_s},{ks_m},{w_m},{},{},{h_m}\n",
            if cov.is_empty() { String::new() } else { mean(&cov).to_string() },
            if klqp2.is_empty() { String::new() } else { mean(&klqp2).to_string() },
        ));
        text.push_str(&format!(
            "{:<9} {:<7} {:>6} {:>9.3} ± {:>7.3} {:>9.3} ± {:>7.3} {:>8.4} {:>8.4} {:>12} {:>10} {:>9.3}\n\n",
            prior,
            method,
            "mean",
            elbo_m,
            elbo_s,
            s_m,
            s_s,
            ks_m,
            w_m,
            if cov.is_empty() { "-".into() } else { format!("{:.3}", mean(&cov)) },
            if klqp2.is_empty() { "-".into() } else { format!("{:.3}", mean(&klqp2)) },
            h_m,
        ));
    }

    io::write_atomic(&out.join("report.csv"), csv.as_bytes())?;
    Ok(ReportTable { rows, text, csv })
}

/// Timing probe rows, one per method.
pub struct TimingRow {
    pub prior: String,
    pub method: String,
    /// Teacher preprocessing seconds (blank for the plain method).
    pub t_init: Option<f64>,
    pub batch_secs: f64,
    pub epoch_secs: f64,
}

/// Measure wall-clock costs per method at the configured scale: teacher
/// preprocessing once, then `probe_epochs` training epochs in memory.
pub fn timing_table(cfg: &ExperimentConfig, probe_epochs: usize) -> Result<Vec<TimingRow>> {
    if cfg.dataset != DatasetKind::Synthetic {
        return Err(Error::Config(vec!["timing probes run on the synthetic regime".into()]));
    }
    let seed = *cfg.seeds.first().unwrap_or(&0);
    let spec = Gmm2dSpec::circle(cfg.synth_components, 5.0, 0.4);
    let (train, _) =
        build_dataset(&spec, cfg.synth_dim, cfg.sigma_pad, cfg.n_train, cfg.n_val, seed);

    let mut rows = Vec::new();
    for method in [AlignMethod::None, AlignMethod::Direct, AlignMethod::Flow] {
        let mut mcfg = cfg.clone();
        mcfg.method = method;
        mcfg.epochs = probe_epochs;

        let (t_init, data) = if method == AlignMethod::None {
            (
                None,
                TrainData { x: train.x.clone(), rho: Vec::new(), sigma: Vec::new(), u: None },
            )
        } else {
            let start = std::time::Instant::now();
            let est = run_teacher(&mcfg, &train.x, Some(&train))?;
            let t_init = start.elapsed().as_secs_f64();
            let u = (method == AlignMethod::Flow).then(|| est.projector.project(&train.x));
            (
                Some(t_init),
                TrainData { x: train.x.clone(), rho: est.rho, sigma: est.sigma, u },
            )
        };

        let mut trainer = Trainer::new(&mcfg, mcfg.synth_dim, seed);
        let mut batch = Vec::new();
        let mut epoch = Vec::new();
        for _ in 0..probe_epochs {
            let stats = trainer.run_epoch(&data)?;
            batch.push(stats.batch_secs);
            epoch.push(stats.epoch_secs);
        }
        rows.push(TimingRow {
            prior: mcfg.prior.as_str().to_string(),
            method: method.as_str().to_string(),
            t_init,
            batch_secs: mean(&batch),
            epoch_secs: mean(&epoch),
        });
    }
    Ok(rows)
}

pub fn timing_text(rows: &[TimingRow]) -> String {
    let mut out = format!(
        "{:<9} {:<7} {:>8} {:>12} {:>12}\n",
        "prior", "method", "t_init", "batch_secs", "epoch_secs"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<9} {:<7} {:>8} {:>12.5} {:>12.3}\n",
            r.prior,
            r.method,
            r.t_init.map(|t| format!("{t:.2}")).unwrap_or_else(|| "-".into()),
            r.batch_secs,
            r.epoch_secs,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk_preset();
        cfg.synth_dim = 8;
        cfg.synth_components = 3;
        cfg.prior_components = 3;
        cfg.n_train = 96;
        cfg.n_val = 24;
        cfg.epochs = 2;
        cfg.batch_size = 32;
        cfg.hidden = 4;
        cfg.teacher_k_max = 8;
        cfg.eval_mc_coverage = 1000;
        cfg.eval_mc_posterior = 8;
        cfg.seeds = vec![0, 1];
        cfg.method = AlignMethod::Direct;
        cfg.out = out.to_str().unwrap().to_string();
        cfg
    }

    #[test]
    fn full_pipeline_produces_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let cfg = tiny_cfg(out);

        gen_data(&cfg, out).unwrap();
        assert!(train_dataset_path(out, 0).exists());
        assert!(val_dataset_path(out, 1).exists());

        estimate(&cfg, out).unwrap();
        assert!(teacher_path(out, &cfg, 0).exists());

        let reports = run_cells(&cfg, out, 2, "test").unwrap();
        assert_eq!(reports.len(), 2);
        for seed in [0, 1] {
            let cell = cell_dir(out, &cfg, seed);
            assert!(cell.join("checkpoint.divm").exists());
            assert!(cell.join("epochs.csv").exists());
            assert!(cell.join("metrics.csv").exists());
            assert!(cell.join("latents.csv").exists());
            assert!(cell.join("manifest.txt").exists());
        }

        let table = aggregate_report(out).unwrap();
        assert_eq!(table.rows.len(), 2);
        // n per-seed rows + 1 aggregate row per (prior, method) group.
        let lines: Vec<&str> = table.csv.lines().collect();
        assert_eq!(lines.len(), 1 + 2 + 1, "{}", table.csv);
        assert!(out.join("report.csv").exists());
    }

    #[test]
    fn missing_upstream_artifacts_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let cfg = tiny_cfg(out);
        match estimate(&cfg, out) {
            Err(Error::MissingStage(msg)) => assert!(msg.contains("gen-data"), "{msg}"),
            other => panic!("expected missing-stage error, got {other:?}"),
        }
        match eval_cell(&cfg, out, 0) {
            Err(Error::MissingStage(msg)) => assert!(msg.contains("train"), "{msg}"),
            other => panic!("expected missing-stage error, got {other:?}"),
        }
    }

    #[test]
    fn ood_evaluation_reports_shifts() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let mut cfg = tiny_cfg(out);
        cfg.seeds = vec![0];
        gen_data(&cfg, out).unwrap();
        estimate(&cfg, out).unwrap();
        run_cells(&cfg, out, 1, "test").unwrap();

        // OOD data: a different component count, same ambient dimension.
        let ood_dir = tempfile::tempdir().unwrap();
        let mut ood_cfg = cfg.clone();
        ood_cfg.synth_components = 5;
        ood_cfg.out = ood_dir.path().to_str().unwrap().to_string();
        gen_data(&ood_cfg, ood_dir.path()).unwrap();

        let (report, shifts) =
            ood_cell(&cfg, out, 0, &val_dataset_path(ood_dir.path(), 0)).unwrap();
        assert!(report.elbo_mean.is_finite());
        assert!(shifts.d_s.is_finite());
        assert!(cell_dir(out, &cfg, 0).join("ood-metrics.csv").exists());
    }

    #[test]
    fn timing_probe_produces_three_methods() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.seeds = vec![0];
        let rows = timing_table(&cfg, 2).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].t_init.is_none());
        assert!(rows[1].t_init.is_some());
        assert!(rows.iter().all(|r| r.epoch_secs >= 0.0));
        let text = timing_text(&rows);
        assert!(text.contains("direct") && text.contains("flow"));
    }
}
