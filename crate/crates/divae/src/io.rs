//! Persistence: IDX ingestion and the three binary artifacts.
//!
//! All project formats share one envelope: 4-byte ASCII magic, u32 version,
//! little-endian payload, CRC32 trailer over everything before it. Writes go
//! through a temp file plus rename so readers never see partial artifacts.
//! IDX keeps its external convention (big-endian headers, byte payload).

use std::fs;
use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::AdamState;
use crate::align::AlignMethod;
use crate::density::{DensityEstimate, EstimatorTag, PcaProjector};
use crate::error::{Error, Result};
use crate::flow::{mask_split, CouplingLayer, FlowModel};
use crate::rng::RngState;
use crate::synthgen::{Gmm2dSpec, Split, SyntheticDataset};
use crate::tensor::Tensor;
use crate::vae::{Activation, Decoder, DecoderHead, Encoder, Mlp, Prior, VaeModel};

pub const DATASET_MAGIC: &[u8; 4] = b"DIVD";
pub const DENSITY_MAGIC: &[u8; 4] = b"DIVR";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DIVM";
const FORMAT_VERSION: u32 = 1;

// ── Envelope ─────────────────────────────────────────────────────────

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::with_capacity(1 << 16);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.f64(*v);
        }
    }

    fn str(&mut self, s: &str) {
        let bytes = s.as_bytes();
        assert!(bytes.len() <= u16::MAX as usize, "string field too long");
        self.buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(bytes);
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u8(t.rank() as u8);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.f64s(t.data());
    }

    /// Append the CRC32 trailer and write atomically.
    fn finish(self, path: &Path) -> Result<()> {
        let mut buf = self.buf;
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        write_atomic(path, &buf)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp-{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or("bin"),
        std::process::id()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Verify the CRC trailer, magic, and version; position after the header.
    fn open(data: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if data.len() < 12 {
            return Err(Error::Format("file too short for envelope".into()));
        }
        let (body, trailer) = data.split_at(data.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Format(format!(
                "checksum mismatch: stored {stored:08x}, computed {computed:08x}"
            )));
        }
        if &body[0..4] != magic {
            return Err(Error::Format(format!(
                "magic mismatch: expected {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&body[0..4])
            )));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        Ok(Reader { data: body, pos: 8 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                msg: format!("need {n} bytes, {} remain", self.data.len() - self.pos),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn str(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let pos = self.pos as u64;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Parse { offset: pos, msg: "invalid utf8 string".into() })
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape.iter().product();
        Ok(Tensor::new(shape, self.f64s(numel)?))
    }
}

// ── Dataset (DIVD) ───────────────────────────────────────────────────

pub fn save_dataset(path: &Path, ds: &SyntheticDataset) -> Result<()> {
    let mut w = Writer::new(DATASET_MAGIC);
    let (n, d) = (ds.len(), ds.dim());
    w.u64(n as u64);
    w.u64(d as u64);
    w.u8(match ds.split {
        Split::Train => 0,
        Split::Val => 1,
    });
    w.f64s(ds.x.data());
    for &l in &ds.labels {
        w.u32(l);
    }
    w.f64s(ds.rotation.data());
    w.f64s(ds.projector.data());
    w.f64(ds.sigma_pad);
    let k = ds.spec.components();
    w.u64(k as u64);
    w.f64s(&ds.spec.weights);
    for m in &ds.spec.means {
        w.f64(m[0]);
        w.f64(m[1]);
    }
    for c in &ds.spec.covs {
        w.f64(c[0][0]);
        w.f64(c[0][1]);
        w.f64(c[1][0]);
        w.f64(c[1][1]);
    }
    w.finish(path)
}

pub fn load_dataset(path: &Path) -> Result<SyntheticDataset> {
    let data = fs::read(path)?;
    let mut r = Reader::open(&data, DATASET_MAGIC)?;
    let n = r.u64()? as usize;
    let d = r.u64()? as usize;
    let split = match r.u8()? {
        0 => Split::Train,
        1 => Split::Val,
        v => {
            return Err(Error::Parse { offset: r.pos as u64, msg: format!("bad split tag {v}") })
        }
    };
    let x = Tensor::matrix(n, d, r.f64s(n * d)?);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()));
    }
    let rotation = Tensor::matrix(d, d, r.f64s(d * d)?);
    let projector = Tensor::matrix(2, d, r.f64s(2 * d)?);
    let sigma_pad = r.f64()?;
    let k = r.u64()? as usize;
    let weights = r.f64s(k)?;
    let mut means = Vec::with_capacity(k);
    for _ in 0..k {
        means.push([r.f64()?, r.f64()?]);
    }
    let mut covs = Vec::with_capacity(k);
    for _ in 0..k {
        covs.push([[r.f64()?, r.f64()?], [r.f64()?, r.f64()?]]);
    }
    Ok(SyntheticDataset {
        x,
        labels,
        rotation,
        projector,
        sigma_pad,
        spec: Gmm2dSpec { weights, means, covs },
        split,
    })
}

// ── Density (DIVR) ───────────────────────────────────────────────────

pub fn save_density(path: &Path, est: &DensityEstimate) -> Result<()> {
    let mut w = Writer::new(DENSITY_MAGIC);
    let n = est.len();
    w.u64(n as u64);
    w.u8(match est.estimator {
        EstimatorTag::Oracle => 0,
        EstimatorTag::Kde => 1,
        EstimatorTag::KnnAdaptive => 2,
    });
    w.u8(est.duplicate_fallback as u8);
    w.f64s(&est.rho);
    w.f64s(&est.sigma);
    let p = &est.projector;
    w.u64(p.output_dim() as u64);
    w.u64(p.input_dim() as u64);
    w.f64s(&p.mean);
    w.f64s(p.components.data());
    w.f64s(&p.explained_variance);
    w.finish(path)
}

pub fn load_density(path: &Path) -> Result<DensityEstimate> {
    let data = fs::read(path)?;
    let mut r = Reader::open(&data, DENSITY_MAGIC)?;
    let n = r.u64()? as usize;
    let estimator = match r.u8()? {
        0 => EstimatorTag::Oracle,
        1 => EstimatorTag::Kde,
        2 => EstimatorTag::KnnAdaptive,
        v => {
            return Err(Error::Parse { offset: r.pos as u64, msg: format!("bad estimator tag {v}") })
        }
    };
    let duplicate_fallback = r.u8()? != 0;
    let rho = r.f64s(n)?;
    let sigma = r.f64s(n)?;
    let d = r.u64()? as usize;
    let big_d = r.u64()? as usize;
    let mean = r.f64s(big_d)?;
    let components = Tensor::matrix(d, big_d, r.f64s(d * big_d)?);
    let explained_variance = r.f64s(d)?;
    Ok(DensityEstimate {
        rho,
        sigma,
        estimator,
        projector: PcaProjector { mean, components, explained_variance },
        duplicate_fallback,
    })
}

// ── Checkpoint (DIVM) ────────────────────────────────────────────────

/// Full training state: model, optional flow, optimizer, RNG position.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: VaeModel,
    pub flow: Option<FlowModel>,
    pub method: AlignMethod,
    /// Next epoch to run.
    pub epoch: u64,
    pub adam: Option<AdamState>,
    pub rng_state: RngState,
    pub config_hash: String,
}

fn method_tag(m: AlignMethod) -> u8 {
    match m {
        AlignMethod::None => 0,
        AlignMethod::Direct => 1,
        AlignMethod::Flow => 2,
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    w.u8(method_tag(ck.method));
    w.u8(match ck.model.encoder.net.activation {
        Activation::Tanh => 0,
        Activation::Identity => 1,
    });
    w.u64(ck.model.latent_dim() as u64);
    match ck.model.decoder.head {
        DecoderHead::Gaussian { sigma_x } => {
            w.u8(0);
            w.f64(sigma_x);
        }
        DecoderHead::Bernoulli => {
            w.u8(1);
            w.f64(0.0);
        }
    }
    w.u8(match ck.model.prior {
        Prior::Standard { .. } => 0,
        Prior::Gmm { .. } => 1,
        Prior::Vamp { .. } => 2,
    });
    w.u64(ck.epoch);
    w.str(&ck.config_hash);

    // Named parameter tensors, flow parameters under their flow/ namespace.
    let mut named: Vec<(String, &Tensor)> = ck.model.named_params();
    if let Some(flow) = &ck.flow {
        named.extend(flow.named_params());
    }
    w.u64(named.len() as u64);
    for (name, t) in &named {
        w.str(name);
        w.tensor(t);
    }
    w.u8(ck.flow.is_some() as u8);
    if let Some(flow) = &ck.flow {
        w.u64(flow.layers.len() as u64);
        w.u64(flow.dim as u64);
    }

    match &ck.adam {
        None => w.u8(0),
        Some(adam) => {
            w.u8(1);
            w.u64(adam.t);
            w.f64(adam.lr);
            w.f64(adam.beta1);
            w.f64(adam.beta2);
            w.f64(adam.eps);
            w.u64(adam.moments.len() as u64);
            for (name, (m, v)) in &adam.moments {
                w.str(name);
                w.tensor(m);
                w.tensor(v);
            }
        }
    }

    w.buf.extend_from_slice(&ck.rng_state.seed);
    w.u64(ck.rng_state.stream);
    w.u64((ck.rng_state.word_pos & u128::from(u64::MAX)) as u64);
    w.u64((ck.rng_state.word_pos >> 64) as u64);
    match ck.rng_state.cached {
        None => w.u8(0),
        Some(v) => {
            w.u8(1);
            w.f64(v);
        }
    }
    w.finish(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = fs::read(path)?;
    let mut r = Reader::open(&data, CHECKPOINT_MAGIC)?;
    let method = match r.u8()? {
        0 => AlignMethod::None,
        1 => AlignMethod::Direct,
        2 => AlignMethod::Flow,
        v => return Err(Error::Parse { offset: r.pos as u64, msg: format!("bad method tag {v}") }),
    };
    let activation = match r.u8()? {
        0 => Activation::Tanh,
        1 => Activation::Identity,
        v => {
            return Err(Error::Parse { offset: r.pos as u64, msg: format!("bad activation tag {v}") })
        }
    };
    let latent_dim = r.u64()? as usize;
    let head_tag = r.u8()?;
    let sigma_x = r.f64()?;
    let head = match head_tag {
        0 => DecoderHead::Gaussian { sigma_x },
        1 => DecoderHead::Bernoulli,
        v => return Err(Error::Parse { offset: r.pos as u64, msg: format!("bad head tag {v}") }),
    };
    let prior_tag = r.u8()?;
    let epoch = r.u64()?;
    let config_hash = r.str()?;

    let count = r.u64()? as usize;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..count {
        let name = r.str()?;
        let t = r.tensor()?;
        tensors.insert(name, t);
    }
    let has_flow = r.u8()? != 0;
    let flow_meta = if has_flow { Some((r.u64()? as usize, r.u64()? as usize)) } else { None };

    let adam = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let lr = r.f64()?;
            let beta1 = r.f64()?;
            let beta2 = r.f64()?;
            let eps = r.f64()?;
            let n = r.u64()? as usize;
            let mut moments = std::collections::BTreeMap::new();
            for _ in 0..n {
                let name = r.str()?;
                let m = r.tensor()?;
                let v = r.tensor()?;
                moments.insert(name, (m, v));
            }
            Some(AdamState { lr, beta1, beta2, eps, t, moments })
        }
        v => return Err(Error::Parse { offset: r.pos as u64, msg: format!("bad adam tag {v}") }),
    };

    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let lo = r.u64()? as u128;
    let hi = r.u64()? as u128;
    let cached = match r.u8()? {
        0 => None,
        1 => Some(r.f64()?),
        v => return Err(Error::Parse { offset: r.pos as u64, msg: format!("bad rng cache tag {v}") }),
    };
    let rng_state = RngState { seed, stream, word_pos: lo | (hi << 64), cached };

    let mut grab = |name: &str| -> Result<Tensor> {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor `{name}`")))
    };

    let encoder = Encoder {
        net: Mlp {
            w1: grab("enc/w1")?,
            b1: grab("enc/b1")?,
            w2: grab("enc/w2")?,
            b2: grab("enc/b2")?,
            activation,
        },
        latent_dim,
    };
    let decoder = Decoder {
        net: Mlp {
            w1: grab("dec/w1")?,
            b1: grab("dec/b1")?,
            w2: grab("dec/w2")?,
            b2: grab("dec/b2")?,
            activation,
        },
        head,
    };
    let prior = match prior_tag {
        0 => Prior::Standard { dim: latent_dim },
        1 => Prior::Gmm {
            logits: grab("prior/logits")?,
            means: grab("prior/means")?,
            log_scales: grab("prior/log_scales")?,
        },
        2 => Prior::Vamp { pseudo: grab("prior/pseudo")? },
        v => return Err(Error::Parse { offset: 0, msg: format!("bad prior tag {v}") }),
    };
    let model = VaeModel { encoder, decoder, prior };

    let flow = match flow_meta {
        None => None,
        Some((n_layers, dim)) => {
            let mut layers = Vec::with_capacity(n_layers);
            for l in 0..n_layers {
                let (keep, change) = mask_split(dim, l % 2);
                layers.push(CouplingLayer {
                    keep,
                    change,
                    scale_net: Mlp {
                        w1: grab(&format!("flow/l{l}/scale/w1"))?,
                        b1: grab(&format!("flow/l{l}/scale/b1"))?,
                        w2: grab(&format!("flow/l{l}/scale/w2"))?,
                        b2: grab(&format!("flow/l{l}/scale/b2"))?,
                        activation: Activation::Tanh,
                    },
                    shift_net: Mlp {
                        w1: grab(&format!("flow/l{l}/shift/w1"))?,
                        b1: grab(&format!("flow/l{l}/shift/b1"))?,
                        w2: grab(&format!("flow/l{l}/shift/w2"))?,
                        b2: grab(&format!("flow/l{l}/shift/b2"))?,
                        activation: Activation::Tanh,
                    },
                    bound: grab(&format!("flow/l{l}/bound"))?,
                });
            }
            Some(FlowModel { layers, dim })
        }
    };

    Ok(Checkpoint { model, flow, method, epoch, adam, rng_state, config_hash })
}

// ── IDX ──────────────────────────────────────────────────────────────

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

/// Image set from an IDX file, pixels scaled to [0, 1].
#[derive(Clone, Debug)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// count x (rows*cols).
    pub pixels: Tensor,
}

fn read_be_u32(data: &[u8], offset: usize) -> Result<u32> {
    if offset + 4 > data.len() {
        return Err(Error::Parse {
            offset: offset as u64,
            msg: "truncated big-endian header".into(),
        });
    }
    Ok(u32::from_be_bytes(data[offset..offset + 4].try_into().unwrap()))
}

pub fn parse_idx_images(path: &Path) -> Result<IdxImages> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    parse_idx_images_bytes(&data)
}

pub fn parse_idx_images_bytes(data: &[u8]) -> Result<IdxImages> {
    let magic = read_be_u32(data, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("image magic {magic}, expected {IDX_IMAGES_MAGIC}"),
        });
    }
    let count = read_be_u32(data, 4)? as usize;
    let rows = read_be_u32(data, 8)? as usize;
    let cols = read_be_u32(data, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if data.len() < expected {
        return Err(Error::Parse {
            offset: data.len() as u64,
            msg: format!("payload truncated: file has {} bytes, header implies {expected}", data.len()),
        });
    }
    let pixels: Vec<f64> = data[16..expected].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(IdxImages { count, rows, cols, pixels: Tensor::matrix(count, rows * cols, pixels) })
}

pub fn parse_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    parse_idx_labels_bytes(&data)
}

pub fn parse_idx_labels_bytes(data: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(data, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("label magic {magic}, expected {IDX_LABELS_MAGIC}"),
        });
    }
    let count = read_be_u32(data, 4)? as usize;
    if data.len() < 8 + count {
        return Err(Error::Parse {
            offset: data.len() as u64,
            msg: format!("payload truncated: {} bytes for {count} labels", data.len()),
        });
    }
    Ok(data[8..8 + count].to_vec())
}

// ── Run manifest ─────────────────────────────────────────────────────

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Everything needed to re-execute a run, plus observed timings.
#[derive(Clone, Debug, Default)]
pub struct RunManifest {
    pub config_text: String,
    pub seed: u64,
    /// (artifact name, sha256) pairs.
    pub dataset_hashes: Vec<(String, String)>,
    pub teacher_hash: Option<String>,
    pub git_describe: String,
    /// (phase, seconds). Excluded from the manifest hash.
    pub timings: Vec<(String, f64)>,
}

impl RunManifest {
    /// Hash over the run inputs only: config text, seed, dataset and teacher
    /// hashes. Timings and the git string do not participate.
    pub fn manifest_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config_text.as_bytes());
        h.update(self.seed.to_le_bytes());
        for (name, hash) in &self.dataset_hashes {
            h.update(name.as_bytes());
            h.update(hash.as_bytes());
        }
        if let Some(t) = &self.teacher_hash {
            h.update(t.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("manifest_hash = {}\n", self.manifest_hash()));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("git = {}\n", self.git_describe));
        for (name, hash) in &self.dataset_hashes {
            out.push_str(&format!("dataset.{name} = {hash}\n"));
        }
        if let Some(t) = &self.teacher_hash {
            out.push_str(&format!("teacher = {t}\n"));
        }
        for (phase, secs) in &self.timings {
            out.push_str(&format!("timing.{phase} = {secs}\n"));
        }
        out.push_str("--- config ---\n");
        out.push_str(&self.config_text);
        out
    }
}
