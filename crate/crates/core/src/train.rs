//! Rate-distortion training of the baseline codec and the model zoo.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    analyze_graph, hyper_synthesize_graph, run_stack, uniform_noise, ArchConfig, CodecError, ModelKind,
    ModelParams, ModelVars, StackKind,
};
use crate::image::{reflect_pad, ImageError, RgbImage};
use crate::pipeline::{encode_baseline, PipelineError};
use crate::tensor::{adam_step, AdamState, Graph, Tensor, TensorError};

/// Distortion is measured on the 8-bit scale: `MSE_255 = 255^2 * MSE_[0,1]`.
pub const DISTORTION_SCALE: f64 = 255.0 * 255.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("non-finite loss at step {step}: rate {rate_bits} bits, mse {mse}")]
    Diverged { step: usize, rate_bits: f64, mse: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.008,
            steps: 20_000,
            batch_size: 8,
            crop_size: 64,
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, arch: &ArchConfig) -> Result<(), TrainError> {
        let m = arch.pad_multiple().max(8);
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.crop_size == 0 || self.crop_size % m != 0 {
            return Err(TrainError::Config(format!("crop size {} not a multiple of {m}", self.crop_size)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Default lambda grid of the toy zoo, ascending.
pub const ZOO_LAMBDAS: [f64; 6] = [0.002, 0.004, 0.008, 0.016, 0.032, 0.064];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Estimated bits for the whole batch.
    pub rate_bits: f64,
    /// Mean squared error on the `[0, 1]` scale.
    pub mse: f64,
}

/// Builds the relaxed rate-distortion loss for `batch` and backpropagates it.
///
/// `loss = rate_nats / pixels + lambda * 255^2 * MSE`, with additive uniform
/// noise standing in for rounding. Gradients accumulate into the leaves of `mv`.
pub fn rd_loss(
    g: &mut Graph<f32>,
    mv: &ModelVars,
    kind: ModelKind,
    batch: &Tensor,
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<StepStats, TrainError> {
    let s = batch.shape().to_vec();
    let pixels = (s[0] * s[2] * s[3]) as f32;
    let x = g.constant(batch.clone());
    let y = analyze_graph(g, mv, x)?;
    let noise = g.constant(uniform_noise(g.shape(y), rng));
    let y_tilde = g.add(y, noise)?;
    let rate = match kind {
        ModelKind::Factorized => g.factorized_bits(y_tilde, mv.prior_loc, mv.prior_log_scale)?,
        ModelKind::Hyperprior => {
            let z = run_stack(g, y, &mv.hyper_encoder, StackKind::Conv, false)?;
            let noise = g.constant(uniform_noise(g.shape(z), rng));
            let z_tilde = g.add(z, noise)?;
            let (mean, scale) = hyper_synthesize_graph(g, mv, z_tilde)?;
            let ry = g.gaussian_bits(y_tilde, mean, scale)?;
            let rz = g.factorized_bits(z_tilde, mv.prior_loc, mv.prior_log_scale)?;
            g.add(ry, rz)?
        }
    };
    let x_hat = run_stack(g, y_tilde, &mv.decoder, StackKind::Transposed, false)?;
    let diff = g.sub(x_hat, x)?;
    let sq = g.square(diff);
    let mse = g.mean(sq);
    let rate_term = g.scale(rate, std::f32::consts::LN_2 / pixels);
    let dist_term = g.scale(mse, (lambda * DISTORTION_SCALE) as f32);
    let loss = g.add(rate_term, dist_term)?;
    let stats = StepStats {
        loss: g.value(loss).item() as f64,
        rate_bits: g.value(rate).item() as f64,
        mse: g.value(mse).item() as f64,
    };
    if !stats.loss.is_finite() {
        return Ok(stats);
    }
    g.backward(loss)?;
    Ok(stats)
}

/// Adam state over all model parameters.
pub struct Trainer {
    pub params: ModelParams,
    adam: Vec<AdamState<f32>>,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(params: ModelParams, learning_rate: f64, seed: u64) -> Self {
        let adam = params
            .named_tensors()
            .iter()
            .map(|(_, t)| AdamState::new(t.numel(), learning_rate))
            .collect();
        Self {
            params,
            adam,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_da7a),
            step: 0,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        for st in &mut self.adam {
            st.lr = lr;
        }
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &Tensor, lambda: f64) -> Result<StepStats, TrainError> {
        let mut g = Graph::<f32>::new();
        let mv = ModelVars::bind(&mut g, &self.params, true);
        let stats = rd_loss(&mut g, &mv, self.params.config.kind, batch, lambda, &mut self.rng)?;
        if !stats.loss.is_finite() {
            return Err(TrainError::Diverged {
                step: self.step,
                rate_bits: stats.rate_bits,
                mse: stats.mse,
            });
        }
        let vars = mv.all();
        for ((t, v), st) in self.params.tensors_mut().into_iter().zip(vars).zip(&mut self.adam) {
            if let Some(grad) = g.grad(v) {
                adam_step(t, grad, st)?;
            }
        }
        self.step += 1;
        Ok(stats)
    }
}

/// Random `crop x crop` window with a random horizontal flip; small images are reflect-padded.
pub fn random_crop(img: &RgbImage, crop: usize, rng: &mut impl Rng) -> Result<Tensor, TrainError> {
    let mut t = if img.width() < crop || img.height() < crop {
        reflect_pad(&img.to_tensor(), crop)
    } else {
        let x = rng.gen_range(0..=img.width() - crop);
        let y = rng.gen_range(0..=img.height() - crop);
        img.crop(x, y, crop, crop)?.to_tensor()
    };
    if t.shape()[2] != crop || t.shape()[3] != crop {
        t = crate::image::crop_tensor(&t, crop, crop);
    }
    if rng.gen_bool(0.5) {
        let data = t.data().to_vec();
        for (row_out, row_in) in t.data_mut().chunks_exact_mut(crop).zip(data.chunks_exact(crop)) {
            for (o, i) in row_out.iter_mut().zip(row_in.iter().rev()) {
                *o = *i;
            }
        }
    }
    Ok(t)
}

pub fn random_batch(data: &[RgbImage], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Tensor, TrainError> {
    let c = cfg.crop_size;
    let mut out = Vec::with_capacity(cfg.batch_size * 3 * c * c);
    for _ in 0..cfg.batch_size {
        let img = &data[rng.gen_range(0..data.len())];
        out.extend_from_slice(random_crop(img, c, rng)?.data());
    }
    Ok(Tensor::new(vec![cfg.batch_size, 3, c, c], out)?)
}

/// Per-step training record.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

/// Trains a freshly initialized model.
pub fn train(arch: &ArchConfig, data: &[RgbImage], cfg: &TrainConfig) -> Result<(ModelParams, TrainLog), TrainError> {
    train_from(ModelParams::init(arch, cfg.seed)?, data, cfg)
}

/// Trains starting from `params`, with fresh optimizer state.
pub fn train_from(params: ModelParams, data: &[RgbImage], cfg: &TrainConfig) -> Result<(ModelParams, TrainLog), TrainError> {
    cfg.validate(&params.config)?;
    if data.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let mut trainer = Trainer::new(params, cfg.learning_rate, cfg.seed);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = random_batch(data, cfg, trainer.rng())?;
        let s = trainer.train_step(&batch, cfg.lambda)?;
        log.losses.push(s.loss);
        if (step + 1) % 100 == 0 || step + 1 == cfg.steps {
            info!(
                "lambda {} step {}/{}: loss {:.4} bpp {:.4} psnr {:.2}",
                cfg.lambda,
                step + 1,
                cfg.steps,
                s.loss,
                s.rate_bits / (cfg.batch_size * cfg.crop_size * cfg.crop_size) as f64,
                crate::rd::psnr_from_mse(s.mse, 1.0)
            );
        }
    }
    Ok((trainer.params, log))
}

/// Validation anchor of one checkpoint: means over a validation set of real coded sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    /// Mean whole-container bits.
    pub bits: f64,
    /// Mean `|mb| + |sb|` bits.
    pub payload_bits: f64,
    pub psnr: f64,
}

pub fn validation_anchor(params: &ModelParams, val: &[RgbImage]) -> Result<Anchor, TrainError> {
    if val.is_empty() {
        return Err(TrainError::Config("empty validation set".into()));
    }
    let (mut bits, mut payload, mut psnr) = (0.0, 0.0, 0.0);
    for img in val {
        let b = encode_baseline(params, img, 0)?;
        bits += b.total_bits() as f64;
        payload += b.code.payload_bits() as f64;
        psnr += b.psnr;
    }
    let n = val.len() as f64;
    Ok(Anchor {
        bits: bits / n,
        payload_bits: payload / n,
        psnr: psnr / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooEntry {
    /// 1-based rank of `lambda` within the zoo.
    pub quality: u8,
    pub lambda: f64,
    /// Relative to the manifest's directory.
    pub checkpoint: PathBuf,
    pub anchor: Option<Anchor>,
    pub status: RunStatus,
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "zoo.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZooManifest {
    pub version: u32,
    pub arch: ArchConfig,
    pub models: Vec<ZooEntry>,
}

impl ZooManifest {
    pub fn new(arch: ArchConfig) -> Self {
        Self {
            version: MANIFEST_VERSION,
            arch,
            models: Vec::new(),
        }
    }

    /// Inserts or replaces the entry for `entry.lambda` and renumbers qualities by lambda rank.
    pub fn upsert(&mut self, entry: ZooEntry) {
        self.models.retain(|m| m.lambda != entry.lambda);
        self.models.push(entry);
        self.models.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        for (i, m) in self.models.iter_mut().enumerate() {
            m.quality = (i + 1) as u8;
        }
    }

    pub fn entry(&self, quality: u8) -> Option<&ZooEntry> {
        self.models.iter().find(|m| m.quality == quality)
    }

    /// Warns when PSNR or rate fails to increase with lambda. Returns whether the zoo is monotone.
    pub fn check_monotone(&self) -> bool {
        let anchors: Vec<(f64, Anchor)> = self
            .models
            .iter()
            .filter(|m| m.status == RunStatus::Ok)
            .filter_map(|m| m.anchor.map(|a| (m.lambda, a)))
            .collect();
        let mut ok = true;
        for w in anchors.windows(2) {
            if w[1].1.psnr < w[0].1.psnr || w[1].1.bits < w[0].1.bits {
                warn!("zoo not monotone between lambda {} and {}", w[0].0, w[1].0);
                ok = false;
            }
        }
        ok
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)?;
        let m: Self = serde_json::from_str(&text).map_err(|e| TrainError::Manifest(format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(TrainError::Manifest(format!("unsupported version {}", m.version)));
        }
        Ok(m)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir.as_ref())?;
        let text = serde_json::to_string_pretty(self).map_err(|e| TrainError::Manifest(e.to_string()))?;
        std::fs::write(dir.as_ref().join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}

/// Trains one model per config, saves checkpoints into `dir` and records anchors.
/// With `init`, every run fine-tunes a copy of it instead of starting from scratch.
/// A diverged run is recorded as failed rather than aborting the zoo.
pub fn train_zoo(
    arch: &ArchConfig,
    configs: &[TrainConfig],
    train_set: &[RgbImage],
    val_set: &[RgbImage],
    init: Option<&ModelParams>,
    dir: impl AsRef<Path>,
) -> Result<ZooManifest, TrainError> {
    let dir = dir.as_ref();
    let mut manifest = match ZooManifest::load(dir) {
        Ok(m) if &m.arch == arch => m,
        _ => ZooManifest::new(arch.clone()),
    };
    for cfg in configs {
        let entry = train_zoo_entry(arch, cfg, train_set, val_set, init, dir)?;
        manifest.upsert(entry);
        manifest.save(dir)?;
    }
    manifest.check_monotone();
    Ok(manifest)
}

/// Trains a single lambda and returns its manifest row.
pub fn train_zoo_entry(
    arch: &ArchConfig,
    cfg: &TrainConfig,
    train_set: &[RgbImage],
    val_set: &[RgbImage],
    init: Option<&ModelParams>,
    dir: &Path,
) -> Result<ZooEntry, TrainError> {
    std::fs::create_dir_all(dir)?;
    let name = PathBuf::from(format!("lambda_{}.nicm", cfg.lambda));
    let entry = |anchor, status| ZooEntry {
        quality: 0,
        lambda: cfg.lambda,
        checkpoint: name.clone(),
        anchor,
        status,
    };
    let run = match init {
        Some(p) if &p.config != arch => {
            return Err(TrainError::Config("initial checkpoint has a different architecture".into()))
        }
        Some(p) => train_from(p.clone(), train_set, cfg),
        None => train(arch, train_set, cfg),
    };
    match run {
        Ok((params, _)) => {
            params.save(dir.join(&name))?;
            let anchor = validation_anchor(&params, val_set)?;
            info!(
                "lambda {}: val {:.1} bits, {:.2} dB",
                cfg.lambda, anchor.bits, anchor.psnr
            );
            Ok(entry(Some(anchor), RunStatus::Ok))
        }
        Err(TrainError::Diverged { step, rate_bits, mse }) => {
            warn!("lambda {} diverged at step {step} (rate {rate_bits}, mse {mse})", cfg.lambda);
            Ok(entry(None, RunStatus::Failed))
        }
        Err(e) => Err(e),
    }
}

/// Paths of all `.png` files of a directory, sorted by file name.
pub fn list_png_dir(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, TrainError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn load_png_dir(dir: impl AsRef<Path>) -> Result<Vec<RgbImage>, TrainError> {
    Ok(list_png_dir(dir)?.iter().map(RgbImage::load_png).collect::<Result<_, _>>()?)
}

/// A loaded zoo: manifest plus its directory.
#[derive(Clone, Debug)]
pub struct Zoo {
    pub dir: PathBuf,
    pub manifest: ZooManifest,
}

impl Zoo {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, TrainError> {
        Ok(Self {
            dir: dir.as_ref().to_path_buf(),
            manifest: ZooManifest::load(dir)?,
        })
    }

    pub fn usable(&self, quality: u8) -> Result<&ZooEntry, TrainError> {
        match self.manifest.entry(quality) {
            Some(e) if e.status == RunStatus::Ok => Ok(e),
            Some(_) => Err(TrainError::Manifest(format!("quality {quality} is a failed run"))),
            None => Err(TrainError::Manifest(format!("quality {quality} not in zoo"))),
        }
    }

    pub fn model(&self, quality: u8) -> Result<ModelParams, TrainError> {
        let e = self.usable(quality)?;
        let p = ModelParams::load(self.dir.join(&e.checkpoint))?;
        if p.config != self.manifest.arch {
            return Err(TrainError::Manifest(format!("checkpoint for quality {quality} has a different architecture")));
        }
        Ok(p)
    }

    /// Adjacent usable quality closest in validation PSNR; the single neighbour at an edge.
    pub fn neighbor(&self, quality: u8) -> Result<u8, TrainError> {
        self.neighbors(quality)?
            .first()
            .copied()
            .ok_or_else(|| TrainError::Manifest(format!("quality {quality} has no usable neighbour")))
    }

    /// Usable adjacent qualities, closest in validation PSNR first.
    pub fn neighbors(&self, quality: u8) -> Result<Vec<u8>, TrainError> {
        let here = self.usable(quality)?.anchor.map(|a| a.psnr);
        let mut candidates: Vec<&ZooEntry> = [quality.checked_sub(1), quality.checked_add(1)]
            .into_iter()
            .flatten()
            .filter_map(|q| self.usable(q).ok())
            .collect();
        let dist = |e: &ZooEntry| match (here, e.anchor) {
            (Some(h), Some(a)) => (a.psnr - h).abs(),
            _ => f64::INFINITY,
        };
        candidates.sort_by(|a, b| dist(a).total_cmp(&dist(b)));
        Ok(candidates.into_iter().map(|e| e.quality).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::synthetic_image;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            latent_channels: 8,
            hyper_channels: 4,
            base_width: 8,
            ..ArchConfig::default()
        }
    }

    fn batch(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs: Vec<RgbImage> = (0..2).map(|_| synthetic_image(32, 32, &mut rng)).collect();
        let cfg = TrainConfig {
            batch_size: 2,
            crop_size: 32,
            ..TrainConfig::default()
        };
        random_batch(&imgs, &cfg, &mut rng).unwrap()
    }

    fn loss_at(params: &ModelParams, b: &Tensor, lambda: f64) -> (Graph<f32>, ModelVars, StepStats) {
        let mut g = Graph::new();
        let mv = ModelVars::bind(&mut g, params, true);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let s = rd_loss(&mut g, &mv, params.config.kind, b, lambda, &mut rng).unwrap();
        (g, mv, s)
    }

    #[test]
    fn zero_lambda_gives_no_decoder_gradient() {
        let p = ModelParams::init(&tiny_arch(), 1).unwrap();
        let (g, mv, _) = loss_at(&p, &batch(1), 0.0);
        for l in &mv.decoder {
            for v in [l.weight, l.bias] {
                assert!(g.grad(v).unwrap().data().iter().all(|&x| x == 0.0));
            }
        }
        assert!(g.grad(mv.encoder[0].weight).unwrap().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn distortion_term_is_linear_in_lambda() {
        let p = ModelParams::init(&tiny_arch(), 1).unwrap();
        let b = batch(2);
        let (_, _, s1) = loss_at(&p, &b, 0.01);
        let (_, _, s2) = loss_at(&p, &b, 0.02);
        let expect = 0.01 * DISTORTION_SCALE * s1.mse;
        assert!(((s2.loss - s1.loss) - expect).abs() <= 1e-4 * expect.max(1.0));
        assert_eq!(s1.mse, s2.mse);
    }

    #[test]
    fn training_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<RgbImage> = (0..3).map(|_| synthetic_image(40, 40, &mut rng)).collect();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 2,
            crop_size: 32,
            learning_rate: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let (a, _) = train(&tiny_arch(), &data, &cfg).unwrap();
        let (b, _) = train(&tiny_arch(), &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ModelParams::init(&tiny_arch(), 5).unwrap());
    }

    #[test]
    fn config_validation() {
        let arch = ArchConfig::default();
        assert!(TrainConfig::default().validate(&arch).is_ok());
        let bad = TrainConfig {
            crop_size: 40,
            ..TrainConfig::default()
        };
        assert!(bad.validate(&arch).is_err());
        let bad = TrainConfig {
            lambda: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate(&arch).is_err());
    }

    #[test]
    fn manifest_upsert_ranks_by_lambda() {
        let mut m = ZooManifest::new(tiny_arch());
        for l in [0.03, 0.01, 0.02, 0.01] {
            m.upsert(ZooEntry {
                quality: 0,
                lambda: l,
                checkpoint: "x".into(),
                anchor: None,
                status: RunStatus::Ok,
            });
        }
        let q: Vec<(u8, f64)> = m.models.iter().map(|e| (e.quality, e.lambda)).collect();
        assert_eq!(q, vec![(1, 0.01), (2, 0.02), (3, 0.03)]);
    }
}
