//! Adam training on randomly cropped, synthetically degraded image pairs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::degradation::{add_gaussian_noise, derive_seed, mosaic_with_phase, DegradeKind};
use crate::error::{MagnError, Result};
use crate::exec::BranchMode;
use crate::imageio::{list_pngs, load_png};
use crate::kv::KvMap;
use crate::metrics::luminance;
use crate::model::{self, crop, ModelConfig, ModelParams};
use crate::tensor::{real, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<u64>,
    pub crop: usize,
    pub seed: u64,
    pub degrade: DegradeKind,
    /// Noise level on the 0–255 scale.
    pub sigma: f64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Random flips and 90° rotations of each crop.
    pub augment: bool,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 200,
            steps: None,
            crop: 31,
            seed: 0,
            degrade: DegradeKind::Gaussian,
            sigma: 25.0,
            checkpoint_every: 1000,
            augment: false,
            log_every: 10,
        }
    }
}

pub(crate) const TRAIN_KEYS: &[&str] = &[
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_size",
    "epochs",
    "steps",
    "crop",
    "seed",
    "degrade",
    "sigma",
    "checkpoint_every",
    "augment",
    "log_every",
];

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            epochs: 5,
            checkpoint_every: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(MagnError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if self.degrade == DegradeKind::Mosaic && model.in_channels != 3 {
            return bad("mosaic training needs in_channels=3".into());
        }
        model.check_size(self.crop, self.crop).map_err(|e| MagnError::Config(format!("crop {}: {e}", self.crop)))?;
        if model.graph_blocks > 0 && model.structure.pixel_branches() > 0 && self.crop * self.crop > model.node_budget {
            return bad(format!("crop {} exceeds the node budget {}", self.crop, model.node_budget));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("lr", self.lr);
        kv.insert("beta1", self.beta1);
        kv.insert("beta2", self.beta2);
        kv.insert("adam_eps", self.adam_eps);
        kv.insert("batch_size", self.batch_size);
        kv.insert("epochs", self.epochs);
        if let Some(s) = self.steps {
            kv.insert("steps", s);
        }
        kv.insert("crop", self.crop);
        kv.insert("seed", self.seed);
        kv.insert("degrade", self.degrade);
        kv.insert("sigma", self.sigma);
        kv.insert("checkpoint_every", self.checkpoint_every);
        kv.insert("augment", self.augment);
        kv.insert("log_every", self.log_every);
        kv
    }

    /// Consumes the training keys of `kv`; missing keys keep their defaults.
    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            lr: kv.take_or("lr", d.lr)?,
            beta1: kv.take_or("beta1", d.beta1)?,
            beta2: kv.take_or("beta2", d.beta2)?,
            adam_eps: kv.take_or("adam_eps", d.adam_eps)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            epochs: kv.take_or("epochs", d.epochs)?,
            steps: kv.take("steps")?,
            crop: kv.take_or("crop", d.crop)?,
            seed: kv.take_or("seed", d.seed)?,
            degrade: kv.take_or("degrade", d.degrade)?,
            sigma: kv.take_or("sigma", d.sigma)?,
            checkpoint_every: kv.take_or("checkpoint_every", d.checkpoint_every)?,
            augment: kv.take_or("augment", d.augment)?,
            log_every: kv.take_or("log_every", d.log_every)?,
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Splits a combined config file into model and training settings.
pub fn parse_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut kv = KvMap::parse(text)?;
    let mut mkv = kv.extract(crate::model::config::MODEL_KEYS);
    let mut tkv = kv.extract(TRAIN_KEYS);
    kv.finish()?;
    let model = ModelConfig::from_kv(&mut mkv)?;
    let train = TrainConfig::from_kv(&mut tkv)?;
    Ok((model, train))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update. Nothing changes if any gradient is
/// non-finite; the error names the offending parameter.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    names: &[String],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(MagnError::invalid(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(MagnError::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(MagnError::NonFiniteGradient {
                name: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (real::<T>(cfg.beta1), real::<T>(cfg.beta2));
    let c1 = real::<T>(1.0 - cfg.beta1.powi(t));
    let c2 = real::<T>(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (real::<T>(cfg.lr), real::<T>(cfg.eps));
    let one = T::one();
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (j, &gj) in g.data().iter().enumerate() {
            md[j] = b1 * md[j] + (one - b1) * gj;
            vd[j] = b2 * vd[j] + (one - b2) * gj * gj;
            let mh = md[j] / c1;
            let vh = vd[j] / c2;
            pd[j] = pd[j] - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Clean training images with the channel count the model expects.
#[derive(Clone, Debug)]
pub struct Dataset<T: Real> {
    pub images: Vec<(String, Tensor<T>)>,
}

fn to_channels<T: Real>(img: Tensor<T>, channels: usize) -> Result<Tensor<T>> {
    let (h, w, c) = match *img.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(MagnError::invalid("dataset", format!("expected an image, got {s:?}"))),
    };
    match (c, channels) {
        (a, b) if a == b => Ok(img),
        (1, 3) => {
            let data = img.data().iter().flat_map(|&v| [v, v, v]).collect();
            Tensor::new(&[h, w, 3], data)
        }
        (3, 1) => {
            let (_, _, plane) = luminance(&img)?;
            Tensor::new(&[h, w, 1], plane.into_iter().map(real).collect())
        }
        _ => Err(MagnError::invalid("dataset", format!("cannot convert {c} channels to {channels}"))),
    }
}

impl<T: Real> Dataset<T> {
    /// Images that are smaller than `min_size` are rejected.
    pub fn from_images(images: Vec<(String, Tensor<T>)>, channels: usize, min_size: usize) -> Result<Self> {
        let mut kept = Vec::new();
        for (name, img) in images {
            let img = to_channels(img, channels)?;
            if img.shape()[0] < min_size || img.shape()[1] < min_size {
                warn!("skipping {name}: smaller than the {min_size}x{min_size} crop");
                continue;
            }
            kept.push((name, img));
        }
        if kept.is_empty() {
            return Err(MagnError::Dataset("no usable training images".into()));
        }
        Ok(Self { images: kept })
    }

    /// Every readable PNG in `dir`; unreadable files are skipped with a warning.
    pub fn load_dir(dir: &Path, channels: usize, min_size: usize) -> Result<Self> {
        let mut images = Vec::new();
        for path in list_pngs(dir)? {
            match load_png::<T>(&path) {
                Ok(img) => images.push((path.file_name().unwrap_or_default().to_string_lossy().into_owned(), img.pixels)),
                Err(e) => warn!("skipping {}: {e}", path.display()),
            }
        }
        if images.is_empty() {
            return Err(MagnError::Dataset(format!("no readable PNG images in {}", dir.display())));
        }
        Self::from_images(images, channels, min_size)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn flip_h<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape().to_vec();
    let (w, c) = (s[1], s[2]);
    let mut out = x.clone();
    for (src, dst) in x.data().chunks(w * c).zip(out.data_mut().chunks_mut(w * c)) {
        for j in 0..w {
            dst[j * c..(j + 1) * c].copy_from_slice(&src[(w - 1 - j) * c..(w - j) * c]);
        }
    }
    out
}

/// Transpose of the spatial axes; with a flip this gives the 90° rotations.
fn transpose_hw<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape().to_vec();
    let (h, w, c) = (s[0], s[1], s[2]);
    let d = x.data();
    let mut out = Vec::with_capacity(d.len());
    for j in 0..w {
        for i in 0..h {
            out.extend_from_slice(&d[(i * w + j) * c..(i * w + j + 1) * c]);
        }
    }
    Tensor::new(&[w, h, c], out).expect("same size")
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub elapsed: f64,
}

impl StepLog {
    pub fn line(&self) -> String {
        format!("step={} loss={:.6e} lr={:e} elapsed={:.2}s", self.step, self.loss, self.lr, self.elapsed)
    }
}

pub struct Trainer<T: Real> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ModelParams<T>,
    pub adam: AdamState<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        train.validate(&model)?;
        let params = ModelParams::init(&model, train.seed)?;
        let adam = AdamState::new(params.tensors());
        Ok(Self {
            model,
            train,
            params,
            adam,
        })
    }

    /// Continues from a checkpoint; the training settings stored in it are used.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut kv = ck.train.clone();
        let train = TrainConfig::from_kv(&mut kv)?;
        kv.finish()?;
        train.validate(&ck.model)?;
        let params = ck.params.cast::<T>();
        let adam = match &ck.moments {
            Some((m, v)) => AdamState {
                step: ck.step,
                m: m.iter().map(Tensor::cast).collect(),
                v: v.iter().map(Tensor::cast).collect(),
            },
            None => AdamState {
                step: ck.step,
                ..AdamState::new(params.tensors())
            },
        };
        Ok(Self {
            model: ck.model.clone(),
            train,
            params,
            adam,
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.model, self.train.to_kv(), self.adam.step, &self.params)
            .with_moments(&self.adam.m, &self.adam.v)
    }

    /// Steps a run lasts: `steps`, or `epochs` passes over the dataset.
    pub fn total_steps(&self, images: usize) -> u64 {
        self.train
            .steps
            .unwrap_or_else(|| (self.train.epochs * images.div_ceil(self.train.batch_size)) as u64)
    }

    /// The (degraded, clean) pairs used at `step`. Depends only on the seed
    /// and the step, so resumed runs see the same batches.
    pub fn batch(&self, data: &Dataset<T>, step: u64) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        let step_seed = derive_seed(self.train.seed, step);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
        let n = self.train.crop;
        (0..self.train.batch_size)
            .map(|b| {
                let (_, img) = &data.images[rng.gen_range(0..data.len())];
                let y0 = rng.gen_range(0..=img.shape()[0] - n);
                let x0 = rng.gen_range(0..=img.shape()[1] - n);
                let mut clean = crop(img, (y0, x0), (n, n))?;
                let mut phase = (y0 % 2, x0 % 2);
                if self.train.augment {
                    if rng.gen::<bool>() {
                        clean = flip_h(&clean);
                        phase.1 = (phase.1 + n - 1) % 2;
                    }
                    if rng.gen::<bool>() {
                        clean = transpose_hw(&clean);
                        phase = (phase.1, phase.0);
                    }
                }
                let noisy = match self.train.degrade {
                    DegradeKind::Gaussian => {
                        add_gaussian_noise(&clean, self.train.sigma, derive_seed(step_seed, b as u64))
                    }
                    DegradeKind::Mosaic => mosaic_with_phase(&clean, phase)?,
                };
                Ok((noisy, clean))
            })
            .collect()
    }

    /// One optimisation step; returns the mean batch loss.
    pub fn train_step(&mut self, data: &Dataset<T>) -> Result<f64> {
        let batch = self.batch(data, self.adam.step)?;
        let results = batch
            .par_iter()
            .map(|(x, y)| model::loss_and_gradients(&self.params, &self.model, x, y, BranchMode::Free))
            .collect::<Result<Vec<_>>>()?;
        let inv = real::<T>(1.0 / batch.len() as f64);
        let mut grads: Vec<Tensor<T>> = self.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut loss = 0.0;
        for r in &results {
            loss += r.loss.to_f64().unwrap_or(f64::NAN);
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                acc.add_assign(g);
            }
        }
        for g in &mut grads {
            *g = g.scale(inv);
        }
        let names = self.params.names().to_vec();
        adam_step(self.params.tensors_mut(), &names, &grads, &mut self.adam, &self.train.adam())?;
        Ok(loss / batch.len() as f64)
    }

    /// Trains until `until` steps have been taken, calling `on_step` after each.
    pub fn run(
        &mut self,
        data: &Dataset<T>,
        until: u64,
        mut on_step: impl FnMut(&Self, &StepLog) -> Result<()>,
    ) -> Result<Vec<f64>> {
        let start = Instant::now();
        let mut losses = Vec::new();
        while self.adam.step < until {
            let loss = self.train_step(data)?;
            losses.push(loss);
            let log = StepLog {
                step: self.adam.step,
                loss,
                lr: self.train.lr,
                elapsed: start.elapsed().as_secs_f64(),
            };
            if self.train.log_every > 0 && log.step % self.train.log_every == 0 {
                info!("{}", log.line());
            }
            on_step(self, &log)?;
        }
        Ok(losses)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("magn_step{step:08}.ckpt"))
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub final_step: u64,
}

/// Trains on the PNGs in `data_dir`, writing checkpoints into `out_dir` at
/// the configured interval and after the last step.
pub fn train<T: Real>(trainer: &mut Trainer<T>, data_dir: &Path, out_dir: &Path) -> Result<TrainSummary> {
    let data = Dataset::<T>::load_dir(data_dir, trainer.model.in_channels, trainer.train.crop)?;
    std::fs::create_dir_all(out_dir)?;
    let total = trainer.total_steps(data.len());
    info!(
        "training {} parameters on {} images for {} steps",
        trainer.params.count(),
        data.len(),
        total
    );
    let every = trainer.train.checkpoint_every;
    let mut written = Vec::new();
    let losses = trainer.run(&data, total, |t, log| {
        if every > 0 && log.step % every == 0 && log.step < total {
            let p = checkpoint_path(out_dir, log.step);
            t.checkpoint().save(&p)?;
            written.push(p);
        }
        Ok(())
    })?;
    let p = checkpoint_path(out_dir, trainer.step());
    trainer.checkpoint().save(&p)?;
    written.push(p);
    Ok(TrainSummary {
        losses,
        checkpoints: written,
        final_step: trainer.step(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::<f64>::from_f64(&[2], &[1.0, -2.0]).unwrap()];
        let g = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &["w".into()], &g, &mut s, &TrainConfig::default().adam()).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::<f64>::scalar(0.5)];
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        adam_step(&mut p, &["w".into()], &[Tensor::scalar(-3.0)], &mut s, &cfg).unwrap();
        assert!((p[0].item() - 0.51).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_named() {
        let mut p = vec![Tensor::<f64>::scalar(0.5)];
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &["tail.w".into()], &[Tensor::scalar(f64::NAN)], &mut s, &TrainConfig::default().adam())
            .unwrap_err();
        assert!(err.to_string().contains("tail.w"));
        assert_eq!(s.step, 0);
        assert_eq!(p[0].item(), 0.5);
    }

    #[test]
    fn config_file_round_trip() {
        let (m, t) = parse_config("channels=16\nbatch_size=32\ngraph_blocks=1\nsteps=7\n").unwrap();
        assert_eq!(m.channels, 16);
        assert_eq!(t.batch_size, 32);
        assert_eq!(t.steps, Some(7));
        assert!(parse_config("bogus=1").is_err());
    }

    #[test]
    fn augment_helpers() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 1], |i| i as f64);
        assert_eq!(flip_h(&x).data(), &[2., 1., 0., 5., 4., 3.]);
        assert_eq!(transpose_hw(&x).data(), &[0., 3., 1., 4., 2., 5.]);
    }
}
