//! Training loops for the VAE and the denoiser, plus probe metrics.
//!
//! Batches are drawn with replacement from a per-step ChaCha stream keyed by
//! (seed, optimizer step), so training is deterministic and resuming from a
//! checkpoint realigns the randomness exactly.

mod adamw;
mod checkpoint;

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::{Checkpoint, CheckpointKind, CKPT_MAGIC, CKPT_VERSION};

use ndarray::{Array3, ArrayD, Axis, IxDyn};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::flow::{rf_loss, DenoiserConfig, DenoiserModel, FlowConfig, FlowMode, GeneratePipeline};
use crate::grid::{GridGeometry, ImageRaster, ObjectMaskGrid, TrajectoryGrid};
use crate::metrics::{best_of_k, kappa, lrtl, Pairing};
use crate::rng::stream;
use crate::tensor::{Graph, ParamStore, Session};
use crate::vae::{
    beta_vae_loss, LatentStats, LatentStatsAccumulator, VaeConfig, VaeModel,
};

/// One scene held in memory for training and evaluation.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub image: Array3<f64>,
    /// Normalized-coordinate futures, `[T, Gh, Gw, 2]`.
    pub futures_norm: Vec<ArrayD<f64>>,
    /// Pixel-space futures (evaluation).
    pub futures: Vec<TrajectoryGrid>,
    pub masks: ObjectMaskGrid,
}

/// In-memory dataset slice with a training-futures policy.
#[derive(Debug, Clone)]
pub struct SceneSource {
    pub geometry: GridGeometry,
    pub scenes: Vec<LoadedScene>,
    /// Futures per scene used for training; 0 means all (the paper's
    /// one-future-per-condition regime is `1`).
    pub train_futures: usize,
}

impl SceneSource {
    pub fn from_dataset(ds: &Dataset, train_futures: usize) -> Result<Self> {
        let m = ds.manifest();
        let geometry = GridGeometry {
            height: m.height,
            width: m.width,
            stride: m.stride,
            frames: m.frames,
        };
        let mut scenes = Vec::with_capacity(ds.len());
        for i in 0..ds.len() {
            let record = ds.scene(i)?;
            scenes.push(load_scene(&record, &geometry)?);
        }
        Ok(Self {
            geometry,
            scenes,
            train_futures,
        })
    }

    pub fn from_records(records: &[crate::grid::SceneRecord], geometry: GridGeometry, train_futures: usize) -> Result<Self> {
        let scenes = records
            .iter()
            .map(|r| load_scene(r, &geometry))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            geometry,
            scenes,
            train_futures,
        })
    }

    fn futures_used(&self, scene: &LoadedScene) -> usize {
        if self.train_futures == 0 {
            scene.futures_norm.len()
        } else {
            self.train_futures.min(scene.futures_norm.len())
        }
    }

    /// All (scene, future) pairs available for training.
    pub fn training_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, scene) in self.scenes.iter().enumerate() {
            for k in 0..self.futures_used(scene) {
                out.push((i, k));
            }
        }
        out
    }

    /// Splits off the last `n` scenes as a validation source.
    pub fn split_validation(&mut self, n: usize) -> Option<SceneSource> {
        if n == 0 || n >= self.scenes.len() {
            return None;
        }
        let val = self.scenes.split_off(self.scenes.len() - n);
        Some(SceneSource {
            geometry: self.geometry,
            scenes: val,
            train_futures: self.train_futures,
        })
    }
}

fn load_scene(record: &crate::grid::SceneRecord, geometry: &GridGeometry) -> Result<LoadedScene> {
    record.validate()?;
    let futures_norm = record
        .futures
        .iter()
        .map(|f| {
            Ok(f.normalize(geometry.width, geometry.height)?
                .data()
                .clone()
                .into_dyn())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedScene {
        image: record.image.pixels().clone(),
        futures_norm,
        futures: record.futures.clone(),
        masks: record.masks.clone(),
    })
}

/// One training batch: normalized grids and their conditioning images.
pub struct BatchData {
    pub x_norm: ArrayD<f64>,
    pub images: ArrayD<f64>,
}

fn stack_batch(source: &SceneSource, picks: &[(usize, usize)]) -> BatchData {
    let g = &source.geometry;
    let b = picks.len();
    let mut x_norm = ArrayD::zeros(IxDyn(&[b, g.frames, g.grid_h(), g.grid_w(), 2]));
    let mut images = ArrayD::zeros(IxDyn(&[b, g.height, g.width, 3]));
    for (slot, &(i, k)) in picks.iter().enumerate() {
        x_norm
            .index_axis_mut(Axis(0), slot)
            .assign(&source.scenes[i].futures_norm[k]);
        images
            .index_axis_mut(Axis(0), slot)
            .assign(&source.scenes[i].image);
    }
    BatchData { x_norm, images }
}

fn pick_batch(pairs: &[(usize, usize)], rng: &mut rand_chacha::ChaCha8Rng, size: usize) -> Vec<(usize, usize)> {
    use rand::Rng;
    (0..size).map(|_| pairs[rng.gen_range(0..pairs.len())]).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct VaeLogRow {
    pub step: u64,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

pub struct VaeTrainer {
    pub model: VaeModel,
    pub store: ParamStore,
    pub opt: AdamW,
    pub seed: u64,
}

impl VaeTrainer {
    pub fn new(config: VaeConfig, opt_config: AdamWConfig, seed: u64) -> Self {
        let mut rng = stream(seed, 0xAE);
        let mut store = ParamStore::new();
        let model = VaeModel::init(&mut store, config, &mut rng);
        Self {
            model,
            store,
            opt: AdamW::new(opt_config),
            seed,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint, seed: u64) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Vae {
            return Err(Error::Validation("not a VAE checkpoint".into()));
        }
        let config: VaeConfig = ckpt.config_as()?;
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| Error::Validation("checkpoint lacks optimizer state".into()))?;
        Ok(Self {
            model: VaeModel::bind(config),
            store: ckpt.params,
            opt: optimizer,
            seed,
        })
    }

    pub fn to_checkpoint(&self, stats: Option<LatentStats>) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Vae,
            config: serde_json::to_value(self.model.config).expect("config serializes"),
            params: self.store.clone(),
            optimizer: Some(self.opt.clone()),
            latent_stats: stats,
        }
    }

    /// One optimization step over a random batch.
    pub fn train_step(&mut self, source: &SceneSource, batch_size: usize) -> Result<VaeLogRow> {
        let pairs = source.training_pairs();
        if pairs.is_empty() {
            return Err(Error::Validation("no training samples".into()));
        }
        let mut rng = stream(self.seed, self.opt.step + 1);
        let batch = stack_batch(source, &pick_batch(&pairs, &mut rng, batch_size));
        let g = &source.geometry;
        let r = self.model.config.patch;
        let noise_shape = [
            batch_size,
            g.frames,
            g.grid_h() / r,
            g.grid_w() / r,
            self.model.config.latent_channels,
        ];
        let noise = crate::rng::normal_tensor(&mut rng, &noise_shape);

        let s = Session::new(Graph::new(), &self.store);
        let x = s.graph().leaf(batch.x_norm);
        let images = s.graph().leaf(batch.images);
        let (total, recon, kl) = beta_vae_loss(&s, &self.model, &x, &images, &noise)?;
        let (total_v, recon_v, kl_v) = (total.item(), recon.item(), kl.item());
        if !total_v.is_finite() {
            return Err(Error::Numeric(format!(
                "VAE loss is not finite at step {} (recon {recon_v}, kl {kl_v})",
                self.opt.step + 1
            )));
        }
        let mut grads = s.grads(&total);
        let grad_norm = self.opt.clip(&mut grads);
        self.opt.apply(&mut self.store, &grads);
        Ok(VaeLogRow {
            step: self.opt.step,
            total: total_v,
            recon: recon_v,
            kl: kl_v,
            grad_norm,
        })
    }
}

/// Mean pixel reconstruction error of the posterior-mean path on one scene
/// future (noiseless encode -> decode -> denormalize).
pub fn vae_reconstruction_px(
    store: &ParamStore,
    model: &VaeModel,
    scene: &LoadedScene,
    geometry: &GridGeometry,
    future: usize,
) -> Result<f64> {
    let s = Session::new(Graph::eval(), store);
    let mut x = ArrayD::zeros(IxDyn(&[
        1,
        geometry.frames,
        geometry.grid_h(),
        geometry.grid_w(),
        2,
    ]));
    x.index_axis_mut(Axis(0), 0).assign(&scene.futures_norm[future]);
    let mut images = ArrayD::zeros(IxDyn(&[1, geometry.height, geometry.width, 3]));
    images.index_axis_mut(Axis(0), 0).assign(&scene.image);
    let xv = s.graph().leaf(x);
    let imv = s.graph().leaf(images);
    let tokens = model.image_tokens(&s, &imv)?;
    let post = model.encode(&s, &xv, &tokens);
    let recon = model.decode(&s, &post.mean, &tokens).value();

    let target = &scene.futures[future];
    let (w, h) = (geometry.width as f64, geometry.height as f64);
    let mut acc = 0.0;
    let mut count = 0usize;
    for t in 0..geometry.frames {
        for i in 0..geometry.grid_h() {
            for j in 0..geometry.grid_w() {
                let px = (recon[[0, t, i, j, 0]] + 1.0) * w / 2.0;
                let py = (recon[[0, t, i, j, 1]] + 1.0) * h / 2.0;
                let dx = px - target.data()[[t, i, j, 0]];
                let dy = py - target.data()[[t, i, j, 1]];
                acc += (dx * dx + dy * dy).sqrt();
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// Mean absolute error (L1, normalized coordinates) of the posterior-mean
/// path over a validation source; the paper's VAE model-selection signal.
pub fn vae_validation_l1(
    store: &ParamStore,
    model: &VaeModel,
    source: &SceneSource,
) -> Result<f64> {
    let g = &source.geometry;
    let mut acc = 0.0;
    let mut count = 0usize;
    for scene in &source.scenes {
        let s = Session::new(Graph::eval(), store);
        let mut x = ArrayD::zeros(IxDyn(&[1, g.frames, g.grid_h(), g.grid_w(), 2]));
        x.index_axis_mut(Axis(0), 0).assign(&scene.futures_norm[0]);
        let mut images = ArrayD::zeros(IxDyn(&[1, g.height, g.width, 3]));
        images.index_axis_mut(Axis(0), 0).assign(&scene.image);
        let xv = s.graph().leaf(x.clone());
        let imv = s.graph().leaf(images);
        let tokens = model.image_tokens(&s, &imv)?;
        let post = model.encode(&s, &xv, &tokens);
        let recon = model.decode(&s, &post.mean, &tokens).value();
        acc += recon.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += recon.len();
    }
    Ok(acc / count as f64)
}

/// Per-channel latent statistics over the training futures.
pub fn compute_latent_stats(
    store: &ParamStore,
    model: &VaeModel,
    source: &SceneSource,
) -> Result<LatentStats> {
    let g = &source.geometry;
    let mut acc = LatentStatsAccumulator::new();
    for scene in &source.scenes {
        for k in 0..source.futures_used(scene) {
            let s = Session::new(Graph::eval(), store);
            let mut x = ArrayD::zeros(IxDyn(&[1, g.frames, g.grid_h(), g.grid_w(), 2]));
            x.index_axis_mut(Axis(0), 0).assign(&scene.futures_norm[k]);
            let mut images = ArrayD::zeros(IxDyn(&[1, g.height, g.width, 3]));
            images.index_axis_mut(Axis(0), 0).assign(&scene.image);
            let xv = s.graph().leaf(x);
            let imv = s.graph().leaf(images);
            let tokens = model.image_tokens(&s, &imv)?;
            let post = model.encode(&s, &xv, &tokens);
            acc.push(&post.mean.value());
        }
    }
    acc.finish()
}

/// Encodes training futures to gamma-rescaled latent states (latent mode)
/// or passes through normalized grids (raw mode).
pub fn flow_states(
    source: &SceneSource,
    mode: FlowMode,
    vae: Option<(&ParamStore, &VaeModel, &LatentStats)>,
) -> Result<Vec<Vec<ArrayD<f64>>>> {
    let g = &source.geometry;
    match mode {
        FlowMode::Raw => Ok(source
            .scenes
            .iter()
            .map(|scene| {
                (0..source.futures_used(scene))
                    .map(|k| scene.futures_norm[k].clone())
                    .collect()
            })
            .collect()),
        FlowMode::Latent => {
            let (store, model, stats) =
                vae.ok_or_else(|| Error::Validation("latent mode needs a trained VAE".into()))?;
            stats.validate()?;
            let mut out = Vec::with_capacity(source.scenes.len());
            for scene in &source.scenes {
                let mut per_scene = Vec::new();
                for k in 0..source.futures_used(scene) {
                    let s = Session::new(Graph::eval(), store);
                    let mut x = ArrayD::zeros(IxDyn(&[1, g.frames, g.grid_h(), g.grid_w(), 2]));
                    x.index_axis_mut(Axis(0), 0).assign(&scene.futures_norm[k]);
                    let mut images = ArrayD::zeros(IxDyn(&[1, g.height, g.width, 3]));
                    images.index_axis_mut(Axis(0), 0).assign(&scene.image);
                    let xv = s.graph().leaf(x);
                    let imv = s.graph().leaf(images);
                    let tokens = model.image_tokens(&s, &imv)?;
                    let post = model.encode(&s, &xv, &tokens);
                    let mut z = post.mean.value();
                    let z5 = z.view_mut().into_dimensionality::<ndarray::Ix5>().unwrap();
                    let mut z4 = z5.index_axis_move(Axis(0), 0);
                    for mut row in z4.rows_mut() {
                        for (c, v) in row.iter_mut().enumerate() {
                            *v /= stats.gamma[c];
                        }
                    }
                    per_scene.push(z4.to_owned().into_dyn());
                }
                out.push(per_scene);
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenLogRow {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

pub struct DenoiserTrainer {
    pub model: DenoiserModel,
    pub store: ParamStore,
    pub opt: AdamW,
    pub flow: FlowConfig,
    pub seed: u64,
}

impl DenoiserTrainer {
    pub fn new(config: DenoiserConfig, flow: FlowConfig, opt_config: AdamWConfig, seed: u64) -> Self {
        let mut rng = stream(seed, 0xDE);
        let mut store = ParamStore::new();
        let model = DenoiserModel::init(&mut store, config, &mut rng);
        Self {
            model,
            store,
            opt: AdamW::new(opt_config),
            flow,
            seed,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint, flow: FlowConfig, seed: u64) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Denoiser {
            return Err(Error::Validation("not a denoiser checkpoint".into()));
        }
        let config: DenoiserConfig = ckpt.config_as()?;
        let optimizer = ckpt
            .optimizer
            .ok_or_else(|| Error::Validation("checkpoint lacks optimizer state".into()))?;
        Ok(Self {
            model: DenoiserModel::bind(config),
            store: ckpt.params,
            opt: optimizer,
            flow,
            seed,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Denoiser,
            config: serde_json::to_value(self.model.config).expect("config serializes"),
            params: self.store.clone(),
            optimizer: Some(self.opt.clone()),
            latent_stats: None,
        }
    }

    /// One optimization step. `states[i][k]` is the flow target for scene i,
    /// future k; images come from the scene source.
    pub fn train_step(
        &mut self,
        source: &SceneSource,
        states: &[Vec<ArrayD<f64>>],
        batch_size: usize,
    ) -> Result<DenLogRow> {
        let pairs: Vec<(usize, usize)> = states
            .iter()
            .enumerate()
            .flat_map(|(i, per_scene)| (0..per_scene.len()).map(move |k| (i, k)))
            .collect();
        if pairs.is_empty() {
            return Err(Error::Validation("no flow-matching samples".into()));
        }
        let mut rng = stream(self.seed, self.opt.step + 1);
        let picks = pick_batch(&pairs, &mut rng, batch_size);
        let state_shape = states[picks[0].0][picks[0].1].shape().to_vec();
        let g = &source.geometry;
        let mut z1 = ArrayD::zeros(IxDyn(
            &[&[batch_size], state_shape.as_slice()].concat(),
        ));
        let mut images = ArrayD::zeros(IxDyn(&[batch_size, g.height, g.width, 3]));
        for (slot, &(i, k)) in picks.iter().enumerate() {
            z1.index_axis_mut(Axis(0), slot).assign(&states[i][k]);
            images
                .index_axis_mut(Axis(0), slot)
                .assign(&source.scenes[i].image);
        }

        let s = Session::new(Graph::new(), &self.store);
        let imv = s.graph().leaf(images);
        let tokens = self.model.image_tokens(&s, &imv)?;
        let loss = rf_loss(&s, &self.model, &tokens, &z1, &self.flow, &mut rng)?;
        let loss_v = loss.item();
        if !loss_v.is_finite() {
            return Err(Error::Numeric(format!(
                "RF loss is not finite at step {}",
                self.opt.step + 1
            )));
        }
        let mut grads = s.grads(&loss);
        let grad_norm = self.opt.clip(&mut grads);
        self.opt.apply(&mut self.store, &grads);
        Ok(DenLogRow {
            step: self.opt.step,
            loss: loss_v,
            grad_norm,
        })
    }
}

/// Probe metrics during denoiser training: sample K futures per probe scene
/// and report mean scene sample variance and mean LRTL.
#[derive(Debug, Clone, Copy)]
pub struct ProbeRow {
    pub step: u64,
    pub kappa: f64,
    pub lrtl: f64,
}

pub fn probe_metrics(
    pipeline: &GeneratePipeline,
    probe: &[LoadedScene],
    k: usize,
    seed: u64,
    step: u64,
) -> Result<ProbeRow> {
    if probe.is_empty() {
        return Err(Error::Validation("empty probe set".into()));
    }
    let mut kappa_acc = 0.0;
    let mut lrtl_acc = 0.0;
    let mut lrtl_count = 0usize;
    for (idx, scene) in probe.iter().enumerate() {
        let image = ImageRaster::new(scene.image.clone())?;
        let mut rng = stream(seed ^ step, idx as u64);
        let samples = pipeline.generate(&image, k, &mut rng)?;
        kappa_acc += kappa(&samples)?;
        if !scene.masks.object_ids().is_empty() {
            for sample in &samples {
                lrtl_acc += lrtl(sample, &scene.masks)?;
                lrtl_count += 1;
            }
        }
    }
    Ok(ProbeRow {
        step,
        kappa: kappa_acc / probe.len() as f64,
        lrtl: if lrtl_count > 0 {
            lrtl_acc / lrtl_count as f64
        } else {
            f64::NAN
        },
    })
}

/// Validation Best-of-K of the current denoiser over a validation source;
/// the paper's denoiser model-selection signal.
pub fn denoiser_validation_bok(
    pipeline: &GeneratePipeline,
    val: &SceneSource,
    k: usize,
    seed: u64,
) -> Result<f64> {
    let mut acc = 0.0;
    for (idx, scene) in val.scenes.iter().enumerate() {
        let image = ImageRaster::new(scene.image.clone())?;
        let mut rng = stream(seed, idx as u64);
        let samples = pipeline.generate(&image, k, &mut rng)?;
        acc += best_of_k(&samples, &scene.futures, Pairing::Coverage)?;
    }
    Ok(acc / val.scenes.len() as f64)
}
