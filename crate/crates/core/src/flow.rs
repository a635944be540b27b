//! Rectified-flow training objective, logit-normal timestep sampling, the
//! fixed-step Euler sampler, and the end-to-end generation pipeline.
//!
//! The denoiser regresses the constant path velocity z1 - z0 along straight
//! noise-to-data paths; sampling integrates the learned field from t = 0 to
//! t = 1 with left-endpoint Euler steps. In latent mode the state is the
//! gamma-rescaled VAE latent; in raw mode it is the normalized trajectory
//! grid itself (the no-VAE ablation).

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, ImageRaster, TrajectoryGrid};
use crate::imgenc::{ImageEncoder, ImageEncoderConfig};
use crate::nn::{
    init_linear, init_time_embedding, patchify, rms_norm, sinusoidal_positions,
    sinusoidal_positions_2d, time_embedding_mlp, unpatchify, BlockKind, Stack, StackConfig,
    RMS_EPS,
};
use crate::tensor::{Graph, ParamStore, Session, Var};
use crate::vae::{LatentStats, VaeModel};

/// State space the flow operates in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMode {
    /// Denoise gamma-rescaled VAE latents.
    Latent,
    /// Denoise normalized trajectory coordinates directly.
    Raw,
}

/// Sampler and timestep-distribution settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// Euler steps from t=0 to t=1.
    pub steps: usize,
    /// Logit-normal location.
    pub logit_m: f64,
    /// Logit-normal scale.
    pub logit_s: f64,
    pub mode: FlowMode,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            logit_m: 0.0,
            logit_s: 1.0,
            mode: FlowMode::Latent,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Validation("sampler needs steps >= 1".into()));
        }
        if self.logit_s <= 0.0 {
            return Err(Error::Validation("logit-normal scale must be > 0".into()));
        }
        Ok(())
    }
}

/// Straight path z_t = (1 - t) z0 + t z1.
pub fn interpolate_path(z0: &ArrayD<f64>, z1: &ArrayD<f64>, t: f64) -> ArrayD<f64> {
    z0 * (1.0 - t) + z1 * t
}

/// Path velocity: z1 - z0, independent of t.
pub fn target_velocity(z0: &ArrayD<f64>, z1: &ArrayD<f64>) -> ArrayD<f64> {
    z1 - z0
}

/// Deterministic core of logit-normal sampling: sigmoid(m + s * n).
pub fn logit_normal(n: f64, m: f64, s: f64) -> f64 {
    1.0 / (1.0 + (-(m + s * n)).exp())
}

/// Draws t in (0, 1) from the logit-normal distribution.
pub fn sample_timestep(rng: &mut ChaCha8Rng, m: f64, s: f64) -> f64 {
    logit_normal(rng.sample(StandardNormal), m, s)
}

/// The denoiser network v(z_t, I, t).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub stack: StackConfig,
    /// Patch size applied to the state tokens (1 for latents).
    pub patch: usize,
    /// State channels: latent D in latent mode, 2 in raw mode.
    pub channels: usize,
    pub imgenc: ImageEncoderConfig,
}

impl DenoiserConfig {
    pub fn with_size(size: crate::nn::ModelSize, latent_channels: usize) -> Self {
        Self {
            stack: StackConfig::from_size(size, BlockKind::Denoising),
            patch: 1,
            channels: latent_channels,
            imgenc: ImageEncoderConfig::default(),
        }
    }

    /// Micro config for gradient checks.
    pub fn micro() -> Self {
        Self {
            stack: StackConfig {
                depth: 2,
                d_model: 8,
                n_heads: 2,
                mlp_ratio: 2,
                kind: BlockKind::Denoising,
            },
            patch: 1,
            channels: 2,
            imgenc: ImageEncoderConfig {
                kind: crate::imgenc::EncoderKind::PatchLinear,
                patch: 4,
                frozen: false,
            },
        }
    }
}

/// Raw-mode variant of a latent denoiser config: the patch size grows by the
/// VAE downsampling factor so both models process identical token counts.
pub fn raw_mode_config(
    latent: &DenoiserConfig,
    vae_patch: usize,
    geometry: &GridGeometry,
) -> Result<DenoiserConfig> {
    let patch = latent.patch * vae_patch;
    if geometry.grid_h() % patch != 0 || geometry.grid_w() % patch != 0 {
        return Err(Error::Validation(format!(
            "grid ({}, {}) not divisible by adjusted patch size {patch}",
            geometry.grid_h(),
            geometry.grid_w()
        )));
    }
    Ok(DenoiserConfig {
        patch,
        channels: 2,
        ..*latent
    })
}

#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    stack: Stack,
    imgenc: ImageEncoder,
}

impl DenoiserModel {
    pub fn init(store: &mut ParamStore, config: DenoiserConfig, rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(config.stack.kind, BlockKind::Denoising);
        let d = config.stack.d_model;
        let p = config.patch;
        init_linear(
            store,
            "den.patch",
            p * p * config.channels,
            d,
            rng,
            false,
        );
        init_time_embedding(store, "den.temb", d, rng);
        let stack = Stack::init(store, "den", config.stack, rng);
        store.insert("den.norm.scale", ArrayD::ones(IxDyn(&[d])));
        // zero-initialized velocity head
        init_linear(store, "den.head", d, p * p * config.channels, rng, true);
        let imgenc = ImageEncoder::init(store, "den.img", config.imgenc, d, rng);
        Self {
            config,
            stack,
            imgenc,
        }
    }

    pub fn bind(config: DenoiserConfig) -> Self {
        Self {
            config,
            stack: Stack::bind("den", config.stack),
            imgenc: ImageEncoder::bind("den.img", config.imgenc, config.stack.d_model),
        }
    }

    pub fn image_tokens(&self, s: &Session, images: &Var) -> Result<Var> {
        self.imgenc.encode(s, images)
    }

    /// `z_t: [B, T, gh, gw, C]`, `img_tokens: [B, Nf, D]`, one timestep per
    /// batch element. Output has the input shape.
    pub fn forward(&self, s: &Session, z_t: &Var, img_tokens: &Var, ts: &[f64]) -> Var {
        let p = self.config.patch;
        let sh = z_t.shape().to_vec();
        assert_eq!(sh[0], ts.len(), "one timestep per batch element");
        let tokens = patchify(z_t, p, &s.param("den.patch.w"), &s.param("den.patch.b"));
        let tsh = tokens.shape().to_vec();
        let (bsz, t_len, gh, gw, d) = (tsh[0], tsh[1], tsh[2], tsh[3], tsh[4]);
        let spatial = s.graph().leaf(
            sinusoidal_positions_2d(gh, gw, d)
                .into_dyn()
                .into_shape_with_order(IxDyn(&[1, 1, gh, gw, d]))
                .unwrap(),
        );
        let temporal = s.graph().leaf(
            sinusoidal_positions(t_len, d)
                .into_dyn()
                .into_shape_with_order(IxDyn(&[1, t_len, 1, 1, d]))
                .unwrap(),
        );
        let tokens = tokens
            .add(&spatial)
            .add(&temporal)
            .reshape(&[bsz, t_len, gh * gw, d]);
        let t_emb = time_embedding_mlp(s, "den.temb", ts, d);
        let out = self.stack.forward(s, &tokens, img_tokens, Some(&t_emb));
        let out = rms_norm(&out, Some(&s.param("den.norm.scale")), RMS_EPS);
        let out = out.reshape(&[bsz, t_len, gh, gw, d]);
        unpatchify(
            &out,
            p,
            self.config.channels,
            &s.param("den.head.w"),
            &s.param("den.head.b"),
        )
    }
}

/// Squared-error flow-matching loss given a prediction variable.
pub fn rf_loss_parts(s: &Session, pred: &Var, z0: &ArrayD<f64>, z1: &ArrayD<f64>) -> Var {
    let target = s.graph().leaf(target_velocity(z0, z1));
    pred.sub(&target).square().mean_all()
}

/// RF loss with explicit noise and timesteps (deterministic core).
/// `predict` receives the interpolated state leaf and per-sample timesteps.
pub fn rf_loss_with<F>(
    s: &Session,
    z1: &ArrayD<f64>,
    z0: &ArrayD<f64>,
    ts: &[f64],
    predict: F,
) -> Result<Var>
where
    F: FnOnce(&Var, &[f64]) -> Result<Var>,
{
    if z1.shape() != z0.shape() {
        return Err(Error::Shape("noise and data shapes differ".into()));
    }
    let bsz = z1.shape()[0];
    if bsz != ts.len() {
        return Err(Error::Shape("one timestep per batch element".into()));
    }
    // per-sample interpolation along the leading axis
    let mut z_t = ArrayD::zeros(z1.raw_dim());
    for (b, &t) in ts.iter().enumerate() {
        let mut slot = z_t.index_axis_mut(ndarray::Axis(0), b);
        let z0b = z0.index_axis(ndarray::Axis(0), b);
        let z1b = z1.index_axis(ndarray::Axis(0), b);
        slot.assign(&(&z0b * (1.0 - t) + &z1b * t));
    }
    let z_t = s.graph().leaf(z_t);
    let pred = predict(&z_t, ts)?;
    Ok(rf_loss_parts(s, &pred, z0, z1))
}

/// RF loss of a denoiser on a batch of targets: draws z0 ~ N(0, I) and
/// logit-normal timesteps per sample.
pub fn rf_loss(
    s: &Session,
    model: &DenoiserModel,
    img_tokens: &Var,
    z1: &ArrayD<f64>,
    config: &FlowConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let bsz = z1.shape()[0];
    let z0 = crate::rng::normal_tensor(rng, z1.shape());
    let ts: Vec<f64> = (0..bsz)
        .map(|_| sample_timestep(rng, config.logit_m, config.logit_s))
        .collect();
    rf_loss_with(s, z1, &z0, &ts, |z_t, ts| {
        Ok(model.forward(s, z_t, img_tokens, ts))
    })
}

/// A velocity field over batched states.
pub trait VelocityField {
    fn velocity(&self, z: &ArrayD<f64>, t: f64) -> Result<ArrayD<f64>>;
}

impl<F> VelocityField for F
where
    F: Fn(&ArrayD<f64>, f64) -> Result<ArrayD<f64>>,
{
    fn velocity(&self, z: &ArrayD<f64>, t: f64) -> Result<ArrayD<f64>> {
        self(z, t)
    }
}

/// Denoiser bound to a store and precomputed image tokens, usable as a
/// velocity field during sampling.
pub struct ConditionedDenoiser<'a> {
    pub model: &'a DenoiserModel,
    pub store: &'a ParamStore,
    /// `[B, Nf, D]` image tokens, shared across sampling steps.
    pub img_tokens: ArrayD<f64>,
}

impl<'a> ConditionedDenoiser<'a> {
    pub fn new(
        model: &'a DenoiserModel,
        store: &'a ParamStore,
        images: &ArrayD<f64>,
    ) -> Result<Self> {
        let s = Session::new(Graph::eval(), store);
        let tokens = model.image_tokens(&s, &s.graph().leaf(images.clone()))?;
        Ok(Self {
            model,
            store,
            img_tokens: tokens.value(),
        })
    }
}

impl VelocityField for ConditionedDenoiser<'_> {
    fn velocity(&self, z: &ArrayD<f64>, t: f64) -> Result<ArrayD<f64>> {
        let s = Session::new(Graph::eval(), self.store);
        let tokens = s.graph().leaf(self.img_tokens.clone());
        let ts = vec![t; z.shape()[0]];
        Ok(self
            .model
            .forward(&s, &s.graph().leaf(z.clone()), &tokens, &ts)
            .value())
    }
}

/// Left-endpoint Euler from t=0 to t=1: z_{k+1} = z_k + v(z_k, k/n) / n.
/// A non-finite state aborts with the offending step index.
pub fn euler_sample(
    field: &dyn VelocityField,
    z0: &ArrayD<f64>,
    steps: usize,
) -> Result<ArrayD<f64>> {
    if steps == 0 {
        return Err(Error::Validation("sampler needs steps >= 1".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z0.clone();
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = field.velocity(&z, t)?;
        z.scaled_add(dt, &v);
        if !z.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric(format!(
                "sampler diverged at step {k} (t = {t:.3})"
            )));
        }
    }
    Ok(z)
}

/// Everything needed to draw trajectory grids for one conditioning image.
pub struct GeneratePipeline<'a> {
    pub geometry: GridGeometry,
    pub flow: FlowConfig,
    pub denoiser: &'a DenoiserModel,
    pub den_store: &'a ParamStore,
    /// VAE decoder and latent statistics; required in latent mode.
    pub vae: Option<(&'a VaeModel, &'a ParamStore, &'a LatentStats)>,
}

impl GeneratePipeline<'_> {
    /// State-tensor shape for K samples (without the batch axis when K = 1).
    fn state_shape(&self, k: usize) -> Result<Vec<usize>> {
        let g = &self.geometry;
        g.validate()?;
        match self.flow.mode {
            FlowMode::Latent => {
                let (vae, _, _) = self.vae.ok_or_else(|| {
                    Error::Validation("latent mode needs a VAE checkpoint and latent stats".into())
                })?;
                let r = vae.config.patch;
                if g.grid_h() % r != 0 || g.grid_w() % r != 0 {
                    return Err(Error::Validation(format!(
                        "grid not divisible by VAE patch {r}"
                    )));
                }
                Ok(vec![
                    k,
                    g.frames,
                    g.grid_h() / r,
                    g.grid_w() / r,
                    vae.config.latent_channels,
                ])
            }
            FlowMode::Raw => Ok(vec![k, g.frames, g.grid_h(), g.grid_w(), 2]),
        }
    }

    /// Draws K trajectory grids for `image`. Deterministic in `rng`.
    pub fn generate(
        &self,
        image: &ImageRaster,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<TrajectoryGrid>> {
        if k == 0 {
            return Err(Error::Validation("need K >= 1 samples".into()));
        }
        self.flow.validate()?;
        if let Some((_, _, stats)) = &self.vae {
            stats.validate()?;
        }
        let g = &self.geometry;
        let shape = self.state_shape(k)?;
        let z0 = crate::rng::normal_tensor(rng, &shape);

        // batch the image K times for conditioning
        let (h, w) = (image.height(), image.width());
        let mut images = ArrayD::zeros(IxDyn(&[k, h, w, 3]));
        for b in 0..k {
            let mut slot = images.index_axis_mut(ndarray::Axis(0), b);
            slot.assign(image.pixels());
        }

        let field = ConditionedDenoiser::new(self.denoiser, self.den_store, &images)?;
        let z1 = euler_sample(&field, &z0, self.flow.steps)?;

        let normalized = match self.flow.mode {
            FlowMode::Latent => {
                let (vae, vae_store, stats) = self.vae.expect("checked in state_shape");
                // un-whiten, then decode with the VAE's own image tokens
                let mut z = z1;
                let d = stats.gamma.len();
                {
                    let rows = z.len() / d;
                    let mut flat = z.view_mut().into_shape_with_order((rows, d)).unwrap();
                    for mut row in flat.rows_mut() {
                        for (c, v) in row.iter_mut().enumerate() {
                            *v *= stats.gamma[c];
                        }
                    }
                }
                let s = Session::new(Graph::eval(), vae_store);
                let tokens = vae.image_tokens(&s, &s.graph().leaf(images))?;
                vae.decode(&s, &s.graph().leaf(z), &tokens).value()
            }
            FlowMode::Raw => z1,
        };

        // denormalize each sample to pixel space
        let mut out = Vec::with_capacity(k);
        for b in 0..k {
            let sample = normalized.index_axis(ndarray::Axis(0), b).to_owned();
            let sample4 = sample
                .into_dimensionality::<ndarray::Ix4>()
                .map_err(|e| Error::Shape(e.to_string()))?;
            let norm = crate::grid::NormalizedGrid::new(sample4, g.stride)?;
            out.push(norm.denormalize(g.width, g.height)?);
        }
        Ok(out)
    }
}
