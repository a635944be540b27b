//! Shared transformer building blocks.
//!
//! The trajectory encoder, decoder, and denoiser all stack the same block:
//! QK-normalized self-attention over one axis (spatial or temporal), gated
//! cross-attention to image tokens, and a pointwise MLP. Every sub-layer is
//! wrapped in non-affine RMSNorm plus shift/scale/gate modulation; denoising
//! blocks regress the modulation from the timestep embedding, autoencoding
//! blocks hold it as learnable constants. All gates start at zero, so a
//! freshly initialized stack is exactly the identity on trajectory tokens.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{xavier_uniform, ParamStore, Session, Var};

pub const RMS_EPS: f64 = 1e-6;

/// Sub-layer axis for factorized attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnAxis {
    /// Attend over grid cells at a fixed frame (time folded into batch).
    Spatial,
    /// Attend over frames at a fixed grid cell (space folded into batch).
    Temporal,
}

/// Modulation source for a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BlockKind {
    /// Shift/scale/gate regressed from the timestep embedding.
    Denoising,
    /// Shift/scale/gate are learnable constants.
    Autoencoding,
}

/// Width/depth preset: (blocks, hidden size, heads).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    /// Desk-scale test configuration.
    Tiny,
    S,
    B,
    L,
}

impl ModelSize {
    pub fn depth(self) -> usize {
        match self {
            ModelSize::Tiny => 4,
            ModelSize::S => 8,
            ModelSize::B => 12,
            ModelSize::L => 16,
        }
    }

    pub fn hidden(self) -> usize {
        match self {
            ModelSize::Tiny => 64,
            ModelSize::S => 192,
            ModelSize::B => 384,
            ModelSize::L => 768,
        }
    }

    pub fn heads(self) -> usize {
        match self {
            ModelSize::Tiny => 2,
            ModelSize::S => 3,
            ModelSize::B => 6,
            ModelSize::L => 12,
        }
    }
}

/// Configuration of one spatio-temporal stack.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StackConfig {
    pub depth: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub kind: BlockKind,
}

impl StackConfig {
    pub fn from_size(size: ModelSize, kind: BlockKind) -> Self {
        Self {
            depth: size.depth(),
            d_model: size.hidden(),
            n_heads: size.heads(),
            mlp_ratio: 4,
            kind,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.depth == 0 || self.depth % 2 != 0 {
            return Err(crate::Error::Validation(format!(
                "stack depth must be a positive even number, got {}",
                self.depth
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(crate::Error::Validation(format!(
                "hidden size {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

// ---- functional pieces ----

/// x / sqrt(mean(x^2) + eps) over the last axis, optionally scaled.
pub fn rms_norm(x: &Var, scale: Option<&Var>, eps: f64) -> Var {
    let axis = x.ndim() - 1;
    let rms = x.square().mean_axis_keep(axis).add_scalar(eps).sqrt();
    let y = x.div(&rms);
    match scale {
        Some(s) => y.mul(s),
        None => y,
    }
}

/// shift + (1 + scale) * x, broadcasting shift/scale over leading axes.
pub fn modulate(x: &Var, shift: &Var, scale: &Var) -> Var {
    x.mul(&scale.add_scalar(1.0)).add(shift)
}

/// Sinusoidal embedding of a scalar timestep: concat(sin(t*w), cos(t*w))
/// with dim/2 frequencies log-spaced from 1 down to 1e-4.
pub fn sinusoidal_time_embedding(t: f64, dim: usize) -> crate::Result<Array1<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(crate::Error::Validation(format!(
            "time embedding dim must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let exponent = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let omega = (10_000.0f64).powf(-exponent);
        out[i] = (t * omega).sin();
        out[half + i] = (t * omega).cos();
    }
    Ok(out)
}

/// Fixed sinusoidal position table for `n` positions.
pub fn sinusoidal_positions(n: usize, dim: usize) -> Array2<f64> {
    let half = (dim / 2).max(1);
    let mut out = Array2::zeros((n, dim));
    for pos in 0..n {
        for i in 0..half {
            let exponent = if half > 1 {
                i as f64 / (half - 1) as f64
            } else {
                0.0
            };
            let omega = (10_000.0f64).powf(-exponent);
            out[[pos, i]] = (pos as f64 * omega).sin();
            if half + i < dim {
                out[[pos, half + i]] = (pos as f64 * omega).cos();
            }
        }
    }
    out
}

/// Fixed 2D position table `[gh*gw, dim]`: first half row ladder, second
/// half column ladder.
pub fn sinusoidal_positions_2d(gh: usize, gw: usize, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let rows = sinusoidal_positions(gh, half);
    let cols = sinusoidal_positions(gw, dim - half);
    let mut out = Array2::zeros((gh * gw, dim));
    for i in 0..gh {
        for j in 0..gw {
            let idx = i * gw + j;
            for d in 0..half {
                out[[idx, d]] = rows[[i, d]];
            }
            for d in 0..dim - half {
                out[[idx, half + d]] = cols[[j, d]];
            }
        }
    }
    out
}

/// Per-axis learnable Fourier features: concat(coords, sin(2 pi c_a B_a),
/// cos(2 pi c_a B_a)) for each axis a, giving `2 + 4 * n_bands` channels.
/// `coords` is `[..., 2]` in normalized units, `bands` is `[2, n_bands]`.
pub fn fourier_features(coords: &Var, bands: &Var) -> Var {
    let last = coords.ndim() - 1;
    let n_bands = bands.shape()[1];
    let cx = coords.slice_axis(last, 0, 1); // [..., 1]
    let cy = coords.slice_axis(last, 1, 1);
    let bx = bands.slice_axis(0, 0, 1); // [1, n_bands]
    let by = bands.slice_axis(0, 1, 1);
    let two_pi = std::f64::consts::TAU;
    let ax = cx.mul(&bx).mul_scalar(two_pi); // [..., n_bands]
    let ay = cy.mul(&by).mul_scalar(two_pi);
    debug_assert_eq!(*ax.shape().last().unwrap(), n_bands);
    Var::concat(
        &[coords.clone(), ax.sin(), ay.sin(), ax.cos(), ay.cos()],
        last,
    )
}

/// Log-spaced initial frequency matrix for [`fourier_features`]:
/// both axes get `n_bands` frequencies from `lo` to `hi` cycles per unit.
pub fn fourier_bands_init(n_bands: usize, lo: f64, hi: f64) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(IxDyn(&[2, n_bands]));
    for j in 0..n_bands {
        let f = if n_bands > 1 {
            lo * (hi / lo).powf(j as f64 / (n_bands - 1) as f64)
        } else {
            lo
        };
        out[[0, j]] = f;
        out[[1, j]] = f;
    }
    out
}

/// Non-overlapping r x r linear patch embedding per frame:
/// `[B, T, Gh, Gw, C] -> [B, T, Gh/r, Gw/r, D]`. Time is untouched.
pub fn patchify(x: &Var, r: usize, w: &Var, b: &Var) -> Var {
    let sh = x.shape().to_vec();
    let (bsz, t, gh, gw, c) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    assert!(
        gh % r == 0 && gw % r == 0,
        "grid ({gh}, {gw}) not divisible by patch size {r}"
    );
    let x = x.reshape(&[bsz, t, gh / r, r, gw / r, r, c]);
    let x = x.permute(&[0, 1, 2, 4, 3, 5, 6]);
    let x = x.reshape(&[bsz, t, gh / r, gw / r, r * r * c]);
    x.linear(w, b)
}

/// Inverse-shaped projection: `[B, T, gh, gw, D] -> [B, T, gh*r, gw*r, c]`.
pub fn unpatchify(tokens: &Var, r: usize, c_out: usize, w: &Var, b: &Var) -> Var {
    let sh = tokens.shape().to_vec();
    let (bsz, t, gh, gw) = (sh[0], sh[1], sh[2], sh[3]);
    let x = tokens.linear(w, b); // [B, T, gh, gw, r*r*c]
    let x = x.reshape(&[bsz, t, gh, gw, r, r, c_out]);
    let x = x.permute(&[0, 1, 2, 4, 3, 5, 6]);
    x.reshape(&[bsz, t, gh * r, gw * r, c_out])
}

/// Multi-head attention with RMS-normalized queries and keys.
/// `q: [B, Sq, D]`, `k, v: [B, Sk, D]`; heads are concatenated and projected
/// by `out_w`/`out_b`.
pub fn qk_norm_attention(
    q: &Var,
    k: &Var,
    v: &Var,
    n_heads: usize,
    out_w: &Var,
    out_b: &Var,
) -> Var {
    let (bsz, sq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let sk = k.shape()[1];
    assert_eq!(d % n_heads, 0, "model dim not divisible by heads");
    assert_eq!(k.shape()[2], d);
    assert_eq!(v.shape()[0], bsz);
    assert_eq!(v.shape()[1], sk);
    let dh = d / n_heads;
    let fold = |x: &Var, s: usize| {
        x.reshape(&[bsz, s, n_heads, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[bsz * n_heads, s, dh])
    };
    let qh = rms_norm(&fold(q, sq), None, RMS_EPS);
    let kh = rms_norm(&fold(k, sk), None, RMS_EPS);
    let vh = fold(v, sk);
    let scores = qh
        .bmm(&kh.permute(&[0, 2, 1]))
        .mul_scalar(1.0 / (dh as f64).sqrt());
    let attn = scores.softmax_last();
    let out = attn.bmm(&vh); // [B*h, Sq, dh]
    let merged = out
        .reshape(&[bsz, n_heads, sq, dh])
        .permute(&[0, 2, 1, 3])
        .reshape(&[bsz, sq, d]);
    merged.linear(out_w, out_b)
}

fn linear_params(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
    zero: bool,
) {
    let w = if zero {
        ArrayD::zeros(IxDyn(&[fan_in, fan_out]))
    } else {
        xavier_uniform(&[fan_in, fan_out], fan_in, fan_out, rng)
    };
    store.insert(format!("{name}.w"), w);
    store.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[fan_out])));
}

fn linear_fwd(s: &Session, name: &str, x: &Var) -> Var {
    x.linear(&s.param(&format!("{name}.w")), &s.param(&format!("{name}.b")))
}

/// Cross-attention over image tokens, without the residual:
/// trajectory tokens are queries, image tokens provide keys and values.
/// `q_tokens: [B, S, D]`, `f: [B, Nf, D]`.
pub fn cross_attention(s: &Session, prefix: &str, q_tokens: &Var, f: &Var, n_heads: usize) -> Var {
    let d = *q_tokens.shape().last().unwrap();
    let q = linear_fwd(s, &format!("{prefix}.q"), q_tokens);
    let kv = linear_fwd(s, &format!("{prefix}.kv"), f);
    let k = kv.slice_axis(2, 0, d);
    let v = kv.slice_axis(2, d, d);
    qk_norm_attention(
        &q,
        &k,
        &v,
        n_heads,
        &s.param(&format!("{prefix}.out.w")),
        &s.param(&format!("{prefix}.out.b")),
    )
}

/// Initializes the projections used by [`cross_attention`].
pub fn init_cross_attention(
    store: &mut ParamStore,
    prefix: &str,
    d_model: usize,
    rng: &mut ChaCha8Rng,
) {
    linear_params(store, &format!("{prefix}.q"), d_model, d_model, rng, false);
    linear_params(store, &format!("{prefix}.kv"), d_model, 2 * d_model, rng, false);
    linear_params(store, &format!("{prefix}.out"), d_model, d_model, rng, false);
}

/// The gated residual form: `h + gate * CrossAttn(q=h, kv=f)`.
/// With a zero gate this is exactly the identity on `h`.
pub fn gated_cross_attention(
    s: &Session,
    prefix: &str,
    h: &Var,
    f: &Var,
    gate: &Var,
    n_heads: usize,
) -> Var {
    h.add(&gate.mul(&cross_attention(s, prefix, h, f, n_heads)))
}

/// One factorized block.
#[derive(Debug, Clone)]
pub struct Block {
    prefix: String,
    axis: AttnAxis,
    kind: BlockKind,
    d_model: usize,
    n_heads: usize,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        axis: AttnAxis,
        kind: BlockKind,
        d_model: usize,
        n_heads: usize,
        mlp_ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        linear_params(store, &format!("{prefix}.attn.qkv"), d_model, 3 * d_model, rng, false);
        linear_params(store, &format!("{prefix}.attn.out"), d_model, d_model, rng, false);
        init_cross_attention(store, &format!("{prefix}.cross"), d_model, rng);
        linear_params(store, &format!("{prefix}.mlp.fc1"), d_model, mlp_ratio * d_model, rng, false);
        linear_params(store, &format!("{prefix}.mlp.fc2"), mlp_ratio * d_model, d_model, rng, false);
        match kind {
            BlockKind::Denoising => {
                linear_params(store, &format!("{prefix}.mod.fc1"), d_model, d_model, rng, false);
                // zero final layer: all shifts, scales, and gates start at 0
                linear_params(store, &format!("{prefix}.mod.fc2"), d_model, 9 * d_model, rng, true);
            }
            BlockKind::Autoencoding => {
                store.insert(
                    format!("{prefix}.mod.const"),
                    ArrayD::zeros(IxDyn(&[9 * d_model])),
                );
            }
        }
        let _ = mlp_ratio;
        Self::bind(prefix, axis, kind, d_model, n_heads)
    }

    /// Rebuilds the handle for an already-initialized store.
    pub fn bind(
        prefix: &str,
        axis: AttnAxis,
        kind: BlockKind,
        d_model: usize,
        n_heads: usize,
    ) -> Self {
        Self {
            prefix: prefix.to_string(),
            axis,
            kind,
            d_model,
            n_heads,
        }
    }

    pub fn axis(&self) -> AttnAxis {
        self.axis
    }

    /// Nine modulation tensors, each broadcastable over `[B, T, S, D]`:
    /// (shift, scale, gate) for self-attention, cross-attention, and MLP.
    fn modulation(&self, s: &Session, t_emb: Option<&Var>) -> Vec<Var> {
        let d = self.d_model;
        let flat = match self.kind {
            BlockKind::Denoising => {
                let t = t_emb.expect("denoising block needs a timestep embedding");
                let bsz = t.shape()[0];
                let hidden = linear_fwd(s, &format!("{}.mod.fc1", self.prefix), t).silu();
                linear_fwd(s, &format!("{}.mod.fc2", self.prefix), &hidden)
                    .reshape(&[bsz, 1, 1, 9 * d])
            }
            BlockKind::Autoencoding => s
                .param(&format!("{}.mod.const", self.prefix))
                .reshape(&[1, 1, 1, 9 * d]),
        };
        (0..9).map(|i| flat.slice_axis(3, i * d, d)).collect()
    }

    /// `h: [B, T, S, D]`, `f: [B, Nf, D]`. `t_emb` must be present exactly
    /// for denoising blocks.
    pub fn forward(&self, s: &Session, h: &Var, f: &Var, t_emb: Option<&Var>) -> Var {
        let (bsz, t_len, s_len, d) = (h.shape()[0], h.shape()[1], h.shape()[2], h.shape()[3]);
        assert_eq!(d, self.d_model);
        let m = self.modulation(s, t_emb);

        // self-attention over the block's axis
        let normed = modulate(&rms_norm(h, None, RMS_EPS), &m[0], &m[1]);
        let folded = match self.axis {
            AttnAxis::Spatial => normed.reshape(&[bsz * t_len, s_len, d]),
            AttnAxis::Temporal => normed
                .permute(&[0, 2, 1, 3])
                .reshape(&[bsz * s_len, t_len, d]),
        };
        let qkv = linear_fwd(s, &format!("{}.attn.qkv", self.prefix), &folded);
        let q = qkv.slice_axis(2, 0, d);
        let k = qkv.slice_axis(2, d, d);
        let v = qkv.slice_axis(2, 2 * d, d);
        let attn = qk_norm_attention(
            &q,
            &k,
            &v,
            self.n_heads,
            &s.param(&format!("{}.attn.out.w", self.prefix)),
            &s.param(&format!("{}.attn.out.b", self.prefix)),
        );
        let attn = match self.axis {
            AttnAxis::Spatial => attn.reshape(&[bsz, t_len, s_len, d]),
            AttnAxis::Temporal => attn
                .reshape(&[bsz, s_len, t_len, d])
                .permute(&[0, 2, 1, 3]),
        };
        let h = h.add(&m[2].mul(&attn));

        // gated cross-attention to image tokens
        let q_in = modulate(&rms_norm(&h, None, RMS_EPS), &m[3], &m[4])
            .reshape(&[bsz, t_len * s_len, d]);
        let ca = cross_attention(s, &format!("{}.cross", self.prefix), &q_in, f, self.n_heads)
            .reshape(&[bsz, t_len, s_len, d]);
        let h = h.add(&m[5].mul(&ca));

        // pointwise MLP
        let xm = modulate(&rms_norm(&h, None, RMS_EPS), &m[6], &m[7]);
        let y = linear_fwd(
            s,
            &format!("{}.mlp.fc2", self.prefix),
            &linear_fwd(s, &format!("{}.mlp.fc1", self.prefix), &xm).gelu(),
        );
        h.add(&m[8].mul(&y))
    }
}

/// Alternating spatial/temporal stack with cross-attention in every block.
#[derive(Debug, Clone)]
pub struct Stack {
    pub config: StackConfig,
    blocks: Vec<Block>,
}

fn block_axis(i: usize) -> AttnAxis {
    if i % 2 == 0 {
        AttnAxis::Spatial
    } else {
        AttnAxis::Temporal
    }
}

impl Stack {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: StackConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        config.validate().expect("stack config");
        let blocks = (0..config.depth)
            .map(|i| {
                Block::init(
                    store,
                    &format!("{prefix}.blk{i}"),
                    block_axis(i),
                    config.kind,
                    config.d_model,
                    config.n_heads,
                    config.mlp_ratio,
                    rng,
                )
            })
            .collect();
        Self { config, blocks }
    }

    pub fn bind(prefix: &str, config: StackConfig) -> Self {
        let blocks = (0..config.depth)
            .map(|i| {
                Block::bind(
                    &format!("{prefix}.blk{i}"),
                    block_axis(i),
                    config.kind,
                    config.d_model,
                    config.n_heads,
                )
            })
            .collect();
        Self { config, blocks }
    }

    /// `tokens: [B, T, S, D]`, `f: [B, Nf, D]`; `t_emb: [B, D]` iff denoising.
    pub fn forward(&self, s: &Session, tokens: &Var, f: &Var, t_emb: Option<&Var>) -> Var {
        assert_eq!(
            t_emb.is_some(),
            self.config.kind == BlockKind::Denoising,
            "timestep embedding is required exactly for denoising stacks"
        );
        let mut h = tokens.clone();
        for block in &self.blocks {
            h = block.forward(s, &h, f, t_emb);
        }
        h
    }
}

/// Timestep-embedding MLP applied to the sinusoidal base. `ts` in [0, 1],
/// one entry per batch element; output `[B, D]`.
pub fn time_embedding_mlp(s: &Session, prefix: &str, ts: &[f64], d_model: usize) -> Var {
    let mut base = Array2::zeros((ts.len(), d_model));
    for (i, &t) in ts.iter().enumerate() {
        base.row_mut(i)
            .assign(&sinusoidal_time_embedding(t, d_model).expect("even d_model"));
    }
    let base = s.graph().leaf(base.into_dyn());
    let hidden = linear_fwd(s, &format!("{prefix}.fc1"), &base).silu();
    linear_fwd(s, &format!("{prefix}.fc2"), &hidden)
}

/// Parameters for [`time_embedding_mlp`].
pub fn init_time_embedding(
    store: &mut ParamStore,
    prefix: &str,
    d_model: usize,
    rng: &mut ChaCha8Rng,
) {
    linear_params(store, &format!("{prefix}.fc1"), d_model, d_model, rng, false);
    linear_params(store, &format!("{prefix}.fc2"), d_model, d_model, rng, false);
}

/// Shared init for a plain linear layer under `name.w` / `name.b`.
pub fn init_linear(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
    zero: bool,
) {
    linear_params(store, name, fan_in, fan_out, rng, zero);
}

/// Forward through a layer initialized with [`init_linear`].
pub fn apply_linear(s: &Session, name: &str, x: &Var) -> Var {
    linear_fwd(s, name, x)
}
