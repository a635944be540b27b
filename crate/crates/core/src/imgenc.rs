//! Image tokenizers: trainable stand-ins for a frozen self-supervised
//! backbone, behind a pluggable interface.
//!
//! Two trainable kinds are provided (a per-patch linear embedding and a
//! small 3-stage stride-2 conv net), plus a precomputed-token path (`ITOK`
//! files) so an external backbone's features can be slotted in.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{apply_linear, init_linear};
use crate::tensor::{ParamStore, Session, Var};

pub const ITOK_MAGIC: &[u8; 4] = b"ITOK";

/// Conv channel plan for the `patch-conv-small` kind.
const CONV_CHANNELS: [usize; 3] = [16, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Non-overlapping p x p patches, one linear layer to the model dim.
    PatchLinear,
    /// Three stride-2 3x3 convolutions, then linear to the model dim.
    /// The effective patch size is fixed at 8.
    PatchConvSmall,
    /// Tokens are supplied externally (ITOK files); nothing trainable.
    Precomputed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEncoderConfig {
    pub kind: EncoderKind,
    /// Patch size p; for `patch-conv-small` this must be 8.
    pub patch: usize,
    /// When frozen, parameters feed the forward pass but receive no updates.
    pub frozen: bool,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::PatchConvSmall,
            patch: 8,
            frozen: false,
        }
    }
}

impl ImageEncoderConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.patch == 0 || height % self.patch != 0 || width % self.patch != 0 {
            return Err(Error::Validation(format!(
                "image {height}x{width} not divisible by patch size {}",
                self.patch
            )));
        }
        if self.kind == EncoderKind::PatchConvSmall && self.patch != 8 {
            return Err(Error::Validation(
                "patch-conv-small downsamples by 8; set patch = 8".into(),
            ));
        }
        Ok(())
    }

    pub fn token_count(&self, height: usize, width: usize) -> usize {
        (height / self.patch) * (width / self.patch)
    }
}

/// Trainable image tokenizer bound to a parameter prefix.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    prefix: String,
    pub config: ImageEncoderConfig,
    d_model: usize,
}

impl ImageEncoder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: ImageEncoderConfig,
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        match config.kind {
            EncoderKind::PatchLinear => {
                let fan_in = config.patch * config.patch * 3;
                init_linear(store, &format!("{prefix}.proj"), fan_in, d_model, rng, false);
            }
            EncoderKind::PatchConvSmall => {
                let mut c_in = 3;
                for (i, &c_out) in CONV_CHANNELS.iter().enumerate() {
                    init_linear(
                        store,
                        &format!("{prefix}.conv{i}"),
                        9 * c_in,
                        c_out,
                        rng,
                        false,
                    );
                    c_in = c_out;
                }
                init_linear(store, &format!("{prefix}.proj"), c_in, d_model, rng, false);
            }
            EncoderKind::Precomputed => {}
        }
        Self::bind(prefix, config, d_model)
    }

    pub fn bind(prefix: &str, config: ImageEncoderConfig, d_model: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            config,
            d_model,
        }
    }

    fn layer(&self, s: &Session, name: &str, x: &Var) -> Var {
        if self.config.frozen {
            let w = s.frozen_param(&format!("{}.{name}.w", self.prefix));
            let b = s.frozen_param(&format!("{}.{name}.b", self.prefix));
            x.linear(&w, &b)
        } else {
            apply_linear(s, &format!("{}.{name}", self.prefix), x)
        }
    }

    /// `images: [B, H, W, 3]` in [0, 1] -> tokens `[B, (H/p)(W/p), D]`,
    /// row-major over patches.
    pub fn encode(&self, s: &Session, images: &Var) -> Result<Var> {
        let sh = images.shape().to_vec();
        let (bsz, h, w) = (sh[0], sh[1], sh[2]);
        self.config.validate(h, w)?;
        let p = self.config.patch;
        match self.config.kind {
            EncoderKind::PatchLinear => {
                let x = images.reshape(&[bsz, h / p, p, w / p, p, 3]);
                let x = x.permute(&[0, 1, 3, 2, 4, 5]);
                let x = x.reshape(&[bsz, (h / p) * (w / p), p * p * 3]);
                Ok(self.layer(s, "proj", &x))
            }
            EncoderKind::PatchConvSmall => {
                let mut x = images.clone();
                let mut cur_h = h;
                let mut cur_w = w;
                for (i, &c_out) in CONV_CHANNELS.iter().enumerate() {
                    let cols = x.im2col(3, 2, 1); // [B, oh*ow, 9*c_in]
                    cur_h /= 2;
                    cur_w /= 2;
                    let y = self.layer(s, &format!("conv{i}"), &cols);
                    x = y.reshape(&[bsz, cur_h, cur_w, c_out]).gelu();
                }
                let x = x.reshape(&[bsz, cur_h * cur_w, CONV_CHANNELS[2]]);
                Ok(self.layer(s, "proj", &x))
            }
            EncoderKind::Precomputed => Err(Error::Validation(
                "precomputed encoder kind needs token files, not images".into(),
            )),
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }
}

/// Writes precomputed tokens: magic `ITOK`, version u32, n_tokens u32,
/// dim u32, then little-endian f32 row-major payload.
pub fn write_tokens(tokens: &Array2<f64>, path: &Path) -> Result<()> {
    let (n, d) = tokens.dim();
    let mut buf = Vec::with_capacity(16 + n * d * 4);
    buf.extend_from_slice(ITOK_MAGIC);
    buf.extend_from_slice(&crate::dataset::FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in tokens.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tokens(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::Truncated(format!(
            "{}: ITOK header needs 16 bytes",
            path.display()
        )));
    }
    if &bytes[0..4] != ITOK_MAGIC {
        return Err(Error::Format(format!("{}: bad ITOK magic", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != crate::dataset::FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: ITOK version {version}",
            path.display()
        )));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let need = 16 + n * d * 4;
    if bytes.len() < need {
        return Err(Error::Truncated(format!(
            "{}: ITOK payload has {} of {} bytes",
            path.display(),
            bytes.len() - 16,
            n * d * 4
        )));
    }
    if bytes.len() > need {
        return Err(Error::HeaderMismatch(format!(
            "{}: trailing bytes after ITOK payload",
            path.display()
        )));
    }
    let mut values = Vec::with_capacity(n * d);
    for i in 0..n * d {
        let off = 16 + i * 4;
        values.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    Ok(Array2::from_shape_vec((n, d), values).expect("shape from header"))
}

/// Stacks per-image token matrices into a `[B, n_tokens, D]` leaf.
pub fn precomputed_tokens_leaf(s: &Session, token_sets: &[Array2<f64>]) -> Result<Var> {
    if token_sets.is_empty() {
        return Err(Error::Validation("no token sets given".into()));
    }
    let (n, d) = token_sets[0].dim();
    let mut out = ArrayD::zeros(IxDyn(&[token_sets.len(), n, d]));
    for (b, t) in token_sets.iter().enumerate() {
        if t.dim() != (n, d) {
            return Err(Error::Shape("token sets disagree on shape".into()));
        }
        for i in 0..n {
            for j in 0..d {
                out[[b, i, j]] = t[[i, j]];
            }
        }
    }
    Ok(s.graph().leaf(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{entrywise_fd, max_rel_err, Graph};
    use ndarray::IxDyn;
    use rand::Rng;
    use rand::SeedableRng;
    use tempfile::tempdir;

    fn rand_images(bsz: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(&[bsz, h, w, 3]), || rng.gen_range(0.0..1.0))
    }

    #[test]
    fn token_count_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ImageEncoderConfig::default();
        let mut store = ParamStore::new();
        let enc = ImageEncoder::init(&mut store, "img", cfg, 16, &mut rng);
        let s = Session::new(Graph::eval(), &store);
        let images = s.graph().leaf(rand_images(2, 64, 64, &mut rng));
        let tokens = enc.encode(&s, &images).unwrap();
        assert_eq!(tokens.shape(), &[2, 64, 16]);
    }

    #[test]
    fn constant_image_gives_identical_patch_linear_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ImageEncoderConfig {
            kind: EncoderKind::PatchLinear,
            patch: 4,
            frozen: false,
        };
        let mut store = ParamStore::new();
        let enc = ImageEncoder::init(&mut store, "img", cfg, 8, &mut rng);
        let s = Session::new(Graph::eval(), &store);
        let images = s.graph().leaf(ArrayD::from_elem(IxDyn(&[1, 8, 8, 3]), 0.4));
        let tokens = enc.encode(&s, &images).unwrap().value();
        let first: Vec<f64> = (0..8).map(|d| tokens[[0, 0, d]]).collect();
        for t in 0..4 {
            for d in 0..8 {
                assert_eq!(tokens[[0, t, d]], first[d]);
            }
        }
    }

    #[test]
    fn patch_linear_is_patch_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ImageEncoderConfig {
            kind: EncoderKind::PatchLinear,
            patch: 4,
            frozen: false,
        };
        let mut store = ParamStore::new();
        let enc = ImageEncoder::init(&mut store, "img", cfg, 8, &mut rng);
        let img = rand_images(1, 8, 8, &mut rng); // 2x2 patches
        // swap the two top patches
        let mut swapped = img.clone();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    swapped[[0, y, x, c]] = img[[0, y, x + 4, c]];
                    swapped[[0, y, x + 4, c]] = img[[0, y, x, c]];
                }
            }
        }
        let s = Session::new(Graph::eval(), &store);
        let t1 = enc.encode(&s, &s.graph().leaf(img)).unwrap().value();
        let t2 = enc.encode(&s, &s.graph().leaf(swapped)).unwrap().value();
        for d in 0..8 {
            assert_eq!(t1[[0, 0, d]], t2[[0, 1, d]]);
            assert_eq!(t1[[0, 1, d]], t2[[0, 0, d]]);
            assert_eq!(t1[[0, 2, d]], t2[[0, 2, d]]);
            assert_eq!(t1[[0, 3, d]], t2[[0, 3, d]]);
        }
    }

    #[test]
    fn conv_encoder_gradients_match_fd_when_unfrozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = ImageEncoderConfig::default();
        let mut store = ParamStore::new();
        let enc = ImageEncoder::init(&mut store, "img", cfg, 4, &mut rng);
        store.randomize(-0.3, 0.3, &mut rng);
        let images = rand_images(1, 8, 8, &mut rng);
        let w = ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, 4]), || rng.gen_range(-1.0..1.0));

        let name = "img.conv1.w";
        let loss_with = |store: &ParamStore, grad: bool| -> (f64, Option<ArrayD<f64>>) {
            let s = Session::new(if grad { Graph::new() } else { Graph::eval() }, store);
            let imgs = s.graph().leaf(images.clone());
            let tokens = enc.encode(&s, &imgs).unwrap();
            let wv = s.graph().leaf(w.clone());
            let loss = tokens.mul(&wv).sum_all();
            if grad {
                let gs = s.grads(&loss);
                (loss.item(), Some(gs[name].clone()))
            } else {
                (loss.item(), None)
            }
        };
        let (_, analytic) = loss_with(&store, true);
        let x0 = store.get(name).clone();
        let mut eval = |xp: &ArrayD<f64>| {
            let mut st = store.clone();
            *st.get_mut(name) = xp.clone();
            loss_with(&st, false).0
        };
        let fd = entrywise_fd(&mut eval, &x0, 1e-5);
        assert!(max_rel_err(&analytic.unwrap(), &fd) < 1e-4);
    }

    #[test]
    fn frozen_encoder_receives_no_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ImageEncoderConfig {
            frozen: true,
            ..ImageEncoderConfig::default()
        };
        let mut store = ParamStore::new();
        let enc = ImageEncoder::init(&mut store, "img", cfg, 4, &mut rng);
        store.randomize(-0.3, 0.3, &mut rng);
        let s = Session::new(Graph::new(), &store);
        let imgs = s.graph().leaf(rand_images(1, 8, 8, &mut rng));
        let loss = enc.encode(&s, &imgs).unwrap().square().sum_all();
        let grads = s.grads(&loss);
        assert!(grads.is_empty(), "frozen encoder bound {} grads", grads.len());
    }

    #[test]
    fn itok_roundtrip_and_errors() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tokens = Array2::from_shape_simple_fn((5, 3), || {
            rng.gen_range(-2.0f32..2.0) as f64
        });
        let path = dir.path().join("img.itok");
        write_tokens(&tokens, &path).unwrap();
        let back = read_tokens(&path).unwrap();
        assert_eq!(tokens, back);

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'Z';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_tokens(&path), Err(Error::Format(_))));

        bytes[0] = b'I';
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_tokens(&path), Err(Error::Truncated(_))));
    }
}
