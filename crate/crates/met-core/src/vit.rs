//! The frozen pre-trained ViT backbone: patch embedding, pre-LN encoder
//! layers (multi-head attention + feed-forward, both with residuals), final
//! layer norm, and a single-head baseline forward used for cost calibration.
//!
//! At desk scale "pre-trained" weights are either loaded from a checkpoint or
//! produced by the seeded initializer; nothing here depends on real
//! pretraining.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MetError, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Parameter, Tensor};

pub const LN_EPS: f64 = 1e-6;
pub const MLP_RATIO: usize = 4;

/// Backbone geometry. `mlp_ratio` is fixed at 4.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ViTConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub num_classes: usize,
}

impl ViTConfig {
    /// The ViT-B/16 geometry at 224x224.
    pub fn base_16(num_classes: usize) -> Self {
        Self {
            image_height: 224,
            image_width: 224,
            patch: 16,
            dim: 768,
            layers: 12,
            heads: 12,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_height == 0 || self.image_width == 0 || self.patch == 0 {
            return Err(MetError::Config(
                "image and patch sizes must be positive".into(),
            ));
        }
        if !self.image_height.is_multiple_of(self.patch)
            || !self.image_width.is_multiple_of(self.patch)
        {
            return Err(MetError::Config(format!(
                "patch size {} does not divide image {}x{}",
                self.patch, self.image_height, self.image_width
            )));
        }
        if self.dim == 0 || self.layers == 0 || self.num_classes == 0 {
            return Err(MetError::Config(
                "dim, layers and classes must be positive".into(),
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(MetError::Config(format!(
                "heads {} must divide dim {}",
                self.heads, self.dim
            )));
        }
        Ok(())
    }

    /// Number of patch tokens `n = h*w / m^2`.
    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    /// Flattened patch length `3 m^2`.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        MLP_RATIO * self.dim
    }
}

/// One encoder layer's frozen weights. No biases: projections are plain
/// matrices and the two layer norms carry the only affine terms.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_gamma: Parameter,
    pub ln1_beta: Parameter,
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub watt: Parameter,
    pub ln2_gamma: Parameter,
    pub ln2_beta: Parameter,
    pub wup: Parameter,
    pub wdown: Parameter,
}

/// All frozen backbone parameters.
#[derive(Debug, Clone)]
pub struct BackboneWeights {
    pub config: ViTConfig,
    pub patch_proj: Parameter,
    pub pos_embed: Parameter,
    pub class_token: Parameter,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gamma: Parameter,
    pub final_ln_beta: Parameter,
}

impl BackboneWeights {
    /// Deterministic stand-in for pre-trained weights: Glorot-uniform
    /// projections, unit layer-norm scales, small position embeddings.
    pub fn seeded(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let n = config.num_patches();
        let pd = config.patch_dim();
        let fd = config.ffn_dim();

        fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Tensor::new(rows, cols, data).expect("positive extents")
        }

        let patch_proj = glorot(&mut rng, pd, d);
        let pos_data: Vec<f64> = (0..(n + 1) * d)
            .map(|_| rng.gen_range(-0.02..0.02))
            .collect();
        let cls_data: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.02..0.02)).collect();

        let mut layers = Vec::with_capacity(config.layers);
        for k in 1..=config.layers {
            let wq = glorot(&mut rng, d, d);
            let wk = glorot(&mut rng, d, d);
            let wv = glorot(&mut rng, d, d);
            let watt = glorot(&mut rng, d, d);
            let wup = glorot(&mut rng, d, fd);
            let wdown = glorot(&mut rng, fd, d);
            layers.push(LayerWeights {
                ln1_gamma: Parameter::frozen(
                    format!("backbone.layer.{k}.ln1.gamma"),
                    Tensor::row(vec![1.0; d]).unwrap(),
                ),
                ln1_beta: Parameter::frozen(
                    format!("backbone.layer.{k}.ln1.beta"),
                    Tensor::row(vec![0.0; d]).unwrap(),
                ),
                wq: Parameter::frozen(format!("backbone.layer.{k}.wq"), wq),
                wk: Parameter::frozen(format!("backbone.layer.{k}.wk"), wk),
                wv: Parameter::frozen(format!("backbone.layer.{k}.wv"), wv),
                watt: Parameter::frozen(format!("backbone.layer.{k}.watt"), watt),
                ln2_gamma: Parameter::frozen(
                    format!("backbone.layer.{k}.ln2.gamma"),
                    Tensor::row(vec![1.0; d]).unwrap(),
                ),
                ln2_beta: Parameter::frozen(
                    format!("backbone.layer.{k}.ln2.beta"),
                    Tensor::row(vec![0.0; d]).unwrap(),
                ),
                wup: Parameter::frozen(format!("backbone.layer.{k}.wup"), wup),
                wdown: Parameter::frozen(format!("backbone.layer.{k}.wdown"), wdown),
            });
        }

        Ok(Self {
            config: config.clone(),
            patch_proj: Parameter::frozen("backbone.patch_proj", patch_proj),
            pos_embed: Parameter::frozen(
                "backbone.pos_embed",
                Tensor::new(n + 1, d, pos_data).unwrap(),
            ),
            class_token: Parameter::frozen("backbone.class_token", Tensor::row(cls_data).unwrap()),
            layers,
            final_ln_gamma: Parameter::frozen(
                "backbone.final_ln.gamma",
                Tensor::row(vec![1.0; d]).unwrap(),
            ),
            final_ln_beta: Parameter::frozen(
                "backbone.final_ln.beta",
                Tensor::row(vec![0.0; d]).unwrap(),
            ),
        })
    }

    /// All-zero weights (layer norms included); mainly for contract tests.
    pub fn zeros(config: &ViTConfig) -> Result<Self> {
        let mut w = Self::seeded(config, 0)?;
        w.for_each_param_mut(&mut |p: &mut Parameter| {
            for v in p.tensor.data.iter_mut() {
                *v = 0.0;
            }
        });
        Ok(w)
    }

    /// All parameters in a stable order (embedding, per-layer weights,
    /// final norm).
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.patch_proj, &self.pos_embed, &self.class_token];
        for layer in &self.layers {
            out.extend([
                &layer.ln1_gamma,
                &layer.ln1_beta,
                &layer.wq,
                &layer.wk,
                &layer.wv,
                &layer.watt,
                &layer.ln2_gamma,
                &layer.ln2_beta,
                &layer.wup,
                &layer.wdown,
            ]);
        }
        out.push(&self.final_ln_gamma);
        out.push(&self.final_ln_beta);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![
            &mut self.patch_proj,
            &mut self.pos_embed,
            &mut self.class_token,
        ];
        for layer in &mut self.layers {
            out.extend([
                &mut layer.ln1_gamma,
                &mut layer.ln1_beta,
                &mut layer.wq,
                &mut layer.wk,
                &mut layer.wv,
                &mut layer.watt,
                &mut layer.ln2_gamma,
                &mut layer.ln2_beta,
                &mut layer.wup,
                &mut layer.wdown,
            ]);
        }
        out.push(&mut self.final_ln_gamma);
        out.push(&mut self.final_ln_beta);
        out
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(&Parameter)) {
        for p in self.params() {
            f(p);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for p in self.params_mut() {
            f(p);
        }
    }
}

/// A batch of images in `N x 3 x H x W` layout with integer labels.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// `count * 3 * height * width` values, sample-major.
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn new(
        count: usize,
        height: usize,
        width: usize,
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if count == 0 {
            return Err(MetError::Data("empty image batch".into()));
        }
        if images.len() != count * 3 * height * width {
            return Err(MetError::Data(format!(
                "image buffer has {} values, expected {}",
                images.len(),
                count * 3 * height * width
            )));
        }
        if labels.len() != count {
            return Err(MetError::Data(format!(
                "{} labels for {} samples",
                labels.len(),
                count
            )));
        }
        Ok(Self {
            count,
            height,
            width,
            images,
            labels,
        })
    }

    pub fn sample_pixels(&self, i: usize) -> &[f64] {
        let stride = 3 * self.height * self.width;
        &self.images[i * stride..(i + 1) * stride]
    }
}

/// Tape handles for every backbone weight, inserted once per forward pass.
pub struct BoundBackbone {
    pub patch_proj: TensorId,
    pub pos_embed: TensorId,
    pub class_token: TensorId,
    pub layers: Vec<BoundLayer>,
    pub final_ln_gamma: TensorId,
    pub final_ln_beta: TensorId,
}

pub struct BoundLayer {
    pub ln1_gamma: TensorId,
    pub ln1_beta: TensorId,
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub watt: TensorId,
    pub ln2_gamma: TensorId,
    pub ln2_beta: TensorId,
    pub wup: TensorId,
    pub wdown: TensorId,
}

impl BackboneWeights {
    pub fn bind(&self, tape: &mut Tape) -> BoundBackbone {
        let mut bind = |p: &Parameter| tape.leaf(p.tensor.clone());
        BoundBackbone {
            patch_proj: bind(&self.patch_proj),
            pos_embed: bind(&self.pos_embed),
            class_token: bind(&self.class_token),
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayer {
                    ln1_gamma: bind(&l.ln1_gamma),
                    ln1_beta: bind(&l.ln1_beta),
                    wq: bind(&l.wq),
                    wk: bind(&l.wk),
                    wv: bind(&l.wv),
                    watt: bind(&l.watt),
                    ln2_gamma: bind(&l.ln2_gamma),
                    ln2_beta: bind(&l.ln2_beta),
                    wup: bind(&l.wup),
                    wdown: bind(&l.wdown),
                })
                .collect(),
            final_ln_gamma: bind(&self.final_ln_gamma),
            final_ln_beta: bind(&self.final_ln_beta),
        }
    }
}

/// Extract raster-ordered flattened patches from one `3 x H x W` sample.
/// Within a patch the layout is channel, then row, then column.
pub fn extract_patches(pixels: &[f64], height: usize, width: usize, patch: usize) -> Vec<f64> {
    let py = height / patch;
    let px = width / patch;
    let mut out = Vec::with_capacity(py * px * 3 * patch * patch);
    for gy in 0..py {
        for gx in 0..px {
            for c in 0..3 {
                for dy in 0..patch {
                    let y = gy * patch + dy;
                    let base = c * height * width + y * width + gx * patch;
                    out.extend_from_slice(&pixels[base..base + patch]);
                }
            }
        }
    }
    out
}

/// Patch-embedding of one sample: `[c + pos_0; x_i P + pos_i]`, an
/// `(n+1) x d` token matrix.
pub fn patch_embed(
    tape: &mut Tape,
    pixels: &[f64],
    backbone: &BoundBackbone,
    config: &ViTConfig,
) -> Result<TensorId> {
    config.validate()?;
    let n = config.num_patches();
    let patches = extract_patches(
        pixels,
        config.image_height,
        config.image_width,
        config.patch,
    );
    let patches = tape.constant(Tensor::new(n, config.patch_dim(), patches)?);
    let projected = tape.matmul(patches, backbone.patch_proj)?;

    let pos_cls = tape.slice_rows(backbone.pos_embed, 0, 1)?;
    let pos_feat = tape.slice_rows(backbone.pos_embed, 1, n + 1)?;
    let cls = tape.add(backbone.class_token, pos_cls)?;
    let feat = tape.add(projected, pos_feat)?;
    tape.concat_rows(&[cls, feat])
}

/// Pre-LN multi-head attention with residual: `MHA(LN(x)) + x` over all
/// tokens. `mask`, when present, adds large negative scores so masked pairs
/// get exactly zero attention.
pub fn mha(
    tape: &mut Tape,
    tokens: TensorId,
    layer: &BoundLayer,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<TensorId> {
    let (t, d) = tape.shape(tokens);
    let dh = d / heads;
    let normed = tape.layer_norm(tokens, layer.ln1_gamma, layer.ln1_beta, LN_EPS)?;
    let q = tape.matmul(normed, layer.wq)?;
    let k = tape.matmul(normed, layer.wk)?;
    let v = tape.matmul(normed, layer.wv)?;

    let mask_term = mask.map(|m| {
        debug_assert_eq!(m.len(), t * t);
        let data = m
            .iter()
            .map(|&allowed| if allowed { 0.0 } else { -1e30 })
            .collect();
        tape.constant(Tensor::new(t, t, data).expect("mask shape"))
    });

    // concat_cols(head outputs) . W_att == sum_i head_i . W_att[rows of head i]
    let mut acc: Option<TensorId> = None;
    for i in 0..heads {
        let qi = tape.slice_cols(q, i * dh, (i + 1) * dh)?;
        let ki = tape.slice_cols(k, i * dh, (i + 1) * dh)?;
        let vi = tape.slice_cols(v, i * dh, (i + 1) * dh)?;
        let kt = tape.transpose(ki);
        let scores = tape.matmul(qi, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(mt) = mask_term {
            scores = tape.add(scores, mt)?;
        }
        let att = tape.softmax_rows(scores);
        let headed = tape.matmul(att, vi)?;
        let w_block = tape.slice_rows(layer.watt, i * dh, (i + 1) * dh)?;
        let proj = tape.matmul(headed, w_block)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, proj)?,
            None => proj,
        });
    }
    tape.add(acc.expect("at least one head"), tokens)
}

/// Pre-LN feed-forward with residual: `GELU(LN(x) W_up) W_down + x`.
pub fn ffn(tape: &mut Tape, tokens: TensorId, layer: &BoundLayer) -> Result<TensorId> {
    let normed = tape.layer_norm(tokens, layer.ln2_gamma, layer.ln2_beta, LN_EPS)?;
    let up = tape.matmul(normed, layer.wup)?;
    let act = tape.gelu(up);
    let down = tape.matmul(act, layer.wdown)?;
    tape.add(down, tokens)
}

/// Adapter-free forward of the whole batch: per-sample encoder stack, final
/// LN on the class token, then one linear head. Returns `N x num_classes`
/// logits.
pub fn vit_forward_baseline(
    tape: &mut Tape,
    batch: &ImageBatch,
    backbone: &BoundBackbone,
    config: &ViTConfig,
    head_weight: TensorId,
    head_bias: TensorId,
) -> Result<TensorId> {
    let mut class_rows = Vec::with_capacity(batch.count);
    for s in 0..batch.count {
        let mut tokens = patch_embed(tape, batch.sample_pixels(s), backbone, config)?;
        for layer in &backbone.layers {
            tokens = mha(tape, tokens, layer, config.heads, None)?;
            tokens = ffn(tape, tokens, layer)?;
        }
        class_rows.push(tape.slice_rows(tokens, 0, 1)?);
    }
    let stacked = tape.concat_rows(&class_rows)?;
    let normed = tape.layer_norm(
        stacked,
        backbone.final_ln_gamma,
        backbone.final_ln_beta,
        LN_EPS,
    )?;
    let logits = tape.matmul(normed, head_weight)?;
    tape.add_row(logits, head_bias)
}
