//! Feature fusion: patch embedding of backbone maps, chunking of handcrafted
//! features, a pre-norm Transformer encoder, and the classification head.
//!
//! The data-driven stream Z0 is one token per feature-map channel (class
//! token prepended, learned position embedding added). The handcrafted stream
//! Z1 is the feature vector cut into hidden-size chunks, zero-padded at the
//! tail, with no class token and no position embedding. The encoder fuses the
//! concatenated sequence; classification mean-pools every hidden state, then
//! applies tanh, a linear layer, and softmax.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, output_shape, Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::{Scalar, Tape, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "h-only")]
    HandcraftedOnly,
    #[serde(rename = "d-only")]
    DataDrivenOnly,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Variant::Full),
            "h-only" | "h_only" => Ok(Variant::HandcraftedOnly),
            "d-only" | "d_only" => Ok(Variant::DataDrivenOnly),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected full, h-only, or d-only)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::HandcraftedOnly => "h-only",
            Variant::DataDrivenOnly => "d-only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Token width D inside the encoder.
    pub hidden_size: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Encoder iterations; one is sufficient for fusion.
    pub depth: usize,
    pub classes: usize,
    /// Handcrafted feature vector length F; 0 disables the stream.
    pub handcrafted_len: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_size: 128,
            heads: 16,
            mlp_dim: 512,
            depth: 1,
            classes: 2,
            handcrafted_len: 1007,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.heads == 0 || !self.hidden_size.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of head count {}",
                self.hidden_size, self.heads
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.depth == 0 || self.mlp_dim == 0 {
            return Err(Error::Config("depth and mlp_dim must be >= 1".into()));
        }
        if self.variant == Variant::HandcraftedOnly && self.handcrafted_len == 0 {
            return Err(Error::Config(
                "h-only variant needs a nonzero handcrafted length".into(),
            ));
        }
        Ok(())
    }

    /// Handcrafted token count x = ceil(F / D).
    pub fn handcrafted_tokens(&self) -> usize {
        self.handcrafted_len.div_ceil(self.hidden_size)
    }

    /// Fused token count for the full variant given N data-driven channels.
    pub fn full_token_count(&self, n_channels: usize) -> usize {
        1 + n_channels + self.handcrafted_tokens()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenTag {
    Class,
    DataDriven,
    Handcrafted,
}

/// A batch of embedded tokens `[B, T, D]` plus the origin of each position.
pub struct TokenSequence {
    pub id: TensorId,
    pub tags: Vec<TokenTag>,
}

/// The full hybrid model: backbone plus fusion/head parameters.
pub struct HrlModel<T: Scalar> {
    pub backbone: Backbone<T>,
    pub fusion: ParamStore<T>,
    pub cfg: ModelConfig,
    /// Spatial extents the model was built for (fixes the patch width).
    pub input_extents: [usize; 3],
    /// Flattened voxels per feature-map channel (l*w*h).
    pub patch_dim: usize,
}

/// Build a deterministic model for volumes of the given extents.
pub fn build_model<T: Scalar>(
    backbone_cfg: &BackboneConfig,
    cfg: &ModelConfig,
    input_extents: [usize; 3],
    seed: u64,
) -> Result<HrlModel<T>> {
    cfg.validate()?;
    let backbone = build_backbone::<T>(backbone_cfg, seed)?;
    let (n, l, w, h) = output_shape(
        backbone_cfg,
        &[backbone_cfg.in_channels, input_extents[0], input_extents[1], input_extents[2]],
    )?;
    let patch_dim = l * w * h;
    let d = cfg.hidden_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let mut fusion = ParamStore::new();

    fusion.insert(
        "proj.weight",
        Init::kaiming(&mut rng, d * patch_dim, patch_dim),
        vec![d, patch_dim],
        true,
    );
    fusion.insert("proj.bias", Init::zeros(d), vec![d], true);
    fusion.insert("x_class", Init::embedding(&mut rng, d), vec![d], true);
    fusion.insert(
        "pos_embed",
        Init::embedding(&mut rng, (n + 1) * d),
        vec![n + 1, d],
        true,
    );
    for layer in 0..cfg.depth {
        let p = format!("enc{layer}");
        let lin = |name: String, out_f: usize, in_f: usize, rng: &mut ChaCha8Rng, fusion: &mut ParamStore<T>| {
            fusion.insert(&name, Init::kaiming(rng, out_f * in_f, in_f), vec![out_f, in_f], true);
            fusion.insert(&format!("{name}_bias"), Init::zeros(out_f), vec![out_f], true);
        };
        fusion.insert(&format!("{p}.ln1.gamma"), Init::ones(d), vec![d], true);
        fusion.insert(&format!("{p}.ln1.beta"), Init::zeros(d), vec![d], true);
        lin(format!("{p}.attn.wq"), d, d, &mut rng, &mut fusion);
        lin(format!("{p}.attn.wk"), d, d, &mut rng, &mut fusion);
        lin(format!("{p}.attn.wv"), d, d, &mut rng, &mut fusion);
        lin(format!("{p}.attn.wo"), d, d, &mut rng, &mut fusion);
        fusion.insert(&format!("{p}.ln2.gamma"), Init::ones(d), vec![d], true);
        fusion.insert(&format!("{p}.ln2.beta"), Init::zeros(d), vec![d], true);
        lin(format!("{p}.mlp.w1"), cfg.mlp_dim, d, &mut rng, &mut fusion);
        lin(format!("{p}.mlp.w2"), d, cfg.mlp_dim, &mut rng, &mut fusion);
    }
    fusion.insert(
        "head.weight",
        Init::kaiming(&mut rng, cfg.classes * d, d),
        vec![cfg.classes, d],
        true,
    );
    fusion.insert("head.bias", Init::zeros(cfg.classes), vec![cfg.classes], true);
    // Per-slot standardization of handcrafted features, fit on the training
    // split; identity until then.
    if cfg.handcrafted_len > 0 {
        fusion.insert(
            "feat_norm.mean",
            Init::zeros(cfg.handcrafted_len),
            vec![cfg.handcrafted_len],
            false,
        );
        fusion.insert(
            "feat_norm.std",
            Init::ones(cfg.handcrafted_len),
            vec![cfg.handcrafted_len],
            false,
        );
    }

    Ok(HrlModel {
        backbone,
        fusion,
        cfg: cfg.clone(),
        input_extents,
        patch_dim,
    })
}

/// Flatten each feature-map channel into a patch vector, project to hidden
/// size, prepend the class token, and add the position embedding row-wise.
pub fn embed_feature_maps<T: Scalar>(
    tape: &mut Tape<T>,
    maps: TensorId,
    proj_w: TensorId,
    proj_b: TensorId,
    x_class: TensorId,
    pos_embed: TensorId,
) -> Result<TokenSequence> {
    let shape = tape.shape(maps).to_vec();
    if shape.len() != 5 {
        return Err(Error::Config(format!(
            "feature maps must be [B, N, l, w, h], got {:?}",
            shape
        )));
    }
    let (b, n) = (shape[0], shape[1]);
    let patch = shape[2] * shape[3] * shape[4];
    let d = tape.shape(proj_w)[0];
    let flat = tape.reshape(maps, &[b, n, patch])?;
    let projected = tape.linear(flat, proj_w, Some(proj_b))?;
    let class_row = tape.reshape(x_class, &[1, d])?;
    let class_tok = tape.broadcast_batch(class_row, b)?; // [B, 1, D]
    let tokens = tape.concat(1, &[class_tok, projected])?;
    let with_pos = tape.add_broadcast(tokens, pos_embed)?;
    let mut tags = vec![TokenTag::Class];
    tags.extend(std::iter::repeat_n(TokenTag::DataDriven, n));
    Ok(TokenSequence {
        id: with_pos,
        tags,
    })
}

/// Cut a feature vector into hidden-size chunks, zero-padding the tail.
/// Returns the chunk data and the token count.
pub fn chunk_handcrafted<T: Scalar>(features: &[T], d: usize) -> (Vec<T>, usize) {
    if features.is_empty() {
        return (Vec::new(), 0);
    }
    let tokens = features.len().div_ceil(d);
    let mut data = vec![T::zero(); tokens * d];
    data[..features.len()].copy_from_slice(features);
    (data, tokens)
}

/// Insert the handcrafted stream Z1 for a batch: `x = ceil(F/D)` tokens per
/// subject, no class token, no position embedding. Empty input disables the
/// stream.
pub fn embed_handcrafted<T: Scalar>(
    tape: &mut Tape<T>,
    features: &[Vec<T>],
    d: usize,
) -> Result<Option<TokenSequence>> {
    if features.is_empty() || features[0].is_empty() {
        return Ok(None);
    }
    let f_len = features[0].len();
    if features.iter().any(|f| f.len() != f_len) {
        return Err(Error::Config("ragged handcrafted feature batch".into()));
    }
    let tokens = f_len.div_ceil(d);
    let mut data = Vec::with_capacity(features.len() * tokens * d);
    for f in features {
        let (chunked, _) = chunk_handcrafted(f, d);
        data.extend(chunked);
    }
    let id = tape.leaf(data, &[features.len(), tokens, d], false)?;
    Ok(Some(TokenSequence {
        id,
        tags: vec![TokenTag::Handcrafted; tokens],
    }))
}

/// Bound tensor ids for one encoder layer.
pub struct BoundLayer {
    pub ln1: (TensorId, TensorId),
    pub wq: (TensorId, TensorId),
    pub wk: (TensorId, TensorId),
    pub wv: (TensorId, TensorId),
    pub wo: (TensorId, TensorId),
    pub ln2: (TensorId, TensorId),
    pub mlp1: (TensorId, TensorId),
    pub mlp2: (TensorId, TensorId),
}

/// Multi-head self-attention over `[B, T, D]`. Returns the projected output
/// and the `[B, H, T, T]` attention weights (row-stochastic).
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    layer: &BoundLayer,
    heads: usize,
) -> Result<(TensorId, TensorId)> {
    let shape = tape.shape(x).to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let split = |tape: &mut Tape<T>, y: TensorId| -> Result<TensorId> {
        let y = tape.reshape(y, &[b, t, heads, dh])?;
        tape.permute(y, &[0, 2, 1, 3]) // [B, H, T, dh]
    };
    let q = tape.linear(x, layer.wq.0, Some(layer.wq.1))?;
    let k = tape.linear(x, layer.wk.0, Some(layer.wk.1))?;
    let v = tape.linear(x, layer.wv.0, Some(layer.wv.1))?;
    let q = split(tape, q)?;
    let k = split(tape, k)?;
    let v = split(tape, v)?;
    let kt = tape.permute(k, &[0, 1, 3, 2])?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
    let attn = tape.softmax_last_axis(scaled);
    let ctx = tape.matmul(attn, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, t, d])?;
    let out = tape.linear(ctx, layer.wo.0, Some(layer.wo.1))?;
    Ok((out, attn))
}

/// Pre-norm encoder: `h = Z + MSA(LN(Z)); out = h + MLP(LN(h))`, repeated
/// `layers.len()` times. Output shape equals input shape. Also returns the
/// attention weights of every layer.
pub fn encoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    z: TensorId,
    layers: &[BoundLayer],
    heads: usize,
) -> Result<(TensorId, Vec<TensorId>)> {
    let mut cur = z;
    let mut attns = Vec::with_capacity(layers.len());
    for layer in layers {
        let normed = tape.layernorm(cur, layer.ln1.0, layer.ln1.1)?;
        let (msa, attn) = multi_head_attention(tape, normed, layer, heads)?;
        attns.push(attn);
        let h = tape.add(cur, msa)?;
        let normed2 = tape.layernorm(h, layer.ln2.0, layer.ln2.1)?;
        let m = tape.linear(normed2, layer.mlp1.0, Some(layer.mlp1.1))?;
        let m = tape.gelu(m);
        let m = tape.linear(m, layer.mlp2.0, Some(layer.mlp2.1))?;
        cur = tape.add(h, m)?;
    }
    Ok((cur, attns))
}

/// Mean-pool every hidden state, tanh, linear. Returns (logits, probabilities).
pub fn classify<T: Scalar>(
    tape: &mut Tape<T>,
    hidden: TensorId,
    head_w: TensorId,
    head_b: TensorId,
) -> Result<(TensorId, TensorId)> {
    let pooled = tape.mean_axis(hidden, 1)?;
    let squashed = tape.tanh(pooled);
    let logits = tape.linear(squashed, head_w, Some(head_b))?;
    let probs = tape.softmax_last_axis(logits);
    Ok((logits, probs))
}

/// Everything a forward pass produces that callers may want to inspect.
pub struct ForwardOutput {
    pub logits: TensorId,
    pub probs: TensorId,
    pub attention: Vec<TensorId>,
    pub tokens: TokenSequence,
    pub feature_maps: Option<TensorId>,
}

impl<T: Scalar> HrlModel<T> {
    pub fn n_channels(&self) -> usize {
        self.backbone.cfg.out_channels()
    }

    fn bind_layers(&self, tape: &mut Tape<T>, grads: bool) -> Vec<BoundLayer> {
        (0..self.cfg.depth)
            .map(|l| {
                let p = format!("enc{l}");
                let b = |tape: &mut Tape<T>, name: String| -> (TensorId, TensorId) {
                    (
                        self.fusion.bind(tape, &name, grads),
                        self.fusion.bind(tape, &format!("{name}_bias"), grads),
                    )
                };
                BoundLayer {
                    ln1: (
                        self.fusion.bind(tape, &format!("{p}.ln1.gamma"), grads),
                        self.fusion.bind(tape, &format!("{p}.ln1.beta"), grads),
                    ),
                    wq: b(tape, format!("{p}.attn.wq")),
                    wk: b(tape, format!("{p}.attn.wk")),
                    wv: b(tape, format!("{p}.attn.wv")),
                    wo: b(tape, format!("{p}.attn.wo")),
                    ln2: (
                        self.fusion.bind(tape, &format!("{p}.ln2.gamma"), grads),
                        self.fusion.bind(tape, &format!("{p}.ln2.beta"), grads),
                    ),
                    mlp1: b(tape, format!("{p}.mlp.w1")),
                    mlp2: b(tape, format!("{p}.mlp.w2")),
                }
            })
            .collect()
    }

    /// Standardize raw handcrafted features with the stored per-slot
    /// normalizer.
    pub fn normalize_features(&self, raw: &[f64]) -> Result<Vec<T>> {
        if raw.len() != self.cfg.handcrafted_len {
            return Err(Error::Config(format!(
                "feature vector has {} slots, model expects {}",
                raw.len(),
                self.cfg.handcrafted_len
            )));
        }
        let mean = &self.fusion.get("feat_norm.mean").data;
        let std = &self.fusion.get("feat_norm.std").data;
        Ok(raw
            .iter()
            .enumerate()
            .map(|(i, &v)| T::from_f64((v - mean[i].to_f64()) / std[i].to_f64()))
            .collect())
    }

    /// Full forward from volumes and/or raw handcrafted features.
    ///
    /// `train` drives batchnorm mode; `backbone_grads` tracks gradients
    /// through the backbone (joint/scratch training); `fusion_grads` tracks
    /// the fusion and head parameters.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        volumes: Option<TensorId>,
        handcrafted: Option<&[Vec<f64>]>,
        train: bool,
        backbone_grads: bool,
        fusion_grads: bool,
    ) -> Result<ForwardOutput> {
        let maps = if self.cfg.variant == Variant::HandcraftedOnly {
            None
        } else {
            let volumes = volumes.ok_or_else(|| {
                Error::invalid("hrl_forward", format!("variant {} requires volumes", self.cfg.variant))
            })?;
            Some(self.backbone.forward(tape, volumes, train, backbone_grads)?)
        };
        self.forward_fused(tape, maps, handcrafted, fusion_grads)
    }

    /// Forward from precomputed feature maps (frozen-backbone training path).
    pub fn forward_fused(
        &mut self,
        tape: &mut Tape<T>,
        maps: Option<TensorId>,
        handcrafted: Option<&[Vec<f64>]>,
        fusion_grads: bool,
    ) -> Result<ForwardOutput> {
        let d = self.cfg.hidden_size;
        let z0 = match self.cfg.variant {
            Variant::HandcraftedOnly => None,
            _ => {
                let maps = maps.ok_or_else(|| {
                    Error::invalid(
                        "hrl_forward",
                        format!("variant {} requires the data-driven stream", self.cfg.variant),
                    )
                })?;
                let proj_w = self.fusion.bind(tape, "proj.weight", fusion_grads);
                let proj_b = self.fusion.bind(tape, "proj.bias", fusion_grads);
                let x_class = self.fusion.bind(tape, "x_class", fusion_grads);
                let pos = self.fusion.bind(tape, "pos_embed", fusion_grads);
                Some(embed_feature_maps(tape, maps, proj_w, proj_b, x_class, pos)?)
            }
        };
        let z1 = match self.cfg.variant {
            Variant::DataDrivenOnly => None,
            _ if self.cfg.handcrafted_len == 0 => None,
            _ => {
                let raw = handcrafted.ok_or_else(|| {
                    Error::invalid(
                        "hrl_forward",
                        format!("variant {} requires handcrafted features", self.cfg.variant),
                    )
                })?;
                let normalized: Vec<Vec<T>> = raw
                    .iter()
                    .map(|f| self.normalize_features(f))
                    .collect::<Result<_>>()?;
                embed_handcrafted(tape, &normalized, d)?
            }
        };

        let tokens = match (z0, z1) {
            (Some(a), Some(b)) => {
                let id = tape.concat(1, &[a.id, b.id])?;
                let mut tags = a.tags;
                tags.extend(b.tags);
                TokenSequence { id, tags }
            }
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => {
                return Err(Error::invalid(
                    "hrl_forward",
                    "no input stream available for this variant",
                ))
            }
        };

        let layers = self.bind_layers(tape, fusion_grads);
        let (hidden, attention) = encoder_forward(tape, tokens.id, &layers, self.cfg.heads)?;
        let head_w = self.fusion.bind(tape, "head.weight", fusion_grads);
        let head_b = self.fusion.bind(tape, "head.bias", fusion_grads);
        let (logits, probs) = classify(tape, hidden, head_w, head_b)?;
        Ok(ForwardOutput {
            logits,
            probs,
            attention,
            tokens,
            feature_maps: maps,
        })
    }

    /// Globally averaged backbone features `[B, C]` (the penultimate features
    /// used for the standalone backbone classifier and for embedding export).
    pub fn pooled_backbone_features(
        &mut self,
        tape: &mut Tape<T>,
        volumes: TensorId,
        train: bool,
        grads: bool,
    ) -> Result<TensorId> {
        let maps = self.backbone.forward(tape, volumes, train, grads)?;
        pooled_features(tape, maps)
    }
}

/// Collapse `[B, C, l, w, h]` maps to `[B, C]` by global average pooling.
pub fn pooled_features<T: Scalar>(tape: &mut Tape<T>, maps: TensorId) -> Result<TensorId> {
    let shape = tape.shape(maps).to_vec();
    let (b, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let flat = tape.reshape(maps, &[b, c, spatial])?;
    tape.mean_axis(flat, 2)
}
