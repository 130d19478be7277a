//! Volumetric residual-network backbone.
//!
//! Structure: a 7x7x7 stride-2 stem convolution with batchnorm and ReLU, a
//! 3x3x3 stride-2 max pool, then four stages of two-conv basic residual
//! blocks. Stage channels are base x (1, 2, 4, 8); the first block of stages
//! 2-4 downsamples by stride 2 with a 1x1x1 projection on the skip path.
//! Five stride-2 reductions in total, so spatial extents shrink by a nominal
//! factor of 32 under the conv floor arithmetic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::conv::{out_extent, PoolKind};
use crate::tensor::norm::BnStats;
use crate::tensor::{Scalar, Tape, TensorId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// First-stage channel count; later stages use x2, x4, x8.
    pub base_channels: usize,
    pub blocks_per_stage: [usize; 4],
    pub in_channels: usize,
}

impl BackboneConfig {
    /// The 34-layer layout: 3, 4, 6, 3 basic blocks.
    pub fn resnet34() -> Self {
        BackboneConfig {
            base_channels: 64,
            blocks_per_stage: [3, 4, 6, 3],
            in_channels: 1,
        }
    }

    /// The 18-layer layout: 2 basic blocks per stage.
    pub fn resnet18() -> Self {
        BackboneConfig {
            base_channels: 64,
            blocks_per_stage: [2, 2, 2, 2],
            in_channels: 1,
        }
    }

    /// Small configuration for fast experiments on desk-scale volumes.
    pub fn desk(base_channels: usize, blocks: usize) -> Self {
        BackboneConfig {
            base_channels,
            blocks_per_stage: [blocks; 4],
            in_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::Config("blocks_per_stage entries must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 8 * b]
    }

    /// Channel count of the final feature maps (the token count N downstream).
    pub fn out_channels(&self) -> usize {
        8 * self.base_channels
    }
}

/// Pure shape arithmetic for the backbone: final `(C, l, w, h)` for a given
/// input `(in_channels, D, H, W)`. Errors name the extent that collapses.
pub fn output_shape(cfg: &BackboneConfig, input: &[usize; 4]) -> Result<(usize, usize, usize, usize)> {
    cfg.validate()?;
    if input[0] != cfg.in_channels {
        return Err(Error::Config(format!(
            "input has {} channels, backbone expects {}",
            input[0], cfg.in_channels
        )));
    }
    let mut ext = [input[1], input[2], input[3]];
    // (kernel, stride, padding) for each spatial reduction.
    let steps: [(&str, usize, usize, usize); 5] = [
        ("stem conv", 7, 2, 3),
        ("max pool", 3, 2, 1),
        ("stage 2", 3, 2, 1),
        ("stage 3", 3, 2, 1),
        ("stage 4", 3, 2, 1),
    ];
    for (what, k, s, p) in steps {
        for (axis, e) in ext.iter_mut().enumerate() {
            if *e + 2 * p < k {
                return Err(Error::Config(format!(
                    "input axis {} too small: extent {} cannot pass the {} (kernel {})",
                    axis, e, what, k
                )));
            }
            *e = out_extent(*e, k, s, p);
        }
    }
    Ok((cfg.out_channels(), ext[0], ext[1], ext[2]))
}

/// Backbone parameters plus their configuration.
pub struct Backbone<T: Scalar> {
    pub cfg: BackboneConfig,
    pub params: ParamStore<T>,
}

/// Intermediate activations from a traced forward pass, for feature-map
/// export and inspection.
pub struct BackboneTrace {
    pub stem: TensorId,
    pub pooled: TensorId,
    pub stages: [TensorId; 4],
}

/// Deterministically initialize a backbone from a seed.
pub fn build_backbone<T: Scalar>(cfg: &BackboneConfig, seed: u64) -> Result<Backbone<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();

    let conv = |params: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cout: usize, cin: usize, k: usize| {
        let fan_in = cin * k * k * k;
        params.insert(
            name,
            Init::kaiming(rng, cout * fan_in, fan_in),
            vec![cout, cin, k, k, k],
            true,
        );
    };
    let bn = |params: &mut ParamStore<T>, prefix: &str, c: usize| {
        params.insert(&format!("{prefix}.gamma"), Init::ones(c), vec![c], true);
        params.insert(&format!("{prefix}.beta"), Init::zeros(c), vec![c], true);
        params.insert(&format!("{prefix}.running_mean"), Init::zeros(c), vec![c], false);
        params.insert(&format!("{prefix}.running_var"), Init::ones(c), vec![c], false);
    };

    let base = cfg.base_channels;
    conv(&mut params, &mut rng, "stem.conv.weight", base, cfg.in_channels, 7);
    bn(&mut params, "stem.bn", base);

    let channels = cfg.stage_channels();
    let mut in_ch = base;
    for (s, &blocks) in cfg.blocks_per_stage.iter().enumerate() {
        let out_ch = channels[s];
        for b in 0..blocks {
            let p = format!("stage{}.block{}", s + 1, b);
            let block_in = if b == 0 { in_ch } else { out_ch };
            conv(&mut params, &mut rng, &format!("{p}.conv1.weight"), out_ch, block_in, 3);
            bn(&mut params, &format!("{p}.bn1"), out_ch);
            conv(&mut params, &mut rng, &format!("{p}.conv2.weight"), out_ch, out_ch, 3);
            bn(&mut params, &format!("{p}.bn2"), out_ch);
            let downsample = b == 0 && (s > 0 || block_in != out_ch);
            if downsample {
                conv(&mut params, &mut rng, &format!("{p}.down.conv.weight"), out_ch, block_in, 1);
                bn(&mut params, &format!("{p}.down.bn"), out_ch);
            }
        }
        in_ch = out_ch;
    }

    Ok(Backbone {
        cfg: cfg.clone(),
        params,
    })
}

impl<T: Scalar> Backbone<T> {
    /// Forward pass producing the final feature maps `[B, C, l, w, h]`.
    ///
    /// `train` selects batch statistics (and updates the running stats);
    /// `grads` binds trainable parameters with gradient tracking. A frozen
    /// forward uses `(train=false, grads=false)`.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: TensorId,
        train: bool,
        grads: bool,
    ) -> Result<TensorId> {
        Ok(self.forward_traced(tape, x, train, grads)?.0)
    }

    pub fn forward_traced(
        &mut self,
        tape: &mut Tape<T>,
        x: TensorId,
        train: bool,
        grads: bool,
    ) -> Result<(TensorId, BackboneTrace)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 5 {
            return Err(Error::Config(format!(
                "backbone expects [B, C, D, H, W] input, got {:?}",
                shape
            )));
        }
        // Validates extents up front so errors name the offending axis.
        output_shape(&self.cfg, &[shape[1], shape[2], shape[3], shape[4]])?;

        let w = self.params.bind(tape, "stem.conv.weight", grads);
        let y = tape.conv3d(x, w, None, 2, 3)?;
        let y = self.bn(tape, y, "stem.bn", train, grads)?;
        let stem = tape.relu(y);
        let pooled = tape.pool3d(stem, PoolKind::Max, 3, 2, 1)?;

        let mut cur = pooled;
        let mut stages = [pooled; 4];
        for s in 0..4 {
            for b in 0..self.cfg.blocks_per_stage[s] {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                cur = self.block(tape, cur, &format!("stage{}.block{}", s + 1, b), stride, train, grads)?;
            }
            stages[s] = cur;
        }
        Ok((
            cur,
            BackboneTrace {
                stem,
                pooled,
                stages,
            },
        ))
    }

    fn block(
        &mut self,
        tape: &mut Tape<T>,
        x: TensorId,
        prefix: &str,
        stride: usize,
        train: bool,
        grads: bool,
    ) -> Result<TensorId> {
        let w1 = self.params.bind(tape, &format!("{prefix}.conv1.weight"), grads);
        let y = tape.conv3d(x, w1, None, stride, 1)?;
        let y = self.bn(tape, y, &format!("{prefix}.bn1"), train, grads)?;
        let y = tape.relu(y);
        let w2 = self.params.bind(tape, &format!("{prefix}.conv2.weight"), grads);
        let y = tape.conv3d(y, w2, None, 1, 1)?;
        let y = self.bn(tape, y, &format!("{prefix}.bn2"), train, grads)?;

        let skip = if self.params.contains(&format!("{prefix}.down.conv.weight")) {
            let wd = self.params.bind(tape, &format!("{prefix}.down.conv.weight"), grads);
            let s = tape.conv3d(x, wd, None, stride, 0)?;
            self.bn(tape, s, &format!("{prefix}.down.bn"), train, grads)?
        } else {
            x
        };
        // Skip joins before the final ReLU.
        let sum = tape.add(y, skip)?;
        Ok(tape.relu(sum))
    }

    fn bn(
        &mut self,
        tape: &mut Tape<T>,
        x: TensorId,
        prefix: &str,
        train: bool,
        grads: bool,
    ) -> Result<TensorId> {
        let gamma = self.params.bind(tape, &format!("{prefix}.gamma"), grads);
        let beta = self.params.bind(tape, &format!("{prefix}.beta"), grads);
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let mut stats = BnStats {
            mean: self.params.take_data(&mean_name),
            var: self.params.take_data(&var_name),
        };
        let result = tape.batchnorm(x, gamma, beta, &mut stats, train);
        self.params.put_data(&mean_name, stats.mean);
        self.params.put_data(&var_name, stats.var);
        result
    }
}
