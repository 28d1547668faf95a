//! Band-split separation network and its architectural variants.
//!
//! Latent tensors are laid out `[batch, bands, frames, features]`. A batch entry is one
//! channel of one example in the per-channel and TAC modes, and one whole stereo example
//! in the naive stereo mode.

use std::sync::Arc;

use log::warn;
use ndarray::{concatenate, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bandscheme::BandScheme;
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, orthogonal_blocks, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::spectral::{ComplexSpectrogram, FrameParams};
use crate::tape::{complex_to_tensor, tensor_to_spectrogram, Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StereoMode {
    /// Left and right run through the network independently.
    MonoPerChannel,
    /// Channels are merged at the band split and expanded by the masker.
    NaiveStereo,
    /// Per-channel processing with a transform-average-concatenate module after every block.
    Tac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Prelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    Recurrent,
    DilatedConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    pub encoding_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockAxis {
    /// Sequence modelling across frames.
    Time,
    /// Sequence modelling across bands.
    Band,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub depth: usize,
    pub masker_factor: usize,
    pub stereo_mode: StereoMode,
    pub tac_activation: Activation,
    pub block_kind: BlockKind,
    pub attention: Option<AttentionConfig>,
    pub heads: usize,
    pub norm_groups: usize,
    pub conv_kernel: usize,
    pub dilations: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl ModelConfig {
    /// N=64, R=8, μ=4.
    pub fn base() -> Self {
        Self {
            latent_dim: 64,
            depth: 8,
            masker_factor: 4,
            stereo_mode: StereoMode::MonoPerChannel,
            tac_activation: Activation::Tanh,
            block_kind: BlockKind::Recurrent,
            attention: None,
            heads: 1,
            norm_groups: 1,
            conv_kernel: 3,
            dilations: vec![1, 2, 4, 8],
        }
    }

    /// N=128, R=12.
    pub fn large() -> Self {
        Self {
            latent_dim: 128,
            depth: 12,
            ..Self::base()
        }
    }

    /// N=8, R=1 configuration used by the gradient and smoke tests.
    pub fn tiny() -> Self {
        Self {
            latent_dim: 8,
            depth: 1,
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.latent_dim == 0 || self.depth == 0 || self.masker_factor == 0 || self.heads == 0 {
            return err("latent_dim, depth, masker_factor and heads must all be >= 1".into());
        }
        if self.latent_dim % self.heads != 0 {
            return err(format!("latent_dim {} not divisible by heads {}", self.latent_dim, self.heads));
        }
        if self.norm_groups == 0 || self.latent_dim % self.norm_groups != 0 {
            return err(format!("norm_groups {} must divide latent_dim {}", self.norm_groups, self.latent_dim));
        }
        if let Some(a) = self.attention {
            if a.heads == 0 || a.encoding_dim == 0 {
                return err("attention heads and encoding_dim must be >= 1".into());
            }
            if self.latent_dim % a.heads != 0 {
                return err(format!("latent_dim {} not divisible by attention heads {}", self.latent_dim, a.heads));
            }
        }
        if self.block_kind == BlockKind::DilatedConv {
            if self.conv_kernel % 2 == 0 {
                return err(format!("conv_kernel must be odd, got {}", self.conv_kernel));
            }
            if self.dilations.is_empty() || self.dilations.contains(&0) {
                return err("dilations must be a non-empty list of positive integers".into());
            }
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.latent_dim / self.heads
    }

    /// Channels folded into one band-split input (2 in naive stereo mode).
    fn merged_channels(&self) -> usize {
        if self.stereo_mode == StereoMode::NaiveStereo {
            2
        } else {
            1
        }
    }

    /// Frames seen by one dilated-convolution stack.
    pub fn receptive_field(&self) -> usize {
        receptive_field(self.conv_kernel, &self.dilations)
    }
}

/// `1 + Σ d·(k−1)` for a chain of "same" convolutions.
pub fn receptive_field(kernel: usize, dilations: &[usize]) -> usize {
    1 + dilations.iter().map(|d| d * (kernel - 1)).sum::<usize>()
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LstmIds {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
enum Residual {
    Recurrent {
        norm: Norm,
        fwd: LstmIds,
        bwd: LstmIds,
        proj: Dense,
    },
    Dilated {
        norm: Norm,
        convs: Vec<(Dense, ParamId)>,
        proj: Dense,
    },
}

#[derive(Debug, Clone)]
struct Attention {
    norm: Norm,
    heads: Vec<[Dense; 3]>,
    out: Dense,
}

#[derive(Debug, Clone, Copy)]
struct TacIds {
    transform: Dense,
    average: Dense,
    concat: Dense,
    alphas: Option<[ParamId; 3]>,
}

#[derive(Debug, Clone)]
struct Block {
    time: Residual,
    band: Residual,
    time_attention: Option<Attention>,
    band_attention: Option<Attention>,
    tac: Option<TacIds>,
}

#[derive(Debug, Clone, Copy)]
struct Masker {
    norm: Norm,
    fc1: Dense,
    fc2: Dense,
    out: Dense,
}

#[derive(Debug, Clone)]
struct Layout {
    band_split: Vec<(Norm, Dense)>,
    blocks: Vec<Block>,
    maskers: Vec<Masker>,
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        let w = fan_in_uniform(&[fan_in, fan_out], fan_in, &mut self.rng);
        let b = fan_in_uniform(&[fan_out], fan_in, &mut self.rng);
        Dense {
            w: self.store.insert(format!("{name}.w"), w),
            b: self.store.insert(format!("{name}.b"), b),
        }
    }

    fn conv(&mut self, name: &str, kernel: usize, cin: usize, cout: usize) -> Dense {
        let fan_in = kernel * cin;
        let w = fan_in_uniform(&[kernel, cin, cout], fan_in, &mut self.rng);
        let b = fan_in_uniform(&[cout], fan_in, &mut self.rng);
        Dense {
            w: self.store.insert(format!("{name}.w"), w),
            b: self.store.insert(format!("{name}.b"), b),
        }
    }

    fn norm(&mut self, name: &str, n: usize) -> Norm {
        Norm {
            gamma: self.store.insert(format!("{name}.gamma"), ArrayD::ones(vec![n])),
            beta: self.store.insert(format!("{name}.beta"), ArrayD::zeros(vec![n])),
        }
    }

    fn alpha(&mut self, name: &str) -> ParamId {
        self.store.insert(format!("{name}.alpha"), ArrayD::from_elem(vec![1], T::of(0.25)))
    }

    fn lstm(&mut self, name: &str, input: usize, hidden: usize) -> LstmIds {
        let w_ih = fan_in_uniform(&[input, 4 * hidden], hidden, &mut self.rng);
        let w_hh = orthogonal_blocks(hidden, 4, &mut self.rng);
        let bias = fan_in_uniform(&[4 * hidden], hidden, &mut self.rng);
        LstmIds {
            w_ih: self.store.insert(format!("{name}.w_ih"), w_ih),
            w_hh: self.store.insert(format!("{name}.w_hh"), w_hh),
            bias: self.store.insert(format!("{name}.bias"), bias),
        }
    }

    fn residual(&mut self, name: &str, cfg: &ModelConfig) -> Residual {
        let n = cfg.latent_dim;
        let head = cfg.head_dim();
        let hidden = 2 * head;
        let norm = self.norm(&format!("{name}.norm"), n);
        match cfg.block_kind {
            BlockKind::Recurrent => Residual::Recurrent {
                norm,
                fwd: self.lstm(&format!("{name}.lstm_fwd"), head, hidden),
                bwd: self.lstm(&format!("{name}.lstm_bwd"), head, hidden),
                proj: self.dense(&format!("{name}.proj"), 2 * hidden, head),
            },
            BlockKind::DilatedConv => {
                let convs = cfg
                    .dilations
                    .iter()
                    .enumerate()
                    .map(|(i, _)| {
                        let cin = if i == 0 { head } else { hidden };
                        let conv = self.conv(&format!("{name}.conv{i}"), cfg.conv_kernel, cin, hidden);
                        (conv, self.alpha(&format!("{name}.conv{i}")))
                    })
                    .collect();
                Residual::Dilated {
                    norm,
                    convs,
                    proj: self.dense(&format!("{name}.proj"), hidden, head),
                }
            }
        }
    }

    fn attention(&mut self, name: &str, n: usize, a: AttentionConfig) -> Attention {
        let norm = self.norm(&format!("{name}.norm"), n);
        let heads = (0..a.heads)
            .map(|h| {
                [
                    self.dense(&format!("{name}.head{h}.q"), n, a.encoding_dim),
                    self.dense(&format!("{name}.head{h}.k"), n, a.encoding_dim),
                    self.dense(&format!("{name}.head{h}.v"), n, n / a.heads),
                ]
            })
            .collect();
        Attention {
            norm,
            heads,
            out: self.dense(&format!("{name}.out"), n, n),
        }
    }

    fn tac(&mut self, name: &str, n: usize, act: Activation) -> TacIds {
        let hidden = 3 * n;
        let transform = self.dense(&format!("{name}.transform"), n, hidden);
        let average = self.dense(&format!("{name}.average"), hidden, hidden);
        let concat = self.dense(&format!("{name}.concat"), 2 * hidden, n);
        let alphas = match act {
            Activation::Prelu => Some([
                self.alpha(&format!("{name}.transform")),
                self.alpha(&format!("{name}.average")),
                self.alpha(&format!("{name}.concat")),
            ]),
            Activation::Tanh => None,
        };
        TacIds {
            transform,
            average,
            concat,
            alphas,
        }
    }
}

/// Exact number of learnable scalars of `cfg` with `scheme`, computed layer by layer.
pub fn count_params(cfg: &ModelConfig, scheme: &BandScheme) -> usize {
    let n = cfg.latent_dim;
    let head = cfg.head_dim();
    let hidden = 2 * head;
    let ch = cfg.merged_channels();
    let dense = |i: usize, o: usize| i * o + o;
    let norm = |c: usize| 2 * c;

    let band_split: usize = scheme
        .widths()
        .map(|w| {
            let feat = 2 * w * ch;
            norm(feat) + dense(feat, n)
        })
        .sum();

    let residual = match cfg.block_kind {
        BlockKind::Recurrent => {
            let lstm = head * 4 * hidden + hidden * 4 * hidden + 4 * hidden;
            norm(n) + 2 * lstm + dense(2 * hidden, head)
        }
        BlockKind::DilatedConv => {
            let convs: usize = (0..cfg.dilations.len())
                .map(|i| {
                    let cin = if i == 0 { head } else { hidden };
                    cfg.conv_kernel * cin * hidden + hidden + 1
                })
                .sum();
            norm(n) + convs + dense(hidden, head)
        }
    };
    let attention = cfg.attention.map_or(0, |a| {
        norm(n) + a.heads * (2 * dense(n, a.encoding_dim) + dense(n, n / a.heads)) + dense(n, n)
    });
    let tac = if cfg.stereo_mode == StereoMode::Tac {
        let h = 3 * n;
        let alphas = if cfg.tac_activation == Activation::Prelu { 3 } else { 0 };
        dense(n, h) + dense(h, h) + dense(2 * h, n) + alphas
    } else {
        0
    };
    let blocks = cfg.depth * (2 * (residual + attention) + tac);

    let mh = cfg.masker_factor * n;
    let maskers: usize = scheme
        .widths()
        .map(|w| norm(n) + dense(n, mh) + dense(mh, mh) + dense(mh, 2 * 2 * w * ch))
        .sum();

    band_split + blocks + maskers
}

/// Band-split network for one target source.
#[derive(Debug, Clone)]
pub struct BandSplitModel<T: Scalar> {
    cfg: ModelConfig,
    scheme: BandScheme,
    frame: FrameParams,
    params: ParamStore<T>,
    layout: Layout,
}

/// Graph handles produced by a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Estimated source `[batch·channels, bins, frames, 2]`.
    pub estimate: Var,
    /// Complex mask with the same layout as `estimate`.
    pub mask: Var,
    pub channels: usize,
}

impl<T: Scalar> BandSplitModel<T> {
    pub fn new(cfg: ModelConfig, scheme: BandScheme, frame: FrameParams, seed: u64) -> Result<Self> {
        cfg.validate()?;
        frame.validate()?;
        if scheme.n_bins() != frame.n_bins() {
            return Err(Error::Shape(format!(
                "scheme covers {} bins, window {} yields {}",
                scheme.n_bins(),
                frame.window_size,
                frame.n_bins()
            )));
        }
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let n = cfg.latent_dim;
        let ch = cfg.merged_channels();
        let band_split = scheme
            .widths()
            .enumerate()
            .map(|(k, w)| {
                let feat = 2 * w * ch;
                (
                    b.norm(&format!("band_split.{k}.norm"), feat),
                    b.dense(&format!("band_split.{k}.proj"), feat, n),
                )
            })
            .collect();
        let blocks = (0..cfg.depth)
            .map(|r| Block {
                time: b.residual(&format!("blocks.{r}.time"), &cfg),
                band: b.residual(&format!("blocks.{r}.band"), &cfg),
                time_attention: cfg.attention.map(|a| b.attention(&format!("blocks.{r}.time.attention"), n, a)),
                band_attention: cfg.attention.map(|a| b.attention(&format!("blocks.{r}.band.attention"), n, a)),
                tac: (cfg.stereo_mode == StereoMode::Tac).then(|| b.tac(&format!("blocks.{r}.tac"), n, cfg.tac_activation)),
            })
            .collect();
        let mh = cfg.masker_factor * n;
        let maskers = scheme
            .widths()
            .enumerate()
            .map(|(k, w)| Masker {
                norm: b.norm(&format!("masker.{k}.norm"), n),
                fc1: b.dense(&format!("masker.{k}.fc1"), n, mh),
                fc2: b.dense(&format!("masker.{k}.fc2"), mh, mh),
                out: b.dense(&format!("masker.{k}.out"), mh, 2 * 2 * w * ch),
            })
            .collect();
        Ok(Self {
            cfg,
            scheme,
            frame,
            params,
            layout: Layout {
                band_split,
                blocks,
                maskers,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn scheme(&self) -> &BandScheme {
        &self.scheme
    }

    pub fn frame(&self) -> FrameParams {
        self.frame
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Zeroes the output projection of every residual and attention sub-block, turning the stack into the identity.
    pub fn zero_block_outputs(&mut self) {
        let ids: Vec<ParamId> = self
            .layout
            .blocks
            .iter()
            .flat_map(|b| [&b.time, &b.band])
            .flat_map(|r| match r {
                Residual::Recurrent { proj, .. } | Residual::Dilated { proj, .. } => [proj.w, proj.b],
            })
            .chain(
                self.layout
                    .blocks
                    .iter()
                    .flat_map(|b| b.time_attention.iter().chain(&b.band_attention))
                    .flat_map(|a| [a.out.w, a.out.b]),
            )
            .collect();
        for id in ids {
            self.params.get_mut(id).fill(T::zero());
        }
    }

    fn p(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(&self.params, id)
    }

    fn dense(&self, g: &mut Graph<T>, x: Var, d: Dense) -> Result<Var> {
        let (w, b) = (self.p(g, d.w), self.p(g, d.b));
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, n: Norm, groups: usize) -> Result<Var> {
        let (gamma, beta) = (self.p(g, n.gamma), self.p(g, n.beta));
        g.group_norm(x, gamma, beta, groups)
    }

    fn activation(&self, g: &mut Graph<T>, x: Var, alpha: Option<ParamId>) -> Result<Var> {
        match alpha {
            Some(a) => {
                let a = self.p(g, a);
                g.prelu(x, a)
            }
            None => Ok(g.tanh(x)),
        }
    }

    /// Stacks a batch of spectrograms as a constant `[batch·channels, bins, frames, 2]` tensor.
    pub fn input_tensor(&self, batch: &[ComplexSpectrogram<T>]) -> Result<ArrayD<T>> {
        let first = batch.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        for s in batch {
            if s.n_bins() != self.scheme.n_bins() {
                return Err(Error::Shape(format!(
                    "spectrogram has {} bins, model scheme covers {}",
                    s.n_bins(),
                    self.scheme.n_bins()
                )));
            }
            if s.channels() != first.channels() || s.n_frames() != first.n_frames() {
                return Err(Error::Shape("batch entries differ in channels or frames".into()));
            }
        }
        if self.cfg.stereo_mode == StereoMode::NaiveStereo && first.channels() != 2 {
            return Err(Error::Shape(format!(
                "naive stereo mode needs 2 channels, got {}",
                first.channels()
            )));
        }
        let parts: Vec<ArrayD<T>> = batch.iter().map(|s| complex_to_tensor(&s.values)).collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
    }

    /// Band split and projection: `x[batch·channels, bins, frames, 2]` → latent `[b, K, T, N]`.
    pub fn forward_bandsplit(&self, g: &mut Graph<T>, x: Var, channels: usize) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.scheme.n_bins() || shape[3] != 2 {
            return Err(Error::Shape(format!("band split input {shape:?}")));
        }
        let (bc, frames) = (shape[0], shape[2]);
        let mut per_band = Vec::with_capacity(self.scheme.n_bands());
        for (&(start, end), &(norm, proj)) in self.scheme.bands().iter().zip(&self.layout.band_split) {
            let w = end - start;
            let sub = g.slice_axis(x, 1, start, end)?;
            let feats = if self.cfg.stereo_mode == StereoMode::NaiveStereo {
                let b = bc / channels;
                let r = g.reshape(sub, &[b, channels, w, frames, 2])?;
                let p = g.permute(r, &[0, 3, 1, 2, 4])?;
                g.reshape(p, &[b, frames, channels * w * 2])?
            } else {
                let p = g.permute(sub, &[0, 2, 1, 3])?;
                g.reshape(p, &[bc, frames, w * 2])?
            };
            let normed = self.norm(g, feats, norm, 1)?;
            per_band.push(self.dense(g, normed, proj)?);
        }
        g.stack(&per_band, 1)
    }

    /// `[s, l, N]` → `[s·H, l, N/H]`.
    pub fn split_heads(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let sh = g.shape(x).to_vec();
        let h = self.cfg.heads;
        let r = g.reshape(x, &[sh[0], sh[1], h, sh[2] / h])?;
        let p = g.permute(r, &[0, 2, 1, 3])?;
        g.reshape(p, &[sh[0] * h, sh[1], sh[2] / h])
    }

    /// Inverse of [`Self::split_heads`].
    pub fn merge_heads(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let sh = g.shape(x).to_vec();
        let h = self.cfg.heads;
        let r = g.reshape(x, &[sh[0] / h, h, sh[1], sh[2]])?;
        let p = g.permute(r, &[0, 2, 1, 3])?;
        g.reshape(p, &[sh[0] / h, sh[1], sh[2] * h])
    }

    /// Moves the modelled axis next to the features: `[b, K, T, N]` → `[b·K, T, N]` or `[b·T, K, N]`.
    fn to_sequences(&self, g: &mut Graph<T>, latent: Var, axis: BlockAxis) -> Result<Var> {
        let sh = g.shape(latent).to_vec();
        match axis {
            BlockAxis::Time => g.reshape(latent, &[sh[0] * sh[1], sh[2], sh[3]]),
            BlockAxis::Band => {
                let p = g.permute(latent, &[0, 2, 1, 3])?;
                g.reshape(p, &[sh[0] * sh[2], sh[1], sh[3]])
            }
        }
    }

    fn from_sequences(&self, g: &mut Graph<T>, seq: Var, axis: BlockAxis, shape: &[usize]) -> Result<Var> {
        match axis {
            BlockAxis::Time => g.reshape(seq, shape),
            BlockAxis::Band => {
                let r = g.reshape(seq, &[shape[0], shape[2], shape[1], shape[3]])?;
                g.permute(r, &[0, 2, 1, 3])
            }
        }
    }

    fn residual_for(&self, block: usize, axis: BlockAxis) -> Result<&Residual> {
        let b = self
            .layout
            .blocks
            .get(block)
            .ok_or_else(|| Error::Config(format!("block {block} out of range")))?;
        Ok(match axis {
            BlockAxis::Time => &b.time,
            BlockAxis::Band => &b.band,
        })
    }

    /// Recurrent residual sub-block `out = in + proj(BLSTM(norm(in)))` along `axis`.
    pub fn forward_block(&self, g: &mut Graph<T>, latent: Var, block: usize, axis: BlockAxis) -> Result<Var> {
        let Residual::Recurrent { norm, fwd, bwd, proj } = *self.residual_for(block, axis)? else {
            return Err(Error::Config("forward_block needs recurrent blocks".into()));
        };
        let shape = g.shape(latent).to_vec();
        let seq = self.to_sequences(g, latent, axis)?;
        let normed = self.norm(g, seq, norm, self.cfg.norm_groups)?;
        let heads = self.split_heads(g, normed)?;
        let f = {
            let (a, b, c) = (self.p(g, fwd.w_ih), self.p(g, fwd.w_hh), self.p(g, fwd.bias));
            g.lstm(heads, a, b, c, false)?
        };
        let r = {
            let (a, b, c) = (self.p(g, bwd.w_ih), self.p(g, bwd.w_hh), self.p(g, bwd.bias));
            g.lstm(heads, a, b, c, true)?
        };
        let both = g.concat(&[f, r], 2)?;
        let projected = self.dense(g, both, proj)?;
        let merged = self.merge_heads(g, projected)?;
        let update = self.from_sequences(g, merged, axis, &shape)?;
        check_finite(g, update, "sequence block")?;
        g.add(latent, update)
    }

    /// Dilated-convolution residual sub-block along `axis`.
    pub fn forward_dilated_block(&self, g: &mut Graph<T>, latent: Var, block: usize, axis: BlockAxis) -> Result<Var> {
        let Residual::Dilated { norm, convs, proj } = self.residual_for(block, axis)?.clone() else {
            return Err(Error::Config("forward_dilated_block needs dilated-conv blocks".into()));
        };
        let shape = g.shape(latent).to_vec();
        let seq = self.to_sequences(g, latent, axis)?;
        let normed = self.norm(g, seq, norm, self.cfg.norm_groups)?;
        let heads = self.split_heads(g, normed)?;
        let hidden = self.dilated_stack(g, heads, &convs)?;
        let projected = self.dense(g, hidden, proj)?;
        let merged = self.merge_heads(g, projected)?;
        let update = self.from_sequences(g, merged, axis, &shape)?;
        check_finite(g, update, "dilated block")?;
        g.add(latent, update)
    }

    fn dilated_stack(&self, g: &mut Graph<T>, x: Var, convs: &[(Dense, ParamId)]) -> Result<Var> {
        let mut h = x;
        for (&(conv, alpha), &d) in convs.iter().zip(&self.cfg.dilations) {
            let (w, b) = (self.p(g, conv.w), self.p(g, conv.b));
            let y = g.conv1d(h, w, b, d)?;
            let a = self.p(g, alpha);
            h = g.prelu(y, a)?;
        }
        Ok(h)
    }

    /// Multi-head self-attention along `axis`, `out = in + attn(norm(in))`; also returns each head's weights `[sequences, L, L]`.
    pub fn forward_attention_with_weights(
        &self,
        g: &mut Graph<T>,
        latent: Var,
        block: usize,
        axis: BlockAxis,
    ) -> Result<(Var, Vec<Var>)> {
        let att = self
            .layout
            .blocks
            .get(block)
            .and_then(|b| match axis {
                BlockAxis::Time => b.time_attention.clone(),
                BlockAxis::Band => b.band_attention.clone(),
            })
            .ok_or_else(|| Error::Config("attention is not enabled".into()))?;
        let shape = g.shape(latent).to_vec();
        let seq = self.to_sequences(g, latent, axis)?;
        let normed = self.norm(g, seq, att.norm, self.cfg.norm_groups)?;
        let mut outs = Vec::with_capacity(att.heads.len());
        let mut weights = Vec::with_capacity(att.heads.len());
        for &[q, k, v] in &att.heads {
            let qh = self.dense(g, normed, q)?;
            let kh = self.dense(g, normed, k)?;
            let vh = self.dense(g, normed, v)?;
            let scale = T::one() / T::of_usize(g.shape(qh)[2]).sqrt();
            let kt = g.transpose_last(kh);
            let scores = g.batch_matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let w = g.softmax(scores);
            outs.push(g.batch_matmul(w, vh)?);
            weights.push(w);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 2)? };
        let refined = self.dense(g, cat, att.out)?;
        let update = self.from_sequences(g, refined, axis, &shape)?;
        Ok((g.add(latent, update)?, weights))
    }

    pub fn forward_attention(&self, g: &mut Graph<T>, latent: Var, block: usize, axis: BlockAxis) -> Result<Var> {
        Ok(self.forward_attention_with_weights(g, latent, block, axis)?.0)
    }

    /// Transform-average-concatenate across the `channels` latents stored consecutively along the batch axis.
    pub fn forward_tac(&self, g: &mut Graph<T>, latent: Var, block: usize, channels: usize) -> Result<Var> {
        let tac = self
            .layout
            .blocks
            .get(block)
            .and_then(|b| b.tac)
            .ok_or_else(|| Error::Config("TAC is not enabled".into()))?;
        if channels < 2 {
            warn!("TAC on a single channel is a pass-through");
            return Ok(latent);
        }
        let sh = g.shape(latent).to_vec();
        let alphas = tac.alphas.map(|a| a.map(Some)).unwrap_or([None; 3]);
        let t = self.dense(g, latent, tac.transform)?;
        let t = self.activation(g, t, alphas[0])?;
        let hidden = g.shape(t)[3];
        let grouped = g.reshape(t, &[sh[0] / channels, channels, sh[1] * sh[2] * hidden])?;
        let mean = g.channel_mean(grouped)?;
        let mean = g.reshape(mean, &[sh[0], sh[1], sh[2], hidden])?;
        let a = self.dense(g, mean, tac.average)?;
        let a = self.activation(g, a, alphas[1])?;
        let cat = g.concat(&[t, a], 3)?;
        let c = self.dense(g, cat, tac.concat)?;
        let c = self.activation(g, c, alphas[2])?;
        g.add(latent, c)
    }

    /// Per-band MLP masks assembled into a fullband complex mask `[batch·channels, bins, frames, 2]`.
    pub fn forward_masker(&self, g: &mut Graph<T>, latent: Var, channels: usize) -> Result<Var> {
        let sh = g.shape(latent).to_vec();
        let (b, frames) = (sh[0], sh[2]);
        let mut masks = Vec::with_capacity(self.scheme.n_bands());
        for (k, (w, m)) in self.scheme.widths().zip(&self.layout.maskers).enumerate() {
            let band = g.slice_axis(latent, 1, k, k + 1)?;
            let band = g.reshape(band, &[b, frames, sh[3]])?;
            let h = self.norm(g, band, m.norm, self.cfg.norm_groups)?;
            let h = self.dense(g, h, m.fc1)?;
            let h = g.tanh(h);
            let h = self.dense(g, h, m.fc2)?;
            let h = g.tanh(h);
            let out = self.dense(g, h, m.out)?;
            let half = g.shape(out)[2] / 2;
            let value = g.slice_axis(out, 2, 0, half)?;
            let gate = g.slice_axis(out, 2, half, 2 * half)?;
            let gate = g.sigmoid(gate);
            let glu = g.mul(value, gate)?;
            let mask = if self.cfg.stereo_mode == StereoMode::NaiveStereo {
                let r = g.reshape(glu, &[b, frames, channels, w, 2])?;
                let p = g.permute(r, &[0, 2, 3, 1, 4])?;
                g.reshape(p, &[b * channels, w, frames, 2])?
            } else {
                let r = g.reshape(glu, &[b, frames, w, 2])?;
                g.permute(r, &[0, 2, 1, 3])?
            };
            masks.push(mask);
        }
        g.concat(&masks, 1)
    }

    /// Everything between the band split and the masker.
    pub fn forward_blocks(&self, g: &mut Graph<T>, mut latent: Var, channels: usize) -> Result<Var> {
        for r in 0..self.cfg.depth {
            for axis in [BlockAxis::Time, BlockAxis::Band] {
                latent = match self.cfg.block_kind {
                    BlockKind::Recurrent => self.forward_block(g, latent, r, axis)?,
                    BlockKind::DilatedConv => self.forward_dilated_block(g, latent, r, axis)?,
                };
                if self.cfg.attention.is_some() {
                    latent = self.forward_attention(g, latent, r, axis)?;
                }
            }
            if self.cfg.stereo_mode == StereoMode::Tac {
                latent = self.forward_tac(g, latent, r, channels)?;
            }
        }
        Ok(latent)
    }

    /// Full network on a batch: `Ŝ = M ⊙ X`.
    pub fn forward_model(&self, g: &mut Graph<T>, batch: &[ComplexSpectrogram<T>]) -> Result<Forward> {
        let x = Arc::new(self.input_tensor(batch)?);
        let channels = batch[0].channels();
        let xv = g.constant((*x).clone());
        let latent = self.forward_bandsplit(g, xv, channels)?;
        let latent = self.forward_blocks(g, latent, channels)?;
        let mask = self.forward_masker(g, latent, channels)?;
        let estimate = g.complex_mul_const(mask, x)?;
        Ok(Forward {
            estimate,
            mask,
            channels,
        })
    }

    /// Splits a `[batch·channels, bins, frames, 2]` value back into spectrograms.
    pub fn output_spectrograms(&self, value: &ArrayD<T>, channels: usize, sample_rate: u32) -> Result<Vec<ComplexSpectrogram<T>>> {
        let total = value.shape()[0];
        (0..total / channels)
            .map(|i| {
                let part = value
                    .slice_axis(Axis(0), ndarray::Slice::from(i * channels..(i + 1) * channels))
                    .to_owned();
                tensor_to_spectrogram(&part, self.frame, sample_rate)
            })
            .collect()
    }

    /// Inference on one spectrogram.
    pub fn separate(&self, spec: &ComplexSpectrogram<T>) -> Result<ComplexSpectrogram<T>> {
        let mut g = Graph::new();
        let out = self.forward_model(&mut g, std::slice::from_ref(spec))?;
        let mut specs = self.output_spectrograms(g.value(out.estimate), out.channels, spec.sample_rate)?;
        Ok(specs.remove(0))
    }
}

fn check_finite<T: Scalar>(g: &Graph<T>, v: Var, what: &'static str) -> Result<()> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Training(format!("non-finite activations in {what}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandscheme::build_scheme;
    use ndarray::{Array3, IxDyn};
    use num_complex::Complex;
    use rand::{Rng, SeedableRng};

    fn toy_scheme() -> BandScheme {
        BandScheme::from_widths("toy", &[7, 10]).unwrap()
    }

    fn frame() -> FrameParams {
        FrameParams::new(32, 8)
    }

    fn random_spec(channels: usize, frames: usize, seed: u64) -> ComplexSpectrogram<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexSpectrogram {
            values: Array3::from_shape_fn((channels, 17, frames), |_| Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))),
            frame: frame(),
            sample_rate: 44_100,
        }
    }

    fn model(cfg: ModelConfig) -> BandSplitModel<f64> {
        BandSplitModel::new(cfg, toy_scheme(), frame(), 7).unwrap()
    }

    #[test]
    fn latent_shape_contract() {
        let m = model(ModelConfig::tiny());
        let spec = random_spec(2, 10, 1);
        let mut g = Graph::new();
        let x = g.constant(m.input_tensor(std::slice::from_ref(&spec)).unwrap());
        let latent = m.forward_bandsplit(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(latent), &[2, 2, 10, 8]);

        let naive = model(ModelConfig {
            stereo_mode: StereoMode::NaiveStereo,
            ..ModelConfig::tiny()
        });
        let mut g = Graph::new();
        let x = g.constant(naive.input_tensor(std::slice::from_ref(&spec)).unwrap());
        let latent = naive.forward_bandsplit(&mut g, x, 2).unwrap();
        assert_eq!(g.shape(latent), &[1, 2, 10, 8]);
        let mask = naive.forward_masker(&mut g, latent, 2).unwrap();
        assert_eq!(g.shape(mask), &[2, 17, 10, 2]);
    }

    #[test]
    fn default_scheme_latent_shape() {
        let scheme = build_scheme("vocals", 2048, 44_100, None).unwrap();
        let k = scheme.n_bands();
        let cfg = ModelConfig {
            depth: 1,
            ..ModelConfig::base()
        };
        let m = BandSplitModel::<f32>::new(cfg, scheme, FrameParams::default(), 0).unwrap();
        let spec = ComplexSpectrogram::<f32>::zeros(1, 259, FrameParams::default(), 44_100);
        let mut g = Graph::new();
        let x = g.constant(m.input_tensor(std::slice::from_ref(&spec)).unwrap());
        let latent = m.forward_bandsplit(&mut g, x, 1).unwrap();
        assert_eq!(g.shape(latent), &[1, k, 259, 64]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_latent() {
        let mut m = model(ModelConfig::tiny());
        for k in 0..2 {
            m.params_mut().by_name_mut(&format!("band_split.{k}.proj.b")).unwrap().fill(0.0);
        }
        let spec = ComplexSpectrogram::zeros(1, 6, frame(), 44_100);
        let mut g = Graph::new();
        let x = g.constant(m.input_tensor(std::slice::from_ref(&spec)).unwrap());
        let latent = m.forward_bandsplit(&mut g, x, 1).unwrap();
        assert!(g.value(latent).iter().all(|&v| v == 0.0));
    }

    fn random_latent(g: &mut Graph<f64>, shape: &[usize], seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        g.constant(ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn residual_blocks_are_identity_with_zero_output_projection() {
        for kind in [BlockKind::Recurrent, BlockKind::DilatedConv] {
            let mut m = model(ModelConfig {
                block_kind: kind,
                heads: 2,
                attention: Some(AttentionConfig { heads: 2, encoding_dim: 4 }),
                ..ModelConfig::tiny()
            });
            m.zero_block_outputs();
            let mut g = Graph::new();
            let x = random_latent(&mut g, &[2, 2, 10, 8], 3);
            let y = m.forward_blocks(&mut g, x, 2).unwrap();
            assert_eq!(g.value(x), g.value(y));
        }
    }

    #[test]
    fn blocks_preserve_shape() {
        let m = model(ModelConfig::tiny());
        let mut g = Graph::new();
        let x = random_latent(&mut g, &[8, 3, 10, 8], 4);
        for axis in [BlockAxis::Time, BlockAxis::Band] {
            let y = m.forward_block(&mut g, x, 0, axis).unwrap();
            assert_eq!(g.shape(y), &[8, 3, 10, 8]);
        }
        let conv = model(ModelConfig {
            latent_dim: 4,
            block_kind: BlockKind::DilatedConv,
            ..ModelConfig::tiny()
        });
        let x = random_latent(&mut g, &[4, 2, 16, 4], 5);
        let y = conv.forward_dilated_block(&mut g, x, 0, BlockAxis::Time).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 16, 4]);
    }

    #[test]
    fn multi_head_width_and_bijection() {
        let m = model(ModelConfig {
            heads: 2,
            ..ModelConfig::tiny()
        });
        let w_ih = m.params().by_name("blocks.0.time.lstm_fwd.w_ih").unwrap();
        assert_eq!(w_ih.shape(), &[4, 4 * 8]);
        let mut g = Graph::new();
        let x = random_latent(&mut g, &[3, 5, 8], 6);
        let s = m.split_heads(&mut g, x).unwrap();
        assert_eq!(g.shape(s), &[6, 5, 4]);
        let back = m.merge_heads(&mut g, s).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn dilated_receptive_field_by_impulse() {
        let cfg = ModelConfig {
            latent_dim: 4,
            block_kind: BlockKind::DilatedConv,
            dilations: vec![1, 2, 4],
            ..ModelConfig::tiny()
        };
        assert_eq!(cfg.receptive_field(), 15);
        let mut m = model(cfg);
        // positive weights and zero biases so no contribution can cancel
        let names: Vec<String> = m.params().ids().map(|id| m.params().name(id).to_string()).collect();
        for name in names.iter().filter(|n| n.starts_with("blocks.0.time.conv")) {
            let t = m.params_mut().by_name_mut(name).unwrap();
            if name.ends_with(".w") {
                t.fill(0.1);
            } else if name.ends_with(".b") {
                t.fill(0.0);
            }
        }
        let Residual::Dilated { convs, .. } = m.layout.blocks[0].time.clone() else { unreachable!() };
        let mut impulse = ArrayD::zeros(IxDyn(&[1, 41, 4]));
        impulse[[0, 20, 0]] = 1.0;
        let mut g = Graph::new();
        let x = g.constant(impulse);
        let y = m.dilated_stack(&mut g, x, &convs).unwrap();
        let support = (0..41).filter(|&l| g.value(y)[[0, l, 0]].abs() > 0.0).count();
        assert_eq!(support, 15);
    }

    #[test]
    fn attention_rows_are_normalized() {
        for (heads, enc) in [(1, 8), (2, 16)] {
            let m = model(ModelConfig {
                attention: Some(AttentionConfig { heads, encoding_dim: enc }),
                ..ModelConfig::tiny()
            });
            let mut g = Graph::new();
            let x = random_latent(&mut g, &[2, 2, 6, 8], 8);
            for axis in [BlockAxis::Time, BlockAxis::Band] {
                let (y, weights) = m.forward_attention_with_weights(&mut g, x, 0, axis).unwrap();
                assert_eq!(g.shape(y), &[2, 2, 6, 8]);
                assert_eq!(weights.len(), heads);
                for w in weights {
                    for row in g.value(w).lanes(Axis(2)) {
                        assert!((row.sum() - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
        assert!(ModelConfig {
            attention: Some(AttentionConfig { heads: 3, encoding_dim: 4 }),
            ..ModelConfig::tiny()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn tac_symmetry_and_equivariance() {
        for act in [Activation::Tanh, Activation::Prelu] {
            let m = model(ModelConfig {
                stereo_mode: StereoMode::Tac,
                tac_activation: act,
                ..ModelConfig::tiny()
            });
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let left = ArrayD::from_shape_fn(IxDyn(&[1, 2, 5, 8]), |_| rng.gen_range(-1.0..1.0));
            let right = ArrayD::from_shape_fn(IxDyn(&[1, 2, 5, 8]), |_| rng.gen_range(-1.0..1.0));
            let cat = |a: &ArrayD<f64>, b: &ArrayD<f64>| concatenate(Axis(0), &[a.view(), b.view()]).unwrap();

            let mut g = Graph::new();
            let same = g.constant(cat(&left, &left));
            let y = m.forward_tac(&mut g, same, 0, 2).unwrap();
            let v = g.value(y);
            assert_eq!(v.index_axis(Axis(0), 0), v.index_axis(Axis(0), 1));

            let lr = g.constant(cat(&left, &right));
            let rl = g.constant(cat(&right, &left));
            let y1 = m.forward_tac(&mut g, lr, 0, 2).unwrap();
            let y2 = m.forward_tac(&mut g, rl, 0, 2).unwrap();
            let (a, b) = (g.value(y1), g.value(y2));
            let err = (&a.index_axis(Axis(0), 0) - &b.index_axis(Axis(0), 1))
                .iter()
                .chain((&a.index_axis(Axis(0), 1) - &b.index_axis(Axis(0), 0)).iter())
                .fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(err < 1e-12);

            // output of one channel depends on the other
            let y3 = m.forward_tac(&mut g, same, 0, 2).unwrap();
            assert!((&g.value(y1).index_axis(Axis(0), 0) - &g.value(y3).index_axis(Axis(0), 0)).iter().any(|x| x.abs() > 1e-9));

            let single = g.constant(left.clone());
            let y = m.forward_tac(&mut g, single, 0, 1).unwrap();
            assert_eq!(g.value(y), &left);
        }
    }

    #[test]
    fn masker_hidden_width_follows_factor() {
        for mu in [4, 2] {
            let m = model(ModelConfig {
                masker_factor: mu,
                ..ModelConfig::tiny()
            });
            assert_eq!(m.params().by_name("masker.0.fc1.w").unwrap().shape(), &[8, mu * 8]);
        }
        let big = model(ModelConfig::tiny()).count_params();
        let small = model(ModelConfig {
            masker_factor: 2,
            ..ModelConfig::tiny()
        })
        .count_params();
        assert!(small < big);
    }

    #[test]
    fn forced_masks() {
        let m = model(ModelConfig::tiny());
        let spec = random_spec(2, 10, 10);
        let x = Arc::new(m.input_tensor(std::slice::from_ref(&spec)).unwrap());
        let mut g = Graph::new();
        let mut ones = ArrayD::zeros(x.raw_dim());
        ones.slice_axis_mut(Axis(3), ndarray::Slice::from(0..1)).fill(1.0);
        let ones = g.constant(ones);
        let y = g.complex_mul_const(ones, x.clone()).unwrap();
        assert_eq!(g.value(y), &*x);
        let zeros = g.constant(ArrayD::zeros(x.raw_dim()));
        let y = g.complex_mul_const(zeros, x.clone()).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masking_locality() {
        let m = model(ModelConfig::tiny());
        let mut spec = random_spec(1, 10, 11);
        for f in 0..7 {
            for t in 0..10 {
                spec.values[[0, f, t]] = Complex::new(0.0, 0.0);
            }
        }
        let out = m.separate(&spec).unwrap();
        assert!((0..7).all(|f| (0..10).all(|t| out.values[[0, f, t]] == Complex::new(0.0, 0.0))));
        assert!((7..17).any(|f| (0..10).any(|t| out.values[[0, f, t]].norm() > 0.0)));
    }

    #[test]
    fn analytic_count_matches_stored_weights() {
        let scheme = toy_scheme();
        let variants = [
            ModelConfig::tiny(),
            ModelConfig { masker_factor: 1, ..ModelConfig::tiny() },
            ModelConfig { stereo_mode: StereoMode::NaiveStereo, ..ModelConfig::tiny() },
            ModelConfig { stereo_mode: StereoMode::Tac, tac_activation: Activation::Prelu, ..ModelConfig::tiny() },
            ModelConfig { stereo_mode: StereoMode::Tac, ..ModelConfig::tiny() },
            ModelConfig { block_kind: BlockKind::DilatedConv, heads: 2, ..ModelConfig::tiny() },
            ModelConfig { attention: Some(AttentionConfig { heads: 2, encoding_dim: 3 }), depth: 2, ..ModelConfig::tiny() },
        ];
        for cfg in variants {
            let m = BandSplitModel::<f64>::new(cfg.clone(), scheme.clone(), frame(), 0).unwrap();
            assert_eq!(count_params(&cfg, &scheme), m.count_params(), "{cfg:?}");
        }
    }

    #[test]
    fn toy_count_closed_form() {
        // N=4, R=1, one band of width 2 (F=2), μ=1, single head
        let cfg = ModelConfig {
            latent_dim: 4,
            masker_factor: 1,
            ..ModelConfig::tiny()
        };
        let scheme = BandScheme::from_widths("toy", &[2]).unwrap();
        let band_split = 2 * 4 + (4 * 4 + 4);
        let lstm = 4 * 32 + 8 * 32 + 32;
        let residual = 2 * 4 + 2 * lstm + (16 * 4 + 4);
        let masker = 2 * 4 + (4 * 4 + 4) + (4 * 4 + 4) + (4 * 8 + 8);
        assert_eq!(count_params(&cfg, &scheme), band_split + 2 * residual + masker);
        let m = BandSplitModel::<f64>::new(cfg, scheme, FrameParams::new(2, 1), 0).unwrap();
        assert_eq!(m.count_params(), band_split + 2 * residual + masker);
    }

    #[test]
    fn rejects_mismatched_input() {
        let m = model(ModelConfig::tiny());
        let bad = ComplexSpectrogram::<f64>::zeros(1, 4, FrameParams::new(16, 4), 44_100);
        assert!(m.separate(&bad).is_err());
        let naive = model(ModelConfig {
            stereo_mode: StereoMode::NaiveStereo,
            ..ModelConfig::tiny()
        });
        assert!(naive.separate(&random_spec(1, 4, 0)).is_err());
        assert!(ModelConfig { heads: 3, ..ModelConfig::tiny() }.validate().is_err());
    }
}
