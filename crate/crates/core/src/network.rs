//! Semantic encoder and latent-conditioned noise-prediction U-Net.
//!
//! The down path expands 1 channel to `base_channels`, then runs
//! `layers_per_resolution` residual blocks per resolution. Channel changes
//! happen at the stride-2 downsampling convolutions, so every tensor stored
//! for a skip connection at a given resolution has that resolution's channel
//! count. The middle block is a residual block, `middle_attention_layers`
//! single-head self-attention layers and another residual block. The up path
//! mirrors the down path with one extra block per resolution, each block
//! concatenating one stored skip tensor of equal channel count.
//!
//! Every body convolution is followed by group normalization and SiLU. Inside
//! the conditioned residual blocks the first normalization is modulated by a
//! scale/shift projected from the time embedding plus one projected from the
//! semantic latent.
//!
//! Weights use uniform fan-in initialization. The affine of each residual
//! block's last normalization and each attention output projection start at
//! zero, so every residual branch initially contributes nothing.
//!
//! The semantic encoder is a separately parameterized copy of the down path
//! (without skip storage) and the middle block, followed by global average
//! pooling and a linear map to `latent_dim`.
//!
//! # Parameter names
//!
//! Parameters are addressed by stable dotted names, for example
//! `unet.down.1.block.0.conv1.weight`, `unet.mid.attn.2.qkv.weight`,
//! `encoder.proj.bias` or `time_embed.linear1.weight`. Convolution weights are
//! `[out, in, k, k]`, linear weights are `[out, in]`.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::Module;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Pixels per side of the square single-channel input.
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub layers_per_resolution: usize,
    pub middle_attention_layers: usize,
    pub latent_dim: usize,
    pub time_embed_dim: usize,
    pub group_norm_groups: usize,
    /// Largest valid diffusion step `T`.
    pub diffusion_steps: usize,
}

impl ModelConfig {
    /// 64x64 inputs, 32 -> 64 -> 128 channels, three blocks per resolution.
    pub fn full() -> Self {
        Self {
            image_size: 64,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            layers_per_resolution: 3,
            middle_attention_layers: 3,
            latent_dim: 128,
            time_embed_dim: 128,
            group_norm_groups: 8,
            diffusion_steps: 1000,
        }
    }

    /// Desk-scale model for 32x32 inputs.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            layers_per_resolution: 1,
            middle_attention_layers: 1,
            latent_dim: 32,
            time_embed_dim: 32,
            group_norm_groups: 4,
            diffusion_steps: 200,
        }
    }

    pub fn channels(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::ModelConfig(msg));
        if self.image_size == 0 || self.base_channels == 0 || self.latent_dim == 0 {
            return fail("image_size, base_channels and latent_dim must be positive".into());
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return fail("channel_multipliers must be a non-empty list of positive integers".into());
        }
        if self.layers_per_resolution == 0 {
            return fail("layers_per_resolution must be at least 1".into());
        }
        if self.latent_dim >= self.image_size * self.image_size {
            return fail(format!(
                "latent_dim {} must be smaller than the pixel count {}",
                self.latent_dim,
                self.image_size * self.image_size
            ));
        }
        let factor = 1usize << (self.channel_multipliers.len() - 1);
        if self.image_size % factor != 0 {
            return fail(format!(
                "image_size {} not divisible by {factor}",
                self.image_size
            ));
        }
        if self.group_norm_groups == 0 {
            return fail("group_norm_groups must be positive".into());
        }
        for c in self.channels() {
            if c % self.group_norm_groups != 0 {
                return fail(format!(
                    "{} groups do not divide {c} channels",
                    self.group_norm_groups
                ));
            }
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return fail("time_embed_dim must be even and at least 2".into());
        }
        if self.diffusion_steps == 0 {
            return fail("diffusion_steps must be at least 1".into());
        }
        Ok(())
    }
}

/// Exact number of trainable scalars of a model built from `config`.
pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
    Ok(DenoiserModel::new(config, 0, DType::F32, &Device::Cpu)?.parameter_count())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LayerKind {
    Conv { kernel: usize, stride: usize },
    Linear,
    Attention,
}

/// One entry of the architecture audit trail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Group normalization followed by SiLU is applied to this layer's output.
    pub norm_act: bool,
}

enum Source<'a> {
    Random(ChaCha8Rng),
    Tensors(&'a BTreeMap<String, Tensor>),
}

struct Builder<'a> {
    source: Source<'a>,
    dtype: DType,
    device: Device,
    trainable: bool,
    params: BTreeMap<String, Tensor>,
    vars: BTreeMap<String, Var>,
    layers: Vec<LayerInfo>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Ones,
    Zeros,
}

impl Builder<'_> {
    fn param(&mut self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        let tensor = match &mut self.source {
            Source::Random(rng) => {
                let values: Vec<f64> = match init {
                    Init::FanIn(fan_in) => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                    Init::Ones => vec![1.0; numel],
                    Init::Zeros => vec![0.0; numel],
                };
                Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?
            }
            Source::Tensors(map) => {
                let t = map
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
                if t.dims() != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(self.dtype)?.to_device(&self.device)?
            }
        };
        let tensor = if self.trainable {
            let var = Var::from_tensor(&tensor)?;
            let t = var.as_tensor().clone();
            self.vars.insert(name.clone(), var);
            t
        } else {
            tensor.detach()
        };
        self.params.insert(name, tensor.clone());
        Ok(tensor)
    }

    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        norm_act: bool,
    ) -> Result<Conv2d> {
        let fan_in = cin * kernel * kernel;
        let weight = self.param(
            format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            Init::FanIn(fan_in),
        )?;
        let bias = self.param(format!("{name}.bias"), &[cout], Init::FanIn(fan_in))?;
        self.layers.push(LayerInfo {
            name: name.to_string(),
            kind: LayerKind::Conv { kernel, stride },
            in_channels: cin,
            out_channels: cout,
            norm_act,
        });
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize) -> Result<Linear> {
        self.linear_init(name, cin, cout, Init::FanIn(cin))
    }

    fn linear_init(&mut self, name: &str, cin: usize, cout: usize, init: Init) -> Result<Linear> {
        let weight = self.param(format!("{name}.weight"), &[cout, cin], init)?;
        let bias = self.param(format!("{name}.bias"), &[cout], init)?;
        self.layers.push(LayerInfo {
            name: name.to_string(),
            kind: LayerKind::Linear,
            in_channels: cin,
            out_channels: cout,
            norm_act: false,
        });
        Ok(Linear { weight, bias })
    }

    fn group_norm(&mut self, name: &str, channels: usize, groups: usize) -> Result<candle_nn::GroupNorm> {
        self.group_norm_init(name, channels, groups, Init::Ones)
    }

    fn group_norm_init(
        &mut self,
        name: &str,
        channels: usize,
        groups: usize,
        scale: Init,
    ) -> Result<candle_nn::GroupNorm> {
        let weight = self.param(format!("{name}.weight"), &[channels], scale)?;
        let bias = self.param(format!("{name}.bias"), &[channels], Init::Zeros)?;
        Ok(candle_nn::GroupNorm::new(
            weight,
            bias,
            channels,
            groups,
            GROUP_NORM_EPS,
        )?)
    }

    fn conv_block(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        groups: usize,
    ) -> Result<ConvBlock> {
        let conv = self.conv(&format!("{name}.conv"), cin, cout, 3, stride, true)?;
        let norm = self.group_norm(&format!("{name}.norm"), cout, groups)?;
        Ok(ConvBlock { conv, norm })
    }

    fn res_block(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        cfg: &ModelConfig,
        conditioned: bool,
    ) -> Result<ResBlock> {
        let groups = cfg.group_norm_groups;
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, true)?;
        let norm1 = self.group_norm(&format!("{name}.norm1"), cout, groups)?;
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, true)?;
        // zero affine on the last norm: the branch starts as exactly zero
        let norm2 = self.group_norm_init(&format!("{name}.norm2"), cout, groups, Init::Zeros)?;
        let skip = if cin != cout {
            Some(self.conv(&format!("{name}.skip"), cin, cout, 1, 1, false)?)
        } else {
            None
        };
        let cond = if conditioned {
            Some((
                self.linear(&format!("{name}.time_proj"), cfg.time_embed_dim, 2 * cout)?,
                self.linear(&format!("{name}.latent_proj"), cfg.latent_dim, 2 * cout)?,
            ))
        } else {
            None
        };
        Ok(ResBlock {
            conv1,
            norm1,
            conv2,
            norm2,
            skip,
            cond,
        })
    }

    fn attention(&mut self, name: &str, channels: usize, groups: usize) -> Result<Attention> {
        let norm = self.group_norm(&format!("{name}.norm"), channels, groups)?;
        let qkv = self.linear(&format!("{name}.qkv"), channels, 3 * channels)?;
        let proj = self.linear_init(&format!("{name}.proj"), channels, channels, Init::Zeros)?;
        // the linear records are kept, the attention record marks the block
        self.layers.push(LayerInfo {
            name: name.to_string(),
            kind: LayerKind::Attention,
            in_channels: channels,
            out_channels: channels,
            norm_act: false,
        });
        Ok(Attention {
            norm,
            qkv,
            proj,
            channels,
        })
    }
}

#[derive(Debug, Clone)]
struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    norm: candle_nn::GroupNorm,
}

impl ConvBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.silu()?)
    }
}

/// Time and latent conditioning shared by every block of one forward pass.
struct Conditioning<'a> {
    time: &'a Tensor,
    latent: &'a Tensor,
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    norm1: candle_nn::GroupNorm,
    conv2: Conv2d,
    norm2: candle_nn::GroupNorm,
    skip: Option<Conv2d>,
    cond: Option<(Linear, Linear)>,
}

impl ResBlock {
    fn forward(&self, x: &Tensor, cond: Option<&Conditioning>) -> Result<Tensor> {
        let mut h = self.norm1.forward(&self.conv1.forward(x)?)?;
        if let (Some((time_proj, latent_proj)), Some(c)) = (&self.cond, cond) {
            let st = time_proj.forward(c.time)?;
            let sz = latent_proj.forward(c.latent)?;
            let ss = (st + sz)?;
            let channels = ss.dim(1)? / 2;
            let scale = ss.narrow(1, 0, channels)?.unsqueeze(2)?.unsqueeze(3)?;
            let shift = ss.narrow(1, channels, channels)?.unsqueeze(2)?.unsqueeze(3)?;
            h = h.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?;
        }
        let h = h.silu()?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?.silu()?;
        let residual = match &self.skip {
            Some(skip) => skip.forward(x)?,
            None => x.clone(),
        };
        Ok((h + residual)?)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    norm: candle_nn::GroupNorm,
    qkv: Linear,
    proj: Linear,
    channels: usize,
}

impl Attention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let qkv = self.qkv.forward(&tokens)?;
        let q = qkv.narrow(2, 0, c)?.contiguous()?;
        let k = qkv.narrow(2, c, c)?.contiguous()?;
        let v = qkv.narrow(2, 2 * c, c)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (self.channels as f64).sqrt())?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = self.proj.forward(&weights.matmul(&v)?)?;
        let out = out.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}

#[derive(Debug, Clone)]
struct Middle {
    first: ResBlock,
    attention: Vec<Attention>,
    last: ResBlock,
}

impl Middle {
    fn build(b: &mut Builder, prefix: &str, cfg: &ModelConfig, conditioned: bool) -> Result<Self> {
        let c = *cfg.channels().last().expect("validated");
        let first = b.res_block(&format!("{prefix}.mid.block.0"), c, c, cfg, conditioned)?;
        let attention = (0..cfg.middle_attention_layers)
            .map(|i| b.attention(&format!("{prefix}.mid.attn.{i}"), c, cfg.group_norm_groups))
            .collect::<Result<Vec<_>>>()?;
        let last = b.res_block(&format!("{prefix}.mid.block.1"), c, c, cfg, conditioned)?;
        Ok(Self {
            first,
            attention,
            last,
        })
    }

    fn forward(&self, x: &Tensor, cond: Option<&Conditioning>) -> Result<Tensor> {
        let mut h = self.first.forward(x, cond)?;
        for attn in &self.attention {
            h = attn.forward(&h)?;
        }
        self.last.forward(&h, cond)
    }
}

#[derive(Debug, Clone)]
struct DownLevel {
    downsample: Option<ConvBlock>,
    blocks: Vec<ResBlock>,
}

fn build_down_path(
    b: &mut Builder,
    prefix: &str,
    cfg: &ModelConfig,
    conditioned: bool,
) -> Result<(ConvBlock, Vec<DownLevel>)> {
    let channels = cfg.channels();
    let groups = cfg.group_norm_groups;
    let conv_in = b.conv_block(&format!("{prefix}.conv_in"), 1, cfg.base_channels, 1, groups)?;
    let mut cin = cfg.base_channels;
    let mut levels = Vec::with_capacity(channels.len());
    for (l, &c) in channels.iter().enumerate() {
        let downsample = if l > 0 {
            Some(b.conv_block(&format!("{prefix}.down.{l}.downsample"), cin, c, 2, groups)?)
        } else {
            None
        };
        let blocks = (0..cfg.layers_per_resolution)
            .map(|i| b.res_block(&format!("{prefix}.down.{l}.block.{i}"), c, c, cfg, conditioned))
            .collect::<Result<Vec<_>>>()?;
        levels.push(DownLevel { downsample, blocks });
        cin = c;
    }
    Ok((conv_in, levels))
}

#[derive(Debug, Clone)]
struct SemanticEncoder {
    conv_in: ConvBlock,
    levels: Vec<DownLevel>,
    middle: Middle,
    proj: Linear,
}

impl SemanticEncoder {
    fn build(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let (conv_in, levels) = build_down_path(b, "encoder", cfg, false)?;
        let middle = Middle::build(b, "encoder", cfg, false)?;
        let c = *cfg.channels().last().expect("validated");
        let proj = b.linear("encoder.proj", c, cfg.latent_dim)?;
        Ok(Self {
            conv_in,
            levels,
            middle,
            proj,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(x)?;
        for level in &self.levels {
            if let Some(ds) = &level.downsample {
                h = ds.forward(&h)?;
            }
            for block in &level.blocks {
                h = block.forward(&h, None)?;
            }
        }
        let h = self.middle.forward(&h, None)?;
        self.proj.forward(&h.mean((2, 3))?)
    }
}

#[derive(Debug, Clone)]
struct UpLevel {
    blocks: Vec<ResBlock>,
    upsample: Option<ConvBlock>,
}

#[derive(Debug, Clone)]
struct UNet {
    conv_in: ConvBlock,
    down: Vec<DownLevel>,
    middle: Middle,
    up: Vec<UpLevel>,
    conv_out: Conv2d,
}

impl UNet {
    fn build(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let (conv_in, down) = build_down_path(b, "unet", cfg, true)?;
        let middle = Middle::build(b, "unet", cfg, true)?;
        let channels = cfg.channels();
        let mut up = Vec::with_capacity(channels.len());
        for l in (0..channels.len()).rev() {
            let c = channels[l];
            let blocks = (0..=cfg.layers_per_resolution)
                .map(|i| b.res_block(&format!("unet.up.{l}.block.{i}"), 2 * c, c, cfg, true))
                .collect::<Result<Vec<_>>>()?;
            let upsample = if l > 0 {
                Some(b.conv_block(
                    &format!("unet.up.{l}.upsample"),
                    c,
                    channels[l - 1],
                    1,
                    cfg.group_norm_groups,
                )?)
            } else {
                None
            };
            up.push(UpLevel { blocks, upsample });
        }
        let conv_out = b.conv("unet.conv_out", cfg.base_channels, 1, 3, 1, false)?;
        Ok(Self {
            conv_in,
            down,
            middle,
            up,
            conv_out,
        })
    }

    fn forward(&self, x: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        let mut h = self.conv_in.forward(x)?;
        let mut skips = vec![h.clone()];
        for level in &self.down {
            if let Some(ds) = &level.downsample {
                h = ds.forward(&h)?;
                skips.push(h.clone());
            }
            for block in &level.blocks {
                h = block.forward(&h, Some(cond))?;
                skips.push(h.clone());
            }
        }
        h = self.middle.forward(&h, Some(cond))?;
        for level in &self.up {
            for block in &level.blocks {
                let skip = skips.pop().expect("one skip per up block");
                h = block.forward(&Tensor::cat(&[&h, &skip], 1)?, Some(cond))?;
            }
            if let Some(us) = &level.upsample {
                let (_, _, hh, ww) = h.dims4()?;
                h = us.forward(&h.upsample_nearest2d(2 * hh, 2 * ww)?)?;
            }
        }
        debug_assert!(skips.is_empty());
        self.conv_out.forward(&h)
    }
}

#[derive(Debug, Clone)]
struct TimeEmbedding {
    dim: usize,
    linear1: Linear,
    linear2: Linear,
}

impl TimeEmbedding {
    fn forward(&self, steps: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let sinusoid = timestep_embedding(steps, self.dim, device)?.to_dtype(dtype)?;
        let h = self.linear1.forward(&sinusoid)?.silu()?;
        self.linear2.forward(&h)
    }
}

/// Sinusoidal embedding `[sin(t f_0) .. sin(t f_{h-1}), cos(t f_0) .. cos(t f_{h-1})]`
/// with `f_i = 10000^(-i/h)` and `h = dim / 2`, computed in `f64`.
pub fn timestep_embedding(steps: &[usize], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let angles: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        data.extend(angles.iter().map(|a| a.sin()));
        data.extend(angles.iter().map(|a| a.cos()));
    }
    Ok(Tensor::from_vec(data, (steps.len(), dim), device)?)
}

/// The trainable object: semantic encoder plus conditioned U-Net.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    config: ModelConfig,
    dtype: DType,
    device: Device,
    time_embed: TimeEmbedding,
    unet: UNet,
    encoder: SemanticEncoder,
    params: BTreeMap<String, Tensor>,
    vars: BTreeMap<String, Var>,
    layers: Vec<LayerInfo>,
}

impl DenoiserModel {
    /// Freshly initialized trainable model; initialization is a pure function of `seed`.
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::build(
            config,
            Source::Random(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device,
            true,
        )
    }

    /// Rebuild a model from named parameter tensors (e.g. a checkpoint).
    pub fn from_parameters(
        config: &ModelConfig,
        params: &BTreeMap<String, Tensor>,
        dtype: DType,
        device: &Device,
        trainable: bool,
    ) -> Result<Self> {
        let model = Self::build(config, Source::Tensors(params), dtype, device, trainable)?;
        if let Some(extra) = params.keys().find(|k| !model.params.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(model)
    }

    fn build(
        config: &ModelConfig,
        source: Source,
        dtype: DType,
        device: &Device,
        trainable: bool,
    ) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            source,
            dtype,
            device: device.clone(),
            trainable,
            params: BTreeMap::new(),
            vars: BTreeMap::new(),
            layers: Vec::new(),
        };
        let time_embed = TimeEmbedding {
            dim: config.time_embed_dim,
            linear1: b.linear("time_embed.linear1", config.time_embed_dim, config.time_embed_dim)?,
            linear2: b.linear("time_embed.linear2", config.time_embed_dim, config.time_embed_dim)?,
        };
        let unet = UNet::build(&mut b, config)?;
        let encoder = SemanticEncoder::build(&mut b, config)?;
        Ok(Self {
            config: config.clone(),
            dtype,
            device: device.clone(),
            time_embed,
            unet,
            encoder,
            params: b.params,
            vars: b.vars,
            layers: b.layers,
        })
    }

    /// Immutable copy with parameters detached from the autograd graph.
    pub fn snapshot(&self) -> Result<Self> {
        let copied = self
            .params
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.detach().copy()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::from_parameters(&self.config, &copied, self.dtype, &self.device, false)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// All parameters by canonical name.
    pub fn parameters(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// Trainable variables by canonical name; empty for snapshots.
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|t| t.elem_count()).sum()
    }

    /// Convolution, linear and attention layers in construction order.
    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    fn check_images(&self, x: &Tensor) -> Result<usize> {
        let s = self.config.image_size;
        match x.dims() {
            [b, 1, h, w] if *h == s && *w == s => Ok(*b),
            dims => Err(Error::Shape(format!(
                "expected [batch, 1, {s}, {s}] images, got {dims:?}"
            ))),
        }
    }

    /// Semantic latents `[batch, latent_dim]` for clean images `[batch, 1, S, S]`.
    pub fn encode_semantic(&self, x0: &Tensor) -> Result<Tensor> {
        self.check_images(x0)?;
        self.encoder.forward(&x0.to_dtype(self.dtype)?)
    }

    /// Noise prediction for noisy images at per-sample steps, conditioned on latents.
    pub fn predict_noise(&self, x_t: &Tensor, steps: &[usize], z_sem: &Tensor) -> Result<Tensor> {
        let batch = self.check_images(x_t)?;
        if steps.len() != batch {
            return Err(Error::Shape(format!(
                "{} steps for a batch of {batch}",
                steps.len()
            )));
        }
        if z_sem.dims() != [batch, self.config.latent_dim] {
            return Err(Error::Shape(format!(
                "expected latents [{batch}, {}], got {:?}",
                self.config.latent_dim,
                z_sem.dims()
            )));
        }
        let max = self.config.diffusion_steps;
        if let Some(&t) = steps.iter().find(|&&t| t == 0 || t > max) {
            return Err(Error::StepOutOfRange {
                step: t,
                min: 1,
                max,
            });
        }
        let time = self
            .time_embed
            .forward(steps, self.dtype, &self.device)?
            .silu()?;
        let latent = z_sem.to_dtype(self.dtype)?;
        let cond = Conditioning {
            time: &time,
            latent: &latent,
        };
        self.unet.forward(&x_t.to_dtype(self.dtype)?, &cond)
    }
}

/// Anything that predicts the added noise from `(x_t, t, z_sem)`.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, steps: &[usize], z_sem: &Tensor) -> Result<Tensor>;
}

impl NoisePredictor for DenoiserModel {
    fn predict_noise(&self, x_t: &Tensor, steps: &[usize], z_sem: &Tensor) -> Result<Tensor> {
        DenoiserModel::predict_noise(self, x_t, steps, z_sem)
    }
}
