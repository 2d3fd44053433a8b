//! Miniature two-level latent U-Net whose blocks carry the three adapters.

use alloc::format;

use super::adapters::{dual_cross_attention, CrossAttention, FAdapter, TAdapter, VAdapter};
use crate::autograd::{Ctx, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, LayerNorm, Linear, Mlp2, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng64;

pub const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub latent_hw: usize,
    /// Width of the text condition `c_t` after the bridge.
    pub d_text: usize,
    /// Width of the visual condition tokens `c_v`.
    pub d_visual: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub reduction: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_channels: 32,
            latent_hw: 32,
            d_text: 64,
            d_visual: 64,
            groups: 8,
            time_dim: 64,
            reduction: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if c % self.groups != 0 || c % self.reduction != 0 {
            return Err(Error::validation(format!("base_channels {c} must divide by groups and reduction")));
        }
        if self.latent_hw % 2 != 0 || self.latent_hw == 0 {
            return Err(Error::validation("latent size must be even"));
        }
        Ok(())
    }
}

/// Which adapters take part in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterFlags {
    pub v: bool,
    pub t: bool,
    pub f: bool,
}

impl AdapterFlags {
    pub const ALL: Self = Self { v: true, t: true, f: true };
    pub const NONE: Self = Self { v: false, t: false, f: false };
}

pub fn is_adapter_param(name: &str) -> bool {
    name.contains("_adapter.")
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut Rng64) -> Self {
        Self {
            w: store.add_xavier(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k, cout * k * k, rng),
            b: store.add_zeros(format!("{name}.bias"), &[cout]),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Var {
        let g = cx.g;
        g.add_channel(g.conv2d(x, cx.p(self.w), self.stride, self.pad), cx.p(self.b))
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            groups,
            gamma: store.add_full(format!("{name}.gamma"), &[channels], 1.0),
            beta: store.add_zeros(format!("{name}.beta"), &[channels]),
        }
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Var {
        let g = cx.g;
        let n = g.group_norm(x, self.groups, GN_EPS);
        g.add_channel(g.mul_channel(n, cx.p(self.gamma)), cx.p(self.beta))
    }
}

/// Spatial residual conv stage (frozen) with the timestep embedding added
/// after the first convolution.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub time: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn forward(&self, cx: &Ctx, x: Var, t_embed: Var) -> Var {
        let g = cx.g;
        let h = self.conv1.forward(cx, g.silu(self.norm1.forward(cx, x)));
        let tb = g.reshape(self.time.forward(cx, g.silu(t_embed)), &[self.time.d_out]);
        let h = g.add_channel(h, tb);
        let h = self.conv2.forward(cx, g.silu(self.norm2.forward(cx, h)));
        g.add(x, h)
    }
}

/// Conv stage → T-Adapter → self-attention → dual cross-attention → FFN
/// with the parallel F-Adapter. Everything except the adapters is frozen.
#[derive(Debug, Clone)]
pub struct UNetBlock {
    pub channels: usize,
    pub res: ResBlock,
    pub t_adapter: TAdapter,
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross: CrossAttention,
    pub v_adapter: VAdapter,
    pub ln3: LayerNorm,
    pub ffn: Mlp2,
    pub f_adapter: FAdapter,
}

impl UNetBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: &UNetConfig, rng: &mut Rng64) -> Self {
        let c = channels;
        let n = |s: &str| format!("{name}.{s}");
        Self {
            channels: c,
            res: ResBlock {
                norm1: GroupNorm::new(store, &n("res.norm1"), c, cfg.groups),
                conv1: Conv2d::new(store, &n("res.conv1"), c, c, 3, 1, rng),
                time: Linear::new(store, &n("res.time"), cfg.time_dim, c, true, rng),
                norm2: GroupNorm::new(store, &n("res.norm2"), c, cfg.groups),
                conv2: Conv2d::new(store, &n("res.conv2"), c, c, 3, 1, rng),
            },
            t_adapter: TAdapter::new(store, &n("t_adapter"), c, cfg.reduction, rng),
            ln1: LayerNorm::new(store, &n("ln1"), c),
            self_attn: MultiHeadAttention::new(store, &n("self_attn"), c, c, 1, rng),
            ln2: LayerNorm::new(store, &n("ln2"), c),
            cross: CrossAttention::new(store, &n("cross"), c, cfg.d_text, rng),
            v_adapter: VAdapter::new(store, &n("v_adapter"), c, cfg.d_visual, rng),
            ln3: LayerNorm::new(store, &n("ln3"), c),
            ffn: Mlp2::new(store, &n("ffn"), c, 4 * c, c, Activation::Gelu, rng),
            f_adapter: FAdapter::new(store, &n("f_adapter"), c, cfg.reduction, rng),
        }
    }

    /// `x (frames, C, H, W)`, `c_t (S, d_text)`, `c_v (m+1, d_visual)`,
    /// `t_embed (1, time_dim)`; output has the shape of `x`.
    pub fn forward(&self, cx: &Ctx, x: Var, c_t: Var, c_v: Var, t_embed: Var, flags: AdapterFlags) -> Var {
        let g = cx.g;
        let s = g.shape(x);
        let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut x = self.res.forward(cx, x, t_embed);
        if flags.t {
            x = self.t_adapter.forward(cx, x);
        }
        let tokens = g.reshape(g.permute(x, &[0, 2, 3, 1]), &[f, h * w, c]);
        let hn = self.ln1.forward(cx, tokens);
        let tokens = g.add(tokens, self.self_attn.forward(cx, hn, hn, None));

        let flat = g.reshape(tokens, &[f * h * w, c]);
        let hn = self.ln2.forward(cx, flat);
        let cross = dual_cross_attention(cx, hn, c_t, c_v, &self.cross, flags.v.then_some(&self.v_adapter));
        let flat = g.add(flat, self.cross.wo.forward(cx, cross));

        let hn = self.ln3.forward(cx, flat);
        let mut ff = self.ffn.forward(cx, hn);
        if flags.f {
            ff = g.add(ff, self.f_adapter.branch(cx, hn));
        }
        let flat = g.add(flat, ff);
        g.permute(g.reshape(flat, &[f, h, w, c]), &[0, 3, 1, 2])
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub time1: Linear,
    pub time2: Linear,
    pub conv_in: Conv2d,
    pub block1: UNetBlock,
    pub down: Conv2d,
    pub block2: UNetBlock,
    pub up: Conv2d,
    pub block3: UNetBlock,
    pub norm_out: GroupNorm,
    pub conv_out: Conv2d,
}

impl UNet {
    pub fn new(store: &mut ParamStore, name: &str, cfg: UNetConfig, rng: &mut Rng64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            cfg,
            time1: Linear::new(store, &n("time1"), cfg.time_dim, cfg.time_dim, true, rng),
            time2: Linear::new(store, &n("time2"), cfg.time_dim, cfg.time_dim, true, rng),
            conv_in: Conv2d::new(store, &n("conv_in"), cfg.latent_channels, c, 3, 1, rng),
            block1: UNetBlock::new(store, &n("block1"), c, &cfg, rng),
            down: Conv2d::new(store, &n("down"), c, 2 * c, 3, 2, rng),
            block2: UNetBlock::new(store, &n("block2"), 2 * c, &cfg, rng),
            up: Conv2d::new(store, &n("up"), 3 * c, c, 3, 1, rng),
            block3: UNetBlock::new(store, &n("block3"), c, &cfg, rng),
            norm_out: GroupNorm::new(store, &n("norm_out"), c, cfg.groups),
            conv_out: Conv2d::new(store, &n("conv_out"), c, cfg.latent_channels, 3, 1, rng),
        })
    }

    pub fn time_embedding(&self, cx: &Ctx, t: usize) -> Var {
        let g = cx.g;
        let s = g.constant(nn::sinusoidal(&[t as f64], self.cfg.time_dim));
        self.time2.forward(cx, g.silu(self.time1.forward(cx, s)))
    }

    /// Predicted noise for `x_t (frames, C_lat, H, W)`.
    pub fn forward(&self, cx: &Ctx, x_t: Var, t: usize, c_t: Var, c_v: Var, flags: AdapterFlags) -> Var {
        let g = cx.g;
        let te = self.time_embedding(cx, t);
        let h = self.conv_in.forward(cx, x_t);
        let skip = self.block1.forward(cx, h, c_t, c_v, te, flags);
        let h = self.down.forward(cx, skip);
        let h = self.block2.forward(cx, h, c_t, c_v, te, flags);
        let h = g.concat(&[g.upsample2x(h), skip], 1);
        let h = self.up.forward(cx, h);
        let h = self.block3.forward(cx, h, c_t, c_v, te, flags);
        self.conv_out.forward(cx, g.silu(self.norm_out.forward(cx, h)))
    }

    pub fn blocks(&self) -> [&UNetBlock; 3] {
        [&self.block1, &self.block2, &self.block3]
    }
}

