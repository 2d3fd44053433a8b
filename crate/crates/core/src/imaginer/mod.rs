//! Latent denoiser with visual, temporal and FFN adapters, conditioned on
//! the reasoner's output states and the hybrid visual condition.

pub mod adapters;
pub mod condition;
pub mod schedule;
pub mod unet;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Ctx, Var};
use crate::data::Event;
use crate::error::{Error, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng64;
use crate::tensor::Tensor;

pub use adapters::{attend, dual_cross_attention, f_adapter, t_adapter, v_adapter, CrossAttention, FAdapter, TAdapter, VAdapter};
pub use condition::{frame_relevance_weights, hybrid_condition, ConditionEmbedder, HybridVisualCondition};
pub use schedule::{min_snr_weight, NoiseSchedule, DEFAULT_GAMMA_SNR};
pub use unet::{is_adapter_param, AdapterFlags, UNet, UNetBlock, UNetConfig};

pub const PREFIX: &str = "imaginer";
pub const DEFAULT_M_LOCAL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub gamma_snr: f64,
    /// Frames of the target latent video.
    pub latent_frames: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            gamma_snr: DEFAULT_GAMMA_SNR,
            latent_frames: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImaginerConfig {
    pub unet: UNetConfig,
    pub diffusion: DiffusionConfig,
    /// Number of frames kept in the local part of the visual condition.
    pub m_local: usize,
}

impl Default for ImaginerConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            diffusion: DiffusionConfig::default(),
            m_local: DEFAULT_M_LOCAL,
        }
    }
}

/// Anything that predicts the noise added to `x_t`.
pub trait NoisePredictor {
    fn predict_noise(&self, cx: &Ctx, x_t: Var, t: usize, c_t: Var, c_v: Var) -> Var;
}

#[derive(Debug, Clone)]
pub struct Imaginer {
    pub unet: UNet,
    pub schedule: NoiseSchedule,
    pub cfg: ImaginerConfig,
    pub flags: AdapterFlags,
}

impl Imaginer {
    /// Adds the U-Net under `imaginer.` and freezes every non-adapter
    /// parameter.
    pub fn new(store: &mut ParamStore, cfg: ImaginerConfig, rng: &mut Rng64) -> Result<Self> {
        let d = cfg.diffusion;
        let schedule = NoiseSchedule::linear(d.timesteps, d.beta_start, d.beta_end)?;
        let unet = UNet::new(store, &format!("{PREFIX}.unet"), cfg.unet, rng)?;
        let ids: Vec<ParamId> = store.ids().filter(|id| store.name(*id).starts_with(PREFIX)).collect();
        for id in ids {
            let adapter = is_adapter_param(store.name(id));
            store.set_trainable(id, adapter);
        }
        Ok(Self {
            unet,
            schedule,
            cfg,
            flags: AdapterFlags::ALL,
        })
    }

    pub fn base_params(&self, store: &ParamStore) -> Vec<ParamId> {
        store
            .ids()
            .filter(|id| {
                let n = store.name(*id);
                n.starts_with(PREFIX) && !is_adapter_param(n)
            })
            .collect()
    }

    pub fn adapter_params(&self, store: &ParamStore) -> Vec<ParamId> {
        store
            .ids()
            .filter(|id| {
                let n = store.name(*id);
                n.starts_with(PREFIX) && is_adapter_param(n)
            })
            .collect()
    }
}

impl NoisePredictor for Imaginer {
    fn predict_noise(&self, cx: &Ctx, x_t: Var, t: usize, c_t: Var, c_v: Var) -> Var {
        self.unet.forward(cx, x_t, t, c_t, c_v, self.flags)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DiffusionDraw {
    pub loss: Var,
    pub t: usize,
    pub weight: f64,
}

/// Min-SNR-weighted noise-prediction loss at a given timestep and noise.
pub fn diffusion_loss_at(
    cx: &Ctx,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    gamma_snr: f64,
    latents: &Tensor,
    noise: &Tensor,
    t: usize,
    c_t: Var,
    c_v: Var,
) -> Result<DiffusionDraw> {
    if t >= schedule.timesteps() {
        return Err(Error::precondition(format!("timestep {t} outside schedule")));
    }
    if noise.shape() != latents.shape() {
        return Err(Error::shape("noise and latents differ in shape"));
    }
    let g = cx.g;
    let (a, b) = schedule.coefficients(t);
    let x_t = latents.zip(noise, |x, e| a * x + b * e)?;
    let eps_hat = predictor.predict_noise(cx, g.constant(x_t), t, c_t, c_v);
    if g.shape(eps_hat) != latents.shape() {
        return Err(Error::shape(format!("predictor returned {:?}", g.shape(eps_hat))));
    }
    let weight = min_snr_weight(t, schedule, gamma_snr);
    let err = g.sub(eps_hat, g.constant(noise.clone()));
    let loss = g.scale(g.mean(g.square(err)), weight);
    Ok(DiffusionDraw { loss, t, weight })
}

/// Samples `t` uniformly and `ε ~ N(0, I)` from `rng`, then evaluates
/// [`diffusion_loss_at`].
pub fn diffusion_loss(
    cx: &Ctx,
    predictor: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    gamma_snr: f64,
    latents: &Tensor,
    c_t: Var,
    c_v: Var,
    rng: &mut Rng64,
) -> Result<DiffusionDraw> {
    let t = rng.below(schedule.timesteps());
    let noise = Tensor::new(latents.shape().to_vec(), rng.normals(latents.numel()))?;
    diffusion_loss_at(cx, predictor, schedule, gamma_snr, latents, &noise, t, c_t, c_v)
}

/// Fixed pixel-to-latent map: adaptive average pooling to the latent grid
/// followed by a random `3 -> C_lat` projection of centred pixels. Events
/// without frames map their features through a fixed random projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMapper {
    pub latent_hw: usize,
    pub channels: usize,
    pub pixel_proj: Tensor,
    seed: u64,
}

impl LatentMapper {
    pub fn new(latent_hw: usize, channels: usize, seed: u64) -> Self {
        let mut rng = Rng64::stream(seed, 0x1A7);
        let s = 1.0 / math::sqrt(3.0);
        let pixel_proj = Tensor::from_parts(vec![3, channels], rng.normals(3 * channels).into_iter().map(|v| v * s * 2.0).collect());
        Self {
            latent_hw,
            channels,
            pixel_proj,
            seed,
        }
    }

    /// `(F, H, W, 3)` frames to `(F, C_lat, h, w)` latents.
    pub fn map_frames(&self, frames: &Tensor) -> Result<Tensor> {
        if frames.rank() != 4 || frames.dim(3) != 3 {
            return Err(Error::shape(format!("frames must be (F, H, W, 3), got {:?}", frames.shape())));
        }
        let (f, h, w) = (frames.dim(0), frames.dim(1), frames.dim(2));
        let n = self.latent_hw;
        if h < n || w < n {
            return Err(Error::shape(format!("frames {h}x{w} smaller than latent grid {n}")));
        }
        let c = self.channels;
        let mut out = vec![0.0; f * c * n * n];
        for fi in 0..f {
            for gy in 0..n {
                let (y0, y1) = (gy * h / n, (gy + 1) * h / n);
                for gx in 0..n {
                    let (x0, x1) = (gx * w / n, (gx + 1) * w / n);
                    let mut px = [0.0; 3];
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let base = ((fi * h + y) * w + x) * 3;
                            for k in 0..3 {
                                px[k] += frames.data()[base + k];
                            }
                        }
                    }
                    let cnt = ((y1 - y0) * (x1 - x0)) as f64;
                    for ch in 0..c {
                        let v: f64 = (0..3).map(|k| (2.0 * px[k] / cnt - 1.0) * self.pixel_proj.data()[k * c + ch]).sum();
                        out[((fi * c + ch) * n + gy) * n + gx] = v;
                    }
                }
            }
        }
        Tensor::new(vec![f, c, n, n], out)
    }

    /// `(F, D)` features to `(F, C_lat, h, w)` latents.
    pub fn map_features(&self, features: &Tensor) -> Result<Tensor> {
        let (f, d) = (features.dim(0), features.dim(1));
        let out_dim = self.channels * self.latent_hw * self.latent_hw;
        let mut rng = Rng64::stream(self.seed, 0x1A8 ^ d as u64);
        let proj = rng.normals(d * out_dim);
        let s = 1.0 / math::sqrt(d as f64);
        let mut out = vec![0.0; f * out_dim];
        for r in 0..f {
            for (i, x) in features.row(r).iter().enumerate() {
                for (o, p) in out[r * out_dim..(r + 1) * out_dim].iter_mut().zip(&proj[i * out_dim..(i + 1) * out_dim]) {
                    *o += x * p * s;
                }
            }
        }
        Tensor::new(vec![f, self.channels, self.latent_hw, self.latent_hw], out)
    }

    /// Latents of `frames` evenly sampled frames of an event.
    pub fn event_latents(&self, event: &Event, frames: usize) -> Result<Tensor> {
        let full = match (&event.frames, &event.frame_features) {
            (Some(fr), _) => self.map_frames(fr)?,
            (None, Some(ft)) => self.map_features(ft)?,
            (None, None) => return Err(Error::precondition(format!("event {} has no frames or features", event.event_id))),
        };
        let n = full.dim(0);
        let per = full.numel() / n;
        let mut data = Vec::with_capacity(frames * per);
        for i in 0..frames {
            let src = i * n / frames;
            data.extend_from_slice(&full.data()[src * per..(src + 1) * per]);
        }
        let mut shape = full.shape().to_vec();
        shape[0] = frames;
        Tensor::new(shape, data)
    }
}
