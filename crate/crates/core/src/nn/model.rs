//! Per-view encoder-decoder with asymmetric kernels and channel dropout.
//!
//! Layer schedule for `depth = L` and widths `w_s = base_width · 2^s`:
//!
//! ```text
//! enc[0]   first_kernel  in_channels -> w_0          (full resolution)
//! enc[s]   body_kernel   w_{s-1}     -> w_s          (after 2× average pool), s = 1..L
//! dec[s]   body_kernel   w_s         -> w_{s-1}      (after 2× nearest upsample), s = L-1..1
//!                        + skip add of enc[s-1] output for the finest `skip_connections` levels
//! head     1×1×1         w_0         -> n_classes    + softmax
//! ```
//!
//! Every encoder and decoder stage is conv → ReLU → channel dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ops::{self, Conv3d, Feat, Kernel3};
use crate::real::Real;
use crate::views::ViewTransform;
use crate::volume::{ProbMap, Shape3, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegModelConfig {
    pub in_channels: usize,
    pub n_classes: usize,
    pub base_width: usize,
    pub depth: usize,
    pub dropout_rate: f64,
    /// `[D, H, W]` extents; `D` is the through-plane axis of the view-oriented input.
    pub first_kernel: Kernel3,
    pub body_kernel: Kernel3,
    pub skip_connections: usize,
    /// When set, body kernels must be flat (`D` extent 1).
    pub asymmetric: bool,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        SegModelConfig {
            in_channels: 1,
            n_classes: 2,
            base_width: 8,
            depth: 4,
            dropout_rate: 0.1,
            first_kernel: Kernel3::new(3, 7, 7),
            body_kernel: Kernel3::new(1, 3, 3),
            skip_connections: 3,
            asymmetric: true,
        }
    }
}

impl SegModelConfig {
    /// Cubic-kernel variant for the backbone ablation.
    pub fn symmetric(mut self, n: usize) -> Self {
        self.asymmetric = false;
        self.body_kernel = Kernel3::new(n, n, n);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(Error::invalid("model config", r));
        if self.in_channels == 0 || self.base_width == 0 {
            return bad("in_channels and base_width must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes {} < 2", self.n_classes));
        }
        if !(1..=6).contains(&self.depth) {
            return bad(format!("depth {} outside 1..=6", self.depth));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        for (name, k) in [("first_kernel", self.first_kernel), ("body_kernel", self.body_kernel)] {
            if !k.is_odd() {
                return bad(format!("{name} {:?} must have odd extents", <[usize; 3]>::from(k)));
            }
        }
        if self.asymmetric && self.body_kernel.d != 1 {
            return bad(format!(
                "asymmetric body_kernel must be flat through-plane, got {:?}",
                <[usize; 3]>::from(self.body_kernel)
            ));
        }
        Ok(())
    }

    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    /// Spatial extents of patches fed to this model must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn has_skip(&self, stage: usize) -> bool {
        stage >= 1 && stage <= self.skip_connections
    }

    /// Closed-form parameter count of the layer schedule.
    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }

    pub fn check_patch(&self, shape: Shape3) -> Result<()> {
        let div = self.divisor();
        if shape.iter().any(|&s| s == 0 || s % div != 0) {
            return Err(Error::Divisibility { shape, divisor: div });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    enc: Vec<Conv3d>,
    /// `dec[s - 1]` is the decoder stage producing level `s - 1`.
    dec: Vec<Conv3d>,
    head: Conv3d,
    total: usize,
}

impl Layout {
    fn new(cfg: &SegModelConfig) -> Self {
        let mut offset = 0;
        let mut mk = |in_c, out_c, kernel| {
            let c = Conv3d { in_c, out_c, kernel, offset };
            offset += c.n_params();
            c
        };
        let mut enc = Vec::with_capacity(cfg.depth);
        enc.push(mk(cfg.in_channels, cfg.width(0), cfg.first_kernel));
        for s in 1..cfg.depth {
            enc.push(mk(cfg.width(s - 1), cfg.width(s), cfg.body_kernel));
        }
        let mut dec = Vec::with_capacity(cfg.depth.saturating_sub(1));
        for s in 1..cfg.depth {
            dec.push(mk(cfg.width(s), cfg.width(s - 1), cfg.body_kernel));
        }
        let head = mk(cfg.width(0), cfg.n_classes, Kernel3::new(1, 1, 1));
        Layout { enc, dec, head, total: offset }
    }
}

/// Per-channel dropout scales for every stage of one stochastic forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks<T> {
    enc: Vec<Vec<T>>,
    dec: Vec<Vec<T>>,
}

/// Activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    input: Feat<T>,
    /// Post-ReLU encoder activations (pre-dropout).
    enc_act: Vec<Feat<T>>,
    /// Pooled inputs to `enc[s]`, `s >= 1` (index `s - 1`).
    pooled: Vec<Feat<T>>,
    /// Upsampled inputs to `dec[s - 1]`.
    up: Vec<Feat<T>>,
    /// Post-ReLU decoder activations (pre-dropout), index `s - 1`.
    dec_act: Vec<Feat<T>>,
    head_in: Feat<T>,
    probs: Feat<T>,
    masks: Option<DropoutMasks<T>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn probs(&self) -> ProbMap<T> {
        ProbMap::from_parts_unchecked(self.probs.channels, self.probs.shape, self.probs.data.clone())
    }
}

/// One view's segmentation network.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewModel<T = f32> {
    config: SegModelConfig,
    view: ViewTransform,
    params: Vec<T>,
    layout: Layout,
    /// Base seed for this model's dropout stream.
    pub dropout_seed: u64,
}

/// Deterministic initialization: He-normal weights, zero biases.
pub fn build_model<T: Real>(cfg: &SegModelConfig, view: ViewTransform, seed: u64) -> Result<ViewModel<T>> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut params = vec![T::zero(); layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for conv in layout.enc.iter().chain(&layout.dec).chain(std::iter::once(&layout.head)) {
        let fan_in = (conv.in_c * conv.kernel.volume()) as f64;
        let std = (2.0 / fan_in).sqrt();
        for p in &mut params[conv.offset..conv.offset + conv.n_weights()] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p = T::of(z * std);
        }
    }
    Ok(ViewModel {
        config: cfg.clone(),
        view,
        params,
        layout,
        dropout_seed: seed ^ 0x9e37_79b9_7f4a_7c15,
    })
}

impl<T: Real> ViewModel<T> {
    pub fn from_params(cfg: &SegModelConfig, view: ViewTransform, params: Vec<T>, dropout_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        if params.len() != layout.total {
            return Err(Error::shape("parameter vector", &[layout.total], &[params.len()]));
        }
        Ok(ViewModel {
            config: cfg.clone(),
            view,
            params,
            layout,
            dropout_seed,
        })
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    pub fn view(&self) -> ViewTransform {
        self.view
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// SHA-256 of the little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::with_capacity(T::BYTES);
        for &p in &self.params {
            buf.clear();
            p.write_le(&mut buf);
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Real>(&self) -> ViewModel<U> {
        ViewModel {
            config: self.config.clone(),
            view: self.view,
            params: self.params.iter().map(|p| U::of(p.as_f64())).collect(),
            layout: self.layout.clone(),
            dropout_seed: self.dropout_seed,
        }
    }

    /// Draws channel-dropout scales for one forward pass.
    pub fn sample_masks(&self, rng: &mut impl Rng) -> DropoutMasks<T> {
        let p = self.config.dropout_rate;
        let keep = T::of(1.0 / (1.0 - p));
        let mut draw = |c: usize| -> Vec<T> {
            (0..c)
                .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                .collect()
        };
        let enc = (0..self.config.depth).map(|s| draw(self.config.width(s))).collect();
        let dec = (1..self.config.depth).map(|s| draw(self.config.width(s - 1))).collect();
        DropoutMasks { enc, dec }
    }

    fn input_feat(&self, patch: &Volume3D<T>) -> Result<Feat<T>> {
        self.config.check_patch(patch.shape())?;
        Ok(Feat {
            channels: 1,
            shape: patch.shape(),
            data: patch.data().to_vec(),
        })
    }

    /// First convolution + ReLU; independent of dropout, so MC draws can share it.
    fn stem(&self, input: &Feat<T>) -> Feat<T> {
        let mut a = self.layout.enc[0].forward(&self.params, input);
        ops::relu_inplace(&mut a);
        a
    }

    fn forward_from_stem(&self, input: Feat<T>, stem: Feat<T>, masks: Option<DropoutMasks<T>>, keep: bool) -> ForwardCache<T> {
        let cfg = &self.config;
        let depth = cfg.depth;
        let drop = |f: &Feat<T>, m: Option<&Vec<T>>| -> Feat<T> {
            match m {
                Some(m) => ops::scale_channels(f, m),
                None => f.clone(),
            }
        };
        let mut enc_act = Vec::with_capacity(depth);
        let mut enc_out = Vec::with_capacity(depth);
        let mut pooled = Vec::new();
        enc_out.push(drop(&stem, masks.as_ref().map(|m| &m.enc[0])));
        enc_act.push(stem);
        for s in 1..depth {
            let p = ops::avg_pool2(&enc_out[s - 1]);
            let mut a = self.layout.enc[s].forward(&self.params, &p);
            ops::relu_inplace(&mut a);
            enc_out.push(drop(&a, masks.as_ref().map(|m| &m.enc[s])));
            enc_act.push(a);
            if keep {
                pooled.push(p);
            }
        }
        let mut h = enc_out[depth - 1].clone();
        let mut up_cache = vec![None; depth.saturating_sub(1)];
        let mut dec_act = vec![None; depth.saturating_sub(1)];
        for s in (1..depth).rev() {
            let up = ops::upsample2(&h);
            let mut z = self.layout.dec[s - 1].forward(&self.params, &up);
            if cfg.has_skip(s) {
                z.add_assign(&enc_out[s - 1]);
            }
            ops::relu_inplace(&mut z);
            h = drop(&z, masks.as_ref().map(|m| &m.dec[s - 1]));
            if keep {
                up_cache[s - 1] = Some(up);
                dec_act[s - 1] = Some(z);
            }
        }
        let logits = self.layout.head.forward(&self.params, &h);
        let probs = ops::softmax(&logits);
        ForwardCache {
            input,
            enc_act: if keep { enc_act } else { Vec::new() },
            pooled,
            up: up_cache.into_iter().flatten().collect(),
            dec_act: dec_act.into_iter().flatten().collect(),
            head_in: if keep { h } else { Feat::zeros(0, [1, 1, 1]) },
            probs,
            masks,
        }
    }

    /// Forward pass retaining activations for [`ViewModel::backward`].
    pub fn forward_train(&self, patch: &Volume3D<T>, masks: Option<DropoutMasks<T>>) -> Result<ForwardCache<T>> {
        let input = self.input_feat(patch)?;
        let stem = self.stem(&input);
        Ok(self.forward_from_stem(input, stem, masks, true))
    }

    /// Deterministic prediction with dropout disabled.
    pub fn predict(&self, patch: &Volume3D<T>) -> Result<ProbMap<T>> {
        let input = self.input_feat(patch)?;
        let stem = self.stem(&input);
        Ok(self.forward_from_stem(input, stem, None, false).probs())
    }

    /// `k` stochastic forward passes with independent dropout masks.
    ///
    /// Mask `j` is drawn from a stream keyed on `(dropout_seed, seed, j)`, so the
    /// result depends only on those values and not on execution order.
    pub fn mc_sample(&self, patch: &Volume3D<T>, k: usize, seed: u64) -> Result<Vec<ProbMap<T>>> {
        if k < 2 {
            return Err(Error::TooFew { what: "MC samples", needed: 2, got: k });
        }
        let input = self.input_feat(patch)?;
        let stem = self.stem(&input);
        let samples = crate::par::map_indexed(k, |j| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::trainer::rng::mix(&[self.dropout_seed, seed, j as u64]));
            let masks = if self.config.dropout_rate > 0.0 {
                Some(self.sample_masks(&mut rng))
            } else {
                None
            };
            let empty = Feat { channels: 0, shape: input.shape, data: Vec::new() };
            self.forward_from_stem(empty, stem.clone(), masks, false).probs()
        });
        Ok(samples)
    }

    /// Backpropagates `dL/dprobs` (view orientation) and accumulates into `grads`.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_probs: &[T], grads: &mut [T]) {
        debug_assert_eq!(grads.len(), self.params.len());
        let cfg = &self.config;
        let depth = cfg.depth;
        let masks = cache.masks.as_ref();
        let g_logits = ops::softmax_backward(&cache.probs, grad_probs);
        let mut g_h = self
            .layout
            .head
            .backward(&self.params, &cache.head_in, &g_logits, grads, true)
            .expect("input grad requested");

        // gradient w.r.t. each encoder stage output (post-dropout)
        let mut g_enc: Vec<Option<Feat<T>>> = vec![None; depth];
        let add = |slot: &mut Option<Feat<T>>, g: Feat<T>| match slot {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        };

        for s in 1..depth {
            if let Some(m) = masks {
                ops::scale_channels_inplace(&mut g_h, &m.dec[s - 1]);
            }
            ops::relu_backward_inplace(&cache.dec_act[s - 1], &mut g_h);
            if cfg.has_skip(s) {
                add(&mut g_enc[s - 1], g_h.clone());
            }
            let g_up = self.layout.dec[s - 1]
                .backward(&self.params, &cache.up[s - 1], &g_h, grads, true)
                .expect("input grad requested");
            g_h = ops::upsample2_backward(&g_up);
        }
        add(&mut g_enc[depth - 1], g_h);

        for s in (0..depth).rev() {
            let mut g = g_enc[s].take().expect("every encoder stage feeds forward");
            if let Some(m) = masks {
                ops::scale_channels_inplace(&mut g, &m.enc[s]);
            }
            ops::relu_backward_inplace(&cache.enc_act[s], &mut g);
            if s == 0 {
                self.layout.enc[0].backward(&self.params, &cache.input, &g, grads, false);
            } else {
                let g_in = self.layout.enc[s]
                    .backward(&self.params, &cache.pooled[s - 1], &g, grads, true)
                    .expect("input grad requested");
                add(&mut g_enc[s - 1], ops::avg_pool2_backward(&g_in, cache.enc_act[s - 1].shape));
            }
        }
    }
}

/// Anything that maps a patch to a probability map; lets inference code run on
/// stand-in models in tests.
pub trait Segmenter<T: Real>: Sync {
    fn n_classes(&self) -> usize;

    /// Patch extents must be multiples of this.
    fn divisor(&self) -> usize;

    fn predict_patch(&self, patch: &Volume3D<T>) -> Result<ProbMap<T>>;
}

impl<T: Real> Segmenter<T> for ViewModel<T> {
    fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn divisor(&self) -> usize {
        self.config.divisor()
    }

    fn predict_patch(&self, patch: &Volume3D<T>) -> Result<ProbMap<T>> {
        self.predict(patch)
    }
}
