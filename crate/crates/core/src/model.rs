//! Dual-head encoder-decoder.
//!
//! A U-shaped backbone (3x3 conv pairs, 2x2 max-pool downsampling, nearest
//! upsampling with skip concatenation) produces a per-pixel feature map that
//! two 1x1 nonlinear heads read: one emits class logits, the other a
//! `rep_dim`-dimensional representation vector. Both output maps have the
//! input's height and width.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    concat_channels, maxpool2, maxpool2_backward, relu_backward, relu_inplace, split_channels,
    upsample2, upsample2_backward, AdamState, Conv2d, Param, PoolIndices, Real, Tensor,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub classes: usize,
    pub rep_dim: usize,
    /// Channel width per resolution level; `len - 1` downsampling stages.
    pub encoder_channels: Vec<usize>,
    /// Hidden width of both 1x1 heads.
    pub head_hidden: usize,
    /// Standardize each input slice to zero mean, unit variance inside the forward pass.
    pub normalize_input: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            classes: 6,
            rep_dim: 128,
            encoder_channels: vec![8, 16, 32, 32, 32],
            head_hidden: 32,
            normalize_input: false,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("classes must be >= 2, got {}", self.classes)));
        }
        if self.rep_dim < 2 {
            return Err(Error::Config(format!("rep_dim must be >= 2, got {}", self.rep_dim)));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder_channels must be non-empty and positive".into()));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Total spatial downsampling of the backbone.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.encoder_channels.len() - 1)
    }
}

/// Outputs for one slice, channel-major: `seg_logits` is `[classes][h][w]`,
/// `rep_map` is `[rep_dim][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualHeadOutput<T> {
    pub seg_logits: Tensor<T>,
    pub rep_map: Tensor<T>,
}

impl<T: Real> DualHeadOutput<T> {
    pub fn height(&self) -> usize {
        self.seg_logits.h
    }

    pub fn width(&self) -> usize {
        self.seg_logits.w
    }

    /// Representation vector at a pixel, widened to f64.
    pub fn rep_vector(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.rep_map.c).map(|d| self.rep_map.at(d, y, x).as_f64()).collect()
    }

    pub fn logits_at(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.seg_logits.c).map(|c| self.seg_logits.at(c, y, x).as_f64()).collect()
    }
}

/// Loss gradients w.r.t. one slice's outputs (same layout as [`DualHeadOutput`]).
#[derive(Debug, Clone)]
pub struct OutputGrad<T> {
    pub seg_logits: Tensor<T>,
    pub rep_map: Tensor<T>,
}

impl<T: Real> OutputGrad<T> {
    pub fn zeros_like(out: &DualHeadOutput<T>) -> Self {
        Self {
            seg_logits: Tensor::zeros(out.seg_logits.c, out.seg_logits.h, out.seg_logits.w),
            rep_map: Tensor::zeros(out.rep_map.c, out.rep_map.h, out.rep_map.w),
        }
    }
}

#[derive(Debug, Clone)]
struct ImageCache<T> {
    orig_h: usize,
    orig_w: usize,
    enc_in: Vec<Tensor<T>>,
    enc_a: Vec<Tensor<T>>,
    enc_b: Vec<Tensor<T>>,
    pools: Vec<PoolIndices>,
    dec_in: Vec<Tensor<T>>,
    dec_out: Vec<Tensor<T>>,
    feature: Tensor<T>,
    seg_hidden: Tensor<T>,
    rep_hidden: Tensor<T>,
}

/// Activations retained by a gradient-recording forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    images: Vec<ImageCache<T>>,
}

pub struct Forward<T> {
    pub outputs: Vec<DualHeadOutput<T>>,
    pub cache: Option<ForwardCache<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualHeadModel<T> {
    spec: ModelSpec,
    /// Two convs per level; the last level is the bottleneck.
    encoder: Vec<[Conv2d<T>; 2]>,
    /// `decoder[j]` fuses upsampled level `j + 1` with skip `j`.
    decoder: Vec<Conv2d<T>>,
    seg_head: [Conv2d<T>; 2],
    rep_head: [Conv2d<T>; 2],
}

fn check_finite<T: Real>(t: &Tensor<T>, layer: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activation in layer {layer}")))
    }
}

fn standardize<T: Real>(t: &mut Tensor<T>) {
    let n = t.data.len() as f64;
    let mean = t.data.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = t.data.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
    t.data
        .iter_mut()
        .for_each(|v| *v = T::of((v.as_f64() - mean) * inv));
}

impl<T: Real> DualHeadModel<T> {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = &spec.encoder_channels;
        let mut encoder = Vec::with_capacity(ch.len());
        let mut cin = 1;
        for &c in ch {
            encoder.push([Conv2d::new(cin, c, 3, &mut rng), Conv2d::new(c, c, 3, &mut rng)]);
            cin = c;
        }
        let decoder = (0..ch.len() - 1)
            .map(|j| Conv2d::new(ch[j + 1] + ch[j], ch[j], 3, &mut rng))
            .collect();
        let feat = ch[0];
        let seg_head = [
            Conv2d::new(feat, spec.head_hidden, 1, &mut rng),
            // Small logits at start, so early predictions are near uniform
            // rather than confidently wrong.
            Conv2d::with_std(spec.head_hidden, spec.classes, 1, 0.01, &mut rng),
        ];
        let rep_head = [
            Conv2d::new(feat, spec.head_hidden, 1, &mut rng),
            Conv2d::new(spec.head_hidden, spec.rep_dim, 1, &mut rng),
        ];
        Ok(Self {
            spec: spec.clone(),
            encoder,
            decoder,
            seg_head,
            rep_head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for [a, b] in &self.encoder {
            out.extend(a.params());
            out.extend(b.params());
        }
        for d in &self.decoder {
            out.extend(d.params());
        }
        for c in self.seg_head.iter().chain(&self.rep_head) {
            out.extend(c.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for [a, b] in &mut self.encoder {
            out.extend(a.params_mut());
            out.extend(b.params_mut());
        }
        for d in &mut self.decoder {
            out.extend(d.params_mut());
        }
        for c in self.seg_head.iter_mut().chain(&mut self.rep_head) {
            out.extend(c.params_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    /// Runs both heads on every slice. With `grad = false` no activations are retained.
    pub fn forward(&self, batch: &[Tensor<T>], grad: bool) -> Result<Forward<T>> {
        if let Some(first) = batch.first() {
            if batch.iter().any(|t| (t.h, t.w) != (first.h, first.w)) {
                return Err(Error::Input("batch slices must share height and width".into()));
            }
        }
        let mut outputs = Vec::with_capacity(batch.len());
        let mut images = Vec::new();
        for x in batch {
            let (out, cache) = self.forward_one(x)?;
            outputs.push(out);
            if grad {
                images.push(cache);
            }
        }
        Ok(Forward {
            outputs,
            cache: grad.then_some(ForwardCache { images }),
        })
    }

    fn forward_one(&self, x: &Tensor<T>) -> Result<(DualHeadOutput<T>, ImageCache<T>)> {
        if x.c != 1 {
            return Err(Error::Input(format!("expected single-channel slice, got {} channels", x.c)));
        }
        let f = self.spec.downsample_factor();
        let (ph, pw) = (x.h.div_ceil(f) * f, x.w.div_ceil(f) * f);
        let mut input = x.reflect_pad(ph, pw);
        if self.spec.normalize_input {
            standardize(&mut input);
        }
        check_finite(&input, "input")?;

        let n = self.encoder.len();
        let mut enc_in = Vec::with_capacity(n);
        let mut enc_a = Vec::with_capacity(n);
        let mut enc_b = Vec::with_capacity(n);
        let mut pools = Vec::with_capacity(n.saturating_sub(1));
        let mut h = input;
        for (i, [conv_a, conv_b]) in self.encoder.iter().enumerate() {
            if i > 0 {
                let (p, idx) = maxpool2(enc_b.last().unwrap());
                pools.push(idx);
                h = p;
            }
            let mut a = conv_a.forward(&h);
            relu_inplace(&mut a);
            check_finite(&a, &format!("encoder{i}.conv_a"))?;
            let mut b = conv_b.forward(&a);
            relu_inplace(&mut b);
            check_finite(&b, &format!("encoder{i}.conv_b"))?;
            enc_in.push(h.clone());
            enc_a.push(a);
            enc_b.push(b);
        }

        let mut dec_in = vec![Tensor::zeros(0, 0, 0); n - 1];
        let mut dec_out = vec![Tensor::zeros(0, 0, 0); n - 1];
        let mut below = enc_b[n - 1].clone();
        for j in (0..n - 1).rev() {
            let cat = concat_channels(&upsample2(&below), &enc_b[j]);
            let mut d = self.decoder[j].forward(&cat);
            relu_inplace(&mut d);
            check_finite(&d, &format!("decoder{j}"))?;
            dec_in[j] = cat;
            dec_out[j] = d.clone();
            below = d;
        }
        let feature = below;

        let mut seg_hidden = self.seg_head[0].forward(&feature);
        relu_inplace(&mut seg_hidden);
        let seg = self.seg_head[1].forward(&seg_hidden);
        check_finite(&seg, "seg_head")?;
        let mut rep_hidden = self.rep_head[0].forward(&feature);
        relu_inplace(&mut rep_hidden);
        let rep = self.rep_head[1].forward(&rep_hidden);
        check_finite(&rep, "rep_head")?;

        let out = DualHeadOutput {
            seg_logits: seg.crop(x.h, x.w),
            rep_map: rep.crop(x.h, x.w),
        };
        let cache = ImageCache {
            orig_h: x.h,
            orig_w: x.w,
            enc_in,
            enc_a,
            enc_b,
            pools,
            dec_in,
            dec_out,
            feature,
            seg_hidden,
            rep_hidden,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients for a recorded forward pass.
    pub fn backward(&mut self, cache: &ForwardCache<T>, grads: &[OutputGrad<T>]) -> Result<()> {
        if cache.images.len() != grads.len() {
            return Err(Error::Input(format!(
                "{} output gradients for {} cached slices",
                grads.len(),
                cache.images.len()
            )));
        }
        for (img, g) in cache.images.iter().zip(grads) {
            if (g.seg_logits.h, g.seg_logits.w) != (img.orig_h, img.orig_w) {
                return Err(Error::Input("output gradient shape mismatch".into()));
            }
            self.backward_one(img, g);
        }
        Ok(())
    }

    fn backward_one(&mut self, img: &ImageCache<T>, g: &OutputGrad<T>) {
        let (ph, pw) = (img.feature.h, img.feature.w);
        let d_seg = g.seg_logits.uncrop(ph, pw);
        let d_rep = g.rep_map.uncrop(ph, pw);

        let mut d_sh = self.seg_head[1].backward(&img.seg_hidden, &d_seg, true).unwrap();
        relu_backward(&img.seg_hidden, &mut d_sh);
        let mut d_feat = self.seg_head[0].backward(&img.feature, &d_sh, true).unwrap();
        let mut d_rh = self.rep_head[1].backward(&img.rep_hidden, &d_rep, true).unwrap();
        relu_backward(&img.rep_hidden, &mut d_rh);
        let d_feat_rep = self.rep_head[0].backward(&img.feature, &d_rh, true).unwrap();
        for (a, b) in d_feat.data.iter_mut().zip(&d_feat_rep.data) {
            *a = *a + *b;
        }

        let n = self.encoder.len();
        let ch = self.spec.encoder_channels.clone();
        let mut d_skip: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut d_level = d_feat;
        for j in 0..n - 1 {
            relu_backward(&img.dec_out[j], &mut d_level);
            let d_cat = self.decoder[j].backward(&img.dec_in[j], &d_level, true).unwrap();
            let (d_up, d_sk) = split_channels(&d_cat, ch[j + 1]);
            d_skip[j] = Some(d_sk);
            d_level = upsample2_backward(&d_up);
        }
        // d_level now holds the gradient w.r.t. the bottleneck output (or the feature when n == 1).
        let mut d_b = d_level;
        for i in (0..n).rev() {
            if let Some(s) = d_skip[i].take() {
                for (a, b) in d_b.data.iter_mut().zip(&s.data) {
                    *a = *a + *b;
                }
            }
            relu_backward(&img.enc_b[i], &mut d_b);
            let [conv_a, conv_b] = &mut self.encoder[i];
            let mut d_a = conv_b.backward(&img.enc_a[i], &d_b, true).unwrap();
            relu_backward(&img.enc_a[i], &mut d_a);
            let d_in = conv_a.backward(&img.enc_in[i], &d_a, i > 0);
            if i > 0 {
                d_b = maxpool2_backward(&d_in.unwrap(), &img.pools[i - 1]);
            }
        }
    }
}

/// Wraps a 2D slice `[h][w]` as a single-channel tensor.
pub fn slice_tensor<T: Real>(slice: &Array2<f32>) -> Tensor<T> {
    let (h, w) = slice.dim();
    Tensor::from_vec(1, h, w, slice.iter().map(|&v| T::of(v as f64)).collect())
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CSSEGCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    dtype: String,
    spec: ModelSpec,
    epoch: u64,
    param_sizes: Vec<usize>,
    has_optimizer: bool,
    optimizer_step: u64,
    meta: serde_json::Value,
}

/// Serialized model state. Layout: magic, u32 version, u64 header length,
/// JSON header, then little-endian parameter payload (and Adam moments if present).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: DualHeadModel<T>,
    pub epoch: u64,
    pub optimizer: Option<AdamState<T>>,
    /// Free-form training metadata (best score, history length, ...).
    pub meta: serde_json::Value,
}

fn dtype_name<T: Real>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "float32"
    } else {
        "float64"
    }
}

fn write_values<T: Real>(buf: &mut Vec<u8>, values: &[T]) {
    for v in values {
        if std::mem::size_of::<T>() == 4 {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        } else {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

fn read_values<T: Real>(bytes: &[u8], n: usize, pos: &mut usize) -> Option<Vec<T>> {
    let width = std::mem::size_of::<T>();
    let chunk = bytes.get(*pos..*pos + n * width)?;
    *pos += n * width;
    Some(
        chunk
            .chunks_exact(width)
            .map(|b| {
                if width == 4 {
                    T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64)
                } else {
                    T::of(f64::from_le_bytes(b.try_into().unwrap()))
                }
            })
            .collect(),
    )
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            dtype: dtype_name::<T>().to_string(),
            spec: self.model.spec.clone(),
            epoch: self.epoch,
            param_sizes: params.iter().map(|p| p.len()).collect(),
            has_optimizer: self.optimizer.is_some(),
            optimizer_step: self.optimizer.as_ref().map_or(0, |o| o.step),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for p in &params {
            write_values(&mut buf, &p.value);
        }
        if let Some(opt) = &self.optimizer {
            for m in &opt.m {
                write_values(&mut buf, m);
            }
            for v in &opt.v {
                write_values(&mut buf, v);
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hbytes = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(hbytes)?;
        if header.dtype != dtype_name::<T>() {
            return Err(bad(&format!(
                "checkpoint dtype {} does not match {}",
                header.dtype,
                dtype_name::<T>()
            )));
        }
        let mut model = DualHeadModel::<T>::new(&header.spec, 0)?;
        let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
        if sizes != header.param_sizes {
            return Err(bad("parameter layout does not match model spec"));
        }
        let mut pos = 20 + hlen;
        for p in model.params_mut() {
            let n = p.len();
            p.value = read_values(bytes, n, &mut pos).ok_or_else(|| bad("truncated parameters"))?;
        }
        let optimizer = if header.has_optimizer {
            let mut state = AdamState::new(sizes.iter().copied());
            state.step = header.optimizer_step;
            for (m, &n) in state.m.iter_mut().zip(&sizes) {
                *m = read_values(bytes, n, &mut pos).ok_or_else(|| bad("truncated optimizer"))?;
            }
            for (v, &n) in state.v.iter_mut().zip(&sizes) {
                *v = read_values(bytes, n, &mut pos).ok_or_else(|| bad("truncated optimizer"))?;
            }
            Some(state)
        } else {
            None
        };
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            model,
            epoch: header.epoch,
            optimizer,
            meta: header.meta,
        })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
