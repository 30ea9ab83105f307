use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Param, Real, Tensor};

/// Square convolution, stride 1, "same" zero padding. Kernel size 1 or 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// Row-major `[cout][cin * k * k]`.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Conv2d<T> {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng>(cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        let fan_in = (cin * k * k) as f64;
        Self::with_std(cin, cout, k, (2.0 / fan_in).sqrt(), rng)
    }

    /// Normal weights with the given deviation, zero bias.
    pub fn with_std<R: Rng>(cin: usize, cout: usize, k: usize, std: f64, rng: &mut R) -> Self {
        assert!(k == 1 || k == 3, "only 1x1 and 3x3 kernels are supported");
        let normal = Normal::new(0.0, std).expect("valid std");
        let weight = (0..cout * cin * k * k)
            .map(|_| T::of(normal.sample(rng)))
            .collect();
        Self {
            cin,
            cout,
            k,
            weight: Param::new(weight),
            bias: Param::new(vec![T::zero(); cout]),
        }
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn forward(&self, input: &Tensor<T>) -> Tensor<T> {
        assert_eq!(input.c, self.cin, "conv input channel mismatch");
        let hw = input.plane();
        let cols = self.columns(input);
        let mut out = Tensor::zeros(self.cout, input.h, input.w);
        for (o, b) in self.bias.value.iter().enumerate() {
            out.channel_mut(o).iter_mut().for_each(|v| *v = *b);
        }
        let w = ArrayView2::from_shape((self.cout, self.patch_len()), &self.weight.value).unwrap();
        let c = ArrayView2::from_shape((self.patch_len(), hw), cols.as_ref()).unwrap();
        let mut y = ArrayViewMut2::from_shape((self.cout, hw), &mut out.data).unwrap();
        general_mat_mul(T::one(), &w, &c, T::one(), &mut y);
        out
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `input`
    /// (skipped when `need_input_grad` is false).
    pub fn backward(
        &mut self,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let hw = input.plane();
        let pl = self.patch_len();
        for o in 0..self.cout {
            let s: T = grad_out.channel(o).iter().copied().sum();
            self.bias.grad[o] = self.bias.grad[o] + s;
        }
        let cols = self.columns(input);
        let g = ArrayView2::from_shape((self.cout, hw), &grad_out.data).unwrap();
        {
            let c = ArrayView2::from_shape((pl, hw), cols.as_ref()).unwrap();
            let mut dw = ArrayViewMut2::from_shape((self.cout, pl), &mut self.weight.grad).unwrap();
            general_mat_mul(T::one(), &g, &c.t(), T::one(), &mut dw);
        }
        if !need_input_grad {
            return None;
        }
        let w = ArrayView2::from_shape((self.cout, pl), &self.weight.value).unwrap();
        let mut dcols = vec![T::zero(); pl * hw];
        {
            let mut dc = ArrayViewMut2::from_shape((pl, hw), &mut dcols).unwrap();
            general_mat_mul(T::one(), &w.t(), &g, T::zero(), &mut dc);
        }
        if self.k == 1 {
            return Some(Tensor::from_vec(self.cin, input.h, input.w, dcols));
        }
        Some(col2im(&dcols, self.cin, input.h, input.w))
    }

    fn columns<'a>(&self, input: &'a Tensor<T>) -> std::borrow::Cow<'a, [T]> {
        if self.k == 1 {
            std::borrow::Cow::Borrowed(&input.data)
        } else {
            std::borrow::Cow::Owned(im2col(input))
        }
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}

/// 3x3, pad 1 patch matrix with rows `ci * 9 + ky * 3 + kx` and columns `y * w + x`.
fn im2col<T: Real>(input: &Tensor<T>) -> Vec<T> {
    let (h, w) = (input.h, input.w);
    let hw = h * w;
    let mut cols = vec![T::zero(); input.c * 9 * hw];
    for ci in 0..input.c {
        let src = input.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let (x0, x1) = (kx.saturating_sub(1), (w + kx).saturating_sub(1).min(w));
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let srow = &src[(sy - 1) * w..][..w];
                    // output x reads source x + kx - 1
                    let dst = &mut row[y * w..][..w];
                    let (ox0, ox1) = (1usize.saturating_sub(kx), w.min(w + 1 - kx));
                    dst[ox0..ox1].copy_from_slice(&srow[x0..x1]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let dst = out.channel_mut(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let (x0, x1) = (kx.saturating_sub(1), (w + kx).saturating_sub(1).min(w));
                let (ox0, ox1) = (1usize.saturating_sub(kx), w.min(w + 1 - kx));
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let drow = &mut dst[(sy - 1) * w..][..w];
                    let srow = &row[y * w..][..w];
                    for (d, s) in drow[x0..x1].iter_mut().zip(&srow[ox0..ox1]) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
    out
}

pub fn relu_inplace<T: Real>(t: &mut Tensor<T>) {
    t.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Masks `grad` by the post-activation output of a ReLU.
pub fn relu_backward<T: Real>(activated: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, a) in grad.data.iter_mut().zip(&activated.data) {
        if *a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Argmax offset (0..4) within each 2x2 pooling window.
#[derive(Debug, Clone)]
pub struct PoolIndices {
    pub idx: Vec<u8>,
}

/// 2x2 max pooling, stride 2. Height and width must be even.
pub fn maxpool2<T: Real>(input: &Tensor<T>) -> (Tensor<T>, PoolIndices) {
    assert!(input.h % 2 == 0 && input.w % 2 == 0, "maxpool2 needs even dims");
    let (oh, ow) = (input.h / 2, input.w / 2);
    let mut out = Tensor::zeros(input.c, oh, ow);
    let mut idx = vec![0u8; input.c * oh * ow];
    for ch in 0..input.c {
        let src = input.channel(ch);
        for y in 0..oh {
            for x in 0..ow {
                let base = 2 * y * input.w + 2 * x;
                let cand = [base, base + 1, base + input.w, base + input.w + 1];
                let mut best = 0;
                for k in 1..4 {
                    // first max wins on ties
                    if src[cand[k]] > src[cand[best]] {
                        best = k;
                    }
                }
                let o = (ch * oh + y) * ow + x;
                out.data[o] = src[cand[best]];
                idx[o] = best as u8;
            }
        }
    }
    (out, PoolIndices { idx })
}

pub fn maxpool2_backward<T: Real>(grad: &Tensor<T>, indices: &PoolIndices) -> Tensor<T> {
    let (h, w) = (grad.h * 2, grad.w * 2);
    let mut out = Tensor::zeros(grad.c, h, w);
    for ch in 0..grad.c {
        for y in 0..grad.h {
            for x in 0..grad.w {
                let o = (ch * grad.h + y) * grad.w + x;
                let k = indices.idx[o] as usize;
                let (dy, dx) = (k / 2, k % 2);
                out.data[(ch * h + 2 * y + dy) * w + 2 * x + dx] = grad.data[o];
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input.h * 2, input.w * 2);
    let mut out = Tensor::zeros(input.c, h, w);
    for ch in 0..input.c {
        for y in 0..h {
            for x in 0..w {
                out.data[(ch * h + y) * w + x] = input.at(ch, y / 2, x / 2);
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(grad: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (grad.h / 2, grad.w / 2);
    let mut out = Tensor::zeros(grad.c, h, w);
    for ch in 0..grad.c {
        for y in 0..grad.h {
            for x in 0..grad.w {
                let o = (ch * h + y / 2) * w + x / 2;
                out.data[o] = out.data[o] + grad.at(ch, y, x);
            }
        }
    }
    out
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.c + b.c, a.h, a.w, data)
}

/// Adjoint of [`concat_channels`].
pub fn split_channels<T: Real>(t: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let cut = first * t.plane();
    (
        Tensor::from_vec(first, t.h, t.w, t.data[..cut].to_vec()),
        Tensor::from_vec(t.c - first, t.h, t.w, t.data[cut..].to_vec()),
    )
}
