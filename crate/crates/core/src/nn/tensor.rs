use std::fmt::Debug;

use ndarray::LinalgScalar;
use num_traits::Float;

/// Floating-point element type usable by the substrate (f32 for training, f64 for gradient checks).
pub trait Real:
    Float + LinalgScalar + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Single-image feature map in channel-major layout `[c][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length mismatch");
        Self { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, ch: usize) -> &[T] {
        let p = self.plane();
        &self.data[ch * p..(ch + 1) * p]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [T] {
        let p = self.plane();
        &mut self.data[ch * p..(ch + 1) * p]
    }

    #[inline]
    pub fn at(&self, ch: usize, y: usize, x: usize) -> T {
        self.data[(ch * self.h + y) * self.w + x]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reflection padding on the bottom and right edges (edge sample not repeated).
    pub fn reflect_pad(&self, new_h: usize, new_w: usize) -> Self {
        assert!(new_h >= self.h && new_w >= self.w);
        // mirror about the edge sample, repeating with period 2(n-1)
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let r = i % period;
            if r < n {
                r
            } else {
                period - r
            }
        };
        let mut out = Self::zeros(self.c, new_h, new_w);
        for ch in 0..self.c {
            for y in 0..new_h {
                let sy = reflect(y, self.h);
                for x in 0..new_w {
                    let sx = reflect(x, self.w);
                    out.data[(ch * new_h + y) * new_w + x] = self.at(ch, sy, sx);
                }
            }
        }
        out
    }

    /// Top-left crop.
    pub fn crop(&self, h: usize, w: usize) -> Self {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut out = Self::zeros(self.c, h, w);
        for ch in 0..self.c {
            for y in 0..h {
                let src = (ch * self.h + y) * self.w;
                let dst = (ch * h + y) * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }

    /// Adjoint of [`Tensor::crop`]: embeds into a zero tensor of the larger size.
    pub fn uncrop(&self, h: usize, w: usize) -> Self {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut out = Self::zeros(self.c, h, w);
        for ch in 0..self.c {
            for y in 0..self.h {
                let src = (ch * self.h + y) * self.w;
                let dst = (ch * h + y) * w;
                out.data[dst..dst + self.w].copy_from_slice(&self.data[src..src + self.w]);
            }
        }
        out
    }
}
