//! 3D seismic amplitude and facies-label volumes.
//!
//! Canonical axis order is `(inline, crossline, depth)`. An inline slice is
//! returned as a `[depth][crossline]` image so that rows run downward.

mod io;
mod sampling;
mod synth;

use ndarray::{Array2, Array3, ArrayView3, Axis};

pub use io::{load_labels, load_volume, save_labels, save_volume, VolumeHeader, AXIS_NAMES};
pub use sampling::{sample_training_slices, sparsify_labels, LabeledSlice, SliceSamplingPlan, SparsityConfig, TrainingSplit, UnlabeledSlice};
pub use synth::{synth_volume, SynthSpec};

use crate::{Error, Result};

/// Label sentinel excluded from every loss and metric.
pub const IGNORE: i32 = -1;

#[derive(Debug, Clone, PartialEq)]
pub struct SeismicVolume {
    data: Array3<f32>,
}

impl SeismicVolume {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.shape().contains(&0) {
            return Err(Error::Data(format!("volume has an empty axis: {:?}", data.shape())));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite amplitude at flat index {pos}")));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.data
    }

    /// `(n_inline, n_crossline, n_depth)`
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn n_inline(&self) -> usize {
        self.data.dim().0
    }

    pub fn inline_slice(&self, inline: usize) -> Array2<f32> {
        self.data.index_axis(Axis(0), inline).t().to_owned()
    }

    /// Zero mean, unit variance over the whole volume (constant volumes are only centred).
    pub fn standardized(&self) -> Self {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        Self {
            data: self.data.mapv(|v| ((v as f64 - mean) * inv) as f32),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    labels: Array3<i32>,
    classes: usize,
    class_names: Vec<String>,
}

impl LabelVolume {
    pub fn new(labels: Array3<i32>, classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Data("label volume needs at least one class".into()));
        }
        if let Some(bad) = labels.iter().find(|&&v| v != IGNORE && (v < 0 || v as usize >= classes)) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes}) and not IGNORE")));
        }
        let class_names = (0..classes).map(|c| format!("class{c}")).collect();
        Ok(Self {
            labels,
            classes,
            class_names,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.classes {
            return Err(Error::Data(format!(
                "{} class names for {} classes",
                names.len(),
                self.classes
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn labels(&self) -> ArrayView3<'_, i32> {
        self.labels.view()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    pub fn inline_slice(&self, inline: usize) -> Array2<i32> {
        self.labels.index_axis(Axis(0), inline).t().to_owned()
    }

    /// Voxel count per class (IGNORE not counted).
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &v in self.labels.iter() {
            if v != IGNORE {
                h[v as usize] += 1;
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_out_of_range() {
        let mut a = Array3::<f32>::zeros((2, 2, 2));
        a[[1, 0, 1]] = f32::NAN;
        assert!(matches!(SeismicVolume::new(a), Err(Error::Data(_))));
        let l = Array3::from_elem((1, 1, 2), 3);
        assert!(LabelVolume::new(l, 3).is_err());
        let l = Array3::from_elem((1, 1, 2), IGNORE);
        assert!(LabelVolume::new(l, 3).is_ok());
    }

    #[test]
    fn inline_slice_is_depth_by_crossline() {
        let a = Array3::from_shape_fn((2, 3, 4), |(i, j, k)| (i * 100 + j * 10 + k) as f32);
        let v = SeismicVolume::new(a).unwrap();
        let s = v.inline_slice(1);
        assert_eq!(s.dim(), (4, 3));
        assert_eq!(s[[3, 2]], 123.0);
    }

    #[test]
    fn standardization_gives_zero_mean_unit_variance() {
        let a = Array3::from_shape_fn((3, 4, 5), |(i, j, k)| (i * 7 + j * 3 + k * k) as f32);
        let v = SeismicVolume::new(a).unwrap().standardized();
        let n = 60.0;
        let mean: f64 = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
        let var: f64 = v.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-5);
    }
}
