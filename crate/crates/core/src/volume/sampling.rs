use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabelVolume, SeismicVolume, IGNORE};
use crate::{Error, Result};

/// Uniform inline grid `offset, offset + stride, ...` that receives labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct SliceSamplingPlan {
    pub stride: usize,
    pub offset: usize,
}

impl Default for SliceSamplingPlan {
    fn default() -> Self {
        Self { stride: 100, offset: 0 }
    }
}

impl SliceSamplingPlan {
    pub fn validate(&self, n_inline: usize) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("sampling stride must be positive".into()));
        }
        if self.offset >= self.stride {
            return Err(Error::Config(format!(
                "sampling offset {} must be below stride {}",
                self.offset, self.stride
            )));
        }
        if self.offset >= n_inline {
            return Err(Error::Config(format!(
                "plan selects no labeled slice: offset {} with {} inlines",
                self.offset, n_inline
            )));
        }
        Ok(())
    }

    pub fn labeled_indices(&self, n_inline: usize) -> Vec<usize> {
        (self.offset..n_inline).step_by(self.stride.max(1)).collect()
    }

    pub fn unlabeled_indices(&self, n_inline: usize) -> Vec<usize> {
        (0..n_inline)
            .filter(|&i| i < self.offset || (i - self.offset) % self.stride != 0)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSlice {
    pub inline: usize,
    pub data: Array2<f32>,
    pub labels: Array2<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSlice {
    pub inline: usize,
    pub data: Array2<f32>,
}

/// Training inputs plus the held-out labels of every unlabeled slice.
#[derive(Debug, Clone)]
pub struct TrainingSplit {
    pub labeled: Vec<LabeledSlice>,
    pub unlabeled: Vec<UnlabeledSlice>,
    pub held_out: Vec<LabeledSlice>,
}

impl TrainingSplit {
    pub fn labeled_fraction(&self) -> f64 {
        self.labeled.len() as f64 / (self.labeled.len() + self.unlabeled.len()) as f64
    }
}

pub fn sample_training_slices(
    volume: &SeismicVolume,
    labels: &LabelVolume,
    plan: &SliceSamplingPlan,
) -> Result<TrainingSplit> {
    if volume.shape() != labels.shape() {
        return Err(Error::Input(format!(
            "volume shape {:?} differs from label shape {:?}",
            volume.shape(),
            labels.shape()
        )));
    }
    let n = volume.n_inline();
    plan.validate(n)?;
    let labeled = plan
        .labeled_indices(n)
        .into_iter()
        .map(|i| LabeledSlice {
            inline: i,
            data: volume.inline_slice(i),
            labels: labels.inline_slice(i),
        })
        .collect();
    let rest = plan.unlabeled_indices(n);
    let unlabeled = rest
        .iter()
        .map(|&i| UnlabeledSlice {
            inline: i,
            data: volume.inline_slice(i),
        })
        .collect();
    let held_out = rest
        .iter()
        .map(|&i| LabeledSlice {
            inline: i,
            data: volume.inline_slice(i),
            labels: labels.inline_slice(i),
        })
        .collect();
    Ok(TrainingSplit {
        labeled,
        unlabeled,
        held_out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct SparsityConfig {
    pub keep_fraction: f64,
    pub seed: u64,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self { keep_fraction: 0.5, seed: 0 }
    }
}

/// Keeps exactly `round(keep_fraction * labeled)` labeled pixels across all
/// slices, chosen uniformly; the rest become IGNORE.
pub fn sparsify_labels(slices: &[Array2<i32>], cfg: &SparsityConfig) -> Result<Vec<Array2<i32>>> {
    if !(0.0..=1.0).contains(&cfg.keep_fraction) {
        return Err(Error::Config(format!(
            "keep_fraction {} outside [0, 1]",
            cfg.keep_fraction
        )));
    }
    let positions: Vec<(usize, usize)> = slices
        .iter()
        .enumerate()
        .flat_map(|(s, a)| {
            a.iter()
                .enumerate()
                .filter(|(_, &v)| v != IGNORE)
                .map(move |(k, _)| (s, k))
        })
        .collect();
    let keep = (cfg.keep_fraction * positions.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut kept = vec![false; positions.len()];
    for i in index::sample(&mut rng, positions.len(), keep) {
        kept[i] = true;
    }
    let mut out: Vec<Array2<i32>> = slices.iter().map(|a| Array2::from_elem(a.dim(), IGNORE)).collect();
    for (&(s, k), keep) in positions.iter().zip(kept) {
        if keep {
            let w = slices[s].ncols();
            out[s][[k / w, k % w]] = slices[s][[k / w, k % w]];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn volumes(n_inline: usize) -> (SeismicVolume, LabelVolume) {
        let data = Array3::from_shape_fn((n_inline, 2, 3), |(i, _, _)| i as f32);
        let labels = Array3::from_shape_fn((n_inline, 2, 3), |(_, _, k)| (k % 2) as i32);
        (SeismicVolume::new(data).unwrap(), LabelVolume::new(labels, 2).unwrap())
    }

    #[test]
    fn stride_100_over_590_inlines() {
        let plan = SliceSamplingPlan { stride: 100, offset: 0 };
        assert_eq!(plan.labeled_indices(590), vec![0, 100, 200, 300, 400, 500]);
        let (v, l) = volumes(590);
        let split = sample_training_slices(&v, &l, &plan).unwrap();
        assert_eq!(split.labeled.len(), 6);
        assert_eq!(split.unlabeled.len(), 584);
        assert_eq!(split.held_out.len(), 584);
        assert!((split.labeled_fraction() - 6.0 / 590.0).abs() < 1e-12);
        assert!((split.labeled_fraction() * 100.0 - 1.02).abs() < 0.01);
        assert_eq!(split.unlabeled[0].data[[0, 0]], 1.0);
    }

    #[test]
    fn unit_stride_labels_everything() {
        let (v, l) = volumes(5);
        let split = sample_training_slices(&v, &l, &SliceSamplingPlan { stride: 1, offset: 0 }).unwrap();
        assert_eq!(split.labeled.len(), 5);
        assert!(split.unlabeled.is_empty() && split.held_out.is_empty());
    }

    #[test]
    fn offset_past_volume_is_an_error() {
        let (v, l) = volumes(5);
        let plan = SliceSamplingPlan { stride: 10, offset: 7 };
        assert!(matches!(sample_training_slices(&v, &l, &plan), Err(Error::Config(_))));
        // a stride longer than the volume still labels the offset slice
        let plan = SliceSamplingPlan { stride: 10, offset: 0 };
        assert_eq!(sample_training_slices(&v, &l, &plan).unwrap().labeled.len(), 1);
    }

    #[test]
    fn sparsify_extremes_and_exact_count() {
        let a = Array2::from_shape_fn((20, 50), |(i, j)| ((i + j) % 3) as i32);
        let same = sparsify_labels(&[a.clone()], &SparsityConfig { keep_fraction: 1.0, seed: 1 }).unwrap();
        assert_eq!(same[0], a);
        let none = sparsify_labels(&[a.clone()], &SparsityConfig { keep_fraction: 0.0, seed: 1 }).unwrap();
        assert!(none[0].iter().all(|&v| v == IGNORE));

        let cfg = SparsityConfig { keep_fraction: 0.5, seed: 42 };
        let half = sparsify_labels(&[a.clone()], &cfg).unwrap();
        assert_eq!(half[0].iter().filter(|&&v| v != IGNORE).count(), 500);
        assert_eq!(sparsify_labels(&[a.clone()], &cfg).unwrap(), half);
        let other = sparsify_labels(&[a], &SparsityConfig { keep_fraction: 0.5, seed: 43 }).unwrap();
        assert_ne!(other, half);
    }

    #[test]
    fn sparsify_rejects_bad_fraction() {
        let a = Array2::zeros((2, 2));
        assert!(sparsify_labels(&[a], &SparsityConfig { keep_fraction: 1.5, seed: 0 }).is_err());
    }

    proptest! {
        #[test]
        fn plan_partitions_inlines(n in 1usize..400, stride in 1usize..150, offset_raw in 0usize..150) {
            let offset = offset_raw % stride.min(n);
            let plan = SliceSamplingPlan { stride, offset };
            prop_assert!(plan.validate(n).is_ok());
            let mut all = plan.labeled_indices(n);
            let un = plan.unlabeled_indices(n);
            prop_assert!(all.iter().all(|i| !un.contains(i)));
            all.extend(un);
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn sparsify_conserves_count_and_classes(
            cells in proptest::collection::vec(-1i32..4, 1..200),
            keep in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let a = Array2::from_shape_vec((1, cells.len()), cells).unwrap();
            let before = a.iter().filter(|&&v| v != IGNORE).count();
            let out = sparsify_labels(&[a.clone()], &SparsityConfig { keep_fraction: keep, seed }).unwrap();
            let after = out[0].iter().filter(|&&v| v != IGNORE).count();
            prop_assert_eq!(after, (keep * before as f64).round() as usize);
            for (o, i) in out[0].iter().zip(a.iter()) {
                prop_assert!(*o == IGNORE || o == i);
            }
        }
    }
}
