//! High-confidence region mining and contrastive sample selection.
//!
//! Weak regions hold positions whose winning-class probability lies strictly
//! between `t_w` and `t_s`; strong regions hold positions above `t_s`. On
//! labeled slices the winning class must also equal the ground truth and the
//! weak condition has no lower bound. Queries come from weak regions, the
//! positive is the centroid of the class's strong region, and negatives are
//! strong-region vectors of every other class.

use ndarray::{Array3, ArrayView2, ArrayView3, Zip};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Real, Tensor};
use crate::volume::IGNORE;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceThresholds {
    pub t_w: f64,
    pub t_s: f64,
}

impl ConfidenceThresholds {
    pub fn new(t_w: f64, t_s: f64) -> Result<Self> {
        let th = Self { t_w, t_s };
        th.validate()?;
        Ok(th)
    }

    pub fn validate(&self) -> Result<()> {
        if 0.0 < self.t_w && self.t_w < self.t_s && self.t_s < 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "thresholds must satisfy 0 < t_w < t_s < 1, got t_w={} t_s={}",
                self.t_w, self.t_s
            )))
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest<I: IntoIterator<Item = f64>>(values: I) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Per-class weak and strong masks over one slice, laid out `[class][y][x]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfidenceRegions {
    pub weak: Array3<bool>,
    pub strong: Array3<bool>,
}

impl ConfidenceRegions {
    pub fn empty(classes: usize, h: usize, w: usize) -> Self {
        Self {
            weak: Array3::from_elem((classes, h, w), false),
            strong: Array3::from_elem((classes, h, w), false),
        }
    }

    pub fn classes(&self) -> usize {
        self.weak.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.weak.dim();
        (h, w)
    }

    pub fn weak_count(&self, class: usize) -> usize {
        self.weak.index_axis(ndarray::Axis(0), class).iter().filter(|&&b| b).count()
    }

    pub fn strong_count(&self, class: usize) -> usize {
        self.strong.index_axis(ndarray::Axis(0), class).iter().filter(|&&b| b).count()
    }
}

fn check_probs(probs: &ArrayView3<'_, f64>) -> Result<()> {
    let (classes, h, w) = probs.dim();
    if classes == 0 {
        return Err(Error::Input("probability map has no classes".into()));
    }
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            for c in 0..classes {
                let p = probs[[c, y, x]];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Input(format!("probability {p} at ({y}, {x}) outside [0, 1]")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::Input(format!("probabilities at ({y}, {x}) sum to {sum}")));
            }
        }
    }
    Ok(())
}

/// Regions for an unlabeled slice from its `[class][y][x]` softmax map.
pub fn regions_unlabeled(probs: ArrayView3<'_, f64>, th: &ConfidenceThresholds) -> Result<ConfidenceRegions> {
    th.validate()?;
    check_probs(&probs)?;
    let (classes, h, w) = probs.dim();
    let mut out = ConfidenceRegions::empty(classes, h, w);
    for y in 0..h {
        for x in 0..w {
            let c = argmax_lowest((0..classes).map(|k| probs[[k, y, x]]));
            let p = probs[[c, y, x]];
            if p > th.t_w && p < th.t_s {
                out.weak[[c, y, x]] = true;
            } else if p > th.t_s {
                out.strong[[c, y, x]] = true;
            }
        }
    }
    Ok(out)
}

/// Regions for a labeled slice; IGNORE pixels never enter a region.
pub fn regions_labeled(
    probs: ArrayView3<'_, f64>,
    gt: ArrayView2<'_, i32>,
    th: &ConfidenceThresholds,
) -> Result<ConfidenceRegions> {
    th.validate()?;
    check_probs(&probs)?;
    let (classes, h, w) = probs.dim();
    if gt.dim() != (h, w) {
        return Err(Error::Input(format!(
            "label map {:?} does not match probability map {:?}",
            gt.dim(),
            (h, w)
        )));
    }
    let mut out = ConfidenceRegions::empty(classes, h, w);
    for y in 0..h {
        for x in 0..w {
            let g = gt[[y, x]];
            if g == IGNORE {
                continue;
            }
            if g < 0 || g as usize >= classes {
                return Err(Error::Input(format!("class id {g} at ({y}, {x}) outside [0, {classes})")));
            }
            let c = argmax_lowest((0..classes).map(|k| probs[[k, y, x]]));
            if c != g as usize {
                continue;
            }
            let p = probs[[c, y, x]];
            if p < th.t_s {
                out.weak[[c, y, x]] = true;
            } else if p > th.t_s {
                out.strong[[c, y, x]] = true;
            }
        }
    }
    Ok(out)
}

/// Per-class union of two region sets on the same grid.
pub fn merge_regions(a: &ConfidenceRegions, b: &ConfidenceRegions) -> Result<ConfidenceRegions> {
    if a.weak.dim() != b.weak.dim() {
        return Err(Error::Input(format!(
            "cannot merge regions of shape {:?} and {:?}",
            a.weak.dim(),
            b.weak.dim()
        )));
    }
    let mut out = a.clone();
    Zip::from(&mut out.weak).and(&b.weak).for_each(|o, &v| *o |= v);
    Zip::from(&mut out.strong).and(&b.strong).for_each(|o, &v| *o |= v);
    Ok(out)
}

/// A pixel of one slice in the combined labeled + unlabeled batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PixelRef {
    pub slice: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub at: PixelRef,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassSamples {
    pub queries: Vec<Sample>,
    /// Centroid of the strong pool; `None` when the pool is empty.
    pub positive: Option<Vec<f64>>,
    pub negatives: Vec<Sample>,
    /// Every strong-region position of this class (the centroid's support).
    pub strong_pool: Vec<PixelRef>,
}

impl ClassSamples {
    /// Whether this class has a query, a positive and a negative.
    pub fn contributes(&self) -> bool {
        !self.queries.is_empty() && self.positive.is_some() && !self.negatives.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContrastiveSampleSet {
    pub classes: Vec<ClassSamples>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub queries: usize,
    pub negatives: usize,
}

fn positions(mask: ArrayView2<'_, bool>, slice: usize, out: &mut Vec<PixelRef>) {
    for ((y, x), &m) in mask.indexed_iter() {
        if m {
            out.push(PixelRef { slice, y, x });
        }
    }
}

fn vector_at<T: Real>(maps: &[&Tensor<T>], at: PixelRef) -> Vec<f64> {
    let m = maps[at.slice];
    (0..m.c).map(|d| m.at(d, at.y, at.x).as_f64()).collect()
}

/// Draws per-class queries, positive centroid and negatives.
///
/// `regions[i]` and `rep_maps[i]` describe the same slice. Queries are a
/// uniform subset of at most `counts.queries` weak positions (all of them
/// when fewer). Negatives are `counts.negatives` strong positions of other
/// classes, drawn without replacement when the pool is large enough and with
/// replacement otherwise.
pub fn draw_samples<T: Real>(
    regions: &[ConfidenceRegions],
    rep_maps: &[&Tensor<T>],
    counts: SampleCounts,
    seed: u64,
) -> Result<ContrastiveSampleSet> {
    if regions.len() != rep_maps.len() {
        return Err(Error::Input(format!(
            "{} region sets for {} representation maps",
            regions.len(),
            rep_maps.len()
        )));
    }
    let Some(first) = regions.first() else {
        return Ok(ContrastiveSampleSet::default());
    };
    let classes = first.classes();
    for (r, m) in regions.iter().zip(rep_maps) {
        if r.classes() != classes || r.spatial() != (m.h, m.w) {
            return Err(Error::Input("regions and representation maps are not aligned".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut weak: Vec<Vec<PixelRef>> = vec![Vec::new(); classes];
    let mut strong: Vec<Vec<PixelRef>> = vec![Vec::new(); classes];
    for (s, r) in regions.iter().enumerate() {
        for c in 0..classes {
            positions(r.weak.index_axis(ndarray::Axis(0), c), s, &mut weak[c]);
            positions(r.strong.index_axis(ndarray::Axis(0), c), s, &mut strong[c]);
        }
    }

    let mut set = ContrastiveSampleSet::default();
    for c in 0..classes {
        let pool = &weak[c];
        let picked: Vec<PixelRef> = if pool.len() <= counts.queries {
            pool.clone()
        } else {
            index::sample(&mut rng, pool.len(), counts.queries)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        };
        let queries = picked
            .into_iter()
            .map(|at| Sample {
                vector: vector_at(rep_maps, at),
                at,
            })
            .collect();

        let positive = if strong[c].is_empty() {
            None
        } else {
            let dim = rep_maps[0].c;
            let mut mean = vec![0.0; dim];
            for &at in &strong[c] {
                for (m, v) in mean.iter_mut().zip(vector_at(rep_maps, at)) {
                    *m += v;
                }
            }
            let n = strong[c].len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            Some(mean)
        };

        let neg_pool: Vec<PixelRef> = (0..classes)
            .filter(|&i| i != c)
            .flat_map(|i| strong[i].iter().copied())
            .collect();
        let neg_idx: Vec<usize> = if neg_pool.is_empty() || counts.negatives == 0 {
            Vec::new()
        } else if neg_pool.len() >= counts.negatives {
            index::sample(&mut rng, neg_pool.len(), counts.negatives).into_vec()
        } else {
            (0..counts.negatives).map(|_| rng.gen_range(0..neg_pool.len())).collect()
        };
        let negatives = neg_idx
            .into_iter()
            .map(|i| Sample {
                at: neg_pool[i],
                vector: vector_at(rep_maps, neg_pool[i]),
            })
            .collect();

        set.classes.push(ClassSamples {
            queries,
            positive,
            negatives,
            strong_pool: strong[c].clone(),
        });
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;

    fn one_pixel(p: &[f64]) -> Array3<f64> {
        Array3::from_shape_vec((p.len(), 1, 1), p.to_vec()).unwrap()
    }

    fn th(t_w: f64, t_s: f64) -> ConfidenceThresholds {
        ConfidenceThresholds::new(t_w, t_s).unwrap()
    }

    #[test]
    fn thresholds_must_be_ordered() {
        assert!(ConfidenceThresholds::new(0.9, 0.7).is_err());
        assert!(ConfidenceThresholds::new(0.0, 0.7).is_err());
        assert!(ConfidenceThresholds::new(0.7, 1.0).is_err());
    }

    #[test]
    fn unlabeled_weak_strong_and_uniform() {
        let r = regions_unlabeled(one_pixel(&[0.80, 0.15, 0.05]).view(), &th(0.7, 0.9)).unwrap();
        assert_eq!(r.weak.iter().copied().collect::<Vec<_>>(), vec![true, false, false]);
        assert!(r.strong.iter().all(|&b| !b));

        let r = regions_unlabeled(one_pixel(&[0.95, 0.03, 0.02]).view(), &th(0.7, 0.9)).unwrap();
        assert_eq!(r.strong.iter().copied().collect::<Vec<_>>(), vec![true, false, false]);
        assert!(r.weak.iter().all(|&b| !b));

        let third = 1.0 / 3.0;
        let r = regions_unlabeled(one_pixel(&[third, third, third]).view(), &th(0.34, 0.9)).unwrap();
        assert!(r.weak.iter().chain(r.strong.iter()).all(|&b| !b));
    }

    #[test]
    fn probability_equal_to_t_s_is_in_neither_region() {
        let r = regions_unlabeled(one_pixel(&[0.5, 0.5]).view(), &th(0.3, 0.5)).unwrap();
        assert!(r.weak.iter().chain(r.strong.iter()).all(|&b| !b));
        let gt = Array2::from_elem((1, 1), 0);
        let r = regions_labeled(one_pixel(&[0.5, 0.5]).view(), gt.view(), &th(0.3, 0.5)).unwrap();
        assert!(r.weak.iter().chain(r.strong.iter()).all(|&b| !b));
    }

    #[test]
    fn labeled_weak_has_no_lower_bound() {
        let p = one_pixel(&[0.40, 0.35, 0.25]);
        let gt = Array2::from_elem((1, 1), 0);
        let r = regions_labeled(p.view(), gt.view(), &th(0.7, 0.9)).unwrap();
        assert!(r.weak[[0, 0, 0]]);

        let p = one_pixel(&[0.80, 0.15, 0.05]);
        let r = regions_labeled(p.view(), gt.view(), &th(0.7, 0.9)).unwrap();
        assert!(r.weak[[0, 0, 0]] && !r.strong[[0, 0, 0]]);
        let r = regions_labeled(p.view(), Array2::from_elem((1, 1), 1).view(), &th(0.7, 0.9)).unwrap();
        assert!(r.weak.iter().chain(r.strong.iter()).all(|&b| !b));
        let r = regions_labeled(p.view(), Array2::from_elem((1, 1), IGNORE).view(), &th(0.7, 0.9)).unwrap();
        assert!(r.weak.iter().chain(r.strong.iter()).all(|&b| !b));
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(regions_unlabeled(one_pixel(&[0.5, 0.6]).view(), &th(0.7, 0.9)).is_err());
        let gt = Array2::from_elem((1, 1), 3);
        assert!(regions_labeled(one_pixel(&[0.5, 0.5]).view(), gt.view(), &th(0.7, 0.9)).is_err());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax_lowest([0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax_lowest([0.0, 0.0]), 0);
    }

    #[test]
    fn merge_is_union() {
        let mut a = ConfidenceRegions::empty(2, 2, 2);
        let mut b = ConfidenceRegions::empty(2, 2, 2);
        assert_eq!(merge_regions(&a, &b).unwrap(), a);
        a.weak[[0, 0, 0]] = true;
        b.weak[[1, 1, 1]] = true;
        b.strong[[0, 0, 1]] = true;
        let m = merge_regions(&a, &b).unwrap();
        assert!(m.weak[[0, 0, 0]] && m.weak[[1, 1, 1]] && m.strong[[0, 0, 1]]);
        assert_eq!(merge_regions(&m, &ConfidenceRegions::empty(2, 2, 2)).unwrap(), m);
        assert!(merge_regions(&a, &ConfidenceRegions::empty(3, 2, 2)).is_err());
    }

    #[test]
    fn overlapping_positions_are_pooled_once() {
        let mut a = ConfidenceRegions::empty(2, 3, 3);
        let mut b = ConfidenceRegions::empty(2, 3, 3);
        a.strong[[0, 0, 0]] = true;
        a.strong[[0, 1, 1]] = true;
        b.strong[[0, 1, 1]] = true;
        b.strong[[0, 2, 2]] = true;
        let m = merge_regions(&a, &b).unwrap();
        let rep = Tensor::<f64>::from_vec(2, 3, 3, (0..18).map(|v| v as f64).collect());
        let s = draw_samples(&[m], &[&rep], SampleCounts { queries: 8, negatives: 8 }, 0).unwrap();
        // set-union oracle: {(0,0),(1,1)} ∪ {(1,1),(2,2)} has three elements
        assert_eq!(s.classes[0].strong_pool.len(), 3);
    }

    #[test]
    fn positive_is_mean_of_strong_pool() {
        let mut r = ConfidenceRegions::empty(2, 1, 2);
        r.strong[[0, 0, 0]] = true;
        r.strong[[0, 0, 1]] = true;
        let rep = Tensor::<f64>::from_vec(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let s = draw_samples(&[r], &[&rep], SampleCounts { queries: 4, negatives: 4 }, 3).unwrap();
        assert_eq!(s.classes[0].positive, Some(vec![0.5, 0.5]));
        assert!(s.classes[0].queries.is_empty());
        assert!(!s.classes[0].contributes());
        assert!(s.classes[1].positive.is_none());
        assert_eq!(s.classes[1].negatives.len(), 4);
    }

    #[test]
    fn negatives_come_only_from_other_classes() {
        // three classes, 200 strong positions each, stripes of width 5
        let (h, w) = (20, 30);
        let mut r = ConfidenceRegions::empty(3, h, w);
        for y in 0..h {
            for x in 0..w {
                let c = (x / 10) % 3;
                r.strong[[c, y, x]] = true;
                if y == 0 {
                    r.weak[[c, y, x]] = true;
                    r.strong[[c, y, x]] = false;
                }
            }
        }
        let rep = Tensor::<f64>::from_vec(2, h, w, vec![1.0; 2 * h * w]);
        let s = draw_samples(&[r.clone()], &[&rep], SampleCounts { queries: 128, negatives: 128 }, 9).unwrap();
        for (c, cs) in s.classes.iter().enumerate() {
            assert_eq!(cs.strong_pool.len(), 190);
            assert_eq!(cs.negatives.len(), 128);
            let distinct: std::collections::BTreeSet<_> = cs.negatives.iter().map(|n| n.at).collect();
            assert_eq!(distinct.len(), 128, "pool of 380 is sampled without replacement");
            for n in &cs.negatives {
                assert!(!r.strong[[c, n.at.y, n.at.x]]);
                let owner = (0..3).find(|&k| r.strong[[k, n.at.y, n.at.x]]);
                assert!(owner.is_some() && owner != Some(c));
            }
            assert_eq!(cs.queries.len(), 10);
            assert!(cs.queries.iter().all(|q| r.weak[[c, q.at.y, q.at.x]]));
        }
        let again = draw_samples(&[r], &[&rep], SampleCounts { queries: 128, negatives: 128 }, 9).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn small_negative_pool_is_drawn_with_replacement() {
        let mut r = ConfidenceRegions::empty(2, 1, 3);
        r.weak[[0, 0, 0]] = true;
        r.strong[[0, 0, 1]] = true;
        r.strong[[1, 0, 2]] = true;
        let rep = Tensor::<f64>::from_vec(1, 1, 3, vec![1.0, 2.0, 3.0]);
        let s = draw_samples(&[r], &[&rep], SampleCounts { queries: 5, negatives: 6 }, 1).unwrap();
        assert_eq!(s.classes[0].negatives.len(), 6);
        assert!(s.classes[0].negatives.iter().all(|n| n.vector == vec![3.0]));
        assert!(s.classes[0].contributes());
    }

    fn prob_map() -> impl Strategy<Value = Array3<f64>> {
        (2usize..6, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| {
            proptest::collection::vec(0.01f64..1.0, c * h * w).prop_map(move |raw| {
                let mut a = Array3::from_shape_vec((c, h, w), raw).unwrap();
                for y in 0..h {
                    for x in 0..w {
                        let s: f64 = (0..c).map(|k| a[[k, y, x]].powi(4)).sum();
                        for k in 0..c {
                            a[[k, y, x]] = a[[k, y, x]].powi(4) / s;
                        }
                    }
                }
                a
            })
        })
    }

    proptest! {
        #[test]
        fn regions_are_disjoint_and_single_class(p in prob_map(), t_w in 0.05f64..0.8, gap in 0.01f64..0.19) {
            let th = ConfidenceThresholds::new(t_w, t_w + gap).unwrap();
            let r = regions_unlabeled(p.view(), &th).unwrap();
            let (c, h, w) = p.dim();
            for y in 0..h {
                for x in 0..w {
                    let weak = (0..c).filter(|&k| r.weak[[k, y, x]]).count();
                    let strong = (0..c).filter(|&k| r.strong[[k, y, x]]).count();
                    prop_assert!(weak + strong <= 1);
                }
            }
        }

        #[test]
        fn raising_thresholds_never_grows_regions(p in prob_map(), t_w in 0.05f64..0.6, gap in 0.05f64..0.2, bump in 0.0f64..0.15) {
            let base = regions_unlabeled(p.view(), &ConfidenceThresholds::new(t_w, t_w + gap).unwrap()).unwrap();
            let higher_s = regions_unlabeled(p.view(), &ConfidenceThresholds::new(t_w, (t_w + gap + bump).min(0.99)).unwrap()).unwrap();
            prop_assert!(higher_s.strong.iter().zip(base.strong.iter()).all(|(&n, &o)| !n || o));
            let higher_w = regions_unlabeled(p.view(), &ConfidenceThresholds::new((t_w + bump).min(t_w + gap - 0.01), t_w + gap).unwrap()).unwrap();
            prop_assert!(higher_w.weak.iter().zip(base.weak.iter()).all(|(&n, &o)| !n || o));
        }
    }
}
