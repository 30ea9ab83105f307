//! Strong data augmentation by mixing two slices under a binary mask.
//!
//! A mask value of `true` keeps the pixel from slice A, `false` takes it from
//! slice B. The same mask is applied to amplitudes, pseudo-labels and
//! confidence regions so that every output position has a single donor.

use std::collections::BTreeSet;

use log::debug;
use ndarray::{Array2, Array3, Axis, Zip};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mining::ConfidenceRegions;
use crate::volume::IGNORE;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixKind {
    CutMix,
    ClassMix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct SdaConfig {
    pub kind: MixKind,
    pub area_fraction: f64,
    pub enabled_labeled: bool,
    pub enabled_unlabeled: bool,
}

impl Default for SdaConfig {
    fn default() -> Self {
        Self {
            kind: MixKind::CutMix,
            area_fraction: 0.25,
            enabled_labeled: false,
            enabled_unlabeled: true,
        }
    }
}

impl SdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.area_fraction > 0.0 && self.area_fraction < 1.0) {
            return Err(Error::Config(format!(
                "sda.area_fraction must lie in (0, 1), got {}",
                self.area_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixMask {
    /// `true` where the output takes slice A.
    pub keep_a: Array2<bool>,
    pub kind: MixKind,
    /// Batch index of the element acting as slice B.
    pub partner: usize,
}

impl MixMask {
    pub fn dim(&self) -> (usize, usize) {
        self.keep_a.dim()
    }

    pub fn inverted(&self) -> Self {
        Self {
            keep_a: self.keep_a.mapv(|v| !v),
            ..self.clone()
        }
    }
}

/// Ones everywhere except a uniformly placed rectangle of about
/// `area_fraction * h * w` zeros with the slice's aspect ratio.
pub fn cutmix_mask(h: usize, w: usize, area_fraction: f64, seed: u64) -> Result<MixMask> {
    if !(area_fraction > 0.0 && area_fraction < 1.0) {
        return Err(Error::Config(format!("area_fraction must lie in (0, 1), got {area_fraction}")));
    }
    let side = area_fraction.sqrt();
    let rh = ((h as f64 * side).round() as usize).min(h);
    let rw = ((w as f64 * side).round() as usize).min(w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = rng.gen_range(0..=h - rh);
    let x0 = rng.gen_range(0..=w - rw);
    let keep_a = Array2::from_shape_fn((h, w), |(y, x)| !(y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw));
    Ok(MixMask {
        keep_a,
        kind: MixKind::CutMix,
        partner: 0,
    })
}

/// Picks `ceil(present / 2)` of the classes in B's pseudo-label; those pixels
/// come from B.
pub fn classmix_mask(pseudo_b: &Array2<i32>, seed: u64) -> Result<MixMask> {
    let present: Vec<i32> = pseudo_b
        .iter()
        .copied()
        .filter(|&v| v != IGNORE)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if present.is_empty() {
        return Err(Error::Input("pseudo-label has no class to mix".into()));
    }
    let take = present.len().div_ceil(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: BTreeSet<i32> = index::sample(&mut rng, present.len(), take).into_iter().map(|i| present[i]).collect();
    if present.len() == 1 {
        debug!("classmix partner holds a single class; output copies the partner");
    }
    Ok(MixMask {
        keep_a: pseudo_b.mapv(|v| !chosen.contains(&v)),
        kind: MixKind::ClassMix,
        partner: 0,
    })
}

/// Something that can be mixed position by position.
pub trait Mixable: Sized {
    fn spatial(&self) -> (usize, usize);
    fn select(mask: &Array2<bool>, a: &Self, b: &Self) -> Self;
}

impl<T: Copy> Mixable for Array2<T> {
    fn spatial(&self) -> (usize, usize) {
        self.dim()
    }

    fn select(mask: &Array2<bool>, a: &Self, b: &Self) -> Self {
        let mut out = a.clone();
        Zip::from(&mut out).and(mask).and(b).for_each(|o, &m, &v| {
            if !m {
                *o = v;
            }
        });
        out
    }
}

fn select_planes(mask: &Array2<bool>, a: &Array3<bool>, b: &Array3<bool>) -> Array3<bool> {
    let mut out = a.clone();
    for (mut o, bp) in out.axis_iter_mut(Axis(0)).zip(b.axis_iter(Axis(0))) {
        Zip::from(&mut o).and(mask).and(&bp).for_each(|o, &m, &v| {
            if !m {
                *o = v;
            }
        });
    }
    out
}

impl Mixable for ConfidenceRegions {
    fn spatial(&self) -> (usize, usize) {
        ConfidenceRegions::spatial(self)
    }

    fn select(mask: &Array2<bool>, a: &Self, b: &Self) -> Self {
        ConfidenceRegions {
            weak: select_planes(mask, &a.weak, &b.weak),
            strong: select_planes(mask, &a.strong, &b.strong),
        }
    }
}

/// `keep_a ? A : B` at every position.
pub fn apply_sda<M: Mixable>(mask: &MixMask, a: &M, b: &M) -> Result<M> {
    if a.spatial() != mask.dim() || b.spatial() != mask.dim() {
        return Err(Error::Input(format!(
            "mix mask {:?} does not match slices {:?} and {:?}",
            mask.dim(),
            a.spatial(),
            b.spatial()
        )));
    }
    Ok(M::select(&mask.keep_a, a, b))
}

/// Partner of every batch element: each element mixes with its successor in
/// a seeded random cycle, so a batch of two swaps.
pub fn pair_partners(batch: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..batch).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut partner = vec![0; batch];
    for (k, &i) in order.iter().enumerate() {
        partner[i] = order[(k + 1) % batch];
    }
    partner
}

/// One mask per batch element, with B taken from that element's partner.
/// `pseudo` supplies the partner's class map for ClassMix.
pub fn batch_masks(cfg: &SdaConfig, pseudo: &[Array2<i32>], seed: u64) -> Result<Vec<MixMask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partners = pair_partners(pseudo.len(), rng.gen());
    partners
        .iter()
        .map(|&p| {
            let (h, w) = pseudo[p].dim();
            let mut m = match cfg.kind {
                MixKind::CutMix => cutmix_mask(h, w, cfg.area_fraction, rng.gen())?,
                MixKind::ClassMix => classmix_mask(&pseudo[p], rng.gen())?,
            };
            m.partner = p;
            Ok(m)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cutmix_area_and_determinism() {
        let m = cutmix_mask(64, 64, 0.25, 5).unwrap();
        let zeros = m.keep_a.iter().filter(|&&v| !v).count();
        assert!((zeros as i64 - 1024).abs() <= 64 + 64, "{zeros}");
        assert_eq!(cutmix_mask(64, 64, 0.25, 5).unwrap(), m);
        let tiny = cutmix_mask(64, 64, 1e-6, 5).unwrap();
        assert!(tiny.keep_a.iter().all(|&v| v));
        assert!(cutmix_mask(4, 4, 0.0, 0).is_err());
        assert!(cutmix_mask(4, 4, 1.0, 0).is_err());
    }

    #[test]
    fn cutmix_zeros_form_one_rectangle() {
        let m = cutmix_mask(20, 30, 0.3, 11).unwrap();
        let ys: Vec<usize> = (0..20).filter(|&y| m.keep_a.row(y).iter().any(|&v| !v)).collect();
        let xs: Vec<usize> = (0..30).filter(|&x| m.keep_a.column(x).iter().any(|&v| !v)).collect();
        assert_eq!(ys.len() * xs.len(), m.keep_a.iter().filter(|&&v| !v).count());
    }

    #[test]
    fn classmix_constant_partner_gives_partner() {
        let b = Array2::from_elem((4, 5), 3);
        let m = classmix_mask(&b, 0).unwrap();
        assert!(m.keep_a.iter().all(|&v| !v));
        let a = Array2::<f32>::zeros((4, 5));
        let bv = Array2::<f32>::ones((4, 5));
        assert_eq!(apply_sda(&m, &a, &bv).unwrap(), bv);
    }

    #[test]
    fn classmix_two_classes_selects_one() {
        let b = Array2::from_shape_fn((6, 6), |(y, _)| if y < 2 { 0 } else { 4 });
        let m = classmix_mask(&b, 9).unwrap();
        let from_b: BTreeSet<i32> = b.iter().zip(m.keep_a.iter()).filter(|(_, &k)| !k).map(|(&v, _)| v).collect();
        assert_eq!(from_b.len(), 1);
        let c = *from_b.iter().next().unwrap();
        for (&v, &k) in b.iter().zip(m.keep_a.iter()) {
            assert_eq!(!k, v == c);
        }
        assert_eq!(classmix_mask(&b, 9).unwrap(), m);
        assert!(classmix_mask(&Array2::from_elem((2, 2), IGNORE), 0).is_err());
    }

    #[test]
    fn extreme_masks() {
        let a = Array2::from_shape_fn((3, 3), |(y, x)| (y * 3 + x) as i32);
        let b = a.mapv(|v| v + 100);
        let ones = MixMask {
            keep_a: Array2::from_elem((3, 3), true),
            kind: MixKind::CutMix,
            partner: 1,
        };
        assert_eq!(apply_sda(&ones, &a, &b).unwrap(), a);
        assert_eq!(apply_sda(&ones.inverted(), &a, &b).unwrap(), b);
        assert!(apply_sda(&ones, &a, &Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn checkerboard_on_regions() {
        let mut ra = ConfidenceRegions::empty(2, 4, 4);
        let mut rb = ConfidenceRegions::empty(2, 4, 4);
        ra.weak.fill(true);
        rb.strong.fill(true);
        let m = MixMask {
            keep_a: Array2::from_shape_fn((4, 4), |(y, x)| (y + x) % 2 == 0),
            kind: MixKind::CutMix,
            partner: 1,
        };
        let out = apply_sda(&m, &ra, &rb).unwrap();
        for ((c, y, x), &w) in out.weak.indexed_iter() {
            let from_a = (y + x) % 2 == 0;
            assert_eq!(w, from_a, "{c} {y} {x}");
            assert_eq!(out.strong[[c, y, x]], !from_a);
        }
    }

    #[test]
    fn pairs_of_two_swap() {
        for seed in 0..10 {
            assert_eq!(pair_partners(2, seed), vec![1, 0]);
        }
        assert_eq!(pair_partners(1, 3), vec![0]);
        let p = pair_partners(5, 7);
        let mut seen = p.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert!(p.iter().enumerate().all(|(i, &j)| i != j));
    }

    proptest! {
        #[test]
        fn class_set_is_conserved(
            a in proptest::collection::vec(0i32..4, 64),
            b in proptest::collection::vec(2i32..7, 64),
            seed in any::<u64>(),
        ) {
            let a = Array2::from_shape_vec((8, 8), a).unwrap();
            let b = Array2::from_shape_vec((8, 8), b).unwrap();
            for m in [classmix_mask(&b, seed).unwrap(), cutmix_mask(8, 8, 0.4, seed).unwrap()] {
                let out = apply_sda(&m, &a, &b).unwrap();
                let donors: BTreeSet<i32> = a.iter().chain(b.iter()).copied().collect();
                prop_assert!(out.iter().all(|v| donors.contains(v)));
                prop_assert_eq!(apply_sda(&m.inverted(), &b, &a).unwrap(), out);
            }
        }
    }
}
