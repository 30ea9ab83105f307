//! Label-smoothed cross-entropy, cosine similarity and the InfoNCE loss.
//!
//! Every loss returns its value together with the analytic gradient with
//! respect to its inputs; the trainer feeds those back into the network.

use log::warn;
use ndarray::{Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::mining::ContrastiveSampleSet;
use crate::volume::IGNORE;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub epsilon: f64,
    pub tau: f64,
    /// Use `(1 - eps) * onehot + eps / classes` targets instead of weight 1
    /// on the true class and `eps` on every other class.
    #[serde(default)]
    pub normalized_smoothing: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            tau: 0.5,
            normalized_smoothing: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Softmax along the class axis of a `[class][y][x]` logit map.
pub fn softmax_map(logits: ArrayView3<'_, f64>) -> Array3<f64> {
    let (classes, h, w) = logits.dim();
    let mut out = Array3::zeros((classes, h, w));
    let mut buf = vec![0.0; classes];
    for y in 0..h {
        for x in 0..w {
            for c in 0..classes {
                buf[c] = logits[[c, y, x]];
            }
            for (c, p) in softmax(&buf).into_iter().enumerate() {
                out[[c, y, x]] = p;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedLoss {
    pub value: f64,
    pub valid_pixels: usize,
    /// Set when every pixel was IGNORE and the loss fell back to 0.
    pub all_ignored: bool,
    /// d(value)/d(logits), one map per input slice.
    pub grad: Vec<Array3<f64>>,
}

/// Smoothed cross-entropy averaged over every non-IGNORE pixel of the batch.
///
/// Per pixel with true class `g` the loss is `-sum_i w_i log P(i)` with
/// `w_g = 1` and `w_i = epsilon` otherwise.
pub fn supervised_loss(
    logits: &[ArrayView3<'_, f64>],
    gts: &[ArrayView2<'_, i32>],
    epsilon: f64,
    normalized: bool,
) -> Result<SupervisedLoss> {
    if logits.len() != gts.len() {
        return Err(Error::Input(format!("{} logit maps for {} label maps", logits.len(), gts.len())));
    }
    let mut grad: Vec<Array3<f64>> = logits.iter().map(|l| Array3::zeros(l.dim())).collect();
    let mut total = 0.0;
    let mut valid = 0usize;
    let mut buf = Vec::new();
    let mut weights = Vec::new();
    for (s, (l, g)) in logits.iter().zip(gts).enumerate() {
        let (classes, h, w) = l.dim();
        if g.dim() != (h, w) {
            return Err(Error::Input(format!("label map {:?} does not match logits {:?}", g.dim(), (h, w))));
        }
        buf.resize(classes, 0.0);
        weights.resize(classes, 0.0);
        for y in 0..h {
            for x in 0..w {
                let gt = g[[y, x]];
                if gt == IGNORE {
                    continue;
                }
                if gt < 0 || gt as usize >= classes {
                    return Err(Error::Input(format!("class id {gt} at ({y}, {x}) outside [0, {classes})")));
                }
                let gt = gt as usize;
                for c in 0..classes {
                    buf[c] = l[[c, y, x]];
                    weights[c] = if normalized {
                        epsilon / classes as f64 + if c == gt { 1.0 - epsilon } else { 0.0 }
                    } else if c == gt {
                        1.0
                    } else {
                        epsilon
                    };
                }
                let logp = log_softmax(&buf);
                let wsum: f64 = weights.iter().sum();
                total -= weights.iter().zip(&logp).map(|(w, lp)| w * lp).sum::<f64>();
                for c in 0..classes {
                    grad[s][[c, y, x]] = logp[c].exp() * wsum - weights[c];
                }
                valid += 1;
            }
        }
    }
    if valid == 0 {
        warn!("supervised loss over a batch with no labeled pixel; using 0");
        return Ok(SupervisedLoss {
            value: 0.0,
            valid_pixels: 0,
            all_ignored: true,
            grad,
        });
    }
    let inv = 1.0 / valid as f64;
    grad.iter_mut().for_each(|g| g.mapv_inplace(|v| v * inv));
    Ok(SupervisedLoss {
        value: total * inv,
        valid_pixels: valid,
        all_ignored: false,
        grad,
    })
}

/// Norms at or below this are treated as zero vectors.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// One of the inputs had (near) zero norm; `value` is 0.
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Cosine {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= NORM_FLOOR || nb <= NORM_FLOOR {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Cosine {
        value: (dot / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Similarity plus its gradients with respect to `a` and `b` (zero when degenerate).
fn cosine_with_grad(a: &[f64], b: &[f64]) -> (Cosine, Vec<f64>, Vec<f64>) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= NORM_FLOOR || nb <= NORM_FLOOR {
        let c = Cosine {
            value: 0.0,
            degenerate: true,
        };
        return (c, vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let s = dot / (na * nb);
    let ga = a.iter().zip(b).map(|(&x, &y)| y / (na * nb) - s * x / (na * na)).collect();
    let gb = a.iter().zip(b).map(|(&x, &y)| x / (na * nb) - s * y / (nb * nb)).collect();
    (
        Cosine {
            value: s,
            degenerate: false,
        },
        ga,
        gb,
    )
}

/// Gradients of the contrastive loss, shaped like the class's samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassGrads {
    pub queries: Vec<Vec<f64>>,
    pub positive: Option<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContrastiveLoss {
    pub value: f64,
    /// Number of contributing (class, query) pairs.
    pub pairs: usize,
    pub contributing_classes: usize,
    /// No class had a query, a positive and a negative.
    pub skipped: bool,
    pub degenerate_similarities: usize,
    pub grads: Vec<ClassGrads>,
}

/// InfoNCE averaged over every contributing (class, query) pair.
pub fn contrastive_loss(samples: &ContrastiveSampleSet, tau: f64) -> Result<ContrastiveLoss> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let mut out = ContrastiveLoss {
        grads: vec![ClassGrads::default(); samples.classes.len()],
        ..ContrastiveLoss::default()
    };
    let mut total = 0.0;
    for (cs, g) in samples.classes.iter().zip(out.grads.iter_mut()) {
        if !cs.contributes() {
            continue;
        }
        let pos = cs.positive.as_ref().expect("contributing class has a positive");
        out.contributing_classes += 1;
        out.pairs += cs.queries.len();
        g.queries = vec![vec![0.0; pos.len()]; cs.queries.len()];
        g.negatives = vec![vec![0.0; pos.len()]; cs.negatives.len()];
        let mut gpos = vec![0.0; pos.len()];
        let mut logits = Vec::with_capacity(cs.negatives.len() + 1);
        let mut sims = Vec::with_capacity(cs.negatives.len() + 1);
        for (qi, q) in cs.queries.iter().enumerate() {
            logits.clear();
            sims.clear();
            let (s, gq, gk) = cosine_with_grad(&q.vector, pos);
            out.degenerate_similarities += s.degenerate as usize;
            logits.push(s.value / tau);
            sims.push((gq, gk));
            for n in &cs.negatives {
                let (s, gq, gk) = cosine_with_grad(&q.vector, &n.vector);
                out.degenerate_similarities += s.degenerate as usize;
                logits.push(s.value / tau);
                sims.push((gq, gk));
            }
            let logp = log_softmax(&logits);
            total -= logp[0];
            // d(-log p_0)/d(logit_k) = p_k - [k == 0]
            for (k, (gq, gk)) in sims.iter().enumerate() {
                let d = (logp[k].exp() - if k == 0 { 1.0 } else { 0.0 }) / tau;
                for (acc, v) in g.queries[qi].iter_mut().zip(gq) {
                    *acc += d * v;
                }
                let key = if k == 0 { &mut gpos } else { &mut g.negatives[k - 1] };
                for (acc, v) in key.iter_mut().zip(gk) {
                    *acc += d * v;
                }
            }
        }
        g.positive = Some(gpos);
    }
    if out.pairs == 0 {
        out.skipped = true;
        return Ok(out);
    }
    let inv = 1.0 / out.pairs as f64;
    out.value = total * inv;
    for g in &mut out.grads {
        g.queries.iter_mut().chain(g.negatives.iter_mut()).chain(g.positive.iter_mut()).for_each(|v| {
            v.iter_mut().for_each(|x| *x *= inv);
        });
    }
    Ok(out)
}

pub fn total_loss(sup: f64, con: f64) -> Result<f64> {
    if !sup.is_finite() || !con.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss component: sup={sup} con={con}")));
    }
    Ok(sup + con)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::{ClassSamples, PixelRef, Sample};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn sample(v: Vec<f64>) -> Sample {
        Sample {
            at: PixelRef { slice: 0, y: 0, x: 0 },
            vector: v,
        }
    }

    fn one_class(q: Vec<Vec<f64>>, pos: Vec<f64>, neg: Vec<Vec<f64>>) -> ContrastiveSampleSet {
        ContrastiveSampleSet {
            classes: vec![ClassSamples {
                queries: q.into_iter().map(sample).collect(),
                positive: Some(pos),
                negatives: neg.into_iter().map(sample).collect(),
                strong_pool: vec![],
            }],
        }
    }

    #[test]
    fn softmax_examples() {
        assert!(softmax(&[0.0, 0.0, 0.0]).iter().all(|&p| close(p, 1.0 / 3.0, 1e-15)));
        let p = softmax(&[2f64.ln(), 0.0, 0.0]);
        assert!(close(p[0], 0.5, 1e-15) && close(p[1], 0.25, 1e-15) && close(p[2], 0.25, 1e-15));
        let p = softmax(&[1000.0, 0.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert_eq!(p[0], 1.0);
        // e^-1000 underflows in f64 as well, so the oracle value is exactly 0
        assert!(p[1] < 1e-300);
    }

    fn logit_map(p: &[f64]) -> Array3<f64> {
        Array3::from_shape_vec((p.len(), 1, 1), p.iter().map(|v| v.ln()).collect()).unwrap()
    }

    #[test]
    fn smoothed_loss_hand_example() {
        let l = logit_map(&[0.5, 0.25, 0.25]);
        let g = Array2::from_elem((1, 1), 0);
        let r = supervised_loss(&[l.view()], &[g.view()], 0.1, false).unwrap();
        let want = -(0.5f64.ln() + 0.1 * 0.25f64.ln() + 0.1 * 0.25f64.ln());
        assert!(close(r.value, want, 1e-12));
        assert!(close(r.value, 0.9704, 5e-5));
    }

    #[test]
    fn perfect_prediction_and_all_ignored() {
        let l = Array3::from_shape_vec((2, 1, 1), vec![800.0, 0.0]).unwrap();
        let g = Array2::from_elem((1, 1), 0);
        assert!(supervised_loss(&[l.view()], &[g.view()], 0.0, false).unwrap().value < 1e-300);
        let g = Array2::from_elem((1, 1), IGNORE);
        let r = supervised_loss(&[l.view()], &[g.view()], 0.1, false).unwrap();
        assert!(r.all_ignored && r.value == 0.0);
        assert!(r.grad[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ignore_pixels_leave_the_average() {
        let l = Array3::from_shape_vec((2, 1, 2), vec![1.0, 5.0, -1.0, 2.0]).unwrap();
        let g = Array2::from_shape_vec((1, 2), vec![0, IGNORE]).unwrap();
        let r = supervised_loss(&[l.view()], &[g.view()], 0.1, false).unwrap();
        let only = Array3::from_shape_vec((2, 1, 1), vec![1.0, -1.0]).unwrap();
        let r1 = supervised_loss(&[only.view()], &[Array2::from_elem((1, 1), 0).view()], 0.1, false).unwrap();
        assert_eq!(r.valid_pixels, 1);
        assert!(close(r.value, r1.value, 1e-15));
        assert_eq!(r.grad[0][[0, 0, 1]], 0.0);
    }

    #[test]
    fn epsilon_zero_is_cross_entropy() {
        let l = Array3::from_shape_vec((3, 1, 2), vec![0.3, -1.0, 2.0, 0.5, -0.7, 0.1]).unwrap();
        let g = Array2::from_shape_vec((1, 2), vec![2, 0]).unwrap();
        let r = supervised_loss(&[l.view()], &[g.view()], 0.0, false).unwrap();
        let n = supervised_loss(&[l.view()], &[g.view()], 0.0, true).unwrap();
        let ce = |z: [f64; 3], k: usize| -(z[k].exp() / z.iter().map(|v| v.exp()).sum::<f64>()).ln();
        let want = 0.5 * (ce([0.3, 2.0, -0.7], 2) + ce([-1.0, 0.5, 0.1], 0));
        assert!(close(r.value, want, 1e-12));
        assert!(close(n.value, want, 1e-12));
    }

    #[test]
    fn normalized_variant_uses_convex_targets() {
        let l = logit_map(&[0.5, 0.25, 0.25]);
        let g = Array2::from_elem((1, 1), 0);
        let r = supervised_loss(&[l.view()], &[g.view()], 0.3, true).unwrap();
        let q = [0.7 + 0.1, 0.1, 0.1];
        let want = -(q[0] * 0.5f64.ln() + q[1] * 0.25f64.ln() + q[2] * 0.25f64.ln());
        assert!(close(r.value, want, 1e-12));
    }

    #[test]
    fn bad_class_id_is_an_input_error() {
        let l = Array3::<f64>::zeros((2, 1, 1));
        let g = Array2::from_elem((1, 1), 2);
        assert!(matches!(supervised_loss(&[l.view()], &[g.view()], 0.1, false), Err(Error::Input(_))));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).value, 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).value, 0.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).value, -1.0);
        let z = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]);
        assert!(z.degenerate && z.value == 0.0);
    }

    #[test]
    fn infonce_closed_forms() {
        let r = contrastive_loss(&one_class(vec![vec![1.0, 0.0]], vec![1.0, 1.0], vec![vec![1.0, -1.0]]), 0.3).unwrap();
        assert!(close(r.value, 2f64.ln(), 1e-12));
        let r = contrastive_loss(&one_class(vec![vec![1.0, 0.0]], vec![1.0, 0.0], vec![vec![0.0, 1.0]]), 1.0).unwrap();
        assert!(close(r.value, (1.0 + (-1f64).exp()).ln(), 1e-12));
        assert!(close(r.value, 0.3133, 5e-5));
        let r = contrastive_loss(&one_class(vec![vec![1.0, 0.0]], vec![2.0, 0.0], vec![vec![-3.0, 0.0]]), 0.1).unwrap();
        assert!(close(r.value, (1.0 + (-20f64).exp()).ln(), 1e-15));
        assert!(close(r.value, 2.06e-9, 1e-11));
        assert_eq!(r.pairs, 1);
        assert!(!r.skipped);
    }

    #[test]
    fn tiny_tau_stays_finite() {
        let r = contrastive_loss(&one_class(vec![vec![1.0, 0.0]], vec![0.0, 1.0], vec![vec![1.0, 0.0]]), 0.001).unwrap();
        assert!(r.value.is_finite());
        assert!(close(r.value, 1000.0, 1e-9));
    }

    #[test]
    fn incomplete_classes_are_skipped() {
        let mut set = one_class(vec![vec![1.0, 0.0]], vec![1.0, 0.0], vec![]);
        let r = contrastive_loss(&set, 0.5).unwrap();
        assert!(r.skipped && r.value == 0.0 && r.pairs == 0);

        set.classes.push(ClassSamples {
            queries: vec![sample(vec![1.0, 0.0]), sample(vec![0.0, 1.0])],
            positive: Some(vec![1.0, 0.0]),
            negatives: vec![sample(vec![0.0, 1.0])],
            strong_pool: vec![],
        });
        let r = contrastive_loss(&set, 1.0).unwrap();
        assert_eq!(r.pairs, 2);
        assert_eq!(r.contributing_classes, 1);
        let a = (1.0 + (-1f64).exp()).ln();
        let b = (1.0 + 1f64.exp()).ln();
        assert!(close(r.value, (a + b) / 2.0, 1e-12));
    }

    #[test]
    fn total_is_plain_sum() {
        assert!(close(total_loss(0.5, 0.3).unwrap(), 0.8, 1e-15));
        assert_eq!(total_loss(1.25, 0.0).unwrap(), 1.25);
        assert!(matches!(total_loss(f64::NAN, 0.0), Err(Error::Numeric(_))));
        assert!(matches!(total_loss(0.0, f64::INFINITY), Err(Error::Numeric(_))));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { tau: 0.0, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { epsilon: -0.1, ..LossConfig::default() }.validate().is_err());
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn supervised_gradient_matches_finite_differences() {
        for &normalized in &[false, true] {
            let l = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| ((c * 7 + y * 3 + x * 5) % 11) as f64 * 0.3 - 1.4);
            let g = Array2::from_shape_fn((4, 4), |(y, x)| if (y + x) % 5 == 0 { IGNORE } else { ((y * x) % 3) as i32 });
            let r = supervised_loss(&[l.view()], &[g.view()], 0.1, normalized).unwrap();
            let h = 1e-6;
            for (idx, &an) in r.grad[0].indexed_iter() {
                let mut lp = l.clone();
                lp[idx] += h;
                let mut lm = l.clone();
                lm[idx] -= h;
                let fp = supervised_loss(&[lp.view()], &[g.view()], 0.1, normalized).unwrap().value;
                let fm = supervised_loss(&[lm.view()], &[g.view()], 0.1, normalized).unwrap().value;
                let num = (fp - fm) / (2.0 * h);
                assert!(rel_err(an, num) <= 1e-3, "{idx:?}: {an} vs {num}");
            }
        }
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let v = |seed: usize, d: usize| -> Vec<f64> { (0..d).map(|k| (((seed * 31 + k * 17) % 13) as f64 - 6.0) * 0.2).collect() };
        let base = one_class(vec![v(1, 8), v(2, 8), v(3, 8)], v(4, 8), vec![v(5, 8), v(6, 8), v(7, 8), v(8, 8)]);
        let tau = 0.5;
        let r = contrastive_loss(&base, tau).unwrap();
        let h = 1e-6;
        let eval = |s: &ContrastiveSampleSet| contrastive_loss(s, tau).unwrap().value;
        let cg = &r.grads[0];
        for qi in 0..3 {
            for d in 0..8 {
                let mut p = base.clone();
                p.classes[0].queries[qi].vector[d] += h;
                let mut m = base.clone();
                m.classes[0].queries[qi].vector[d] -= h;
                let num = (eval(&p) - eval(&m)) / (2.0 * h);
                assert!(rel_err(cg.queries[qi][d], num) <= 1e-3, "q{qi}[{d}]");
            }
        }
        for d in 0..8 {
            let mut p = base.clone();
            p.classes[0].positive.as_mut().unwrap()[d] += h;
            let mut m = base.clone();
            m.classes[0].positive.as_mut().unwrap()[d] -= h;
            let num = (eval(&p) - eval(&m)) / (2.0 * h);
            assert!(rel_err(cg.positive.as_ref().unwrap()[d], num) <= 1e-3, "pos[{d}]");
            for ni in 0..4 {
                let mut p = base.clone();
                p.classes[0].negatives[ni].vector[d] += h;
                let mut m = base.clone();
                m.classes[0].negatives[ni].vector[d] -= h;
                let num = (eval(&p) - eval(&m)) / (2.0 * h);
                assert!(rel_err(cg.negatives[ni][d], num) <= 1e-3, "neg{ni}[{d}]");
            }
        }
    }

    proptest! {
        #[test]
        fn infonce_is_positive_and_falls_as_positive_aligns(
            s_neg in proptest::collection::vec(-1.0f64..1.0, 1..6),
            s1 in -1.0f64..0.9,
            bump in 0.01f64..0.1,
            tau in 0.05f64..2.0,
        ) {
            // unit vectors in 2-D with prescribed cosine to the query [1, 0]
            let unit = |c: f64| vec![c, (1.0 - c * c).max(0.0).sqrt()];
            let negs: Vec<Vec<f64>> = s_neg.iter().map(|&c| unit(c)).collect();
            let a = contrastive_loss(&one_class(vec![vec![1.0, 0.0]], unit(s1), negs.clone()), tau).unwrap().value;
            let b = contrastive_loss(&one_class(vec![vec![1.0, 0.0]], unit((s1 + bump).min(1.0)), negs), tau).unwrap().value;
            prop_assert!(a > 0.0);
            prop_assert!(b < a);
        }

        #[test]
        fn tau_scaling_preserves_each_term(
            s_pos in -0.5f64..0.5,
            s_neg in proptest::collection::vec(-0.5f64..0.5, 1..5),
            tau in 0.1f64..2.0,
            k in 1.1f64..1.9,
        ) {
            let unit = |c: f64| vec![c, (1.0 - c * c).max(0.0).sqrt()];
            let base = contrastive_loss(
                &one_class(vec![vec![1.0, 0.0]], unit(s_pos), s_neg.iter().map(|&c| unit(c)).collect()),
                tau,
            ).unwrap().value;
            // scale every gap to s_pos by k and tau by k
            let scaled = contrastive_loss(
                &one_class(
                    vec![vec![1.0, 0.0]],
                    unit(s_pos),
                    s_neg.iter().map(|&c| unit((s_pos + (c - s_pos) * k).clamp(-1.0, 1.0))).collect(),
                ),
                tau * k,
            ).unwrap().value;
            let in_range = s_neg.iter().all(|&c| (s_pos + (c - s_pos) * k).abs() <= 1.0);
            prop_assume!(in_range);
            // each term depends only on (s_n - s_pos) / tau
            prop_assert!((base - scaled).abs() < 1e-9, "{} vs {}", base, scaled);
        }
    }
}
