//! Layered synthetic survey: quasi-horizontal facies bands bounded by
//! sinusoidal interfaces, optionally offset by vertical faults.
//!
//! Amplitude model per voxel: class base reflectivity, a class-specific
//! internal lamination that follows the layer top, a Ricker response at every
//! interface (weighted by the impedance step), and white Gaussian noise.

use std::f64::consts::PI;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabelVolume, SeismicVolume};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// `(n_inline, n_crossline, n_depth)`
    pub shape: (usize, usize, usize),
    pub layers: usize,
    /// Lateral wavelength of interface undulation, in traces.
    pub wavelength: f64,
    /// Peak vertical excursion of the interfaces, in samples. Zero gives flat layers.
    pub undulation: f64,
    /// Base reflectivity per class; empty selects a built-in alternating pattern.
    pub class_amplitudes: Vec<f32>,
    /// Amplitude of the in-layer lamination texture.
    pub texture: f64,
    /// Dominant period of the interface wavelet, in samples.
    pub wavelet_period: f64,
    pub noise: f64,
    pub faults: usize,
    /// Largest vertical throw of a single fault, in samples.
    pub fault_throw: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            shape: (64, 64, 128),
            layers: 6,
            wavelength: 48.0,
            undulation: 10.0,
            class_amplitudes: Vec::new(),
            texture: 0.35,
            wavelet_period: 8.0,
            noise: 0.2,
            faults: 1,
            fault_throw: 8.0,
            seed: 0,
        }
    }
}

const DEFAULT_AMPLITUDES: [f32; 8] = [-0.8, 0.4, -0.2, 0.9, -0.5, 0.2, 0.7, -0.35];
const LAMINATION_PERIODS: [f64; 8] = [5.0, 9.0, 3.5, 13.0, 7.0, 4.5, 11.0, 6.0];

struct Fault {
    /// Unit normal of the fault trace in the (inline, crossline) plane.
    normal: (f64, f64),
    offset: f64,
    throw: f64,
}

fn ricker(t: f64, period: f64) -> f64 {
    let a = (PI * t / period).powi(2);
    (1.0 - 2.0 * a) * (-a).exp()
}

pub fn synth_volume(spec: &SynthSpec) -> Result<(SeismicVolume, LabelVolume)> {
    let (ni, nj, nz) = spec.shape;
    if spec.layers < 2 {
        return Err(Error::Config(format!("need at least 2 layers, got {}", spec.layers)));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::Config(format!("noise level must be >= 0, got {}", spec.noise)));
    }
    if ni == 0 || nj == 0 || nz == 0 {
        return Err(Error::Config(format!("empty synthetic shape {:?}", spec.shape)));
    }
    if spec.wavelength <= 0.0 || spec.wavelet_period <= 0.0 {
        return Err(Error::Config("wavelength and wavelet_period must be positive".into()));
    }
    let classes = spec.layers;
    let amps: Vec<f64> = if spec.class_amplitudes.is_empty() {
        (0..classes)
            .map(|c| DEFAULT_AMPLITUDES[c % DEFAULT_AMPLITUDES.len()] as f64)
            .collect()
    } else if spec.class_amplitudes.len() == classes {
        spec.class_amplitudes.iter().map(|&a| a as f64).collect()
    } else {
        return Err(Error::Config(format!(
            "{} class amplitudes for {} layers",
            spec.class_amplitudes.len(),
            classes
        )));
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let thickness = nz as f64 / classes as f64;
    let phase_i = rng.gen_range(0.0..2.0 * PI);
    let phase_j = rng.gen_range(0.0..2.0 * PI);
    let jitter: Vec<(f64, f64)> = (1..classes)
        .map(|_| (rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4)))
        .collect();
    let lam_phase: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let faults: Vec<Fault> = (0..spec.faults)
        .map(|_| {
            let angle: f64 = rng.gen_range(0.0..PI);
            let normal = (angle.cos(), angle.sin());
            let (ci, cj) = (rng.gen_range(0.25..0.75) * ni as f64, rng.gen_range(0.25..0.75) * nj as f64);
            let magnitude = rng.gen_range(0.5..1.0) * spec.fault_throw;
            let throw = if rng.gen_bool(0.5) { magnitude } else { -magnitude };
            Fault {
                normal,
                offset: normal.0 * ci + normal.1 * cj,
                throw,
            }
        })
        .collect();

    // Interface depths per trace, kept strictly increasing.
    let mut tops = Array3::<f64>::zeros((ni, nj, classes - 1));
    for i in 0..ni {
        for j in 0..nj {
            let shift: f64 = faults
                .iter()
                .filter(|f| f.normal.0 * i as f64 + f.normal.1 * j as f64 > f.offset)
                .map(|f| f.throw)
                .sum();
            let mut prev = f64::NEG_INFINITY;
            for k in 0..classes - 1 {
                let (ji, jj) = jitter[k];
                let wave = 0.75 * (2.0 * PI * i as f64 / spec.wavelength + phase_i + ji).sin()
                    + 0.25 * (2.0 * PI * j as f64 / (1.7 * spec.wavelength) + phase_j + jj).sin();
                let z = (k + 1) as f64 * thickness + spec.undulation * wave + shift;
                let z = z.max(prev + 2.0);
                tops[[i, j, k]] = z;
                prev = z;
            }
        }
    }

    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid noise std");
    let mut labels = Array3::<i32>::zeros((ni, nj, nz));
    let mut data = Array3::<f32>::zeros((ni, nj, nz));
    for i in 0..ni {
        for j in 0..nj {
            for z in 0..nz {
                let zf = z as f64;
                let c = (0..classes - 1).filter(|&k| zf >= tops[[i, j, k]]).count();
                labels[[i, j, z]] = c as i32;
                let top = if c == 0 { 0.0 } else { tops[[i, j, c - 1]] };
                let period = LAMINATION_PERIODS[c % LAMINATION_PERIODS.len()];
                let mut v = amps[c] + spec.texture * (2.0 * PI * (zf - top) / period + lam_phase[c]).sin();
                for k in 0..classes - 1 {
                    let dt = zf - tops[[i, j, k]];
                    if dt.abs() < 3.0 * spec.wavelet_period {
                        v += (amps[k + 1] - amps[k]) * ricker(dt, spec.wavelet_period);
                    }
                }
                if spec.noise > 0.0 {
                    v += normal.sample(&mut rng);
                }
                data[[i, j, z]] = v as f32;
            }
        }
    }

    let labels = LabelVolume::new(labels, classes)?;
    let total = (ni * nj * nz) as f64;
    for (c, &count) in labels.histogram().iter().enumerate() {
        if (count as f64) < 0.01 * total {
            return Err(Error::Generation {
                class: c,
                reason: format!("{count} of {total} voxels, below 1%"),
            });
        }
    }
    Ok((SeismicVolume::new(data)?, labels))
}
