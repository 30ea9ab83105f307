//! Raw little-endian payload (`<name>.dat`) plus JSON sidecar (`<name>.json`).
//!
//! The payload is C-ordered in the axis order named by the header's `axes`
//! key; loading permutes it into `(inline, crossline, depth)`.

use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use super::{LabelVolume, SeismicVolume, IGNORE};
use crate::{Error, Result};

pub const AXIS_NAMES: [&str; 3] = ["inline", "crossline", "depth"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    /// Extent per payload axis, in `axes` order.
    pub shape: [usize; 3],
    /// `"float32"` or `"int32"`, always little-endian.
    pub dtype: String,
    pub axes: [String; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
}

impl VolumeHeader {
    pub fn canonical(shape: (usize, usize, usize), dtype: &str) -> Self {
        Self {
            shape: [shape.0, shape.1, shape.2],
            dtype: dtype.to_string(),
            axes: AXIS_NAMES.map(String::from),
            classes: None,
            class_names: Vec::new(),
        }
    }

    /// Payload axis index holding each canonical axis.
    fn permutation(&self, path: &Path) -> Result<[usize; 3]> {
        let mut perm = [0usize; 3];
        for (k, name) in AXIS_NAMES.iter().enumerate() {
            let hits: Vec<usize> = self
                .axes
                .iter()
                .enumerate()
                .filter(|(_, a)| a.as_str() == *name)
                .map(|(i, _)| i)
                .collect();
            if hits.len() != 1 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("axes must name inline, crossline, depth once each, got {:?}", self.axes),
                });
            }
            perm[k] = hits[0];
        }
        Ok(perm)
    }
}

fn read_header(path: &Path) -> Result<VolumeHeader> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads the payload as f32 (int32 payloads are converted) in canonical order.
fn read_payload(path: &Path, header: &VolumeHeader, header_path: &Path) -> Result<Array3<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = header.shape.iter().product();
    if n == 0 {
        return Err(Error::Format {
            path: header_path.to_path_buf(),
            reason: format!("shape {:?} has an empty axis", header.shape),
        });
    }
    if bytes.len() != n * 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("payload is {} bytes, shape {:?} needs {}", bytes.len(), header.shape, n * 4),
        });
    }
    let values: Vec<f64> = match header.dtype.as_str() {
        "float32" | "<f4" => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        "int32" | "<i4" => bytes
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        other => {
            return Err(Error::Format {
                path: header_path.to_path_buf(),
                reason: format!("unsupported dtype {other:?}"),
            })
        }
    };
    let raw = Array3::from_shape_vec((header.shape[0], header.shape[1], header.shape[2]), values)
        .expect("length checked above");
    let perm = header.permutation(header_path)?;
    Ok(raw.permuted_axes(perm).as_standard_layout().to_owned())
}

/// Loads amplitudes exactly as stored (no normalization).
pub fn load_volume(path: &Path, header_path: &Path) -> Result<SeismicVolume> {
    let header = read_header(header_path)?;
    let data = read_payload(path, &header, header_path)?;
    // f32 -> f64 -> f32 is exact
    SeismicVolume::new(data.mapv(|v| v as f32))
}

pub fn load_labels(path: &Path, header_path: &Path) -> Result<LabelVolume> {
    let header = read_header(header_path)?;
    let classes = header.classes.ok_or_else(|| Error::Format {
        path: header_path.to_path_buf(),
        reason: "label header needs a `classes` key".into(),
    })?;
    let data = read_payload(path, &header, header_path)?;
    if let Some(v) = data.iter().find(|v| v.fract() != 0.0 || !v.is_finite()) {
        return Err(Error::Data(format!("non-integral label value {v}")));
    }
    let labels = LabelVolume::new(data.mapv(|v| v as i32), classes)?;
    if header.class_names.is_empty() {
        Ok(labels)
    } else {
        labels.with_class_names(header.class_names)
    }
}

fn write_files(path: &Path, header_path: &Path, header: &VolumeHeader, payload: Vec<u8>) -> Result<()> {
    fs::write(path, payload).map_err(|e| Error::io(path, e))?;
    let text = serde_json::to_string_pretty(header)?;
    fs::write(header_path, text).map_err(|e| Error::io(header_path, e))
}

fn ordered<T: Copy>(view: ArrayView3<'_, T>, axes: &[String; 3], path: &Path) -> Result<Vec<T>> {
    let probe = VolumeHeader {
        shape: [0; 3],
        dtype: String::new(),
        axes: axes.clone(),
        classes: None,
        class_names: Vec::new(),
    };
    let perm = probe.permutation(path)?;
    // payload axis i holds canonical axis inv[i]
    let mut inv = [0usize; 3];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    Ok(view.permuted_axes(inv).iter().copied().collect())
}

/// Writes amplitudes with the payload axes in `axes` order.
pub fn save_volume(path: &Path, header_path: &Path, volume: &SeismicVolume, axes: &[String; 3]) -> Result<()> {
    let data = volume.data();
    let values = ordered(data, axes, header_path)?;
    let dims = data.shape();
    let mut header = VolumeHeader::canonical((0, 0, 0), "float32");
    header.axes = axes.clone();
    header.shape = axes_shape(dims, axes);
    let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_files(path, header_path, &header, payload)
}

pub fn save_labels(path: &Path, header_path: &Path, labels: &LabelVolume, axes: &[String; 3]) -> Result<()> {
    let view = labels.labels();
    let values = ordered(view, axes, header_path)?;
    let mut header = VolumeHeader::canonical((0, 0, 0), "int32");
    header.axes = axes.clone();
    header.shape = axes_shape(view.shape(), axes);
    header.classes = Some(labels.classes());
    header.class_names = labels.class_names().to_vec();
    debug_assert!(values.iter().all(|&v| v >= IGNORE));
    let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_files(path, header_path, &header, payload)
}

fn axes_shape(canonical: &[usize], axes: &[String; 3]) -> [usize; 3] {
    axes.clone().map(|a| {
        let k = AXIS_NAMES.iter().position(|n| *n == a).unwrap_or(0);
        canonical[k]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn canonical_axes() -> [String; 3] {
        AXIS_NAMES.map(String::from)
    }

    #[test]
    fn zero_payload_loads_as_zero_volume() {
        let dir = tempfile::tempdir().unwrap();
        let (dat, hdr) = (dir.path().join("v.dat"), dir.path().join("v.json"));
        fs::write(&dat, vec![0u8; 32]).unwrap();
        fs::write(&hdr, serde_json::to_string(&VolumeHeader::canonical((2, 2, 2), "float32")).unwrap()).unwrap();
        let v = load_volume(&dat, &hdr).unwrap();
        assert_eq!(v.shape(), (2, 2, 2));
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn short_payload_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let (dat, hdr) = (dir.path().join("v.dat"), dir.path().join("v.json"));
        fs::write(&dat, vec![0u8; 28]).unwrap();
        fs::write(&hdr, serde_json::to_string(&VolumeHeader::canonical((2, 2, 2), "float32")).unwrap()).unwrap();
        assert!(matches!(load_volume(&dat, &hdr), Err(Error::Format { .. })));
    }

    #[test]
    fn nan_payload_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let (dat, hdr) = (dir.path().join("v.dat"), dir.path().join("v.json"));
        let mut bytes = vec![0u8; 32];
        bytes[4..8].copy_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(&dat, bytes).unwrap();
        fs::write(&hdr, serde_json::to_string(&VolumeHeader::canonical((2, 2, 2), "float32")).unwrap()).unwrap();
        assert!(matches!(load_volume(&dat, &hdr), Err(Error::Data(_))));
    }

    #[test]
    fn transposed_payload_canonicalizes_to_same_voxels() {
        // Oracle: write the (depth, crossline, inline) layout by explicit index loops.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let canon = Array3::from_shape_fn((3, 4, 5), |_| rng.gen_range(-5.0f32..5.0));
        let mut bytes = Vec::new();
        for k in 0..5 {
            for j in 0..4 {
                for i in 0..3 {
                    bytes.extend_from_slice(&canon[[i, j, k]].to_le_bytes());
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let (dat, hdr) = (dir.path().join("t.dat"), dir.path().join("t.json"));
        fs::write(&dat, bytes).unwrap();
        let header = VolumeHeader {
            shape: [5, 4, 3],
            dtype: "float32".into(),
            axes: ["depth".into(), "crossline".into(), "inline".into()],
            classes: None,
            class_names: vec![],
        };
        fs::write(&hdr, serde_json::to_string(&header).unwrap()).unwrap();
        let loaded = load_volume(&dat, &hdr).unwrap();
        assert_eq!(loaded.data(), canon.view());

        // and saving in that order reproduces the payload byte for byte
        let (dat2, hdr2) = (dir.path().join("u.dat"), dir.path().join("u.json"));
        save_volume(&dat2, &hdr2, &loaded, &header.axes).unwrap();
        assert_eq!(fs::read(&dat).unwrap(), fs::read(&dat2).unwrap());
    }

    #[test]
    fn duplicate_axis_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (dat, hdr) = (dir.path().join("v.dat"), dir.path().join("v.json"));
        fs::write(&dat, vec![0u8; 32]).unwrap();
        let mut h = VolumeHeader::canonical((2, 2, 2), "float32");
        h.axes[1] = "inline".into();
        fs::write(&hdr, serde_json::to_string(&h).unwrap()).unwrap();
        assert!(matches!(load_volume(&dat, &hdr), Err(Error::Format { .. })));
    }

    #[test]
    fn labels_round_trip_with_names() {
        let labels = Array3::from_shape_fn((2, 3, 4), |(i, j, k)| ((i + j + k) % 4) as i32 - 1);
        let lv = LabelVolume::new(labels, 3)
            .unwrap()
            .with_class_names(vec!["a".into(), "b".into(), "c".into()])
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (dat, hdr) = (dir.path().join("l.dat"), dir.path().join("l.json"));
        save_labels(&dat, &hdr, &lv, &canonical_axes()).unwrap();
        assert_eq!(load_labels(&dat, &hdr).unwrap(), lv);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn save_load_is_bit_exact(bits in proptest::collection::vec(any::<u32>(), 24), perm in 0usize..6) {
            let values: Vec<f32> = bits.iter().map(|&b| {
                let f = f32::from_bits(b);
                if f.is_finite() { f } else { f32::from_bits(b & 0x3fff_ffff) }
            }).collect();
            let vol = SeismicVolume::new(Array3::from_shape_vec((2, 3, 4), values).unwrap()).unwrap();
            let orders = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let axes = orders[perm].map(|k| AXIS_NAMES[k].to_string());
            let dir = tempfile::tempdir().unwrap();
            let (dat, hdr) = (dir.path().join("p.dat"), dir.path().join("p.json"));
            save_volume(&dat, &hdr, &vol, &axes).unwrap();
            let back = load_volume(&dat, &hdr).unwrap();
            let same = back.data().iter().zip(vol.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
