//! Confusion-matrix metrics, prediction, reports and feature export.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::mining::argmax_lowest;
use crate::model::{slice_tensor, DualHeadModel, DualHeadOutput};
use crate::nn::Real;
use crate::volume::{LabelVolume, LabeledSlice, SeismicVolume, IGNORE};
use crate::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
    pub ignore_count: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            ignore_count: 0,
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, gt: &Array2<i32>, pred: &Array2<i32>) -> Result<()> {
        if gt.dim() != pred.dim() {
            return Err(Error::Input(format!("gt {:?} and prediction {:?} differ in shape", gt.dim(), pred.dim())));
        }
        if let Some(&p) = pred.iter().find(|&&p| p < 0 || p as usize >= self.classes) {
            return Err(Error::Input(format!("predicted class {p} outside [0, {})", self.classes)));
        }
        if let Some(&g) = gt.iter().find(|&&g| g != IGNORE && (g < 0 || g as usize >= self.classes)) {
            return Err(Error::Input(format!("ground-truth class {g} outside [0, {})", self.classes)));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if g == IGNORE {
                self.ignore_count += 1;
            } else {
                self.counts[g as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Input(format!("cannot merge {} and {} class matrices", self.classes, other.classes)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        self.ignore_count += other.ignore_count;
        Ok(())
    }
}

/// Percentages rounded to two decimals. Per-class entries are `None` for
/// classes that do not enter the corresponding mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pa: f64,
    pub class_accuracy: Vec<Option<f64>>,
    pub mca: f64,
    pub fwiou: f64,
    pub miou: f64,
    pub f1: f64,
    pub iou: Vec<Option<f64>>,
    pub f1_per_class: Vec<Option<f64>>,
}

fn pct(x: f64) -> f64 {
    (x * 10000.0).round() / 100.0
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Metric("confusion matrix has no counted pixel".into()));
    }
    let k = cm.classes;
    let row: Vec<u64> = (0..k).map(|c| (0..k).map(|p| cm.get(c, p)).sum()).collect();
    let col: Vec<u64> = (0..k).map(|p| (0..k).map(|c| cm.get(c, p)).sum()).collect();
    let diag: Vec<u64> = (0..k).map(|c| cm.get(c, c)).collect();

    let acc: Vec<Option<f64>> = (0..k)
        .map(|c| (row[c] > 0).then(|| diag[c] as f64 / row[c] as f64))
        .collect();
    let present: Vec<bool> = (0..k).map(|c| row[c] + col[c] > 0).collect();
    let iou: Vec<Option<f64>> = (0..k)
        .map(|c| present[c].then(|| diag[c] as f64 / (row[c] + col[c] - diag[c]) as f64))
        .collect();
    let f1: Vec<Option<f64>> = (0..k)
        .map(|c| present[c].then(|| 2.0 * diag[c] as f64 / (row[c] + col[c]) as f64))
        .collect();
    let fwiou: f64 = (0..k)
        .filter_map(|c| iou[c].map(|v| row[c] as f64 / total as f64 * v))
        .sum();
    let flat = |v: &[Option<f64>]| v.iter().flatten().copied().collect::<Vec<_>>();

    Ok(MetricReport {
        pa: pct(diag.iter().sum::<u64>() as f64 / total as f64),
        mca: pct(mean(&flat(&acc))),
        fwiou: pct(fwiou),
        miou: pct(mean(&flat(&iou))),
        f1: pct(mean(&flat(&f1))),
        class_accuracy: acc.iter().map(|v| v.map(pct)).collect(),
        iou: iou.iter().map(|v| v.map(pct)).collect(),
        f1_per_class: f1.iter().map(|v| v.map(pct)).collect(),
    })
}

/// Per-pixel argmax of the segmentation logits, ties to the lowest class.
pub fn predict_labels<T: Real>(out: &DualHeadOutput<T>) -> Array2<i32> {
    let l = &out.seg_logits;
    Array2::from_shape_fn((l.h, l.w), |(y, x)| argmax_lowest((0..l.c).map(|c| l.at(c, y, x).as_f64())) as i32)
}

/// Softmax probabilities `[class][y][x]` of one output.
pub fn probabilities<T: Real>(out: &DualHeadOutput<T>) -> Array3<f64> {
    let l = &out.seg_logits;
    let logits = Array3::from_shape_fn((l.c, l.h, l.w), |(c, y, x)| l.at(c, y, x).as_f64());
    crate::losses::softmax_map(logits.view())
}

pub fn predict_slices<T: Real>(model: &DualHeadModel<T>, slices: &[&Array2<f32>], batch: usize) -> Result<Vec<Array2<i32>>> {
    let mut preds = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(batch.max(1)) {
        let inputs: Vec<_> = chunk.iter().map(|s| slice_tensor::<T>(s)).collect();
        let fwd = model.forward(&inputs, false)?;
        preds.extend(fwd.outputs.iter().map(predict_labels));
    }
    Ok(preds)
}

/// Predicts the given inlines; other inlines are IGNORE.
pub fn predict_volume<T: Real>(model: &DualHeadModel<T>, volume: &SeismicVolume, inlines: &[usize], batch: usize) -> Result<LabelVolume> {
    let (ni, nj, nz) = volume.shape();
    let mut labels = Array3::from_elem((ni, nj, nz), IGNORE);
    let slices: Vec<Array2<f32>> = inlines.iter().map(|&i| volume.inline_slice(i)).collect();
    let refs: Vec<&Array2<f32>> = slices.iter().collect();
    for (&i, pred) in inlines.iter().zip(predict_slices(model, &refs, batch)?) {
        // prediction is [depth][crossline]
        for ((z, j), &c) in pred.indexed_iter() {
            labels[[i, j, z]] = c;
        }
    }
    LabelVolume::new(labels, model.spec().classes)
}

pub fn evaluate<T: Real>(model: &DualHeadModel<T>, slices: &[LabeledSlice], batch: usize) -> Result<ConfusionMatrix> {
    let refs: Vec<&Array2<f32>> = slices.iter().map(|s| &s.data).collect();
    let preds = predict_slices(model, &refs, batch)?;
    let mut cm = ConfusionMatrix::new(model.spec().classes);
    for (s, p) in slices.iter().zip(&preds) {
        cm.accumulate(&s.labels, p)?;
    }
    Ok(cm)
}

/// Writes `(gt, rep_vector)` rows on a regular pixel grid.
///
/// The first line is `# rows=<n> dim=<D>`, followed by a CSV header
/// `inline,y,x,gt,f0,...`. Returns the row count.
pub fn export_features<T: Real>(model: &DualHeadModel<T>, slices: &[LabeledSlice], stride: usize, path: &Path) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("feature export stride must be positive".into()));
    }
    let dim = model.spec().rep_dim;
    let mut body = String::new();
    let mut rows = 0;
    for s in slices {
        let fwd = model.forward(&[slice_tensor::<T>(&s.data)], false)?;
        let out = &fwd.outputs[0];
        let (h, w) = s.labels.dim();
        for y in (0..h).step_by(stride) {
            for x in (0..w).step_by(stride) {
                let _ = write!(body, "{},{},{},{}", s.inline, y, x, s.labels[[y, x]]);
                for v in out.rep_vector(y, x) {
                    let _ = write!(body, ",{}", v as f32);
                }
                body.push('\n');
                rows += 1;
            }
        }
    }
    let mut text = format!("# rows={rows} dim={dim}\ninline,y,x,gt");
    for d in 0..dim {
        let _ = write!(text, ",f{d}");
    }
    text.push('\n');
    text.push_str(&body);
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

/// CSV columns: `method,PA,<class accuracy per class>,MCA,FWIOU,MIOU,F1`.
/// Missing per-class values are written as `-`.
pub fn report_csv(rows: &[(String, MetricReport)], class_names: &[String]) -> String {
    let mut s = String::from("method,PA");
    for n in class_names {
        let _ = write!(s, ",{n}");
    }
    s.push_str(",MCA,FWIOU,MIOU,F1\n");
    for (name, r) in rows {
        let _ = write!(s, "{name},{:.2}", r.pa);
        for a in &r.class_accuracy {
            match a {
                Some(v) => {
                    let _ = write!(s, ",{v:.2}");
                }
                None => s.push_str(",-"),
            }
        }
        let _ = writeln!(s, ",{:.2},{:.2},{:.2},{:.2}", r.mca, r.fwiou, r.miou, r.f1);
    }
    s
}

/// Rows of a CSV produced by [`report_csv`]: `(method, values)` with `None`
/// for `-` cells.
pub fn parse_report_csv(text: &str) -> Result<Vec<(String, Vec<Option<f64>>)>> {
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let mut cells = line.split(',');
        let name = cells.next().unwrap_or_default().to_string();
        let values = cells
            .map(|c| {
                if c == "-" {
                    Ok(None)
                } else {
                    c.parse::<f64>().map(Some).map_err(|_| Error::Metric(format!("bad report cell {c:?}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((name, values));
    }
    Ok(out)
}

pub fn render_table(rows: &[(String, MetricReport)], class_names: &[String]) -> String {
    let csv = report_csv(rows, class_names);
    let grid: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let cols = grid.first().map_or(0, |r| r.len());
    let widths: Vec<usize> = (0..cols).map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut s = String::new();
    for (i, r) in grid.iter().enumerate() {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(s, "{}", cells.join("  "));
        if i == 0 {
            let _ = writeln!(s, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
        }
    }
    s
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

/// Writes a class map as an RGB PNG; IGNORE is black.
pub fn write_class_png(labels: &Array2<i32>, path: &Path) -> Result<()> {
    let (h, w) = labels.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for ((y, x), &c) in labels.indexed_iter() {
        let px = if c < 0 { [0, 0, 0] } else { PALETTE[c as usize % PALETTE.len()] };
        img.put_pixel(x as u32, y as u32, image::Rgb(px));
    }
    img.save(path)?;
    Ok(())
}

/// Writes a boolean mask as a grayscale PNG.
pub fn write_mask_png(mask: ndarray::ArrayView2<'_, bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for ((y, x), &m) in mask.indexed_iter() {
        img.put_pixel(x as u32, y as u32, image::Luma([if m { 255 } else { 0 }]));
    }
    img.save(path)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
