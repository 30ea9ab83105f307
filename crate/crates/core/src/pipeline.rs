//! End-to-end run: load or synthesize data, split, train, evaluate.

use std::fs;
use std::path::Path;

use log::info;

use crate::config::RunConfig;
use crate::eval::{evaluate, metrics, predict_slices, render_table, report_csv, write_class_png, MetricReport};
use crate::model::DualHeadModel;
use crate::trainer::{train, EpochRecord, Mode, StepRecord, TrainData, TrainOptions};
use crate::volume::{
    load_labels, load_volume, sample_training_slices, sparsify_labels, synth_volume, LabelVolume, LabeledSlice, SeismicVolume,
};
use crate::{Error, Result};

pub fn load_data(cfg: &RunConfig) -> Result<(SeismicVolume, LabelVolume)> {
    let (vol, labels) = match (&cfg.data.volume, &cfg.data.labels) {
        (Some(v), Some(l)) => {
            let vh = cfg.data.volume_header.clone().unwrap_or_else(|| v.with_extension("json"));
            let lh = cfg.data.labels_header.clone().unwrap_or_else(|| l.with_extension("json"));
            (load_volume(v, &vh)?, load_labels(l, &lh)?)
        }
        (None, None) => synth_volume(&cfg.data.synth)?,
        _ => return Err(Error::Config("data.volume and data.labels must be given together".into())),
    };
    if labels.classes() != cfg.model.classes {
        return Err(Error::Config(format!(
            "labels have {} classes but the model predicts {}",
            labels.classes(),
            cfg.model.classes
        )));
    }
    let vol = if cfg.data.standardize { vol.standardized() } else { vol };
    Ok((vol, labels))
}

/// Training inputs plus the slices reported as the test set.
pub struct PreparedData {
    pub train: TrainData,
    pub test: Vec<LabeledSlice>,
    pub labeled_fraction: f64,
}

/// Evenly spaced positions, one per `per` items.
fn validation_positions(n: usize, per: usize) -> Vec<usize> {
    if n < 2 {
        return Vec::new();
    }
    let k = n.div_ceil(per);
    (0..k).map(|i| i * n / k + n / (2 * k)).collect()
}

pub fn prepare(cfg: &RunConfig, vol: &SeismicVolume, labels: &LabelVolume) -> Result<PreparedData> {
    let split = sample_training_slices(vol, labels, &cfg.plan)?;
    let labeled_fraction = split.labeled_fraction();
    let mut labeled = split.labeled;
    if cfg.train.mode == Mode::SparseConSemiSup {
        let maps: Vec<_> = labeled.iter().map(|s| s.labels.clone()).collect();
        for (s, m) in labeled.iter_mut().zip(sparsify_labels(&maps, &cfg.sparsity)?) {
            s.labels = m;
        }
    }
    let val_pos = validation_positions(split.held_out.len(), cfg.eval.validation_per);
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for (i, s) in split.held_out.into_iter().enumerate() {
        if val_pos.contains(&i) {
            validation.push(s);
        } else {
            test.push(s);
        }
    }
    let validation_inlines: Vec<usize> = validation.iter().map(|s| s.inline).collect();
    let unlabeled = if cfg.train.mode.uses_unlabeled() { split.unlabeled } else { Vec::new() };
    info!(
        "{} labeled, {} unlabeled, {} validation {:?}, {} test slices",
        labeled.len(),
        unlabeled.len(),
        validation.len(),
        validation_inlines,
        test.len()
    );
    Ok(PreparedData {
        train: TrainData {
            labeled,
            unlabeled,
            validation,
        },
        test,
        labeled_fraction,
    })
}

pub struct RunSummary {
    pub test: MetricReport,
    pub best_epoch: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub skipped_contrastive_steps: usize,
    pub model: DualHeadModel<f32>,
    pub class_names: Vec<String>,
}

/// Trains per `cfg` and reports test metrics of the best checkpoint.
///
/// With a run directory the config snapshot, loss CSV, checkpoints and
/// `report.csv` / `report.txt` are written there.
pub fn run_experiment(cfg: &RunConfig, run_dir: Option<&Path>, resume: bool) -> Result<RunSummary> {
    cfg.validate()?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let snap = dir.join("config.toml");
        fs::write(&snap, cfg.to_toml()?).map_err(|e| Error::io(&snap, e))?;
    }
    let (vol, labels) = load_data(cfg)?;
    let data = prepare(cfg, &vol, &labels)?;
    let model = DualHeadModel::<f32>::new(&cfg.model, cfg.seed)?;
    let opts = TrainOptions {
        run_dir: run_dir.map(Path::to_path_buf),
        resume,
        region_dump_every: None,
    };
    let out = train(model, &data.train, &cfg.train_config(), &opts)?;
    let cm = evaluate(&out.best, &data.test, cfg.eval.batch_size)?;
    let report = metrics(&cm)?;
    let class_names = labels.class_names().to_vec();
    if let Some(dir) = run_dir {
        let rows = [(format!("{:?}", cfg.train.mode), report.clone())];
        let csv = dir.join("report.csv");
        fs::write(&csv, report_csv(&rows, &class_names)).map_err(|e| Error::io(&csv, e))?;
        let txt = dir.join("report.txt");
        fs::write(&txt, render_table(&rows, &class_names)).map_err(|e| Error::io(&txt, e))?;
        if cfg.eval.write_images {
            let img_dir = dir.join("predictions");
            fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
            let refs: Vec<_> = data.test.iter().map(|s| &s.data).collect();
            for (s, p) in data.test.iter().zip(predict_slices(&out.best, &refs, cfg.eval.batch_size)?) {
                write_class_png(&p, &img_dir.join(format!("inline{:04}.png", s.inline)))?;
            }
        }
    }
    Ok(RunSummary {
        test: report,
        best_epoch: out.best_epoch,
        steps: out.steps,
        epochs: out.epochs,
        skipped_contrastive_steps: out.skipped_contrastive_steps,
        model: out.best,
        class_names,
    })
}
