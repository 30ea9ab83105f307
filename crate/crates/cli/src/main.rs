use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use serde::Serialize;

use consemi_core::config::RunConfig;
use consemi_core::eval::{evaluate, export_features, metrics, render_table, report_csv};
use consemi_core::model::Checkpoint;
use consemi_core::pipeline::{load_data, prepare, run_experiment};
use consemi_core::volume::{save_labels, save_volume, synth_volume, AXIS_NAMES};
use consemi_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "consemi", version, about = "Contrastive semi-supervised seismic facies segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; missing keys take preset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting preset: seam, f3 or desk.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file for export-features).
    #[arg(long)]
    out: PathBuf,
    /// Shorthand for --train.mode.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured synthetic survey as raw volumes with JSON headers.
    Synth(Common),
    /// Write the labeled / unlabeled / validation / test inline split.
    Sample(Common),
    /// Train, then evaluate the best checkpoint on the test slices.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the configured test slices.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train once per grid value and tabulate test MIOU.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `lr=1e-3,1e-4`, `tau=0.1,0.5`, `eps=0,0.1`, `th=0.6:0.8,0.7:0.9`
        /// or any dotted config key.
        #[arg(long)]
        grid: String,
    },
    /// Write representation vectors and labels of test pixels.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pixel subsampling step in both directions.
        #[arg(long, default_value_t = 8)]
        stride: usize,
    },
}

/// Splits `--a.b value` / `--a.b=value` pairs out of the arguments; clap
/// parses the rest.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").filter(|k| k.split('=').next().is_some_and(|k| k.contains('.')));
        match key {
            Some(k) => {
                if let Some((k, v)) = k.split_once('=') {
                    overrides.push((k.to_string(), v.to_string()));
                } else {
                    let v = it.next().ok_or_else(|| Error::Config(format!("override --{k} needs a value")))?;
                    overrides.push((k.to_string(), v));
                }
            }
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn effective_config(common: &Common, overrides: &[(String, String)]) -> Result<RunConfig> {
    let base = RunConfig::preset(&common.preset)?;
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let mut pairs = Vec::new();
            flatten("", &file, &mut pairs);
            base.with_overrides(&pairs)?
        }
        None => base,
    };
    let mut all = overrides.to_vec();
    if let Some(m) = &common.mode {
        all.push(("train.mode".into(), format!("\"{m}\"")));
    }
    if let Some(s) = common.seed {
        all.push(("seed".into(), s.to_string()));
    }
    cfg = cfg.with_overrides(&all)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Leaf `key.path = literal` pairs of a TOML document, so a config file
/// layers over the preset the same way flags do.
fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.to_string())),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let (vol, labels) = synth_volume(&cfg.data.synth)?;
    let axes = AXIS_NAMES.map(String::from);
    save_volume(&out.join("volume.dat"), &out.join("volume.json"), &vol, &axes)?;
    save_labels(&out.join("labels.dat"), &out.join("labels.json"), &labels, &axes)?;
    let hist = labels.histogram();
    println!("wrote {:?} survey with class histogram {hist:?} to {}", vol.shape(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct SplitSummary {
    labeled_fraction: f64,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    validation: Vec<usize>,
    test: Vec<usize>,
}

fn cmd_sample(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let (vol, labels) = load_data(cfg)?;
    let d = prepare(cfg, &vol, &labels)?;
    let summary = SplitSummary {
        labeled_fraction: d.labeled_fraction,
        labeled: d.train.labeled.iter().map(|s| s.inline).collect(),
        unlabeled: d.train.unlabeled.iter().map(|s| s.inline).collect(),
        validation: d.train.validation.iter().map(|s| s.inline).collect(),
        test: d.test.iter().map(|s| s.inline).collect(),
    };
    let text = toml::to_string(&summary).map_err(|e| Error::Config(e.to_string()))?;
    write(&out.join("split.toml"), &text)?;
    println!(
        "{} labeled ({:.2}%), {} unlabeled, {} validation, {} test slices",
        summary.labeled.len(),
        100.0 * summary.labeled_fraction,
        summary.unlabeled.len(),
        summary.validation.len(),
        summary.test.len()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<()> {
    let r = run_experiment(cfg, Some(out), resume)?;
    let rows = [(format!("{:?}", cfg.train.mode), r.test.clone())];
    print!("{}", render_table(&rows, &r.class_names));
    println!("best epoch {}; run directory {}", r.best_epoch, out.display());
    Ok(())
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Checkpoint<f32>> {
    let ck = Checkpoint::<f32>::load(path)?;
    if ck.model.spec().classes != cfg.model.classes {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes but the data has {}",
            ck.model.spec().classes,
            cfg.model.classes
        )));
    }
    Ok(ck)
}

fn cmd_eval(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint, cfg)?;
    let (vol, labels) = load_data(cfg)?;
    let d = prepare(cfg, &vol, &labels)?;
    let report = metrics(&evaluate(&ck.model, &d.test, cfg.eval.batch_size)?)?;
    create_dir(out)?;
    let rows = [(checkpoint.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned()), report)];
    write(&out.join("report.csv"), &report_csv(&rows, labels.class_names()))?;
    let table = render_table(&rows, labels.class_names());
    write(&out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

/// Grid axis: the config keys it sets and the literal values per point.
fn parse_grid(spec: &str) -> Result<(String, Vec<(String, Vec<(String, String)>)>)> {
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid {spec:?} must look like key=v1,v2")))?;
    let mut points = Vec::new();
    for v in values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        let sets = match name {
            "lr" => vec![("train.base_lr".to_string(), v.to_string())],
            "tau" => vec![("train.tau".to_string(), v.to_string())],
            "eps" => vec![("train.epsilon".to_string(), v.to_string())],
            "th" => {
                let (w, s) = v
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("threshold grid value {v:?} must be t_w:t_s")))?;
                vec![("train.thresholds.t_w".to_string(), w.to_string()), ("train.thresholds.t_s".to_string(), s.to_string())]
            }
            key => vec![(key.to_string(), v.to_string())],
        };
        points.push((v.to_string(), sets));
    }
    if points.is_empty() {
        return Err(Error::Config(format!("grid {spec:?} has no values")));
    }
    Ok((name.to_string(), points))
}

fn cmd_ablate(cfg: &RunConfig, out: &Path, grid: &str) -> Result<()> {
    let (axis, points) = parse_grid(grid)?;
    create_dir(out)?;
    let mut cells = Vec::new();
    for (label, sets) in &points {
        let point_cfg = cfg.with_overrides(sets)?;
        point_cfg.validate()?;
        let dir = out.join(format!("{axis}={label}"));
        match run_experiment(&point_cfg, Some(&dir), false) {
            Ok(r) => cells.push(format!("{:.2}", r.test.miou)),
            Err(Error::Numeric(msg)) => {
                error!("{axis}={label} diverged: {msg}");
                cells.push("-".into());
            }
            Err(e) => return Err(e),
        }
    }
    let sda = if cfg.sda.enabled_unlabeled { "w/ SDA" } else { "w/o SDA" };
    let row = format!("{:?} {sda}", cfg.train.mode);
    let mut csv = format!("config,{}\n", points.iter().map(|(l, _)| format!("{axis}={l}")).collect::<Vec<_>>().join(","));
    csv.push_str(&format!("{row},{}\n", cells.join(",")));
    write(&out.join("ablation.csv"), &csv)?;
    let header: Vec<String> = points.iter().map(|(l, _)| l.clone()).collect();
    let w = header.iter().chain(&cells).map(String::len).max().unwrap_or(1).max(6);
    let rw = row.len().max(axis.len());
    println!("{:<rw$}  {}", axis, header.iter().map(|h| format!("{h:>w$}")).collect::<Vec<_>>().join("  "));
    println!("{:<rw$}  {}", row, cells.iter().map(|c| format!("{c:>w$}")).collect::<Vec<_>>().join("  "));
    Ok(())
}

fn cmd_export(cfg: &RunConfig, out: &Path, checkpoint: &Path, stride: usize) -> Result<()> {
    let ck = load_checkpoint(checkpoint, cfg)?;
    let (vol, labels) = load_data(cfg)?;
    let d = prepare(cfg, &vol, &labels)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let rows = export_features(&ck.model, &d.test, stride, out)?;
    println!("wrote {rows} feature rows to {}", out.display());
    Ok(())
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    match cli.command {
        Command::Synth(c) => cmd_synth(&effective_config(&c, overrides)?, &c.out),
        Command::Sample(c) => cmd_sample(&effective_config(&c, overrides)?, &c.out),
        Command::Train { common, resume } => cmd_train(&effective_config(&common, overrides)?, &common.out, resume),
        Command::Eval { common, checkpoint } => cmd_eval(&effective_config(&common, overrides)?, &common.out, &checkpoint),
        Command::Ablate { common, grid } => cmd_ablate(&effective_config(&common, overrides)?, &common.out, &grid),
        Command::ExportFeatures { common, checkpoint, stride } => {
            cmd_export(&effective_config(&common, overrides)?, &common.out, &checkpoint, stride)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Generation { .. } => 2,
        Error::Numeric(_) | Error::Metric(_) => 3,
        Error::Io { .. } | Error::Format { .. } | Error::Data(_) | Error::Json(_) | Error::Image(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    info!("overrides: {overrides:?}");
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_from_flags() {
        let (rest, o) = split_overrides(strings(&["consemi", "train", "--out", "x", "--train.tau", "0.5", "--sda.kind=cutmix"])).unwrap();
        assert_eq!(rest, strings(&["consemi", "train", "--out", "x"]));
        assert_eq!(o, vec![("train.tau".into(), "0.5".into()), ("sda.kind".into(), "cutmix".into())]);
        assert!(split_overrides(strings(&["consemi", "--train.tau"])).is_err());
    }

    #[test]
    fn grid_aliases() {
        let (axis, pts) = parse_grid("th=0.6:0.8,0.7:0.9").unwrap();
        assert_eq!(axis, "th");
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1].1[1], ("train.thresholds.t_s".to_string(), "0.9".to_string()));
        let (_, pts) = parse_grid("tau=0.01,0.1,0.5,1,10").unwrap();
        assert_eq!(pts.len(), 5);
        assert!(parse_grid("tau").is_err());
        assert!(parse_grid("tau=").is_err());
    }

    #[test]
    fn file_config_layers_over_preset() {
        let mut pairs = Vec::new();
        let v: toml::Value = toml::from_str("seed = 3\n[train]\ntau = 0.2\n[sda]\nkind = \"classmix\"\n").unwrap();
        flatten("", &v, &mut pairs);
        let c = RunConfig::preset("desk").unwrap().with_overrides(&pairs).unwrap();
        assert_eq!((c.seed, c.train.tau), (3, 0.2));
        assert_eq!(c.train.steps_per_epoch, Some(25));
    }
}
