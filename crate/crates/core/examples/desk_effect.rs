//! Trains the desk preset in each mode for a few seeds and prints test MIOU.
//!
//! Usage: desk_effect [seeds] [key=value ...] where keys are `tau`, `lr`,
//! `spe` (steps per epoch), `epochs`, `tw`, `ts`, `undulation`, `noise`, `q`, `eps`, `norm` (1 for
//! normalized smoothing), `variant`
//! (0 Sup, 1 with SDA, 2 without) and `first_seed`.

use std::time::Instant;

use consemi_core::config::RunConfig;
use consemi_core::pipeline::run_experiment;
use consemi_core::trainer::Mode;

fn main() {
    env_logger_init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(1);
    let mut base = RunConfig::preset("desk").unwrap();
    let mut only: Option<usize> = None;
    let mut first_seed = 0;
    for kv in args.iter().skip(1) {
        let (k, v) = kv.split_once('=').expect("key=value");
        let f: f64 = v.parse().unwrap();
        match k {
            "tau" => base.train.tau = f,
            "lr" => base.train.base_lr = f,
            "spe" => base.train.steps_per_epoch = Some(f as usize),
            "epochs" => base.train.epochs = f as usize,
            "tw" => base.train.thresholds.t_w = f,
            "ts" => base.train.thresholds.t_s = f,
            "undulation" => base.data.synth.undulation = f,
            "noise" => base.data.synth.noise = f,
            "q" => {
                base.train.queries = f as usize;
                base.train.negatives = f as usize;
            }
            "eps" => base.train.epsilon = f,
            "norm" => base.train.normalized_smoothing = f != 0.0,
            "variant" => only = Some(f as usize),
            "first_seed" => first_seed = f as u64,
            _ => panic!("unknown key {k}"),
        }
    }
    let variants = [("Sup", Mode::Sup, false), ("ConSemiSup w/ SDA", Mode::ConSemiSup, true), ("ConSemiSup w/o SDA", Mode::ConSemiSup, false)];
    for (i, (name, mode, sda)) in variants.into_iter().enumerate() {
        if only.is_some_and(|o| o != i) {
            continue;
        }
        let mut mious = Vec::new();
        for seed in first_seed..first_seed + seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.train.mode = mode;
            cfg.sda.enabled_unlabeled = sda;
            let t = Instant::now();
            let r = run_experiment(&cfg, None, false).unwrap();
            println!(
                "{name} seed {seed}: MIOU {:.2} PA {:.2} best epoch {} skipped {} ({:.0}s)",
                r.test.miou,
                r.test.pa,
                r.best_epoch,
                r.skipped_contrastive_steps,
                t.elapsed().as_secs_f64()
            );
            mious.push(r.test.miou);
        }
        println!("{name}: mean MIOU {:.2}", mious.iter().sum::<f64>() / mious.len() as f64);
    }
}

fn env_logger_init() {
    env_logger::init();
}
