//! Throwaway sizing probe for the toy overfit smoke test. Not part of the
//! suite; run explicitly with `--ignored` and steer via PROBE_* env vars.

mod common;

use std::path::PathBuf;

use dayshift_core::data::save_image;
use dayshift_core::losses::LossReport;
use dayshift_core::train::train;
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_u64(key: &str, default: u64) -> u64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

/// `common::toy_image` with a tunable coefficient range.
fn toy_image_amp(seed: u64, h: usize, w: usize, bias: f64, amp: f64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coef: Vec<f64> = (0..12).map(|_| rng.gen_range(-amp..amp)).collect();
    ArrayD::from_shape_fn(vec![h, w, 3], |ix| {
        let (y, x, c) = (ix[0] as f64 / h as f64, ix[1] as f64 / w as f64, ix[2]);
        let v = coef[c] * x
            + coef[3 + c] * y
            + coef[6 + c] * (std::f64::consts::TAU * (x + coef[9 + c])).sin()
            + bias;
        v.clamp(-1.0, 1.0)
    })
}

#[test]
#[ignore]
fn probe_overfit() {
    let width = env_u64("PROBE_WIDTH", 4) as usize;
    let lr = env_f64("PROBE_LR", 2e-4);
    let iters = env_u64("PROBE_ITERS", 2000);
    let amp = env_f64("PROBE_AMP", 0.6);
    let out: PathBuf = std::env::var("PROBE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|_| std::env::temp_dir().join("dayshift_probe"));

    let data = out.join("data");
    let run = out.join("run");
    let _ = std::fs::remove_dir_all(&run);
    for (sub, bias, base) in [("trainA", -0.3, 100u64), ("trainB", 0.3, 200u64)] {
        let dir = data.join(sub);
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..8u64 {
            let img = toy_image_amp(base + i, 64, 128, bias, amp);
            save_image(&img, &dir.join(format!("{i:02}.png"))).unwrap();
        }
    }

    let mut cfg = common::toy_cfg(64, 128, width, 2);
    cfg.learning_rate = lr;
    cfg.iterations = iters;
    cfg.checkpoint_every = 1000;
    cfg.seed = 7;
    cfg.data_root_adverse = data.join("trainA");
    cfg.data_root_normal = data.join("trainB");
    cfg.out_dir = run.clone();
    println!("probe: width {width} lr {lr} iters {iters} amp {amp} out {}", run.display());

    train::<f32>(&cfg).unwrap();

    let log = std::fs::read_to_string(run.join("loss_log.csv")).unwrap();
    let recs: Vec<(u64, LossReport)> = log
        .lines()
        .map(|l| LossReport::parse_line(l).unwrap())
        .collect();
    for (it, r) in &recs {
        if *it == 1 || *it == 50 || it % 200 == 0 {
            println!("iter {it}: rec {:.4} total_G {:.4}", r.rec, r.total_g);
        }
    }
    let min_rec = recs.iter().map(|(_, r)| r.rec).fold(f64::INFINITY, f64::min);
    let tail: Vec<f64> = recs.iter().rev().take(50).map(|(_, r)| r.rec).collect();
    let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    println!("min rec {min_rec:.4}  tail-50 mean rec {tail_mean:.4}");
}
