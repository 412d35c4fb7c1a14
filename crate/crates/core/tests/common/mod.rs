//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::Path;

use dayshift_core::data::save_image;
use dayshift_core::gradcheck::{check_coords, check_directional, default_step, rel_err};
use dayshift_core::losses::{
    lsgan_d_node, lsgan_g_node, mean_abs_diff_node, uncertainty_cyclic_node,
};
use dayshift_core::networks::ModelBundle;
use dayshift_core::paths::forward_all_paths_graph;
use dayshift_core::tensor::{Element, Graph, Value};
use dayshift_core::{Domain, ImageBatch, TrainConfig};
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Config for a narrow model on small images; callers adjust as needed.
pub fn toy_cfg(h: usize, w: usize, width: usize, batch: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.image_height = h;
    cfg.image_width = w;
    cfg.base_width = width;
    cfg.batch_size = batch;
    cfg.random_crop = false;
    cfg
}

/// Uniform values in [-1, 1].
pub fn rand_arr<F: Element>(shape: &[usize], seed: u64) -> ArrayD<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::f(rng.gen_range(-1.0..1.0))).collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).expect("shape matches")
}

pub fn rand_batch<F: Element>(shape: &[usize], seed: u64, domain: Domain) -> ImageBatch<F> {
    ImageBatch::new(rand_arr(shape, seed), domain).expect("valid batch")
}

/// Smooth deterministic image: RGB ramps plus a sinusoid with coefficients
/// in [-amp, amp], clamped to [-1, 1].
pub fn toy_image_amp(seed: u64, h: usize, w: usize, bias: f64, amp: f64) -> ArrayD<f64> {
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

pub fn toy_image(seed: u64, h: usize, w: usize, bias: f64) -> ArrayD<f64> {
    toy_image_amp(seed, h, w, bias, 0.6)
}

/// Writes `n` images per domain under `<root>/trainA` and `<root>/trainB`.
/// Domain A is biased dark, B bright.
pub fn write_toy_dataset_amp(root: &Path, n: usize, h: usize, w: usize, amp: f64) {
    for (sub, bias, base) in [("trainA", -0.3, 100u64), ("trainB", 0.3, 200u64)] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).expect("create dataset dir");
        for i in 0..n {
            let img = toy_image_amp(base + i as u64, h, w, bias, amp);
            save_image(&img, &dir.join(format!("{i:02}.png"))).expect("write toy image");
        }
    }
}

pub fn write_toy_dataset(root: &Path, n: usize, h: usize, w: usize) {
    write_toy_dataset_amp(root, n, h, w, 0.6);
}

/// Named loss terms of one full generator+discriminator pass, as nodes on
/// the caller's graph.
pub struct TermNodes {
    pub rec: Value,
    pub rec_a: Value,
    pub rec_b: Value,
    pub feat: Value,
    pub cyc_a: Value,
    pub cyc_b: Value,
    pub adv_g: Value,
    pub adv_d: Value,
}

/// Builds every path and attaches all loss terms; σ must be enabled unless
/// `cfg.use_uncertainty_loss` is off, in which case cyc_A is plain L1.
pub fn build_terms<F: Element>(
    g: &mut Graph<F>,
    bundle: &ModelBundle<F>,
    xa: Value,
    xb: Value,
    cfg: &TrainConfig,
) -> TermNodes {
    let p = forward_all_paths_graph(g, bundle, xa, xb, cfg);
    let rec_a = mean_abs_diff_node(g, xa, p.x_rec_a);
    let rec_b = mean_abs_diff_node(g, xb, p.x_rec_b);
    let rec = g.add(rec_a, rec_b);
    let feat_a = mean_abs_diff_node(g, p.feat_a_enhanced, p.feat_of_fake_b);
    let feat_b = mean_abs_diff_node(g, p.feat_b, p.feat_of_fake_a);
    let feat = g.add(feat_a, feat_b);
    let cyc_a = if cfg.use_uncertainty_loss {
        let sigma = p.sigma.expect("σ branch is on");
        uncertainty_cyclic_node(g, xa, p.x_cyc_a, sigma)
    } else {
        mean_abs_diff_node(g, xa, p.x_cyc_a)
    };
    let cyc_b = mean_abs_diff_node(g, xb, p.x_cyc_b);
    let ga_maps = bundle.disc_a.forward(g, p.x_fake_a);
    let gb_maps = bundle.disc_b.forward(g, p.x_fake_b);
    let adv_a = lsgan_g_node(g, &ga_maps);
    let adv_b = lsgan_g_node(g, &gb_maps);
    let adv_g = g.add(adv_a, adv_b);
    let ra_maps = bundle.disc_a.forward(g, xa);
    let rb_maps = bundle.disc_b.forward(g, xb);
    let adv_d_a = lsgan_d_node(g, &ra_maps, &ga_maps);
    let adv_d_b = lsgan_d_node(g, &rb_maps, &gb_maps);
    let adv_d = g.add(adv_d_a, adv_d_b);
    TermNodes {
        rec,
        rec_a,
        rec_b,
        feat,
        cyc_a,
        cyc_b,
        adv_g,
        adv_d,
    }
}

pub fn set_param<F: Element>(bundle: &mut ModelBundle<F>, name: &str, data: &ArrayD<F>) {
    for p in bundle.all_params_mut() {
        if p.name() == name {
            p.data = data.clone();
            return;
        }
    }
    panic!("unknown parameter {name}");
}

/// (name, value, gradient-if-reached) snapshot of every parameter group.
pub type ParamEntries<F> = Vec<(String, ArrayD<F>, Option<ArrayD<F>>)>;

/// Backpropagates `scalar_of`'s pick over a fresh recording graph and
/// snapshots every parameter group plus the x_A input gradient; both are
/// `None` wherever the picked term never touches them.
pub fn objective_grads<F: Element>(
    bundle: &ModelBundle<F>,
    xa: &ArrayD<F>,
    xb: &ArrayD<F>,
    cfg: &TrainConfig,
    scalar_of: impl Fn(&mut Graph<F>, &TermNodes) -> Value,
) -> (ParamEntries<F>, Option<ArrayD<F>>) {
    let mut g = Graph::recording();
    let xa_v = g.leaf(xa.clone());
    let xb_v = g.constant(xb.clone());
    let terms = build_terms(&mut g, bundle, xa_v, xb_v, cfg);
    let s = scalar_of(&mut g, &terms);
    let grads = g.backward(s);
    let mut entries = Vec::new();
    for p in bundle.all_params() {
        let node = g.param_value(p.id()).expect("param bound in graph");
        let grad = grads.wrt(node).cloned();
        entries.push((p.name().to_string(), p.data.clone(), grad));
    }
    let gxa = grads.wrt(xa_v).cloned();
    (entries, gxa)
}

/// Re-evaluates `scalar_of`'s pick at the bundle's current parameters.
pub fn eval_term<F: Element>(
    bundle: &ModelBundle<F>,
    xa: &ArrayD<F>,
    xb: &ArrayD<F>,
    cfg: &TrainConfig,
    scalar_of: &impl Fn(&mut Graph<F>, &TermNodes) -> Value,
) -> f64 {
    let mut g = Graph::inference();
    let xa_v = g.constant(xa.clone());
    let xb_v = g.constant(xb.clone());
    let terms = build_terms(&mut g, bundle, xa_v, xb_v, cfg);
    let s = scalar_of(&mut g, &terms);
    g.scalar(s).to_f64()
}

/// L2 norm of the gradients reaching the parameters selected by `pred`;
/// parameters the backward pass never touched contribute zero.
pub fn grad_norm_over<F: Element>(entries: &ParamEntries<F>, pred: impl Fn(&str) -> bool) -> f64 {
    let mut total = 0.0;
    let mut matched = false;
    for (name, _, grad) in entries {
        if !pred(name) {
            continue;
        }
        matched = true;
        if let Some(g) = grad {
            total += g.iter().fold(0.0, |s, &v| {
                let v = v.to_f64();
                s + v * v
            });
        }
    }
    assert!(matched, "no parameter matched the predicate");
    total.sqrt()
}

/// Pairs `b = a ± offset` with offsets in [0.25, 0.75], keeping every |a−b|
/// kink farther from the probe point than any finite-difference step.
pub fn kink_safe_pair<F: Element>(shape: &[usize], seed: u64) -> (ArrayD<F>, ArrayD<F>) {
    let a = rand_arr::<F>(shape, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let b = a.mapv(|v| {
        let off = rng.gen_range(0.25..0.75);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        v + F::f(off * sign)
    });
    (a, b)
}

/// σ values in [0.7, 1.5]: positive, away from the floor, and well clear of
/// the 1/σ² blow-up so finite differences stay in their linear regime.
pub fn sigma_leaf<F: Element>(shape: &[usize], seed: u64) -> ArrayD<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::f(rng.gen_range(0.7..1.5))).collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).expect("shape matches")
}

/// FD-checks the gradient of `build`'s scalar w.r.t. the sole leaf `x0`,
/// with both per-coordinate and directional probes.
pub fn fd_check_leaf<F: Element>(
    x0: &ArrayD<F>,
    tol: f64,
    build: impl Fn(&mut Graph<F>, Value) -> Value,
) {
    let mut g = Graph::recording();
    let x = g.leaf(x0.clone());
    let s = build(&mut g, x);
    let grads = g.backward(s);
    let gx = grads.wrt(x).expect("leaf participates").clone();
    let h = default_step::<F>();
    let eval = |t: &ArrayD<F>| {
        let mut g = Graph::inference();
        let x = g.constant(t.clone());
        let s = build(&mut g, x);
        g.scalar(s)
    };
    // Per-coordinate probes carry a signal of order h/N against round-off of
    // order N·ulp, which only clears the tolerance at 64-bit. At 32-bit the
    // directional probe is the reliable form, taken with a wider step that
    // still stays inside every loss's kink-free margin.
    if F::DTYPE == "f64" {
        let rep = check_coords(x0, &gx, h, 48, eval);
        assert!(
            rep.max_rel_err < tol,
            "coordinate check failed: {} >= {tol}",
            rep.max_rel_err
        );
    }
    let hd = if F::DTYPE == "f32" { h * 3.0 } else { h };
    let dir = check_directional(x0, &gx, hd, eval);
    assert!(dir < tol, "directional check failed: {dir} >= {tol}");
}

/// FD-checks every loss term against its own gradient at tolerance `tol`.
pub fn fd_check_losses<F: Element>(tol: f64) {
    let img_shape = [2usize, 4, 6, 3];
    let map_big = [2usize, 3, 4, 1];
    let map_small = [2usize, 2, 2, 1];

    // Mean-L1 (reconstruction / feature-matching / plain-cycle form).
    let (a, b) = kink_safe_pair::<F>(&img_shape, 11);
    fd_check_leaf(&a, tol, |g, x| {
        let bv = g.constant(b.clone());
        mean_abs_diff_node(g, x, bv)
    });

    // Uncertainty cyclic: w.r.t. the cycled image...
    let (x, x_cyc) = kink_safe_pair::<F>(&img_shape, 12);
    let sig = sigma_leaf::<F>(&img_shape[..3], 13);
    fd_check_leaf(&x_cyc, tol, |g, c| {
        let xv = g.constant(x.clone());
        let sv = g.constant(sig.clone());
        uncertainty_cyclic_node(g, xv, c, sv)
    });
    // ...and w.r.t. σ.
    fd_check_leaf(&sig, tol, |g, s| {
        let xv = g.constant(x.clone());
        let cv = g.constant(x_cyc.clone());
        uncertainty_cyclic_node(g, xv, cv, s)
    });

    // LSGAN generator side, w.r.t. one scale's score map.
    let m0 = rand_arr::<F>(&map_big, 14);
    let m1 = rand_arr::<F>(&map_small, 15);
    fd_check_leaf(&m0, tol, |g, m| {
        let other = g.constant(m1.clone());
        lsgan_g_node(g, &[m, other])
    });

    // LSGAN discriminator side, w.r.t. a real map and a fake map.
    let (r0, f0) = (rand_arr::<F>(&map_big, 16), rand_arr::<F>(&map_big, 17));
    let (r1, f1) = (rand_arr::<F>(&map_small, 18), rand_arr::<F>(&map_small, 19));
    fd_check_leaf(&r0, tol, |g, r| {
        let r1v = g.constant(r1.clone());
        let f0v = g.constant(f0.clone());
        let f1v = g.constant(f1.clone());
        lsgan_d_node(g, &[r, r1v], &[f0v, f1v])
    });
    fd_check_leaf(&f1, tol, |g, f| {
        let r0v = g.constant(r0.clone());
        let r1v = g.constant(r1.clone());
        let f0v = g.constant(f0.clone());
        lsgan_d_node(g, &[r0v, r1v], &[f0v, f])
    });
}

/// Directional FD check of every network block's 32-bit gradient, each
/// probed through the loss term that most directly exercises it.
///
/// The FD reference evaluates an f64 twin holding the exact same weights
/// (f32→f64 casts are lossless). At 32-bit the forward round-off and the
/// near-degenerate instance-norm curvature of the pooled discriminator
/// scale swamp any usable step size; the f64 reference resolves the true
/// directional derivative, while the gradient under test stays the one the
/// 32-bit backward pass produced.
pub fn fd_check_blocks_f32() {
    let cfg = toy_cfg(32, 64, 8, 1);
    let b32: ModelBundle<f32> = ModelBundle::init(&cfg);
    let xa32 = rand_arr::<f32>(&[1, 32, 64, 3], 31);
    let xb32 = rand_arr::<f32>(&[1, 32, 64, 3], 32);

    let mut b64: ModelBundle<f64> = ModelBundle::init(&cfg);
    let cast: Vec<(String, ArrayD<f64>)> = b32
        .all_params()
        .iter()
        .map(|p| (p.name().to_string(), p.data.mapv(|v| v as f64)))
        .collect();
    for (name, arr) in &cast {
        set_param(&mut b64, name, arr);
    }
    let xa64 = xa32.mapv(|v| v as f64);
    let xb64 = xb32.mapv(|v| v as f64);
    let h = 1e-7;

    type Pick32 = fn(&mut Graph<f32>, &TermNodes) -> Value;
    type Pick64 = fn(&mut Graph<f64>, &TermNodes) -> Value;
    let blocks: [(&str, fn(&str) -> bool, Pick32, Pick64); 8] = [
        ("enc_ab", |n| n.starts_with("enc_ab."), |_, t| t.rec, |_, t| t.rec),
        ("enc_ba", |n| n.starts_with("enc_ba."), |_, t| t.rec, |_, t| t.rec),
        ("tnet", |n| n.starts_with("tnet."), |_, t| t.feat, |_, t| t.feat),
        (
            "dec_ab image branch",
            |n| n.starts_with("dec_ab.") && !n.contains(".sig."),
            |_, t| t.rec,
            |_, t| t.rec,
        ),
        (
            "dec_ab sigma branch",
            |n| n.contains(".sig."),
            |_, t| t.cyc_a,
            |_, t| t.cyc_a,
        ),
        ("dec_ba", |n| n.starts_with("dec_ba."), |_, t| t.rec, |_, t| t.rec),
        ("disc_a", |n| n.starts_with("disc_a."), |_, t| t.adv_d, |_, t| t.adv_d),
        ("disc_b", |n| n.starts_with("disc_b."), |_, t| t.adv_d, |_, t| t.adv_d),
    ];

    for (label, belongs, pick32, pick64) in blocks {
        let (entries, gxa) = objective_grads(&b32, &xa32, &xb32, &cfg, pick32);
        let selected: Vec<(String, ArrayD<f64>, ArrayD<f64>)> = entries
            .iter()
            .filter(|(n, _, g)| belongs(n) && g.is_some())
            .map(|(n, t, g)| {
                (
                    n.clone(),
                    t.mapv(|v| v as f64),
                    g.as_ref().expect("filtered").mapv(|v| v as f64),
                )
            })
            .collect();
        assert!(!selected.is_empty(), "{label}: no parameters matched");
        let norm = selected
            .iter()
            .flat_map(|(_, _, g)| g.iter())
            .fold(0.0, |s, &v| s + v * v)
            .sqrt();
        assert!(norm > 0.0, "{label}: no gradient reached the block");
        let mut probe = |sign: f64| {
            for (name, theta, grad) in &selected {
                let stepped = theta + &grad.mapv(|v| v / norm * h * sign);
                set_param(&mut b64, name, &stepped);
            }
            let v = eval_term(&b64, &xa64, &xb64, &cfg, &pick64);
            for (name, theta, _) in &selected {
                set_param(&mut b64, name, theta);
            }
            v
        };
        let fd = (probe(1.0) - probe(-1.0)) / (2.0 * h);
        let rel = rel_err(norm, fd, 1e-3);
        assert!(rel < 1e-3, "{label}: rel err {rel} >= 1e-3");

        // Input-side directional probe on the encoder terms only; the
        // other terms reuse the same input path.
        if label == "enc_ab" {
            let gxa = gxa
                .as_ref()
                .expect("reconstruction reaches x_A")
                .mapv(|v| v as f64);
            let dir = check_directional(&xa64, &gxa, h, |t| {
                eval_term(&b64, t, &xb64, &cfg, &pick64)
            });
            assert!(dir < 1e-3, "input grad rel err {dir} >= 1e-3");
        }
    }
}
