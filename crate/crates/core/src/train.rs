//! Alternating generator/discriminator optimization: one discriminator
//! update on detached fakes, then one generator update against the
//! refreshed discriminators, per iteration.
//!
//! Three Adam instances: one shared by every generator-side parameter and
//! one per discriminator. Parameters with no gradient in a step (the σ
//! branch when the uncertainty loss is ablated) are left untouched.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use ndarray::ArrayD;

use crate::config::{Seeder, TrainConfig};
use crate::data::{scan_dataset, BatchSampler};
use crate::error::{Error, Result};
use crate::losses::{
    assemble_objectives, lsgan_d_node, lsgan_g_node, mean_abs_diff_node,
    uncertainty_cyclic_node, LossParts, LossReport,
};
use crate::networks::ModelBundle;
use crate::paths::{forward_all_paths_graph, PathValues};
use crate::tensor::{Element, Gradients, Graph, Param, Value};
use crate::types::{Domain, ImageBatch};

const ADAM_EPS: f64 = 1e-8;

/// Adam with per-parameter moment slots keyed by parameter name.
pub struct Adam<F: Element> {
    pub t: u64,
    beta1: f64,
    beta2: f64,
    slots: BTreeMap<String, (ArrayD<F>, ArrayD<F>)>,
}

impl<F: Element> Adam<F> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam {
            t: 0,
            beta1,
            beta2,
            slots: BTreeMap::new(),
        }
    }

    pub fn restore(
        beta1: f64,
        beta2: f64,
        t: u64,
        slots: BTreeMap<String, (ArrayD<F>, ArrayD<F>)>,
    ) -> Self {
        Adam {
            t,
            beta1,
            beta2,
            slots,
        }
    }

    pub fn slots(&self) -> &BTreeMap<String, (ArrayD<F>, ArrayD<F>)> {
        &self.slots
    }

    /// One update over the given parameters. Parameters absent from the
    /// gradient set are skipped: their weights and moments stay put.
    pub fn step(
        &mut self,
        lr: f64,
        params: Vec<&mut Param<F>>,
        g: &Graph<F>,
        grads: &Gradients<F>,
    ) {
        self.t += 1;
        let b1 = F::f(self.beta1);
        let b2 = F::f(self.beta2);
        let one = F::one();
        let corr1 = F::f(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = F::f(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::f(lr);
        let eps = F::f(ADAM_EPS);
        for p in params {
            let Some(node) = g.param_value(p.id()) else {
                continue;
            };
            let Some(grad) = grads.wrt(node) else {
                continue;
            };
            let (m, v) = self.slots.entry(p.name().to_string()).or_insert_with(|| {
                (
                    ArrayD::zeros(p.data.raw_dim()),
                    ArrayD::zeros(p.data.raw_dim()),
                )
            });
            let ms = m.as_slice_mut().expect("layout");
            let vs = v.as_slice_mut().expect("layout");
            let gs = grad.as_slice().expect("layout");
            let ps = p.data.as_slice_mut().expect("layout");
            for i in 0..ps.len() {
                ms[i] = b1 * ms[i] + (one - b1) * gs[i];
                vs[i] = b2 * vs[i] + (one - b2) * gs[i] * gs[i];
                let mhat = ms[i] / corr1;
                let vhat = vs[i] / corr2;
                ps[i] = ps[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Everything that evolves during training.
pub struct TrainState<F: Element> {
    pub bundle: ModelBundle<F>,
    pub iteration: u64,
    pub opt_g: Adam<F>,
    pub opt_d_a: Adam<F>,
    pub opt_d_b: Adam<F>,
    pub sampler: BatchSampler,
    /// Config snapshot the run started with.
    pub cfg: TrainConfig,
}

impl<F: Element> TrainState<F> {
    pub fn new(cfg: &TrainConfig) -> Self {
        TrainState {
            bundle: ModelBundle::init(cfg),
            iteration: 0,
            opt_g: Adam::new(cfg.adam_beta1, cfg.adam_beta2),
            opt_d_a: Adam::new(cfg.adam_beta1, cfg.adam_beta2),
            opt_d_b: Adam::new(cfg.adam_beta1, cfg.adam_beta2),
            sampler: BatchSampler::new(Seeder::new(cfg.seed), cfg.random_crop),
            cfg: cfg.clone(),
        }
    }
}

fn finite_or_err<F: Element>(name: &str, v: F) -> Result<f64> {
    let v = v.to_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite { term: name.into() });
    }
    Ok(v)
}

/// Recorded generator pass over all six paths, with the non-adversarial
/// loss nodes already attached. The adversarial terms are appended later
/// by [`generator_update`] so they see the post-update discriminators.
pub struct GeneratorForward<F: Element> {
    pub graph: Graph<F>,
    pub paths: PathValues,
    rec_node: Value,
    feat_node: Value,
    cyc_a_node: Value,
    cyc_b_node: Value,
    pub rec: f64,
    pub feat: f64,
    pub cyc_a: f64,
    pub cyc_b: f64,
    /// Detached copies fed to the discriminator update.
    pub fake_a: ArrayD<F>,
    pub fake_b: ArrayD<F>,
}

pub fn generator_forward<F: Element>(
    bundle: &ModelBundle<F>,
    x_a: &ImageBatch<F>,
    x_b: &ImageBatch<F>,
    cfg: &TrainConfig,
) -> Result<GeneratorForward<F>> {
    x_a.expect_domain(Domain::Adverse)?;
    x_b.expect_domain(Domain::Normal)?;
    let mut g = Graph::recording();
    let xa = g.constant(x_a.data.clone());
    let xb = g.constant(x_b.data.clone());
    let paths = forward_all_paths_graph(&mut g, bundle, xa, xb, cfg);

    let rec_a = mean_abs_diff_node(&mut g, xa, paths.x_rec_a);
    let rec_b = mean_abs_diff_node(&mut g, xb, paths.x_rec_b);
    let rec_node = g.add(rec_a, rec_b);
    let feat_a = mean_abs_diff_node(&mut g, paths.feat_a_enhanced, paths.feat_of_fake_b);
    let feat_b = mean_abs_diff_node(&mut g, paths.feat_b, paths.feat_of_fake_a);
    let feat_node = g.add(feat_a, feat_b);
    let cyc_a_node = if cfg.use_uncertainty_loss {
        let sigma = paths.sigma.expect("uncertainty loss needs the σ branch");
        uncertainty_cyclic_node(&mut g, xa, paths.x_cyc_a, sigma)
    } else {
        mean_abs_diff_node(&mut g, xa, paths.x_cyc_a)
    };
    let cyc_b_node = mean_abs_diff_node(&mut g, xb, paths.x_cyc_b);

    let rec = finite_or_err("rec", g.scalar(rec_node))?;
    let feat = finite_or_err("feat", g.scalar(feat_node))?;
    let cyc_a = finite_or_err("cyc_A", g.scalar(cyc_a_node))?;
    let cyc_b = finite_or_err("cyc_B", g.scalar(cyc_b_node))?;
    let fake_a = g.array(paths.x_fake_a).clone();
    let fake_b = g.array(paths.x_fake_b).clone();

    Ok(GeneratorForward {
        graph: g,
        paths,
        rec_node,
        feat_node,
        cyc_a_node,
        cyc_b_node,
        rec,
        feat,
        cyc_a,
        cyc_b,
        fake_a,
        fake_b,
    })
}

/// Discriminator phase: scores reals against detached fakes and steps the
/// two discriminator optimizers. No generator parameter is bound in this
/// graph, so the generator cannot move here.
pub fn discriminator_update<F: Element>(
    state: &mut TrainState<F>,
    x_a: &ImageBatch<F>,
    x_b: &ImageBatch<F>,
    fake_a: &ArrayD<F>,
    fake_b: &ArrayD<F>,
    lr: f64,
) -> Result<(f64, f64)> {
    let mut g = Graph::recording();
    let real_a = g.constant(x_a.data.clone());
    let real_b = g.constant(x_b.data.clone());
    let fa = g.constant(fake_a.clone());
    let fb = g.constant(fake_b.clone());
    let ra_maps = state.bundle.disc_a.forward(&mut g, real_a);
    let fa_maps = state.bundle.disc_a.forward(&mut g, fa);
    let rb_maps = state.bundle.disc_b.forward(&mut g, real_b);
    let fb_maps = state.bundle.disc_b.forward(&mut g, fb);
    let adv_d_a_node = lsgan_d_node(&mut g, &ra_maps, &fa_maps);
    let adv_d_b_node = lsgan_d_node(&mut g, &rb_maps, &fb_maps);
    let total_d_node = g.add(adv_d_a_node, adv_d_b_node);
    let adv_d_a = finite_or_err("adv_D_A", g.scalar(adv_d_a_node))?;
    let adv_d_b = finite_or_err("adv_D_B", g.scalar(adv_d_b_node))?;
    let grads = g.backward(total_d_node);
    state
        .opt_d_a
        .step(lr, state.bundle.disc_a.params_mut(), &g, &grads);
    state
        .opt_d_b
        .step(lr, state.bundle.disc_b.params_mut(), &g, &grads);
    Ok((adv_d_a, adv_d_b))
}

/// Generator phase: appends the adversarial terms (scoring the live fake
/// nodes with the current discriminators), backprops the full objective,
/// and steps the generator optimizer only.
pub fn generator_update<F: Element>(
    state: &mut TrainState<F>,
    fwd: GeneratorForward<F>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let mut g = fwd.graph;
    let ga_maps = state.bundle.disc_a.forward(&mut g, fwd.paths.x_fake_a);
    let gb_maps = state.bundle.disc_b.forward(&mut g, fwd.paths.x_fake_b);
    let adv_g_a_node = lsgan_g_node(&mut g, &ga_maps);
    let adv_g_b_node = lsgan_g_node(&mut g, &gb_maps);
    let adv_g_a = finite_or_err("adv_G_A", g.scalar(adv_g_a_node))?;
    let adv_g_b = finite_or_err("adv_G_B", g.scalar(adv_g_b_node))?;

    let adv_sum = g.add(adv_g_a_node, adv_g_b_node);
    let rec_w = g.mul_scalar(fwd.rec_node, F::f(cfg.lambda_rec));
    let feat_w = g.mul_scalar(fwd.feat_node, F::f(cfg.lambda_feat));
    let cyc_sum = g.add(fwd.cyc_a_node, fwd.cyc_b_node);
    let cyc_w = g.mul_scalar(cyc_sum, F::f(cfg.lambda_cyc));
    let partial = g.add(adv_sum, rec_w);
    let partial = g.add(partial, feat_w);
    let total_g_node = g.add(partial, cyc_w);
    finite_or_err("total_G", g.scalar(total_g_node))?;

    let grads = g.backward(total_g_node);
    state
        .opt_g
        .step(lr, state.bundle.generator_params_mut(), &g, &grads);
    Ok((adv_g_a, adv_g_b))
}

/// One full iteration: discriminator update with generator outputs held
/// fixed, then generator update with the discriminators held fixed at
/// their new values.
pub fn train_step<F: Element>(
    state: &mut TrainState<F>,
    x_a: &ImageBatch<F>,
    x_b: &ImageBatch<F>,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let lr = cfg.lr_at(state.iteration);
    let fwd = generator_forward(&state.bundle, x_a, x_b, cfg)?;
    let (adv_d_a, adv_d_b) =
        discriminator_update(state, x_a, x_b, &fwd.fake_a, &fwd.fake_b, lr)?;
    let (rec, feat, cyc_a, cyc_b) = (fwd.rec, fwd.feat, fwd.cyc_a, fwd.cyc_b);
    let (adv_g_a, adv_g_b) = generator_update(state, fwd, lr, cfg)?;
    state.iteration += 1;
    assemble_objectives(
        &LossParts {
            rec,
            feat,
            cyc_a,
            cyc_b,
            adv_g_a,
            adv_g_b,
            adv_d_a,
            adv_d_b,
        },
        cfg,
    )
}

fn log_path(cfg: &TrainConfig) -> PathBuf {
    cfg.out_dir.join("loss_log.csv")
}

fn latest_path(cfg: &TrainConfig) -> PathBuf {
    cfg.out_dir.join("latest.ckpt")
}

/// Keeps only the first `keep` lines of the loss log, so a resumed run's
/// log still satisfies line-count == iterations.
fn truncate_log(cfg: &TrainConfig, keep: u64) -> Result<()> {
    let path = log_path(cfg);
    if !path.exists() {
        if keep > 0 {
            return Err(Error::Checkpoint(format!(
                "resume expected {} log lines but {} is missing",
                keep,
                path.display()
            )));
        }
        return Ok(());
    }
    let text = std::fs::read_to_string(&path)?;
    let kept: Vec<&str> = text.lines().take(keep as usize).collect();
    let mut body = kept.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    std::fs::write(&path, body)?;
    Ok(())
}

/// Runs `cfg.iterations` steps, appending one loss-log line per step and
/// checkpointing every `checkpoint_every` iterations plus at the end. A
/// `latest.ckpt` in `out_dir` resumes the run from its stored iteration.
pub fn train<F: Element>(cfg: &TrainConfig) -> Result<TrainState<F>> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let ds_a = scan_dataset(&cfg.data_root_adverse, Domain::Adverse, cfg.image_size())?;
    let ds_b = scan_dataset(&cfg.data_root_normal, Domain::Normal, cfg.image_size())?;

    let latest = latest_path(cfg);
    let mut state: TrainState<F> = if latest.exists() {
        crate::checkpoint::checkpoint_load(&latest)?
    } else {
        TrainState::new(cfg)
    };
    truncate_log(cfg, state.iteration)?;

    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(log_path(cfg))?;

    if state.iteration >= cfg.iterations {
        crate::checkpoint::checkpoint_save(&state, &latest)?;
        return Ok(state);
    }

    while state.iteration < cfg.iterations {
        let (x_a, x_b) = state.sampler.next_batch::<F>(&ds_a, &ds_b, cfg.batch_size)?;
        let report = train_step(&mut state, &x_a, &x_b, cfg)?;
        writeln!(log, "{}", report.log_line(state.iteration))?;
        if state.iteration % cfg.checkpoint_every == 0 && state.iteration < cfg.iterations {
            log.flush()?;
            crate::checkpoint::checkpoint_save(&state, &latest)?;
        }
    }
    log.flush()?;
    crate::checkpoint::checkpoint_save(&state, &latest)?;
    Ok(state)
}
