//! Objective terms: reconstruction, asymmetric feature matching, the
//! uncertainty-weighted and plain cyclic losses, LSGAN adversarial terms,
//! and the weighted totals.
//!
//! Each term exists twice: as a pure array-level function (the reference
//! the oracles test) and as a graph builder producing a differentiable
//! scalar node for training. Expectations are minibatch means; the
//! uncertainty loss averages per-pixel terms over H·W and then over the
//! batch, and its per-pixel residual is the channel mean of |x − x^cyc|.

use ndarray::ArrayD;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Value};
use crate::types::{FeatureMap, ImageBatch, UncertaintyMap};

/// Every scalar of one step, plus the weighted totals. The generator
/// total is `adv_G_A + adv_G_B + λ_rec·rec + λ_feat·feat + λ_cyc·(cyc_A +
/// cyc_B)`; the discriminator total is `adv_D_A + adv_D_B`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub rec: f64,
    pub feat: f64,
    pub cyc_a: f64,
    pub cyc_b: f64,
    pub adv_g_a: f64,
    pub adv_g_b: f64,
    pub adv_d_a: f64,
    pub adv_d_b: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    /// One loss-log record. `{}` on f64 prints the shortest exact
    /// representation, so logs round-trip bit-exactly through
    /// [`LossReport::parse_line`].
    pub fn log_line(&self, iter: u64) -> String {
        format!(
            "{}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}",
            iter,
            self.rec,
            self.feat,
            self.cyc_a,
            self.cyc_b,
            self.adv_g_a,
            self.adv_g_b,
            self.adv_d_a,
            self.adv_d_b,
            self.total_g,
            self.total_d
        )
    }

    pub fn parse_line(line: &str) -> Result<(u64, LossReport)> {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 11 {
            return Err(Error::Dataset(format!(
                "loss log line has {} fields, expected 11",
                fields.len()
            )));
        }
        let iter: u64 = fields[0]
            .parse()
            .map_err(|e| Error::Dataset(format!("bad iter field: {e}")))?;
        let mut vals = [0f64; 10];
        for (i, f) in fields[1..].iter().enumerate() {
            vals[i] = f
                .parse()
                .map_err(|e| Error::Dataset(format!("bad loss field {i}: {e}")))?;
        }
        Ok((
            iter,
            LossReport {
                rec: vals[0],
                feat: vals[1],
                cyc_a: vals[2],
                cyc_b: vals[3],
                adv_g_a: vals[4],
                adv_g_b: vals[5],
                adv_d_a: vals[6],
                adv_d_b: vals[7],
                total_g: vals[8],
                total_d: vals[9],
            },
        ))
    }
}

/// Unweighted scalar terms handed to [`assemble_objectives`].
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub rec: f64,
    pub feat: f64,
    pub cyc_a: f64,
    pub cyc_b: f64,
    pub adv_g_a: f64,
    pub adv_g_b: f64,
    pub adv_d_a: f64,
    pub adv_d_b: f64,
}

fn check_same_shape<F: Element>(what: &str, a: &ArrayD<F>, b: &ArrayD<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn mean_abs_diff<F: Element>(a: &ArrayD<F>, b: &ArrayD<F>) -> F {
    let n = F::f(a.len() as f64);
    a.iter()
        .zip(b.iter())
        .fold(F::zero(), |s, (&x, &y)| s + (x - y).abs())
        / n
}

/// Sum of the two per-domain mean-L1 reconstruction terms.
pub fn reconstruction_loss<F: Element>(
    x_a: &ImageBatch<F>,
    x_rec_a: &ImageBatch<F>,
    x_b: &ImageBatch<F>,
    x_rec_b: &ImageBatch<F>,
) -> Result<F> {
    check_same_shape("reconstruction_loss A", &x_a.data, &x_rec_a.data)?;
    check_same_shape("reconstruction_loss B", &x_b.data, &x_rec_b.data)?;
    Ok(mean_abs_diff(&x_a.data, &x_rec_a.data) + mean_abs_diff(&x_b.data, &x_rec_b.data))
}

/// Asymmetric feature matching: the A-side compares the POST-T encoding
/// of x_A against the encoding of the fake B image; the B-side compares
/// raw encodings only.
pub fn feature_matching_loss<F: Element>(
    feat_a_enhanced: &FeatureMap<F>,
    feat_of_fake_b: &FeatureMap<F>,
    feat_b: &FeatureMap<F>,
    feat_of_fake_a: &FeatureMap<F>,
) -> Result<F> {
    check_same_shape(
        "feature_matching_loss A",
        &feat_a_enhanced.data,
        &feat_of_fake_b.data,
    )?;
    check_same_shape("feature_matching_loss B", &feat_b.data, &feat_of_fake_a.data)?;
    Ok(mean_abs_diff(&feat_a_enhanced.data, &feat_of_fake_b.data)
        + mean_abs_diff(&feat_b.data, &feat_of_fake_a.data))
}

/// Uncertainty-weighted A-side cyclic loss: per pixel
/// `σ⁻²·r/2 + log(σ²)/2` with `r` the channel-mean absolute residual,
/// averaged over H·W and the batch. May be negative via the log term.
pub fn uncertainty_cyclic_loss<F: Element>(
    x_a: &ImageBatch<F>,
    x_cyc_a: &ImageBatch<F>,
    sigma: &UncertaintyMap<F>,
) -> Result<F> {
    check_same_shape("uncertainty_cyclic_loss images", &x_a.data, &x_cyc_a.data)?;
    let (b, h, w, c) = {
        let s = x_a.data.shape();
        (s[0], s[1], s[2], s[3])
    };
    if sigma.sigma.shape() != [b, h, w] {
        return Err(Error::shape(format!(
            "uncertainty_cyclic_loss: sigma shape {:?} vs images {:?}",
            sigma.sigma.shape(),
            x_a.data.shape()
        )));
    }
    if !sigma.sigma.iter().all(|&v| v > F::zero()) {
        return Err(Error::NonPositiveSigma(
            "uncertainty_cyclic_loss requires σ > 0".into(),
        ));
    }
    let xs = x_a.data.as_slice().expect("layout");
    let ys = x_cyc_a.data.as_slice().expect("layout");
    let ss = sigma.sigma.as_slice().expect("layout");
    let half = F::f(0.5);
    let inv_c = F::one() / F::f(c as f64);
    let mut total = F::zero();
    for (pix, &s) in ss.iter().enumerate() {
        let mut r = F::zero();
        for ch in 0..c {
            let i = pix * c + ch;
            r = r + (xs[i] - ys[i]).abs();
        }
        r = r * inv_c;
        let s2 = s * s;
        total = total + half * (r / s2 + s2.ln());
    }
    Ok(total / F::f((b * h * w) as f64))
}

/// Plain mean-L1 cyclic loss for the B side.
pub fn plain_cyclic_loss<F: Element>(
    x_b: &ImageBatch<F>,
    x_cyc_b: &ImageBatch<F>,
) -> Result<F> {
    check_same_shape("plain_cyclic_loss", &x_b.data, &x_cyc_b.data)?;
    Ok(mean_abs_diff(&x_b.data, &x_cyc_b.data))
}

/// Overall cyclic loss: the two directional terms, added.
pub fn total_cyclic_loss<F: Element>(cyc_a: F, cyc_b: F) -> F {
    cyc_a + cyc_b
}

fn mean_sq_vs<F: Element>(map: &ArrayD<F>, target: F) -> F {
    let n = F::f(map.len() as f64);
    map.iter()
        .fold(F::zero(), |s, &v| s + (v - target) * (v - target))
        / n
}

/// LSGAN discriminator loss: ½·E[(D(real)−1)²] + ½·E[D(fake)²], each
/// expectation taken per map then averaged equally across scales.
pub fn lsgan_d_loss<F: Element>(d_real_maps: &[ArrayD<F>], d_fake_maps: &[ArrayD<F>]) -> Result<F> {
    if d_real_maps.is_empty() || d_fake_maps.is_empty() {
        return Err(Error::shape("lsgan_d_loss: empty activation map list"));
    }
    let half = F::f(0.5);
    let nr = F::f(d_real_maps.len() as f64);
    let nf = F::f(d_fake_maps.len() as f64);
    let real: F = d_real_maps
        .iter()
        .fold(F::zero(), |s, m| s + mean_sq_vs(m, F::one()))
        / nr;
    let fake: F = d_fake_maps
        .iter()
        .fold(F::zero(), |s, m| s + mean_sq_vs(m, F::zero()))
        / nf;
    Ok(half * real + half * fake)
}

/// LSGAN generator loss: ½·E[(D(fake)−1)²], averaged across scales.
pub fn lsgan_g_loss<F: Element>(d_fake_maps: &[ArrayD<F>]) -> Result<F> {
    if d_fake_maps.is_empty() {
        return Err(Error::shape("lsgan_g_loss: empty activation map list"));
    }
    let n = F::f(d_fake_maps.len() as f64);
    let term: F = d_fake_maps
        .iter()
        .fold(F::zero(), |s, m| s + mean_sq_vs(m, F::one()))
        / n;
    Ok(F::f(0.5) * term)
}

/// Applies the λ weights and totals both objectives, rejecting non-finite
/// parts with the first offender named.
pub fn assemble_objectives(parts: &LossParts, cfg: &TrainConfig) -> Result<LossReport> {
    for (name, v) in [
        ("rec", parts.rec),
        ("feat", parts.feat),
        ("cyc_A", parts.cyc_a),
        ("cyc_B", parts.cyc_b),
        ("adv_G_A", parts.adv_g_a),
        ("adv_G_B", parts.adv_g_b),
        ("adv_D_A", parts.adv_d_a),
        ("adv_D_B", parts.adv_d_b),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
    }
    let total_g = parts.adv_g_a
        + parts.adv_g_b
        + cfg.lambda_rec * parts.rec
        + cfg.lambda_feat * parts.feat
        + cfg.lambda_cyc * (parts.cyc_a + parts.cyc_b);
    let total_d = parts.adv_d_a + parts.adv_d_b;
    Ok(LossReport {
        rec: parts.rec,
        feat: parts.feat,
        cyc_a: parts.cyc_a,
        cyc_b: parts.cyc_b,
        adv_g_a: parts.adv_g_a,
        adv_g_b: parts.adv_g_b,
        adv_d_a: parts.adv_d_a,
        adv_d_b: parts.adv_d_b,
        total_g,
        total_d,
    })
}

// ---- graph builders (training) ----

/// `mean |a − b|` as a 0-d node.
pub fn mean_abs_diff_node<F: Element>(g: &mut Graph<F>, a: Value, b: Value) -> Value {
    let d = g.sub(a, b);
    let ad = g.abs(d);
    g.mean_all(ad)
}

/// Graph-node form of the uncertainty-weighted cyclic loss; `sigma` is
/// the `(B, H, W)` node from the first A→B leg.
pub fn uncertainty_cyclic_node<F: Element>(
    g: &mut Graph<F>,
    x_a: Value,
    x_cyc_a: Value,
    sigma: Value,
) -> Value {
    let d = g.sub(x_a, x_cyc_a);
    let ad = g.abs(d);
    let r = g.mean_channels(ad);
    let s2 = g.square(sigma);
    let weighted = g.div(r, s2);
    let log_s2 = g.log(s2);
    let sum = g.add(weighted, log_s2);
    let half = g.mul_scalar(sum, F::f(0.5));
    g.mean_all(half)
}

/// LSGAN ½·E[(m − target)²] averaged equally across scale maps.
fn lsgan_term_node<F: Element>(g: &mut Graph<F>, maps: &[Value], target: f64) -> Value {
    assert!(!maps.is_empty(), "empty activation map list");
    let mut acc: Option<Value> = None;
    for &m in maps {
        let shifted = g.add_scalar(m, F::f(-target));
        let sq = g.square(shifted);
        let mean = g.mean_all(sq);
        acc = Some(match acc {
            Some(a) => g.add(a, mean),
            None => mean,
        });
    }
    let total = acc.expect("non-empty");
    g.mul_scalar(total, F::f(0.5 / maps.len() as f64))
}

/// Generator-side adversarial term: fakes should score 1.
pub fn lsgan_g_node<F: Element>(g: &mut Graph<F>, d_fake_maps: &[Value]) -> Value {
    lsgan_term_node(g, d_fake_maps, 1.0)
}

/// Discriminator-side loss: reals toward 1, fakes toward 0.
pub fn lsgan_d_node<F: Element>(
    g: &mut Graph<F>,
    d_real_maps: &[Value],
    d_fake_maps: &[Value],
) -> Value {
    let real = lsgan_term_node(g, d_real_maps, 1.0);
    let fake = lsgan_term_node(g, d_fake_maps, 0.0);
    g.add(real, fake)
}
