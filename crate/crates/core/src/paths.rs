//! The six path compositions defining the asymmetric wiring.
//!
//! A→B translation routes encoded features through the T-net; B→A does
//! not. Reconstruction is cross-wired (each encoder feeds the *opposite*
//! side's decoder) and bypasses the T-net on both sides. Cycles re-enter
//! the full generators. One shared graph builder serves both the
//! inference wrappers and the recorded training pass, so prefix sharing
//! is bitwise-identical to recomputing each path in isolation.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::networks::ModelBundle;
use crate::tensor::{Element, Graph, Value};
use crate::types::{Domain, FeatureMap, ImageBatch, UncertaintyMap};

/// Node handles for every path output inside one recorded graph.
pub struct PathValues {
    pub x_fake_b: Value,
    /// σ from the first A→B leg; `None` when the decoder lacks the branch.
    pub sigma: Option<Value>,
    pub x_fake_a: Value,
    pub x_rec_a: Value,
    pub x_rec_b: Value,
    pub x_cyc_a: Value,
    pub x_cyc_b: Value,
    /// Post-T encoding of x_A (raw when the T-net is ablated).
    pub feat_a_enhanced: Value,
    /// Raw encoding of x_B.
    pub feat_b: Value,
    /// enc_B→A applied to the fake B image.
    pub feat_of_fake_b: Value,
    /// enc_A→B applied to the fake A image — compared raw, never through T.
    pub feat_of_fake_a: Value,
}

/// Owned outputs of one full forward pass over both domains.
pub struct PathOutputs<F: Element> {
    pub x_fake_b: ImageBatch<F>,
    pub sigma: Option<UncertaintyMap<F>>,
    pub x_fake_a: ImageBatch<F>,
    pub x_rec_a: ImageBatch<F>,
    pub x_rec_b: ImageBatch<F>,
    pub x_cyc_a: ImageBatch<F>,
    pub x_cyc_b: ImageBatch<F>,
    pub feat_a_enhanced: FeatureMap<F>,
    pub feat_b: FeatureMap<F>,
    pub feat_of_fake_b: FeatureMap<F>,
    pub feat_of_fake_a: FeatureMap<F>,
}

/// Wires all six paths into `g`, reusing shared prefixes: each encoder
/// runs exactly twice (real input and opposite fake), each decoder three
/// times. σ branches run only where σ is consumed.
pub fn forward_all_paths_graph<F: Element>(
    g: &mut Graph<F>,
    m: &ModelBundle<F>,
    x_a: Value,
    x_b: Value,
    cfg: &TrainConfig,
) -> PathValues {
    assert_eq!(
        g.array(x_a).shape()[0],
        g.array(x_b).shape()[0],
        "batch sizes must match"
    );

    // A→B translation: the only leg that passes T and emits σ.
    let feat_a_raw = m.enc_ab.forward(g, x_a);
    let feat_a_enhanced = m.transfer(g, feat_a_raw);
    let out_ab = m.dec_ab.forward(g, feat_a_enhanced, true);
    let x_fake_b = out_ab.img;

    // B→A translation: no T, no σ.
    let feat_b = m.enc_ba.forward(g, x_b);
    let x_fake_a = m.dec_ba.forward(g, feat_b, false).img;

    // Cross-wired reconstructions from the *raw* features.
    let x_rec_a = m.dec_ba.forward(g, feat_a_raw, false).img;
    let x_rec_b = m.dec_ab.forward(g, feat_b, false).img;

    // Cycle A→B→A; the fake-B encoding is shared with feature matching.
    let feat_of_fake_b = m.enc_ba.forward(g, x_fake_b);
    let x_cyc_a = m.dec_ba.forward(g, feat_of_fake_b, false).img;

    // Cycle B→A→B; T participates only under the configured reading.
    let feat_of_fake_a = m.enc_ab.forward(g, x_fake_a);
    let cyc_b_feat = if cfg.apply_tnet_in_cycle_b {
        m.transfer(g, feat_of_fake_a)
    } else {
        feat_of_fake_a
    };
    let x_cyc_b = m.dec_ab.forward(g, cyc_b_feat, false).img;

    PathValues {
        x_fake_b,
        sigma: out_ab.sigma,
        x_fake_a,
        x_rec_a,
        x_rec_b,
        x_cyc_a,
        x_cyc_b,
        feat_a_enhanced,
        feat_b,
        feat_of_fake_b,
        feat_of_fake_a,
    }
}

/// x'_B = dec_A→B(T(enc_A→B(x_A))), with its uncertainty map.
pub fn translate_a_to_b<F: Element>(
    m: &ModelBundle<F>,
    x_a: &ImageBatch<F>,
) -> Result<(ImageBatch<F>, UncertaintyMap<F>)> {
    x_a.expect_domain(Domain::Adverse)?;
    let mut g = Graph::inference();
    let xv = g.constant(x_a.data.clone());
    let f = m.enc_ab.forward(&mut g, xv);
    let f = m.transfer(&mut g, f);
    let out = m.dec_ab.forward(&mut g, f, true);
    let img = ImageBatch::new(g.array(out.img).clone(), Domain::Normal)?;
    let sigma = out.sigma.expect("A→B decoder carries the branch");
    let sigma = UncertaintyMap::new(g.array(sigma).clone(), m.sigma_floor)?;
    Ok((img, sigma))
}

/// x'_A = dec_B→A(enc_B→A(x_B)); no T-net, no uncertainty map.
pub fn translate_b_to_a<F: Element>(
    m: &ModelBundle<F>,
    x_b: &ImageBatch<F>,
) -> Result<ImageBatch<F>> {
    x_b.expect_domain(Domain::Normal)?;
    let mut g = Graph::inference();
    let xv = g.constant(x_b.data.clone());
    let f = m.enc_ba.forward(&mut g, xv);
    let out = m.dec_ba.forward(&mut g, f, false);
    ImageBatch::new(g.array(out.img).clone(), Domain::Adverse)
}

/// x^rec_A = dec_B→A(enc_A→B(x_A)): cross-wired, raw feature, no T.
pub fn reconstruct_a<F: Element>(
    m: &ModelBundle<F>,
    x_a: &ImageBatch<F>,
) -> Result<ImageBatch<F>> {
    x_a.expect_domain(Domain::Adverse)?;
    let mut g = Graph::inference();
    let xv = g.constant(x_a.data.clone());
    let f = m.enc_ab.forward(&mut g, xv);
    let out = m.dec_ba.forward(&mut g, f, false);
    ImageBatch::new(g.array(out.img).clone(), Domain::Adverse)
}

/// x^rec_B = dec_A→B(enc_B→A(x_B)); the branch's σ is not computed.
pub fn reconstruct_b<F: Element>(
    m: &ModelBundle<F>,
    x_b: &ImageBatch<F>,
) -> Result<ImageBatch<F>> {
    x_b.expect_domain(Domain::Normal)?;
    let mut g = Graph::inference();
    let xv = g.constant(x_b.data.clone());
    let f = m.enc_ba.forward(&mut g, xv);
    let out = m.dec_ab.forward(&mut g, f, false);
    ImageBatch::new(g.array(out.img).clone(), Domain::Normal)
}

/// x^cyc_A = dec_B→A(enc_B→A(x'_B)): the full B→A generator on fake B.
pub fn cycle_a<F: Element>(
    m: &ModelBundle<F>,
    x_fake_b: &ImageBatch<F>,
) -> Result<ImageBatch<F>> {
    x_fake_b.expect_domain(Domain::Normal)?;
    let mut g = Graph::inference();
    let xv = g.constant(x_fake_b.data.clone());
    let f = m.enc_ba.forward(&mut g, xv);
    let out = m.dec_ba.forward(&mut g, f, false);
    ImageBatch::new(g.array(out.img).clone(), Domain::Adverse)
}

/// x^cyc_B = dec_A→B(enc_A→B(x'_A)), routing through T when configured.
pub fn cycle_b<F: Element>(
    m: &ModelBundle<F>,
    x_fake_a: &ImageBatch<F>,
    cfg: &TrainConfig,
) -> Result<ImageBatch<F>> {
    x_fake_a.expect_domain(Domain::Adverse)?;
    let mut g = Graph::inference();
    let xv = g.constant(x_fake_a.data.clone());
    let f = m.enc_ab.forward(&mut g, xv);
    let f = if cfg.apply_tnet_in_cycle_b {
        m.transfer(&mut g, f)
    } else {
        f
    };
    let out = m.dec_ab.forward(&mut g, f, false);
    ImageBatch::new(g.array(out.img).clone(), Domain::Normal)
}

/// Runs every path once with shared prefixes and materializes the results.
pub fn forward_all_paths<F: Element>(
    m: &ModelBundle<F>,
    x_a: &ImageBatch<F>,
    x_b: &ImageBatch<F>,
    cfg: &TrainConfig,
) -> Result<PathOutputs<F>> {
    x_a.expect_domain(Domain::Adverse)?;
    x_b.expect_domain(Domain::Normal)?;
    if x_a.batch() != x_b.batch() {
        return Err(Error::shape(format!(
            "batch size mismatch: {} vs {}",
            x_a.batch(),
            x_b.batch()
        )));
    }
    let mut g = Graph::inference();
    let xa = g.constant(x_a.data.clone());
    let xb = g.constant(x_b.data.clone());
    let v = forward_all_paths_graph(&mut g, m, xa, xb, cfg);
    let img = |g: &Graph<F>, v: Value, d: Domain| ImageBatch::new(g.array(v).clone(), d);
    let feat = |g: &Graph<F>, v: Value| FeatureMap::new(g.array(v).clone());
    Ok(PathOutputs {
        x_fake_b: img(&g, v.x_fake_b, Domain::Normal)?,
        sigma: match v.sigma {
            Some(s) => Some(UncertaintyMap::new(g.array(s).clone(), m.sigma_floor)?),
            None => None,
        },
        x_fake_a: img(&g, v.x_fake_a, Domain::Adverse)?,
        x_rec_a: img(&g, v.x_rec_a, Domain::Adverse)?,
        x_rec_b: img(&g, v.x_rec_b, Domain::Normal)?,
        x_cyc_a: img(&g, v.x_cyc_a, Domain::Adverse)?,
        x_cyc_b: img(&g, v.x_cyc_b, Domain::Normal)?,
        feat_a_enhanced: feat(&g, v.feat_a_enhanced)?,
        feat_b: feat(&g, v.feat_b)?,
        feat_of_fake_b: feat(&g, v.feat_of_fake_b)?,
        feat_of_fake_a: feat(&g, v.feat_of_fake_a)?,
    })
}

#[cfg(test)]
mod tests {
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::networks::ModelBundle;

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            base_width: 8,
            image_height: 32,
            image_width: 64,
            ..TrainConfig::default()
        }
    }

    fn batch(shape: &[usize], domain: Domain, seed: u64) -> ImageBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        ImageBatch::new(
            ArrayD::from_shape_vec(
                IxDyn(shape),
                (0..n).map(|_| rng.gen_range(-0.99..0.99)).collect(),
            )
            .unwrap(),
            domain,
        )
        .unwrap()
    }

    #[test]
    fn translate_a_to_b_shape_and_sigma() {
        let m: ModelBundle<f64> = ModelBundle::init(&toy_cfg());
        let x = batch(&[1, 64, 128, 3], Domain::Adverse, 1);
        let (y, sigma) = translate_a_to_b(&m, &x).unwrap();
        assert_eq!(y.data.shape(), &[1, 64, 128, 3]);
        assert_eq!(y.domain, Domain::Normal);
        assert_eq!(sigma.sigma.shape(), &[1, 64, 128]);
        assert!(sigma.min() >= m.sigma_floor);
    }

    #[test]
    fn translate_b_to_a_shape_no_sigma() {
        let m: ModelBundle<f64> = ModelBundle::init(&toy_cfg());
        let x = batch(&[1, 64, 128, 3], Domain::Normal, 2);
        let y = translate_b_to_a(&m, &x).unwrap();
        assert_eq!(y.data.shape(), &[1, 64, 128, 3]);
        assert_eq!(y.domain, Domain::Adverse);
        assert!(y.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn domain_mismatch_is_rejected_everywhere() {
        let m: ModelBundle<f64> = ModelBundle::init(&toy_cfg());
        let cfg = toy_cfg();
        let a = batch(&[1, 32, 64, 3], Domain::Adverse, 3);
        let b = batch(&[1, 32, 64, 3], Domain::Normal, 4);
        assert!(matches!(
            translate_a_to_b(&m, &b),
            Err(Error::DomainMismatch { .. })
        ));
        assert!(translate_b_to_a(&m, &a).is_err());
        assert!(reconstruct_a(&m, &b).is_err());
        assert!(reconstruct_b(&m, &a).is_err());
        assert!(cycle_a(&m, &a).is_err());
        assert!(cycle_b(&m, &b, &cfg).is_err());
    }

    #[test]
    fn tnet_runs_only_on_a_to_b_paths() {
        let m: ModelBundle<f64> = ModelBundle::init(&toy_cfg());
        let cfg = toy_cfg();
        let mut g = Graph::<f64>::inference();
        let xa = g.constant(batch(&[1, 32, 64, 3], Domain::Adverse, 5).data);
        let xb = g.constant(batch(&[1, 32, 64, 3], Domain::Normal, 6).data);
        forward_all_paths_graph(&mut g, &m, xa, xb, &cfg);
        // Primary A→B leg plus the cycle-B second leg under the default setting.
        assert_eq!(g.count("tnet"), 2);
        assert_eq!(g.count("enc_ab"), 2);
        assert_eq!(g.count("enc_ba"), 2);
        assert_eq!(g.count("dec_ab"), 3);
        assert_eq!(g.count("dec_ba"), 3);
    }

    #[test]
    fn cycle_b_tnet_toggle_changes_call_count() {
        let m: ModelBundle<f64> = ModelBundle::init(&toy_cfg());
        let literal = TrainConfig {
            apply_tnet_in_cycle_b: false,
            ..toy_cfg()
        };
        let mut g = Graph::<f64>::inference();
        let xa = g.constant(batch(&[1, 32, 64, 3], Domain::Adverse, 7).data);
        let xb = g.constant(batch(&[1, 32, 64, 3], Domain::Normal, 8).data);
        forward_all_paths_graph(&mut g, &m, xa, xb, &literal);
        assert_eq!(g.count("tnet"), 1);
    }

    #[test]
    fn ablated_tnet_never_runs() {
        let cfg = TrainConfig {
            use_tnet: false,
            use_uncertainty_loss: false,
            ..toy_cfg()
        };
        let m: ModelBundle<f64> = ModelBundle::init(&cfg);
        let mut g = Graph::<f64>::inference();
        let xa = g.constant(batch(&[1, 32, 64, 3], Domain::Adverse, 9).data);
        let xb = g.constant(batch(&[1, 32, 64, 3], Domain::Normal, 10).data);
        forward_all_paths_graph(&mut g, &m, xa, xb, &cfg);
        assert_eq!(g.count("tnet"), 0);
    }

    #[test]
    fn forward_all_paths_shapes_and_batch_check() {
        let m: ModelBundle<f64> = ModelBundle::init(&toy_cfg());
        let cfg = toy_cfg();
        let xa = batch(&[2, 32, 64, 3], Domain::Adverse, 11);
        let xb = batch(&[2, 32, 64, 3], Domain::Normal, 12);
        let out = forward_all_paths(&m, &xa, &xb, &cfg).unwrap();
        for img in [
            &out.x_fake_b,
            &out.x_fake_a,
            &out.x_rec_a,
            &out.x_rec_b,
            &out.x_cyc_a,
            &out.x_cyc_b,
        ] {
            assert_eq!(img.data.shape(), &[2, 32, 64, 3]);
        }
        assert_eq!(out.sigma.as_ref().unwrap().sigma.shape(), &[2, 32, 64]);
        assert_eq!(out.feat_a_enhanced.data.shape(), &[2, 8, 16, 32]);
        let xb_bad = batch(&[1, 32, 64, 3], Domain::Normal, 13);
        assert!(forward_all_paths(&m, &xa, &xb_bad, &cfg).is_err());
    }

    #[test]
    fn prefix_sharing_matches_individual_paths_bitwise() {
        let m: ModelBundle<f64> = ModelBundle::init(&toy_cfg());
        let cfg = toy_cfg();
        let xa = batch(&[1, 32, 64, 3], Domain::Adverse, 14);
        let xb = batch(&[1, 32, 64, 3], Domain::Normal, 15);
        let all = forward_all_paths(&m, &xa, &xb, &cfg).unwrap();

        let (fake_b, sigma) = translate_a_to_b(&m, &xa).unwrap();
        let fake_a = translate_b_to_a(&m, &xb).unwrap();
        let rec_a = reconstruct_a(&m, &xa).unwrap();
        let rec_b = reconstruct_b(&m, &xb).unwrap();
        let cyc_a = cycle_a(&m, &fake_b).unwrap();
        let cyc_b = cycle_b(&m, &fake_a, &cfg).unwrap();

        assert_eq!(all.x_fake_b.data, fake_b.data);
        assert_eq!(all.sigma.unwrap().sigma, sigma.sigma);
        assert_eq!(all.x_fake_a.data, fake_a.data);
        assert_eq!(all.x_rec_a.data, rec_a.data);
        assert_eq!(all.x_rec_b.data, rec_b.data);
        assert_eq!(all.x_cyc_a.data, cyc_a.data);
        assert_eq!(all.x_cyc_b.data, cyc_b.data);
    }
}
