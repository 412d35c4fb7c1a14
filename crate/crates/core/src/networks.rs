//! Parameterized building blocks: domain encoders, the T-net feature
//! transfer network, decoders (one carrying the uncertainty branch), and
//! multi-scale PatchGAN discriminators.
//!
//! Channel widths all derive from one knob (`base_width`, canonically 64):
//! encoder 3→w→2w→4w, feature space 4w, decoder mirror 4w→2w→w→3,
//! uncertainty branch 2w→w/2→1, discriminators w→2w→4w→8w→1. Convolutions
//! followed by instance normalization carry no bias; output layers do.

use rand::Rng;

use crate::config::{Seeder, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, DeconvSpec, Element, Graph, Param, Value};
use crate::types::{Domain, FeatureMap, ImageBatch, UncertaintyMap};

/// Instance-norm epsilon, the usual 1e-5. Anything much smaller is lost to
/// 32-bit round-off in `var + eps`, and on tiny normalization extents (the
/// pooled discriminator scale reaches 1×2 maps at test sizes) it lets
/// 1/√(var+eps) curvature explode, destabilizing gradients.
const IN_EPS: f64 = 1e-5;
/// Weight init: zero-mean Gaussian with this standard deviation.
const INIT_STD: f64 = 0.02;
/// Discriminator activation slope.
const LEAKY_SLOPE: f64 = 0.2;

/// Convolution plus geometry; bias only when no normalization follows.
pub struct Conv2d<F: Element> {
    pub w: Param<F>,
    pub b: Option<Param<F>>,
    spec: ConvSpec,
}

impl<F: Element> Conv2d<F> {
    fn new(
        prefix: &str,
        k: usize,
        cin: usize,
        cout: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Conv2d {
            w: Param::normal(format!("{prefix}.w"), &[k, k, cin, cout], INIT_STD, rng),
            b: bias.then(|| Param::zeros(format!("{prefix}.b"), &[cout])),
            spec,
        }
    }

    pub fn forward(&self, g: &mut Graph<F>, x: Value) -> Value {
        let w = g.param(&self.w);
        let b = self.b.as_ref().map(|p| g.param(p));
        g.conv2d(x, w, b, self.spec)
    }

    fn params(&self) -> Vec<&Param<F>> {
        let mut v = vec![&self.w];
        v.extend(self.b.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = vec![&mut self.w];
        v.extend(self.b.as_mut());
        v
    }
}

/// Transposed convolution; same bias convention as [`Conv2d`].
pub struct Deconv2d<F: Element> {
    pub w: Param<F>,
    pub b: Option<Param<F>>,
    spec: DeconvSpec,
}

impl<F: Element> Deconv2d<F> {
    fn new(
        prefix: &str,
        k: usize,
        cin: usize,
        cout: usize,
        spec: DeconvSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Deconv2d {
            w: Param::normal(format!("{prefix}.w"), &[k, k, cout, cin], INIT_STD, rng),
            b: bias.then(|| Param::zeros(format!("{prefix}.b"), &[cout])),
            spec,
        }
    }

    pub fn forward(&self, g: &mut Graph<F>, x: Value) -> Value {
        let w = g.param(&self.w);
        let b = self.b.as_ref().map(|p| g.param(p));
        g.conv_transpose2d(x, w, b, self.spec)
    }

    fn params(&self) -> Vec<&Param<F>> {
        let mut v = vec![&self.w];
        v.extend(self.b.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = vec![&mut self.w];
        v.extend(self.b.as_mut());
        v
    }
}

/// conv 3×3 → IN → ReLU → conv 3×3 → IN, added to the input. Padding
/// equals dilation so shapes are preserved.
pub struct ResBlock<F: Element> {
    c1: Conv2d<F>,
    c2: Conv2d<F>,
}

impl<F: Element> ResBlock<F> {
    fn new(prefix: &str, ch: usize, dilation: usize, rng: &mut impl Rng) -> Self {
        let spec = ConvSpec::dilated(1, dilation, dilation);
        ResBlock {
            c1: Conv2d::new(&format!("{prefix}.c1"), 3, ch, ch, spec, false, rng),
            c2: Conv2d::new(&format!("{prefix}.c2"), 3, ch, ch, spec, false, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<F>, x: Value) -> Value {
        let eps = F::f(IN_EPS);
        let h = self.c1.forward(g, x);
        let h = g.instance_norm(h, eps);
        let h = g.relu(h);
        let h = self.c2.forward(g, h);
        let h = g.instance_norm(h, eps);
        g.add(x, h)
    }

    fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.c1.params();
        v.extend(self.c2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.c1.params_mut();
        v.extend(self.c2.params_mut());
        v
    }
}

/// Three strided convolutions then four dilated residual blocks; maps
/// `(B, H, W, 3)` to `(B, H/4, W/4, 4·base_width)`.
pub struct Encoder<F: Element> {
    tag: &'static str,
    c1: Conv2d<F>,
    c2: Conv2d<F>,
    c3: Conv2d<F>,
    blocks: Vec<ResBlock<F>>,
}

impl<F: Element> Encoder<F> {
    fn new(prefix: &str, tag: &'static str, w: usize, rng: &mut impl Rng) -> Self {
        Encoder {
            tag,
            c1: Conv2d::new(&format!("{prefix}.c1"), 7, 3, w, ConvSpec::new(1, 3), false, rng),
            c2: Conv2d::new(&format!("{prefix}.c2"), 3, w, 2 * w, ConvSpec::new(2, 1), false, rng),
            c3: Conv2d::new(
                &format!("{prefix}.c3"),
                3,
                2 * w,
                4 * w,
                ConvSpec::new(2, 1),
                false,
                rng,
            ),
            blocks: (0..4)
                .map(|i| ResBlock::new(&format!("{prefix}.res{i}"), 4 * w, 2, rng))
                .collect(),
        }
    }

    pub fn forward(&self, g: &mut Graph<F>, x: Value) -> Value {
        g.bump(self.tag);
        let eps = F::f(IN_EPS);
        let mut h = self.c1.forward(g, x);
        h = g.instance_norm(h, eps);
        h = g.relu(h);
        h = self.c2.forward(g, h);
        h = g.instance_norm(h, eps);
        h = g.relu(h);
        h = self.c3.forward(g, h);
        h = g.instance_norm(h, eps);
        h = g.relu(h);
        for b in &self.blocks {
            h = b.forward(g, h);
        }
        h
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.c1.params();
        v.extend(self.c2.params());
        v.extend(self.c3.params());
        for b in &self.blocks {
            v.extend(b.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.c1.params_mut();
        v.extend(self.c2.params_mut());
        v.extend(self.c3.params_mut());
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v
    }
}

/// Four plain residual blocks at feature resolution; shape-preserving.
pub struct TNet<F: Element> {
    width: usize,
    blocks: Vec<ResBlock<F>>,
}

impl<F: Element> TNet<F> {
    fn new(prefix: &str, feat_ch: usize, rng: &mut impl Rng) -> Self {
        TNet {
            width: feat_ch,
            blocks: (0..4)
                .map(|i| ResBlock::new(&format!("{prefix}.res{i}"), feat_ch, 1, rng))
                .collect(),
        }
    }

    pub fn forward(&self, g: &mut Graph<F>, f: Value) -> Value {
        g.bump("tnet");
        let mut h = f;
        for b in &self.blocks {
            h = b.forward(g, h);
        }
        h
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.params_mut())
            .collect()
    }
}

/// Image plus, when the decoder carries the branch and the caller asked
/// for it, the σ map node of shape `(B, H, W)`.
pub struct DecoderOut {
    pub img: Value,
    pub sigma: Option<Value>,
}

/// Mirror of the encoder: four dilated residual blocks, two stride-2
/// transposed convolutions, and a 7×7 conv to RGB under tanh. The
/// uncertainty branch taps the mid-feature `(B, H/2, W/2, 2·base_width)`.
pub struct Decoder<F: Element> {
    tag: &'static str,
    out_domain: Domain,
    blocks: Vec<ResBlock<F>>,
    d1: Deconv2d<F>,
    d2: Deconv2d<F>,
    to_rgb: Conv2d<F>,
    sigma_branch: Option<SigmaBranch<F>>,
    sigma_floor: F,
}

struct SigmaBranch<F: Element> {
    up: Deconv2d<F>,
    out: Conv2d<F>,
}

impl<F: Element> Decoder<F> {
    fn new(
        prefix: &str,
        tag: &'static str,
        out_domain: Domain,
        w: usize,
        with_sigma: bool,
        sigma_floor: F,
        rng: &mut impl Rng,
    ) -> Self {
        let up = DeconvSpec::new(2, 1, 1);
        Decoder {
            tag,
            out_domain,
            blocks: (0..4)
                .map(|i| ResBlock::new(&format!("{prefix}.res{i}"), 4 * w, 2, rng))
                .collect(),
            d1: Deconv2d::new(&format!("{prefix}.d1"), 3, 4 * w, 2 * w, up, false, rng),
            d2: Deconv2d::new(&format!("{prefix}.d2"), 3, 2 * w, w, up, false, rng),
            to_rgb: Conv2d::new(
                &format!("{prefix}.rgb"),
                7,
                w,
                3,
                ConvSpec::new(1, 3),
                true,
                rng,
            ),
            sigma_branch: with_sigma.then(|| SigmaBranch {
                up: Deconv2d::new(&format!("{prefix}.sig.up"), 3, 2 * w, w / 2, up, true, rng),
                out: Conv2d::new(
                    &format!("{prefix}.sig.out"),
                    3,
                    w / 2,
                    1,
                    ConvSpec::new(1, 1),
                    true,
                    rng,
                ),
            }),
            sigma_floor,
        }
    }

    pub fn has_uncertainty_branch(&self) -> bool {
        self.sigma_branch.is_some()
    }

    pub fn out_domain(&self) -> Domain {
        self.out_domain
    }

    /// σ is emitted only when the branch exists and `want_sigma` holds;
    /// paths that discard σ skip the branch computation entirely.
    pub fn forward(&self, g: &mut Graph<F>, f: Value, want_sigma: bool) -> DecoderOut {
        g.bump(self.tag);
        let eps = F::f(IN_EPS);
        let mut h = f;
        for b in &self.blocks {
            h = b.forward(g, h);
        }
        let mut mid = self.d1.forward(g, h);
        mid = g.instance_norm(mid, eps);
        mid = g.relu(mid);
        let mut full = self.d2.forward(g, mid);
        full = g.instance_norm(full, eps);
        full = g.relu(full);
        let rgb = self.to_rgb.forward(g, full);
        let img = g.tanh(rgb);

        let sigma = match (&self.sigma_branch, want_sigma) {
            (Some(branch), true) => {
                let s = branch.up.forward(g, mid);
                let s = g.relu(s);
                let s = branch.out.forward(g, s);
                let s = g.softplus(s);
                let s = g.add_scalar(s, self.sigma_floor);
                let sh = g.array(s).shape().to_vec();
                Some(g.reshape(s, &[sh[0], sh[1], sh[2]]))
            }
            _ => None,
        };
        DecoderOut { img, sigma }
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut v: Vec<&Param<F>> = self.blocks.iter().flat_map(|b| b.params()).collect();
        v.extend(self.d1.params());
        v.extend(self.d2.params());
        v.extend(self.to_rgb.params());
        if let Some(s) = &self.sigma_branch {
            v.extend(s.up.params());
            v.extend(s.out.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v: Vec<&mut Param<F>> = self
            .blocks
            .iter_mut()
            .flat_map(|b| b.params_mut())
            .collect();
        v.extend(self.d1.params_mut());
        v.extend(self.d2.params_mut());
        v.extend(self.to_rgb.params_mut());
        if let Some(s) = &mut self.sigma_branch {
            v.extend(s.up.params_mut());
            v.extend(s.out.params_mut());
        }
        v
    }
}

/// Four stride-2 4×4 convolutions (IN everywhere, LeakyReLU 0.2) and a
/// 3×3 output conv to one channel: a 16× patch classifier.
pub struct PatchDisc<F: Element> {
    convs: Vec<Conv2d<F>>,
    out: Conv2d<F>,
}

impl<F: Element> PatchDisc<F> {
    fn new(prefix: &str, w: usize, rng: &mut impl Rng) -> Self {
        let widths = [3, w, 2 * w, 4 * w, 8 * w];
        PatchDisc {
            convs: (0..4)
                .map(|i| {
                    Conv2d::new(
                        &format!("{prefix}.c{i}"),
                        4,
                        widths[i],
                        widths[i + 1],
                        ConvSpec::new(2, 1),
                        false,
                        rng,
                    )
                })
                .collect(),
            out: Conv2d::new(
                &format!("{prefix}.out"),
                3,
                8 * w,
                1,
                ConvSpec::new(1, 1),
                true,
                rng,
            ),
        }
    }

    /// Returns the activation map squeezed to `(B, H/16, W/16)`.
    pub fn forward(&self, g: &mut Graph<F>, x: Value) -> Value {
        let eps = F::f(IN_EPS);
        let slope = F::f(LEAKY_SLOPE);
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, h);
            h = g.instance_norm(h, eps);
            h = g.leaky_relu(h, slope);
        }
        h = self.out.forward(g, h);
        let sh = g.array(h).shape().to_vec();
        g.reshape(h, &[sh[0], sh[1], sh[2]])
    }

    fn params(&self) -> Vec<&Param<F>> {
        let mut v: Vec<&Param<F>> = self.convs.iter().flat_map(|c| c.params()).collect();
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v: Vec<&mut Param<F>> =
            self.convs.iter_mut().flat_map(|c| c.params_mut()).collect();
        v.extend(self.out.params_mut());
        v
    }
}

/// Two patch discriminators; the second sees a 2× average-pooled copy.
/// Requires input spatial dims divisible by 32.
pub struct MultiScaleDiscriminator<F: Element> {
    tag: &'static str,
    scale1: PatchDisc<F>,
    scale2: PatchDisc<F>,
}

impl<F: Element> MultiScaleDiscriminator<F> {
    fn new(prefix: &str, tag: &'static str, w: usize, rng: &mut impl Rng) -> Self {
        MultiScaleDiscriminator {
            tag,
            scale1: PatchDisc::new(&format!("{prefix}.s1"), w, rng),
            scale2: PatchDisc::new(&format!("{prefix}.s2"), w, rng),
        }
    }

    /// Activation maps `[(B, H/16, W/16), (B, H/32, W/32)]`.
    pub fn forward(&self, g: &mut Graph<F>, x: Value) -> Vec<Value> {
        g.bump(self.tag);
        let full = self.scale1.forward(g, x);
        let pooled = g.avg_pool2(x);
        let half = self.scale2.forward(g, pooled);
        vec![full, half]
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.scale1.params();
        v.extend(self.scale2.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.scale1.params_mut();
        v.extend(self.scale2.params_mut());
        v
    }
}

/// The five parameterized networks plus both discriminators. Optimizer
/// state lives in the training engine, keyed by parameter name.
pub struct ModelBundle<F: Element> {
    pub enc_ab: Encoder<F>,
    pub enc_ba: Encoder<F>,
    /// `None` reproduces the "w/o T" ablation: the transfer step is the
    /// identity function.
    pub tnet: Option<TNet<F>>,
    pub dec_ab: Decoder<F>,
    pub dec_ba: Decoder<F>,
    pub disc_a: MultiScaleDiscriminator<F>,
    pub disc_b: MultiScaleDiscriminator<F>,
    pub base_width: usize,
    pub sigma_floor: F,
}

impl<F: Element> ModelBundle<F> {
    /// Builds all networks from the config seed. Each network draws from
    /// its own labeled stream, so toggling one ablation never shifts the
    /// initialization of the others.
    pub fn init(cfg: &TrainConfig) -> Self {
        let seeder = Seeder::new(cfg.seed);
        let w = cfg.base_width;
        let floor = F::f(cfg.sigma_floor);
        ModelBundle {
            enc_ab: Encoder::new("enc_ab", "enc_ab", w, &mut seeder.stream("init/enc_ab")),
            enc_ba: Encoder::new("enc_ba", "enc_ba", w, &mut seeder.stream("init/enc_ba")),
            tnet: cfg
                .use_tnet
                .then(|| TNet::new("tnet", 4 * w, &mut seeder.stream("init/tnet"))),
            dec_ab: Decoder::new(
                "dec_ab",
                "dec_ab",
                Domain::Normal,
                w,
                true,
                floor,
                &mut seeder.stream("init/dec_ab"),
            ),
            dec_ba: Decoder::new(
                "dec_ba",
                "dec_ba",
                Domain::Adverse,
                w,
                false,
                floor,
                &mut seeder.stream("init/dec_ba"),
            ),
            disc_a: MultiScaleDiscriminator::new("disc_a", "disc_a", w, &mut seeder.stream("init/disc_a")),
            disc_b: MultiScaleDiscriminator::new("disc_b", "disc_b", w, &mut seeder.stream("init/disc_b")),
            base_width: w,
            sigma_floor: floor,
        }
    }

    /// Channel count of the encoded feature space (256 canonically).
    pub fn feat_channels(&self) -> usize {
        4 * self.base_width
    }

    /// Applies the T-net, or the identity when ablated.
    pub fn transfer(&self, g: &mut Graph<F>, f: Value) -> Value {
        match &self.tnet {
            Some(t) => t.forward(g, f),
            None => f,
        }
    }

    /// All generator-side parameters: both encoders, T-net, both decoders.
    pub fn generator_params(&self) -> Vec<&Param<F>> {
        let mut v = self.enc_ab.params();
        v.extend(self.enc_ba.params());
        if let Some(t) = &self.tnet {
            v.extend(t.params());
        }
        v.extend(self.dec_ab.params());
        v.extend(self.dec_ba.params());
        v
    }

    pub fn generator_params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.enc_ab.params_mut();
        v.extend(self.enc_ba.params_mut());
        if let Some(t) = &mut self.tnet {
            v.extend(t.params_mut());
        }
        v.extend(self.dec_ab.params_mut());
        v.extend(self.dec_ba.params_mut());
        v
    }

    /// Every parameter in the bundle; names are unique.
    pub fn all_params(&self) -> Vec<&Param<F>> {
        let mut v = self.generator_params();
        v.extend(self.disc_a.params());
        v.extend(self.disc_b.params());
        v
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.enc_ab.params_mut();
        v.extend(self.enc_ba.params_mut());
        if let Some(t) = &mut self.tnet {
            v.extend(t.params_mut());
        }
        v.extend(self.dec_ab.params_mut());
        v.extend(self.dec_ba.params_mut());
        v.extend(self.disc_a.params_mut());
        v.extend(self.disc_b.params_mut());
        v
    }
}

/// Builds the five networks per the config (free-function spelling of
/// [`ModelBundle::init`]).
pub fn init_model_bundle<F: Element>(cfg: &TrainConfig) -> ModelBundle<F> {
    ModelBundle::init(cfg)
}

fn check_divisible(h: usize, w: usize, by: usize) -> Result<()> {
    if h % by != 0 || w % by != 0 {
        return Err(Error::shape(format!(
            "spatial dims must be divisible by {by}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Encodes a batch to quarter-resolution features.
pub fn encoder_forward<F: Element>(
    enc: &Encoder<F>,
    x: &ImageBatch<F>,
) -> Result<FeatureMap<F>> {
    let s = x.data.shape();
    check_divisible(s[1], s[2], 4)?;
    let mut g = Graph::inference();
    let xv = g.constant(x.data.clone());
    let f = enc.forward(&mut g, xv);
    FeatureMap::new(g.array(f).clone())
}

/// Enhances encoded features; shape-preserving.
pub fn tnet_forward<F: Element>(t: &TNet<F>, f: &FeatureMap<F>) -> Result<FeatureMap<F>> {
    if f.channels() != t.width {
        return Err(Error::shape(format!(
            "t-net channel mismatch: expected {}, got {}",
            t.width,
            f.channels()
        )));
    }
    let mut g = Graph::inference();
    let fv = g.constant(f.data.clone());
    let out = t.forward(&mut g, fv);
    FeatureMap::new(g.array(out).clone())
}

/// Decodes features to an image (plus σ when the branch is present).
pub fn decoder_forward<F: Element>(
    dec: &Decoder<F>,
    f: &FeatureMap<F>,
) -> Result<(ImageBatch<F>, Option<UncertaintyMap<F>>)> {
    let expected = dec.d1.w.shape()[3]; // deconv weight (k, k, c_out, c_in)
    if f.channels() != expected {
        return Err(Error::shape(format!(
            "decoder channel mismatch: expected {}, got {}",
            expected,
            f.channels()
        )));
    }
    let mut g = Graph::inference();
    let fv = g.constant(f.data.clone());
    let out = dec.forward(&mut g, fv, true);
    let img = ImageBatch::new(g.array(out.img).clone(), dec.out_domain)?;
    let sigma = match out.sigma {
        Some(s) => Some(UncertaintyMap::new(
            g.array(s).clone(),
            dec.sigma_floor,
        )?),
        None => None,
    };
    Ok((img, sigma))
}

/// Runs both scales; activation maps come back as plain arrays.
pub fn discriminator_forward<F: Element>(
    d: &MultiScaleDiscriminator<F>,
    x: &ImageBatch<F>,
) -> Result<Vec<ndarray::ArrayD<F>>> {
    let s = x.data.shape();
    check_divisible(s[1], s[2], 32)?;
    let mut g = Graph::inference();
    let xv = g.constant(x.data.clone());
    let maps = d.forward(&mut g, xv);
    Ok(maps.into_iter().map(|m| g.array(m).clone()).collect())
}
