//! Desk-scale evaluation: Fréchet distance over pluggable embedding sets,
//! class-wise mean IOU, and uncertainty-map export.
//!
//! The embedding extractor is deliberately an interface — any process that
//! produces an `(N, D)` feature matrix can feed [`frechet_distance`],
//! either in-process or through the binary file format below. The bundled
//! [`moment_embeddings`] extractor (per-image channel moments) keeps the
//! test suite independent of pretrained networks.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayD, Axis};

use crate::bytes::{put_f64, put_str, put_u32, put_u64, Reader};
use crate::data::{save_heatmap, save_image};
use crate::error::{Error, Result};
use crate::networks::ModelBundle;
use crate::paths::translate_a_to_b;
use crate::tensor::Element;
use crate::types::ImageBatch;

const EMB_MAGIC: &[u8; 8] = b"DSEMB001";
const EMB_VERSION: u32 = 1;

/// `(N, D)` feature matrix plus the identity of the extractor that
/// produced it; sets from different extractors are not comparable.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    features: Array2<f64>,
    extractor_id: String,
}

impl EmbeddingSet {
    pub fn new(features: Array2<f64>, extractor_id: impl Into<String>) -> Result<Self> {
        let (n, d) = features.dim();
        if n < 2 {
            return Err(Error::DimMismatch(format!(
                "embedding set needs at least 2 rows for a covariance, got {n}"
            )));
        }
        if d < 1 {
            return Err(Error::DimMismatch("embedding dimension must be >= 1".into()));
        }
        Ok(EmbeddingSet {
            features,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn extractor_id(&self) -> &str {
        &self.extractor_id
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Sample mean and covariance (ddof = 1) of the rows.
fn moments(f: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = f.dim();
    let mean = f.mean_axis(Axis(0)).expect("n >= 2");
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in f.rows() {
        for j in 0..d {
            let dj = row[j] - mean[j];
            for k in 0..d {
                cov[(j, k)] += dj * (row[k] - mean[k]);
            }
        }
    }
    cov /= (n - 1) as f64;
    (DVector::from_iterator(d, mean.iter().copied()), cov)
}

/// Symmetric PSD square root via eigendecomposition, clamping negative
/// eigenvalues (numerical noise) at zero.
fn psd_sqrt(s: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = s.symmetric_eigen();
    let vals = sym.eigenvalues.map(|l| l.max(0.0).sqrt());
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metric(
            "matrix square root did not converge to finite values".into(),
        ));
    }
    let d = DMatrix::from_diagonal(&vals);
    Ok(&sym.eigenvectors * d * sym.eigenvectors.transpose())
}

/// Squared Fréchet distance between Gaussian fits of the two sets:
/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`.
pub fn frechet_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.extractor_id != b.extractor_id {
        return Err(Error::DimMismatch(format!(
            "embedding sets come from different extractors: `{}` vs `{}`",
            a.extractor_id, b.extractor_id
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch(format!(
            "embedding dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (mu_a, cov_a) = moments(&a.features);
    let (mu_b, cov_b) = moments(&b.features);
    let diff = &mu_a - &mu_b;
    let mean_term = diff.dot(&diff);

    let sqrt_a = psd_sqrt(cov_a.clone())?;
    let m = &sqrt_a * &cov_b * &sqrt_a;
    let m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = m
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    if !tr_sqrt.is_finite() {
        return Err(Error::Metric(
            "matrix square root did not converge to finite values".into(),
        ));
    }
    Ok(mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt)
}

pub const MOMENT_EXTRACTOR_ID: &str = "channel-moments/1";

/// Toy deterministic extractor: per image, the mean and standard
/// deviation of each RGB channel, giving a 6-d embedding.
pub fn moment_embeddings<F: Element>(batch: &ImageBatch<F>) -> EmbeddingSet {
    let (n, h, w) = (batch.batch(), batch.height(), batch.width());
    let px = (h * w) as f64;
    let mut out = Array2::<f64>::zeros((n, 6));
    for i in 0..n {
        for c in 0..3 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let v = batch.data[[i, y, x, c]].to_f64();
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / px;
            let var = (sq / px - mean * mean).max(0.0);
            out[(i, c)] = mean;
            out[(i, 3 + c)] = var.sqrt();
        }
    }
    EmbeddingSet {
        features: out,
        extractor_id: MOMENT_EXTRACTOR_ID.into(),
    }
}

pub fn save_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(EMB_MAGIC);
    put_u32(&mut out, EMB_VERSION);
    put_str(&mut out, &set.extractor_id);
    put_u64(&mut out, set.len() as u64);
    put_u64(&mut out, set.dim() as u64);
    for &v in set.features.as_slice().expect("standard layout") {
        put_f64(&mut out, v);
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let buf = std::fs::read(path)?;
    let mut r = Reader::new(&buf);
    let magic = r.take(8)?;
    if magic != EMB_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not an embeddings file (bad magic {:02x?})",
            path.display(),
            magic
        )));
    }
    let version = r.u32()?;
    if version != EMB_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported embeddings version {version}, expected {EMB_VERSION}"
        )));
    }
    let extractor_id = r.str()?;
    let n = r.u64()? as usize;
    let d = r.u64()? as usize;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        data.push(r.f64()?);
    }
    if !r.done() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after embeddings payload",
            r.remaining()
        )));
    }
    let features = Array2::from_shape_vec((n, d), data)
        .map_err(|e| Error::Checkpoint(format!("bad embeddings shape: {e}")))?;
    EmbeddingSet::new(features, extractor_id)
}

/// Integer class grid with an out-of-band ignore label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub classes: Array2<i64>,
    pub num_classes: usize,
    pub ignore_index: i64,
}

impl LabelMap {
    pub fn new(classes: Array2<i64>, num_classes: usize, ignore_index: i64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Metric("num_classes must be >= 1".into()));
        }
        if (0..num_classes as i64).contains(&ignore_index) {
            return Err(Error::Metric(format!(
                "ignore_index {ignore_index} collides with a valid class id"
            )));
        }
        for &v in classes.iter() {
            if v != ignore_index && !(0..num_classes as i64).contains(&v) {
                return Err(Error::Metric(format!(
                    "label {v} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(LabelMap {
            classes,
            num_classes,
            ignore_index,
        })
    }
}

/// Mean over classes present in the ground truth of
/// `|pred ∩ gt| / |pred ∪ gt|`; pixels where gt holds `ignore_index` are
/// excluded entirely. Classes absent from gt don't enter the mean.
pub fn mean_iou(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    if pred.classes.dim() != gt.classes.dim() {
        return Err(Error::DimMismatch(format!(
            "label maps differ in shape: {:?} vs {:?}",
            pred.classes.dim(),
            gt.classes.dim()
        )));
    }
    if pred.num_classes != gt.num_classes {
        return Err(Error::DimMismatch(format!(
            "label maps differ in class count: {} vs {}",
            pred.num_classes, gt.num_classes
        )));
    }
    let mut inter = vec![0u64; gt.num_classes];
    let mut union = vec![0u64; gt.num_classes];
    let mut in_gt = vec![false; gt.num_classes];
    for (p, g) in pred.classes.iter().zip(gt.classes.iter()) {
        if *g == gt.ignore_index {
            continue;
        }
        let g = *g as usize;
        in_gt[g] = true;
        let p_valid = *p != pred.ignore_index;
        if p_valid && *p as usize == g {
            inter[g] += 1;
            union[g] += 1;
        } else {
            union[g] += 1;
            if p_valid {
                union[*p as usize] += 1;
            }
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..gt.num_classes {
        if in_gt[c] {
            total += inter[c] as f64 / union[c] as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Metric(
            "ground truth contains no labeled pixels".into(),
        ));
    }
    Ok(total / count as f64)
}

/// σ summary reported alongside exported maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

/// Translates an adverse batch and writes, per image, the translated
/// output (`translated_NNN.png`) and the σ map rendered as a normalized
/// heat image (`uncertainty_NNN.png`).
pub fn export_uncertainty<F: Element>(
    x_a: &ImageBatch<F>,
    m: &ModelBundle<F>,
    out_dir: &Path,
) -> Result<SigmaStats> {
    std::fs::create_dir_all(out_dir)?;
    let (img, sigma) = translate_a_to_b(m, x_a)?;
    for i in 0..x_a.batch() {
        let rgb: ArrayD<F> = img.data.index_axis(Axis(0), i).to_owned().into_dyn();
        save_image(&rgb, &out_dir.join(format!("translated_{i:03}.png")))?;
        let heat: ArrayD<F> = sigma.sigma.index_axis(Axis(0), i).to_owned().into_dyn();
        save_heatmap(&heat, &out_dir.join(format!("uncertainty_{i:03}.png")))?;
    }
    Ok(SigmaStats {
        min: sigma.min().to_f64(),
        mean: sigma.mean().to_f64(),
        max: sigma.max().to_f64(),
    })
}
