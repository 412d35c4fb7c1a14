//! Unpaired two-domain image ingestion: directory scanning, decoding,
//! resize/crop to the training resolution, [-1, 1] normalization, and
//! deterministic epoch shuffling.
//!
//! Sampler state is just `(epoch, position)` per domain: the permutation
//! of any epoch is derived from the master seed, the domain and the epoch
//! number, so a resumed run draws exactly the files an uninterrupted run
//! would have drawn. Random-crop offsets are likewise derived per sample,
//! never from mutable RNG state.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::Seeder;
use crate::error::{Error, Result};
use crate::tensor::Element;
use crate::types::{Domain, ImageBatch};

const EXTENSIONS: [&str; 7] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff", "webp"];

/// One domain's file inventory plus the resolution batches are built at.
#[derive(Clone, Debug)]
pub struct DomainDataset {
    pub root: PathBuf,
    pub domain: Domain,
    /// Lexicographically sorted; shuffles permute indices into this list.
    pub file_list: Vec<PathBuf>,
    /// `(height, width)`.
    pub target_size: (usize, usize),
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else if let Some(ext) = path.extension().and_then(|e| e.to_str()) {
            if EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
                out.push(path);
            }
        }
    }
    Ok(())
}

/// Recursively lists supported raster files under `root`, sorted; errors
/// when the directory is missing or holds no images.
pub fn list_images(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} is not a readable directory",
            root.display()
        )));
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!(
            "no images with extensions {:?} under {}",
            EXTENSIONS,
            root.display()
        )));
    }
    Ok(files)
}

pub fn scan_dataset(
    root: &Path,
    domain: Domain,
    target_size: (usize, usize),
) -> Result<DomainDataset> {
    Ok(DomainDataset {
        root: root.to_path_buf(),
        domain,
        file_list: list_images(root)?,
        target_size,
    })
}

/// Where one domain's sampling stands; everything else is derived.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SamplerState {
    pub epoch: u64,
    pub pos: u64,
}

/// Draws independent, unpaired batches from the two domains.
#[derive(Clone, Copy, Debug)]
pub struct BatchSampler {
    seeder: Seeder,
    pub state_a: SamplerState,
    pub state_b: SamplerState,
    pub random_crop: bool,
}

fn domain_key(d: Domain) -> &'static str {
    match d {
        Domain::Adverse => "A",
        Domain::Normal => "B",
    }
}

fn epoch_order(seeder: &Seeder, domain: Domain, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeder.stream(&format!("shuffle/{}/{}", domain_key(domain), epoch));
    order.shuffle(&mut rng);
    order
}

impl BatchSampler {
    pub fn new(seeder: Seeder, random_crop: bool) -> Self {
        BatchSampler {
            seeder,
            state_a: SamplerState::default(),
            state_b: SamplerState::default(),
            random_crop,
        }
    }

    pub fn restore(seeder: Seeder, random_crop: bool, a: SamplerState, b: SamplerState) -> Self {
        BatchSampler {
            seeder,
            state_a: a,
            state_b: b,
            random_crop,
        }
    }

    /// Two independently drawn batches, one per domain.
    pub fn next_batch<F: Element>(
        &mut self,
        ds_a: &DomainDataset,
        ds_b: &DomainDataset,
        batch_size: usize,
    ) -> Result<(ImageBatch<F>, ImageBatch<F>)> {
        if batch_size < 1 {
            return Err(Error::Dataset("batch_size must be >= 1".into()));
        }
        let a = self.next_domain::<F>(ds_a, batch_size, true)?;
        let b = self.next_domain::<F>(ds_b, batch_size, false)?;
        Ok((
            ImageBatch::new(a, Domain::Adverse)?,
            ImageBatch::new(b, Domain::Normal)?,
        ))
    }

    fn next_domain<F: Element>(
        &mut self,
        ds: &DomainDataset,
        batch_size: usize,
        is_a: bool,
    ) -> Result<ArrayD<F>> {
        let n = ds.file_list.len();
        let (h, w) = ds.target_size;
        let mut out = ArrayD::<F>::zeros(IxDyn(&[batch_size, h, w, 3]));
        let mut filled = 0;
        // A full epoch of consecutive decode failures means the dataset is
        // unusable; bail instead of spinning.
        let mut consecutive_failures = 0usize;
        while filled < batch_size {
            let state = if is_a {
                &mut self.state_a
            } else {
                &mut self.state_b
            };
            let order = epoch_order(&self.seeder, ds.domain, state.epoch, n);
            let file_idx = order[state.pos as usize];
            let crop_label = format!(
                "crop/{}/{}/{}",
                domain_key(ds.domain),
                state.epoch,
                state.pos
            );
            state.pos += 1;
            if state.pos as usize >= n {
                state.pos = 0;
                state.epoch += 1;
            }
            let path = &ds.file_list[file_idx];
            let crop_rng = self
                .random_crop
                .then(|| self.seeder.stream(&crop_label));
            match load_image_to_size::<F>(path, (h, w), crop_rng) {
                Ok(img) => {
                    out.slice_mut(ndarray::s![filled, .., .., ..])
                        .assign(&img.into_dimensionality::<ndarray::Ix3>().expect("(H,W,3)"));
                    filled += 1;
                    consecutive_failures = 0;
                }
                Err(e) => {
                    eprintln!("warning: skipping {}: {}", path.display(), e);
                    consecutive_failures += 1;
                    if consecutive_failures >= n {
                        return Err(Error::Dataset(format!(
                            "every file in {} failed to decode",
                            ds.root.display()
                        )));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Decodes, scales the shortest side to cover the target, crops (center
/// by default, randomly when a crop RNG is supplied) and maps pixel
/// values affinely so 0 → −1 and 255 → +1.
pub fn load_image_to_size<F: Element>(
    path: &Path,
    (th, tw): (usize, usize),
    crop_rng: Option<rand_chacha::ChaCha8Rng>,
) -> Result<ArrayD<F>> {
    let img = image::open(path)?.to_rgb8();
    let (iw, ih) = img.dimensions();
    if iw == 0 || ih == 0 {
        return Err(Error::Dataset(format!("{}: empty image", path.display())));
    }
    let scale = (th as f64 / ih as f64).max(tw as f64 / iw as f64);
    let nh = ((ih as f64 * scale).ceil() as u32).max(th as u32);
    let nw = ((iw as f64 * scale).ceil() as u32).max(tw as u32);
    let resized = if (nw, nh) == (iw, ih) {
        img
    } else {
        image::imageops::resize(&img, nw, nh, FilterType::Triangle)
    };
    let (max_y, max_x) = (nh - th as u32, nw - tw as u32);
    let (y0, x0) = match crop_rng {
        Some(mut rng) => (
            if max_y > 0 { rng.gen_range(0..=max_y) } else { 0 },
            if max_x > 0 { rng.gen_range(0..=max_x) } else { 0 },
        ),
        None => (max_y / 2, max_x / 2),
    };
    Ok(rgb_to_array(&resized, x0, y0, tw, th))
}

/// Decodes at native resolution, shape `(1, H, W, 3)`.
pub fn load_image_native<F: Element>(path: &Path) -> Result<ArrayD<F>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let flat = rgb_to_array(&img, 0, 0, w as usize, h as usize);
    Ok(flat
        .into_shape_with_order(IxDyn(&[1, h as usize, w as usize, 3]))
        .expect("shape"))
}

fn rgb_to_array<F: Element>(img: &RgbImage, x0: u32, y0: u32, tw: usize, th: usize) -> ArrayD<F> {
    let inv = F::f(1.0 / 127.5);
    let one = F::one();
    let mut data = vec![F::zero(); th * tw * 3];
    for y in 0..th {
        for x in 0..tw {
            let p = img.get_pixel(x0 + x as u32, y0 + y as u32);
            for ch in 0..3 {
                data[(y * tw + x) * 3 + ch] = F::f(p[ch] as f64) * inv - one;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[th, tw, 3]), data).expect("shape")
}

/// Writes one `(H, W, 3)` array in `[-1, 1]` as an 8-bit PNG/JPEG (format
/// from the extension).
pub fn save_image<F: Element>(arr: &ArrayD<F>, path: &Path) -> Result<()> {
    let s = arr.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape(format!(
            "save_image wants (H, W, 3), got {:?}",
            s
        )));
    }
    let (h, w) = (s[0], s[1]);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| {
                let v = arr[[y, x, c]].to_f64().clamp(-1.0, 1.0);
                ((v + 1.0) * 127.5).round() as u8
            };
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Writes an `(H, W)` σ field as a grayscale heat image, min–max
/// normalized; a constant field maps to mid-gray.
pub fn save_heatmap<F: Element>(sigma: &ArrayD<F>, path: &Path) -> Result<()> {
    let s = sigma.shape();
    if s.len() != 2 {
        return Err(Error::shape(format!(
            "save_heatmap wants (H, W), got {:?}",
            s
        )));
    }
    let (h, w) = (s[0], s[1]);
    let lo = sigma.iter().fold(f64::INFINITY, |m, &v| m.min(v.to_f64()));
    let hi = sigma
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
    let span = hi - lo;
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = sigma[[y, x]].to_f64();
            let g = if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                128
            };
            img.put_pixel(x as u32, y as u32, image::Luma([g]));
        }
    }
    img.save(path)?;
    Ok(())
}
