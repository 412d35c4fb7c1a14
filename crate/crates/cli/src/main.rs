//! `dayshift` — command-line frontend for the translation framework.
//!
//! Exit codes: 0 success, 1 usage, 2 config, 3 runtime divergence
//! (non-finite loss), 4 I/O or data errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::{Array2, ArrayD, Axis};

use dayshift_core::checkpoint::{checkpoint_dtype, checkpoint_load};
use dayshift_core::data::{list_images, load_image_native, save_heatmap, save_image};
use dayshift_core::eval::{frechet_distance, load_embeddings, mean_iou, LabelMap};
use dayshift_core::networks::ModelBundle;
use dayshift_core::paths::{translate_a_to_b, translate_b_to_a};
use dayshift_core::tensor::Element;
use dayshift_core::train::train;
use dayshift_core::{Domain, Error as CoreError, ImageBatch, TrainConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(
    name = "dayshift",
    version,
    about = "Unpaired adverse-weather to daytime image translation",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model, resuming from `<out_dir>/latest.ckpt` when present.
    Train {
        /// TOML config file; built-in defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Parameter precision for a fresh run (`f32` or `f64`); a resumed
        /// run keeps the precision stored in its checkpoint.
        #[arg(long, default_value = "f32")]
        dtype: String,
        /// Config overrides as `--<key> <value>` pairs mirroring the TOML
        /// keys, e.g. `--iterations 10 --use-tnet false`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Translate every image under a directory through a trained model.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of input images (any supported raster format).
        #[arg(long)]
        input: PathBuf,
        /// Output directory; each result keeps its input's file name.
        #[arg(long)]
        output: PathBuf,
        /// `A2B` (adverse → normal) or `B2A`.
        #[arg(long)]
        direction: String,
        /// Also write `<name>_uncertainty.png` σ heat maps (A2B only).
        #[arg(long)]
        with_uncertainty: bool,
    },
    /// Write σ uncertainty heat maps plus translated outputs (A→B).
    Uncertainty {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fréchet distance between two embedding files (see README format).
    Fid {
        features_a: PathBuf,
        features_b: PathBuf,
    },
    /// Mean IOU between prediction and ground-truth label images
    /// (grayscale PNGs whose pixel values are class ids).
    Miou {
        pred: PathBuf,
        gt: PathBuf,
        #[arg(long)]
        num_classes: usize,
        #[arg(long, default_value_t = 255)]
        ignore_index: i64,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        msg: msg.into(),
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::ConfigParse(_) | CoreError::ConfigInvalid { .. } => EXIT_CONFIG,
            CoreError::NonFinite { .. } => EXIT_DIVERGENCE,
            _ => EXIT_IO,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Train {
            config,
            dtype,
            overrides,
        } => cmd_train(config.as_deref(), &dtype, &overrides),
        Cmd::Translate {
            checkpoint,
            input,
            output,
            direction,
            with_uncertainty,
        } => cmd_translate(&checkpoint, &input, &output, &direction, with_uncertainty),
        Cmd::Uncertainty {
            checkpoint,
            input,
            output,
        } => cmd_translate(&checkpoint, &input, &output, "A2B", true),
        Cmd::Fid {
            features_a,
            features_b,
        } => cmd_fid(&features_a, &features_b),
        Cmd::Miou {
            pred,
            gt,
            num_classes,
            ignore_index,
        } => cmd_miou(&pred, &gt, num_classes, ignore_index),
    }
}

// ---- train ----

fn parse_override_pairs(raw: &[String]) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(k) = it.next() {
        let Some(key) = k.strip_prefix("--") else {
            return Err(usage(format!("expected `--key value` pairs, got `{k}`")));
        };
        let Some(v) = it.next() else {
            return Err(usage(format!("override `--{key}` is missing a value")));
        };
        out.push((key.replace('-', "_"), v.clone()));
    }
    Ok(out)
}

/// Parses an override value as a TOML literal, falling back to a string so
/// bare paths like `data/trainA` work unquoted.
fn toml_literal(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn merged_config(text: &str, pairs: &[(String, String)]) -> Result<TrainConfig, Failure> {
    let mut table: toml::Table = text.parse().map_err(|e| Failure {
        code: EXIT_CONFIG,
        msg: format!("config parse error: {e}"),
    })?;
    let known = toml::Table::try_from(TrainConfig::default()).expect("config serializes");
    for (key, raw) in pairs {
        if !known.contains_key(key.as_str()) {
            return Err(usage(format!(
                "unknown config key `--{}`",
                key.replace('_', "-")
            )));
        }
        table.insert(key.clone(), toml_literal(raw));
    }
    let merged = toml::to_string(&table).map_err(|e| Failure {
        code: EXIT_CONFIG,
        msg: format!("config serialize error: {e}"),
    })?;
    Ok(TrainConfig::from_toml(&merged)?)
}

fn cmd_train(config: Option<&Path>, dtype: &str, overrides: &[String]) -> Result<(), Failure> {
    let pairs = parse_override_pairs(overrides)?;
    let text = match config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Failure {
            code: EXIT_CONFIG,
            msg: format!("cannot read config {}: {e}", p.display()),
        })?,
        None => String::new(),
    };
    let cfg = merged_config(&text, &pairs)?;

    let latest = cfg.out_dir.join("latest.ckpt");
    let width = if latest.exists() {
        checkpoint_dtype(&latest)?
    } else {
        match dtype {
            "f32" => 4,
            "f64" => 8,
            other => return Err(usage(format!("--dtype must be f32 or f64, got `{other}`"))),
        }
    };
    match width {
        4 => {
            train::<f32>(&cfg)?;
        }
        8 => {
            train::<f64>(&cfg)?;
        }
        w => {
            return Err(Failure {
                code: EXIT_IO,
                msg: format!("checkpoint has unsupported element width {w}"),
            })
        }
    }
    Ok(())
}

// ---- translate / uncertainty ----

fn cmd_translate(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    direction: &str,
    with_uncertainty: bool,
) -> Result<(), Failure> {
    let a2b = match direction {
        "A2B" => true,
        "B2A" => false,
        other => {
            return Err(usage(format!(
                "--direction must be A2B or B2A, got `{other}`"
            )))
        }
    };
    if with_uncertainty && !a2b {
        return Err(usage(
            "--with-uncertainty applies only to A2B: the B→A path has no σ branch",
        ));
    }
    match checkpoint_dtype(checkpoint)? {
        4 => translate_dir::<f32>(checkpoint, input, output, a2b, with_uncertainty),
        8 => translate_dir::<f64>(checkpoint, input, output, a2b, with_uncertainty),
        w => Err(Failure {
            code: EXIT_IO,
            msg: format!("checkpoint has unsupported element width {w}"),
        }),
    }
}

fn translate_dir<F: Element>(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    a2b: bool,
    with_uncertainty: bool,
) -> Result<(), Failure> {
    let state = checkpoint_load::<F>(checkpoint)?;
    let bundle: &ModelBundle<F> = &state.bundle;
    std::fs::create_dir_all(output).map_err(CoreError::from)?;
    let files = list_images(input)?;
    let mut ok = 0usize;
    for file in &files {
        match translate_one(bundle, file, output, a2b, with_uncertainty) {
            Ok(()) => ok += 1,
            Err(e) => eprintln!("skipping {}: {}", file.display(), e.msg),
        }
    }
    if ok == 0 {
        return Err(Failure {
            code: EXIT_IO,
            msg: format!("no image under {} could be translated", input.display()),
        });
    }
    println!("translated {ok}/{} images into {}", files.len(), output.display());
    Ok(())
}

fn translate_one<F: Element>(
    bundle: &ModelBundle<F>,
    file: &Path,
    output: &Path,
    a2b: bool,
    with_uncertainty: bool,
) -> Result<(), Failure> {
    let name = file
        .file_name()
        .ok_or_else(|| usage(format!("{} has no file name", file.display())))?;
    let data = load_image_native::<F>(file)?;
    let domain = if a2b { Domain::Adverse } else { Domain::Normal };
    let batch = ImageBatch::new(data, domain)?;
    let (img, sigma) = if a2b {
        let (img, sigma) = translate_a_to_b(bundle, &batch)?;
        (img, Some(sigma))
    } else {
        (translate_b_to_a(bundle, &batch)?, None)
    };
    let rgb: ArrayD<F> = img.data.index_axis(Axis(0), 0).to_owned().into_dyn();
    save_image(&rgb, &output.join(name))?;
    if with_uncertainty {
        let sigma = sigma.expect("A2B always carries σ");
        let heat: ArrayD<F> = sigma.sigma.index_axis(Axis(0), 0).to_owned().into_dyn();
        let stem = Path::new(name)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image");
        save_heatmap(&heat, &output.join(format!("{stem}_uncertainty.png")))?;
        println!(
            "{}: sigma min {:.6} mean {:.6} max {:.6}",
            name.to_string_lossy(),
            sigma.min().to_f64(),
            sigma.mean().to_f64(),
            sigma.max().to_f64()
        );
    }
    Ok(())
}

// ---- fid ----

fn cmd_fid(features_a: &Path, features_b: &Path) -> Result<(), Failure> {
    let a = load_embeddings(features_a)?;
    let b = load_embeddings(features_b)?;
    let d = frechet_distance(&a, &b)?;
    println!("{d:.4}");
    Ok(())
}

// ---- miou ----

fn load_label_map(path: &Path, num_classes: usize, ignore_index: i64) -> Result<LabelMap, Failure> {
    let img = image::open(path).map_err(CoreError::from)?.to_luma8();
    let (w, h) = img.dimensions();
    let classes = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0] as i64
    });
    Ok(LabelMap::new(classes, num_classes, ignore_index)?)
}

fn cmd_miou(
    pred: &Path,
    gt: &Path,
    num_classes: usize,
    ignore_index: i64,
) -> Result<(), Failure> {
    let p = load_label_map(pred, num_classes, ignore_index)?;
    let g = load_label_map(gt, num_classes, ignore_index)?;
    let v = mean_iou(&p, &g)?;
    println!("{v:.4}");
    Ok(())
}
