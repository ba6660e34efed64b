//! Command-line front end. `run` parses arguments, executes one subcommand
//! and maps the outcome to an exit code: 0 success, 1 runtime failure,
//! 2 usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::blur2vid::{evaluate_deblur, train_deblur, DeblurTrainConfig, FramePredictor, PredictorConfig, Regime};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::hypercut::{
    con_rate_of, hit_rate_of, load_order_model, project_embeddings_2d, project_sequences, save_order_model,
    separability_accuracy, train_order_encoder, EncoderConfig, Hyperplane, HypercutTrainConfig, OrderEncoder,
};
use crate::metrics::{psnr, PairMetricMode};
use crate::pipeline::temporal_align;
use crate::scenes::{
    decode_sample, encode_sample, generate_dataset, BlurryObservation, DatasetConfig, DatasetStore, FrameSequence,
    Sample, SceneSampler,
};

pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_DIM: u32 = 128;
pub const DEFAULT_FRAMES: u32 = 7;
pub const DEFAULT_SIZE: u32 = 32;
pub const DEFAULT_COUNT: usize = 2000;
pub const ENCODER_EPOCHS: u32 = 15;
pub const ENCODER_BATCH: u32 = 16;
pub const DEBLUR_EPOCHS: u32 = 20;
pub const DEBLUR_BATCH: u32 = 16;
pub const ENCODER_LR: f64 = 3e-4;
pub const DEBLUR_LR: f64 = 1e-3;
pub const ABLATION_DIMS: [usize; 5] = [1, 16, 64, 128, 256];
/// Test predictions written as PNG strips.
const PNG_SAMPLES: usize = 4;

#[derive(Parser, Debug)]
#[command(name = "hypercut", version, about = "Order-aware blur-to-video training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Root seed; each component derives its own stream from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch: Option<u32>,
    #[arg(long)]
    lr: Option<f64>,
    /// Regularizer weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Embedding length.
    #[arg(long)]
    dim: Option<u32>,
    /// Frames per sequence (N + 1).
    #[arg(long)]
    frames: Option<u32>,
    /// Canvas side in pixels.
    #[arg(long)]
    size: Option<u32>,
    /// rec, oi, oi+hypercut or rec+hypercut.
    #[arg(long, value_parser = parse_regime)]
    regime: Option<Regime>,
    /// Dataset directory (or stream file for `align`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Comma-separated regularizer weights.
#[derive(Clone, Debug)]
struct AlphaList(Vec<f64>);

fn parse_alphas(s: &str) -> std::result::Result<AlphaList, String> {
    let list: Vec<f64> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if list.is_empty() {
        return Err("alpha list is empty".into());
    }
    if let Some(a) = list.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
        return Err(format!("alpha {a} is not a non-negative number"));
    }
    Ok(AlphaList(list))
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_COUNT)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        /// Static scenes: every sequence equals its reverse.
        #[arg(long = "static")]
        static_scenes: bool,
    },
    /// Train the order encoder on the training split.
    TrainHypercut {
        #[command(flatten)]
        common: Common,
    },
    /// Hit and consistency rates on the test split.
    EvalHypercut {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Train a deblurring predictor under one regime.
    TrainDeblur {
        #[command(flatten)]
        common: Common,
        /// Order model directory; required for the regularized regimes.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Pair metrics of a trained predictor on the test split.
    EvalDeblur {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Score whole sequences forward or backward instead of per frame.
        #[arg(long)]
        sequence_max: bool,
    },
    /// Locate a blurry image inside a sharp stream.
    Align {
        #[command(flatten)]
        common: Common,
        /// `.b2v` file whose blurry slot holds the image to align.
        #[arg(long)]
        blurry: PathBuf,
    },
    /// Border-frame demo of average collapse and order ambiguity.
    ToyDemo {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 600)]
        count: usize,
    },
    /// 2D principal-component view of pair embeddings.
    DumpEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Mean pair PSNR for several regularizer weights.
    AblateAlpha {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long, default_value = "0,0.1,0.2,0.5", value_parser = parse_alphas)]
        alphas: AlphaList,
    },
    /// Hit and consistency rates across embedding lengths.
    AblateN {
        #[command(flatten)]
        common: Common,
    },
}

/// Fully resolved settings, echoed to `config.json` by every run.
#[derive(Clone, Debug, Serialize)]
struct RunConfig {
    subcommand: &'static str,
    data: Option<PathBuf>,
    seed: u64,
    epochs: u32,
    batch: u32,
    lr: f64,
    alpha: f64,
    dim: u32,
    frames: u32,
    size: u32,
    regime: Regime,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    extra: serde_json::Value,
}

impl RunConfig {
    fn resolve(subcommand: &'static str, c: &Common, epochs: u32, batch: u32, lr: f64) -> Self {
        Self {
            subcommand,
            data: c.data.clone(),
            seed: c.seed,
            epochs: c.epochs.unwrap_or(epochs),
            batch: c.batch.unwrap_or(batch),
            lr: c.lr.unwrap_or(lr),
            alpha: c.alpha.unwrap_or(DEFAULT_ALPHA),
            dim: c.dim.unwrap_or(DEFAULT_DIM),
            frames: c.frames.unwrap_or(DEFAULT_FRAMES),
            size: c.size.unwrap_or(DEFAULT_SIZE),
            regime: c.regime.unwrap_or(Regime::OiHypercut),
            extra: serde_json::Value::Null,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.dim == 0 || self.frames < 2 || self.size < 8 {
            return Err(Error::Config("batch and dim must be positive, frames >= 2, size >= 8".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("lr must be positive and alpha non-negative".into()));
        }
        Ok(())
    }
}

/// Independent seed for one component, derived from the root seed.
pub fn component_seed(root: u64, component: &str) -> u64 {
    let tag = component
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    let mut z = root ^ tag;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return 2;
    }
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("HYPERCUT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("HYPERCUT_THREADS must be a positive integer, got `{v}`"))?;
    // a pool built earlier in this process stays in place
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn prepare_out(dir: &Path, config: &RunConfig) -> Result<()> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("config.json"), config)
}

/// Loads the dataset and takes frame count and resolution from it.
fn load_store(cfg: &mut RunConfig, c: &Common) -> Result<DatasetStore> {
    let store = DatasetStore::load(require_data(c)?)?;
    cfg.frames = store.manifest.frames as u32;
    cfg.size = store.manifest.height as u32;
    Ok(store)
}

fn require_data(c: &Common) -> Result<&Path> {
    c.data
        .as_deref()
        .ok_or_else(|| Error::Config("--data is required for this subcommand".into()))
}

fn key_values<K: AsRef<str>>(pairs: &[(K, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{}={v}", k.as_ref());
    }
    s
}

fn sequences<'a>(samples: &[&'a Sample]) -> Vec<&'a FrameSequence> {
    samples.iter().map(|s| &s.sequence).collect()
}

fn encoder_config(store: &DatasetStore, dim: u32) -> EncoderConfig {
    EncoderConfig {
        frame_channels: store.manifest.channels,
        height: store.manifest.height,
        width: store.manifest.width,
        dim: dim as usize,
        ..EncoderConfig::default()
    }
}

fn predictor_config(store: &DatasetStore) -> PredictorConfig {
    PredictorConfig {
        channels: store.manifest.channels,
        height: store.manifest.height,
        width: store.manifest.width,
        frames: store.manifest.frames,
        ..PredictorConfig::default()
    }
}

/// Writes a grid of `[H, W, C]` images (rows of equal-height tiles) as an
/// 8-bit PNG, grayscale or RGB.
pub fn write_png_grid(path: &Path, rows: &[Vec<&Tensor>]) -> Result<()> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::Invalid("nothing to draw".into()))?;
    let (th, tw, c) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    if c != 1 && c != 3 {
        return Err(Error::Invalid(format!("cannot write {c}-channel PNG")));
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (width, height) = (cols * tw, rows.len() * th);
    let mut pixels = vec![0u8; width * height * c];
    for (r, row) in rows.iter().enumerate() {
        for (col, img) in row.iter().enumerate() {
            if img.shape() != [th, tw, c] {
                return Err(Error::Invalid("PNG tiles differ in shape".into()));
            }
            for y in 0..th {
                for x in 0..tw {
                    for ch in 0..c {
                        let v = img.data()[(y * tw + x) * c + ch].clamp(0.0, 1.0);
                        pixels[((r * th + y) * width + col * tw + x) * c + ch] = (v * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(if c == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    enc.write_header().map_err(io)?.write_image_data(&pixels).map_err(io)
}

fn dump_predictions(dir: &Path, samples: &[&Sample], preds: &[FrameSequence]) -> Result<()> {
    for (i, (s, p)) in samples.iter().zip(preds).take(PNG_SAMPLES).enumerate() {
        let mut top = vec![&s.blurry.image];
        top.extend(&s.sequence.frames);
        let mut bottom = vec![&s.blurry.image];
        bottom.extend(&p.frames);
        write_png_grid(&dir.join(format!("prediction_{i:02}.png")), &[top, bottom])?;
    }
    Ok(())
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            common,
            count,
            channels,
            static_scenes,
        } => {
            let mut cfg = RunConfig::resolve("gen-data", &common, 0, 0, DEBLUR_LR);
            cfg.batch = 1;
            cfg.extra = json!({ "count": count, "channels": channels, "static": static_scenes });
            prepare_out(&common.out, &cfg)?;
            let store = generate_dataset(&DatasetConfig {
                count,
                sampler: SceneSampler {
                    height: cfg.size as usize,
                    width: cfg.size as usize,
                    channels,
                    frames: cfg.frames as usize,
                    directional: !static_scenes,
                    ..SceneSampler::default()
                },
                train_fraction: 0.8,
                seed: component_seed(cfg.seed, "data"),
            })?;
            store.save(&common.out)?;
            println!("samples={} train={} test={}", store.samples.len(), store.train().len(), store.test().len());
            Ok(())
        }
        Command::TrainHypercut { common } => {
            let mut cfg = RunConfig::resolve("train-hypercut", &common, ENCODER_EPOCHS, ENCODER_BATCH, ENCODER_LR);
            let store = load_store(&mut cfg, &common)?;
            prepare_out(&common.out, &cfg)?;
            let train_cfg = HypercutTrainConfig {
                epochs: cfg.epochs as usize,
                batch: cfg.batch as usize,
                lr: cfg.lr,
                seed: component_seed(cfg.seed, "encoder"),
                encoder: encoder_config(&store, cfg.dim),
                ..HypercutTrainConfig::default()
            };
            let trained = train_order_encoder(&sequences(&store.train()), &train_cfg, |e| {
                println!("epoch={} loss={:.6} hit={:.6}", e.epoch, e.loss, e.hit);
            })?;
            save_order_model(&common.out, &trained.encoder, &trained.hyperplane)?;
            write_json(&common.out.join("train_log.json"), &trained.log)?;
            if trained.log.degenerate {
                eprintln!(
                    "warning: degenerate training set (palindromic fraction {:.3}, hit {:.3}); no pair can be ordered",
                    trained.log.palindromic_fraction, trained.log.final_hit
                );
            }
            let report = hypercut_report(&trained.encoder, &trained.hyperplane, &store)?;
            finish_report(&common.out, "report", report)
        }
        Command::EvalHypercut { common, encoder } => {
            let mut cfg = RunConfig::resolve("eval-hypercut", &common, 0, ENCODER_BATCH, ENCODER_LR);
            cfg.extra = json!({ "encoder": encoder });
            let store = load_store(&mut cfg, &common)?;
            prepare_out(&common.out, &cfg)?;
            let (enc, h) = load_order_model(&encoder)?;
            let report = hypercut_report(&enc, &h, &store)?;
            finish_report(&common.out, "report", report)
        }
        Command::TrainDeblur { common, encoder } => {
            let mut cfg = RunConfig::resolve("train-deblur", &common, DEBLUR_EPOCHS, DEBLUR_BATCH, DEBLUR_LR);
            cfg.extra = json!({ "encoder": encoder });
            let store = load_store(&mut cfg, &common)?;
            prepare_out(&common.out, &cfg)?;
            let order = encoder.as_deref().map(load_order_model).transpose()?;
            let order_ref = order.as_ref().map(|(e, h)| (e, h));
            let train_cfg = DeblurTrainConfig {
                epochs: cfg.epochs as usize,
                batch: cfg.batch as usize,
                lr: cfg.lr,
                seed: component_seed(cfg.seed, "deblur"),
                loss: cfg.regime.loss_config(cfg.alpha),
                predictor: predictor_config(&store),
            };
            let (train, test) = (store.train(), store.test());
            let mut log = String::new();
            let trained = train_deblur(&train, &test, &train_cfg, order_ref, |e| {
                let line = e.log_line();
                println!("{line}");
                log.push_str(&line);
                log.push('\n');
            })?;
            write_text(&common.out.join("train_log.txt"), &log)?;
            trained.model.save(&common.out)?;
            let (report, preds) = evaluate_deblur(&trained.model, &test, order_ref, PairMetricMode::PerFrameMax)?;
            report.save(&common.out)?;
            print!("{}", report.to_text());
            dump_predictions(&common.out, &test, &preds)
        }
        Command::EvalDeblur {
            common,
            model,
            encoder,
            sequence_max,
        } => {
            let mut cfg = RunConfig::resolve("eval-deblur", &common, 0, DEBLUR_BATCH, DEBLUR_LR);
            let mode = if sequence_max { PairMetricMode::SequenceMax } else { PairMetricMode::PerFrameMax };
            cfg.extra = json!({ "model": model, "encoder": encoder, "ppsnr_mode": mode });
            let store = load_store(&mut cfg, &common)?;
            prepare_out(&common.out, &cfg)?;
            let predictor = FramePredictor::load(&model)?;
            let order = encoder.as_deref().map(load_order_model).transpose()?;
            let test = store.test();
            let (report, preds) = evaluate_deblur(&predictor, &test, order.as_ref().map(|(e, h)| (e, h)), mode)?;
            report.save(&common.out)?;
            print!("{}", report.to_text());
            dump_predictions(&common.out, &test, &preds)
        }
        Command::Align { common, blurry } => {
            let mut cfg = RunConfig::resolve("align", &common, 0, 1, DEBLUR_LR);
            cfg.extra = json!({ "blurry": blurry });
            prepare_out(&common.out, &cfg)?;
            let stream_path = require_data(&common)?;
            let read = |p: &Path| -> Result<Sample> {
                let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                decode_sample(&bytes)
            };
            let stream = read(stream_path)?;
            let target = read(&blurry)?;
            let result = temporal_align(&target.blurry.image, &stream.sequence.frames)?;
            let m = &result.correction.m;
            write_json(
                &common.out.join("alignment.json"),
                &json!({ "p": result.offset, "score": result.score, "m": m, "scores": result.scores }),
            )?;
            let blurry_rgb = crate::pipeline::promote_rgb(&target.blurry.image)?;
            let aligned = Sample {
                blurry: BlurryObservation { image: blurry_rgb, source: 0 },
                sequence: FrameSequence::new(result.frames.clone(), 0)?,
            };
            let path = common.out.join("aligned.b2v");
            write_text_bytes(&path, &encode_sample(&aligned))?;
            println!("p={} score={:.6}", result.offset, result.score);
            Ok(())
        }
        Command::ToyDemo { common, count } => toy_demo(&common, count),
        Command::DumpEmbeddings { common, encoder } => {
            let mut cfg = RunConfig::resolve("dump-embeddings", &common, 0, ENCODER_BATCH, ENCODER_LR);
            cfg.extra = json!({ "encoder": encoder });
            let store = load_store(&mut cfg, &common)?;
            prepare_out(&common.out, &cfg)?;
            let (enc, h) = load_order_model(&encoder)?;
            let points = project_embeddings_2d(&enc, &h, &sequences(&store.test()))?;
            let accuracy = separability_accuracy(&points)?;
            write_json(&common.out.join("embeddings.json"), &json!({ "points": points, "separability": accuracy }))?;
            let text = key_values(&[("points", points.len().to_string()), ("separability", format!("{accuracy:.6}"))]);
            write_text(&common.out.join("report.txt"), &text)?;
            print!("{text}");
            Ok(())
        }
        Command::AblateAlpha {
            common,
            encoder,
            alphas: AlphaList(alphas),
        } => {
            let mut cfg = RunConfig::resolve("ablate-alpha", &common, DEBLUR_EPOCHS, DEBLUR_BATCH, DEBLUR_LR);
            cfg.extra = json!({ "encoder": encoder, "alphas": alphas });
            let store = load_store(&mut cfg, &common)?;
            prepare_out(&common.out, &cfg)?;
            let (enc, h) = load_order_model(&encoder)?;
            let (train, test) = (store.train(), store.test());
            let mut rows = Vec::new();
            let mut table = String::from("alpha\tmean_ppsnr\tborder_ppsnr\torder_agreement\n");
            for &alpha in &alphas {
                let regime = if alpha > 0.0 { Regime::OiHypercut } else { Regime::Oi };
                let train_cfg = DeblurTrainConfig {
                    epochs: cfg.epochs as usize,
                    batch: cfg.batch as usize,
                    lr: cfg.lr,
                    seed: component_seed(cfg.seed, "deblur"),
                    loss: regime.loss_config(alpha),
                    predictor: predictor_config(&store),
                };
                let trained = train_deblur(&train, &test, &train_cfg, Some((&enc, &h)), |_| {})?;
                let (report, _) = evaluate_deblur(&trained.model, &test, Some((&enc, &h)), PairMetricMode::PerFrameMax)?;
                let agreement = report.order_agreement.unwrap_or(f64::NAN);
                let _ = writeln!(
                    table,
                    "{alpha}\t{:.4}\t{:.4}\t{:.4}",
                    report.mean_ppsnr, report.border_ppsnr, agreement
                );
                rows.push(json!({ "alpha": alpha, "report": report }));
            }
            write_text(&common.out.join("ablate_alpha.txt"), &table)?;
            write_json(&common.out.join("ablate_alpha.json"), &rows)?;
            print!("{table}");
            Ok(())
        }
        Command::AblateN { common } => {
            let mut cfg = RunConfig::resolve("ablate-n", &common, ENCODER_EPOCHS, ENCODER_BATCH, ENCODER_LR);
            cfg.extra = json!({ "dims": ABLATION_DIMS });
            let store = load_store(&mut cfg, &common)?;
            prepare_out(&common.out, &cfg)?;
            let mut rows = Vec::new();
            let mut table = String::from("n\thit\tcon2\tcon3\n");
            for n in ABLATION_DIMS {
                let train_cfg = HypercutTrainConfig {
                    epochs: cfg.epochs as usize,
                    batch: cfg.batch as usize,
                    lr: cfg.lr,
                    seed: component_seed(cfg.seed, "encoder"),
                    encoder: encoder_config(&store, n as u32),
                    ..HypercutTrainConfig::default()
                };
                let trained = train_order_encoder(&sequences(&store.train()), &train_cfg, |_| {})?;
                let report = hypercut_report(&trained.encoder, &trained.hyperplane, &store)?;
                let get = |k: &str| report.iter().find(|(n, _)| *n == k).map(|(_, v)| v.clone()).unwrap_or_default();
                let _ = writeln!(table, "{n}\t{}\t{}\t{}", get("hit"), get("con2"), get("con3"));
                rows.push(json!({ "n": n, "hit": get("hit"), "con2": get("con2"), "con3": get("con3") }));
            }
            write_text(&common.out.join("ablate_n.txt"), &table)?;
            write_json(&common.out.join("ablate_n.json"), &rows)?;
            print!("{table}");
            Ok(())
        }
    }
}

fn write_text_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Hit and consistency on the test split as ordered key/value pairs.
fn hypercut_report(enc: &OrderEncoder, h: &Hyperplane, store: &DatasetStore) -> Result<Vec<(&'static str, String)>> {
    let test = store.test();
    let test = if test.is_empty() { store.train() } else { test };
    let proj = project_sequences(enc, h, &sequences(&test))?;
    let mut out = vec![("sequences", test.len().to_string()), ("hit", format!("{:.6}", hit_rate_of(&proj)?))];
    for x in [2usize, 3] {
        if let Ok(v) = con_rate_of(&proj, x) {
            out.push((if x == 2 { "con2" } else { "con3" }, format!("{v:.6}")));
        }
    }
    Ok(out)
}

fn finish_report<K: AsRef<str>>(dir: &Path, stem: &str, report: Vec<(K, String)>) -> Result<()> {
    let text = key_values(&report);
    write_text(&dir.join(format!("{stem}.txt")), &text)?;
    let map: serde_json::Map<String, serde_json::Value> = report
        .iter()
        .map(|(k, v)| {
            let value = v.parse::<f64>().map(|f| json!(f)).unwrap_or_else(|_| json!(v));
            (k.as_ref().to_string(), value)
        })
        .collect();
    write_json(&dir.join(format!("{stem}.json")), &map)?;
    print!("{text}");
    Ok(())
}

/// Keeps only the two border frames of every sample as the target.
fn border_samples(store: &DatasetStore) -> Vec<Sample> {
    store
        .samples
        .iter()
        .map(|s| {
            let f = &s.sequence.frames;
            Sample {
                blurry: s.blurry.clone(),
                sequence: FrameSequence::new(vec![f[0].clone(), f[f.len() - 1].clone()], s.sequence.seed)
                    .expect("same shapes"),
            }
        })
        .collect()
}

fn toy_demo(common: &Common, count: usize) -> Result<()> {
    let mut cfg = RunConfig::resolve("toy-demo", common, DEBLUR_EPOCHS, DEBLUR_BATCH, DEBLUR_LR);
    cfg.extra = json!({ "count": count });
    prepare_out(&common.out, &cfg)?;
    let store = generate_dataset(&DatasetConfig {
        count,
        sampler: SceneSampler {
            height: cfg.size as usize,
            width: cfg.size as usize,
            frames: cfg.frames as usize,
            ..SceneSampler::default()
        },
        train_fraction: 0.8,
        seed: component_seed(cfg.seed, "data"),
    })?;
    let trained = train_order_encoder(
        &sequences(&store.train()),
        &HypercutTrainConfig {
            epochs: ENCODER_EPOCHS as usize,
            batch: ENCODER_BATCH as usize,
            lr: ENCODER_LR,
            seed: component_seed(cfg.seed, "encoder"),
            encoder: encoder_config(&store, cfg.dim),
            ..HypercutTrainConfig::default()
        },
        |_| {},
    )?;
    let (enc, h) = (&trained.encoder, &trained.hyperplane);

    let borders = border_samples(&store);
    let split = &store.manifest.split;
    let pick = |which| -> Vec<&Sample> { borders.iter().zip(split).filter(|(_, s)| **s == which).map(|(b, _)| b).collect() };
    let (train, test) = (pick(crate::scenes::Split::Train), pick(crate::scenes::Split::Test));
    let predictor = PredictorConfig {
        frames: 2,
        ..predictor_config(&store)
    };

    let mut report = vec![("test_samples".to_string(), test.len().to_string())];
    let mut strips: Vec<Vec<FrameSequence>> = Vec::new();
    for regime in [Regime::Rec, Regime::Oi, Regime::OiHypercut] {
        let train_cfg = DeblurTrainConfig {
            epochs: cfg.epochs as usize,
            batch: cfg.batch as usize,
            lr: cfg.lr,
            seed: component_seed(cfg.seed, "deblur"),
            loss: regime.loss_config(cfg.alpha),
            predictor: predictor.clone(),
        };
        let model = train_deblur(&train, &test, &train_cfg, Some((enc, h)), |_| {})?.model;
        let (metrics, preds) = evaluate_deblur(&model, &test, Some((enc, h)), PairMetricMode::PerFrameMax)?;
        let name = regime.to_string().replace('+', "_");
        if regime == Regime::Rec {
            let collapsed = test
                .iter()
                .zip(&preds)
                .filter(|(s, p)| {
                    let x = &s.sequence.frames;
                    let avg = Tensor::new(
                        x[0].shape().to_vec(),
                        x[0].data().iter().zip(x[1].data()).map(|(a, b)| (a + b) / 2.0).collect(),
                    )
                    .expect("same shape");
                    psnr(&p.frames[0], &avg).unwrap_or(0.0) > psnr(&p.frames[0], &x[0]).unwrap_or(0.0)
                })
                .count();
            report.push(("rec_average_collapse".into(), format!("{:.6}", collapsed as f64 / test.len() as f64)));
        }
        report.push((
            format!("{name}_order_agreement"),
            format!("{:.6}", metrics.order_agreement.unwrap_or(f64::NAN)),
        ));
        report.push((format!("{name}_mean_ppsnr"), format!("{:.6}", metrics.mean_ppsnr)));
        strips.push(preds);
    }
    for (i, s) in test.iter().take(PNG_SAMPLES).enumerate() {
        let mut row = vec![&s.blurry.image, &s.sequence.frames[0], &s.sequence.frames[1]];
        for preds in &strips {
            row.extend(&preds[i].frames);
        }
        write_png_grid(&common.out.join(format!("toy_{i:02}.png")), &[row])?;
    }
    finish_report(&common.out, "report", report)
}
