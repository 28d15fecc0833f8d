//! Command-line front end.
//!
//! Every subcommand is a plain function over an argument struct so the
//! binary and the tests share one code path.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataio::{self, generate_synthetic, load_image, scan_dataset, save_image, save_mask, Split, SynthConfig};
use crate::error::{invalid, Error, Result};
use crate::imgproc::{minmax_normalize, resize_bilinear, ImageTensor, MaskMap};
use crate::network::{NetworkConfig, TsdnModel};
use crate::par::{self, Exec};
use crate::scoring::{self, evaluate, pixel_score_map, PixelAucMode, Report, ScoredImage};
use crate::slic::{slic_segment, SlicParams, SuperpixelSegmentation};
use crate::surf::{surf_transform, SurfConfig};
use crate::training::{train_loop, TrainConfig, TrainOutcome, LOSS_FILE};

#[derive(Debug, Parser)]
#[command(name = "tsdn", version, about = "Superpixel-masked two-stream anomaly detection")]
pub struct Cli {
    /// Run every batch loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment an image and write a label visualization.
    Slic(SlicArgs),
    /// Preview one superpixel random fill.
    Surf(SurfArgs),
    /// Generate a procedural dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score images with a trained model.
    Infer(InferArgs),
    /// Compute AUCs from score maps and ground truth.
    Eval(EvalArgs),
    /// Overlay a score map on an image.
    Viz(VizArgs),
}

#[derive(Debug, Args)]
pub struct SlicArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "ns", default_value_t = 400)]
    pub n_segments: usize,
    #[arg(long, default_value_t = 10.0)]
    pub compactness: f64,
}

#[derive(Debug, Args)]
pub struct SurfArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "ns", default_value_t = 400)]
    pub n_segments: usize,
    #[arg(long = "ss", default_value_t = 50)]
    pub fill_count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON document with `SynthConfig` fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// JSON run config; a previous `config.lock.json` reproduces that run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset root containing `<category>/train/good`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub category: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "ns")]
    pub n_segments: Option<usize>,
    #[arg(long = "ss")]
    pub fill_count: Option<usize>,
    #[arg(long)]
    pub no_skips_dcda: bool,
    #[arg(long)]
    pub no_skips_dcdn: bool,
    #[arg(long)]
    pub no_fne: bool,
    /// Also disables the FNE, whose target needs the predicted mask.
    #[arg(long)]
    pub no_dcda: bool,
    #[arg(long)]
    pub no_surf: bool,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory searched recursively for PNG images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output of `infer`; with several categories, one subdirectory each.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required = true)]
    pub category: Vec<String>,
    /// Report JSON path (default `<scores>/report.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Average per-image pixel AUCs instead of pooling pixels.
    #[arg(long)]
    pub per_image: bool,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Raw `.tsmp` map or 16-bit PNG score map.
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSource {
    pub root: PathBuf,
    pub category: String,
}

/// Everything that determines a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataSource,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    /// Score-map blur; `None` scales with the input size.
    pub sigma: Option<f64>,
}

pub const LOCK_FILE: &str = "config.lock.json";

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Config file first, then command-line overrides.
pub fn resolve_run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &args.data {
        cfg.data.root = d.clone();
    }
    if let Some(c) = &args.category {
        cfg.data.category = c.clone();
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(n) = args.n_segments {
        cfg.train.surf.n_segments = n;
    }
    if let Some(n) = args.fill_count {
        cfg.train.surf.fill_count = n;
    }
    if args.no_skips_dcda {
        cfg.network.use_skips_dcd_a = false;
    }
    if args.no_skips_dcdn {
        cfg.network.use_skips_dcd_n = false;
    }
    if args.no_fne {
        cfg.network.enable_fne = false;
    }
    if args.no_dcda {
        cfg.network.enable_dcd_a = false;
        cfg.network.enable_fne = false;
        cfg.network.use_skips_dcd_a = false;
    }
    if args.no_surf {
        cfg.train.enable_surf = false;
    }
    if let Some(s) = args.sigma {
        cfg.sigma = Some(s);
    }
    if cfg.data.category.is_empty() {
        return invalid("no dataset category given (--category or data.category)");
    }
    cfg.network.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn fit_to(img: ImageTensor, cfg: &NetworkConfig) -> Result<ImageTensor> {
    let [h, w] = cfg.input_size;
    if (img.height(), img.width()) == (h, w) {
        Ok(img)
    } else {
        resize_bilinear(&img, h, w)
    }
}

pub fn run_train(args: &TrainArgs, exec: Exec) -> Result<TrainOutcome<f32>> {
    let cfg = resolve_run_config(args)?;
    mkdir(&args.out)?;
    write_json(&cfg, &args.out.join(LOCK_FILE))?;
    let images = dataio::load_train_images(&cfg.data.root, &cfg.data.category)?
        .into_iter()
        .map(|img| fit_to(img, &cfg.network))
        .collect::<Result<Vec<_>>>()?;
    log::info!("training on {} images", images.len());
    train_loop::<f32>(&images, &cfg.network, &cfg.train, &args.out, exec)
}

fn collect_pngs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_pngs(&p, out)?;
        } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    Ok(())
}

fn relative(path: &Path, base: &Path) -> String {
    let rel = path.strip_prefix(base).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Map path for an input named `rel` (relative, with extension).
pub fn map_path(scores: &Path, rel: &str, ext: &str) -> PathBuf {
    scores.join("maps").join(Path::new(rel).with_extension(ext))
}

pub const SCORES_FILE: &str = "scores.csv";

/// Reconstruct every image with the normality stream only and write
/// `scores.csv` plus one raw and one PNG map per image. Returns the rows.
pub fn run_infer(args: &InferArgs, exec: Exec) -> Result<Vec<(String, f64)>> {
    let model: TsdnModel<f32> = checkpoint::load(&args.checkpoint)?;
    let mut paths = Vec::new();
    collect_pngs(&args.input, &mut paths)?;
    if paths.is_empty() {
        return invalid(format!("no PNG images under {}", args.input.display()));
    }
    mkdir(&args.out)?;
    let net = model.config().clone();
    let locked = args
        .checkpoint
        .parent()
        .map(|d| d.join(LOCK_FILE))
        .filter(|p| p.is_file())
        .map(|p| read_json::<RunConfig>(&p))
        .transpose()?
        .and_then(|c| c.sigma);
    let sigma = args
        .sigma
        .or(locked)
        .unwrap_or_else(|| scoring::default_sigma(net.height()));
    let mut rows = Vec::with_capacity(paths.len());
    for chunk in paths.chunks(16) {
        let originals = chunk.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;
        let inputs = originals
            .iter()
            .map(|img| fit_to(img.clone(), &net))
            .collect::<Result<Vec<_>>>()?;
        let recons = model.reconstruct_batch(&inputs, exec)?;
        let maps = par::map_range(exec, chunk.len(), |i| -> Result<MaskMap> {
            let (s_map, _) = pixel_score_map(&inputs[i], &recons[i], sigma)?;
            let (h, w) = (originals[i].height(), originals[i].width());
            if (h, w) == (s_map.height(), s_map.width()) {
                return Ok(s_map);
            }
            let as_img = ImageTensor::new(1, s_map.height(), s_map.width(), s_map.into_data())?;
            MaskMap::new(h, w, resize_bilinear(&as_img, h, w)?.into_data())
        });
        for (path, s_map) in chunk.iter().zip(maps) {
            let s_map = s_map?;
            let rel = relative(path, &args.input);
            let raw = map_path(&args.out, &rel, "tsmp");
            mkdir(raw.parent().unwrap_or(&args.out))?;
            scoring::write_raw_map(&s_map, &raw)?;
            scoring::write_score_png(&minmax_normalize(&s_map), &map_path(&args.out, &rel, "png"))?;
            rows.push((rel, scoring::image_score(&s_map)?));
        }
    }
    let mut csv = String::from("filename,image_score\n");
    for (name, score) in &rows {
        csv.push_str(&format!("{name},{score}\n"));
    }
    let path = args.out.join(SCORES_FILE);
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Score maps for the test split of one category, joined with ground truth.
pub fn load_scored(scores: &Path, data: &Path, category: &str) -> Result<Vec<ScoredImage>> {
    let items = scan_dataset(data, category)?;
    items
        .iter()
        .filter(|it| it.split == Split::Test)
        .map(|it| {
            let rel = it.relative_name();
            let s_map = scoring::read_raw_map(&map_path(scores, &rel, "tsmp"))?;
            let mut s = ScoredImage::new(rel, category, s_map)?;
            s.gt_label = Some(it.is_abnormal());
            if let Some(m) = &it.gt_mask {
                let mask = dataio::load_mask(m)?;
                if (mask.height(), mask.width()) != (s.s_map.height(), s.s_map.width()) {
                    return invalid(format!("{} does not match its score map size", m.display()));
                }
                s.gt_mask = Some(mask);
            }
            Ok(s)
        })
        .collect()
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{:.1}", 100.0 * x))
}

pub fn format_table(report: &Report) -> String {
    let mut out = format!("{:<20} {:>10} {:>10} {:>8}\n", "category", "pixel AUC", "image AUC", "images");
    for (name, c) in &report.categories {
        out.push_str(&format!(
            "{:<20} {:>10} {:>10} {:>8}\n",
            name,
            fmt_metric(c.pixel_auc),
            fmt_metric(c.image_auc),
            c.n_images
        ));
    }
    out.push_str(&format!(
        "{:<20} {:>10} {:>10} {:>8}\n",
        "all",
        fmt_metric(report.pixel_auc),
        fmt_metric(report.image_auc),
        report.n_images
    ));
    out
}

pub fn run_eval(args: &EvalArgs) -> Result<Report> {
    let mut items = Vec::new();
    for cat in &args.category {
        let dir = if args.category.len() == 1 {
            args.scores.clone()
        } else {
            args.scores.join(cat)
        };
        items.extend(load_scored(&dir, &args.data, cat)?);
    }
    let mode = if args.per_image {
        PixelAucMode::PerImage
    } else {
        PixelAucMode::Pooled
    };
    let report = evaluate(&items, mode);
    let out = args.out.clone().unwrap_or_else(|| args.scores.join("report.json"));
    write_json(&report, &out)?;
    Ok(report)
}

/// `img * (1 - s/2) + red * s/2` with `s` the normalized score.
pub fn overlay(img: &ImageTensor, score: &MaskMap) -> Result<ImageTensor> {
    let (c, h, w) = img.shape();
    if c != 3 || (h, w) != (score.height(), score.width()) {
        return invalid(format!(
            "image {c}x{h}x{w} does not match score map {}x{}",
            score.height(),
            score.width()
        ));
    }
    let mut out = img.clone();
    for ch in 0..3 {
        let red = if ch == 0 { 1.0 } else { 0.0 };
        for (o, &s) in out.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut().zip(score.data()) {
            let a = 0.5 * s;
            *o = *o * (1.0 - a) + red * a;
        }
    }
    Ok(out)
}

pub fn run_viz(args: &VizArgs) -> Result<()> {
    let img = load_image(&args.image)?;
    let is_raw = args.map.extension().is_some_and(|e| e == "tsmp");
    let score = if is_raw {
        minmax_normalize(&scoring::read_raw_map(&args.map)?)
    } else {
        dataio::load_gray(&args.map)?
    };
    save_image(&overlay(&img, &score)?, &args.out)
}

/// Distinct, deterministic colour per label.
fn label_colours(seg: &SuperpixelSegmentation) -> ImageTensor {
    let (h, w) = (seg.height, seg.width);
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        let l = seg.labels[p] as u64;
        let hash = l.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
        for c in 0..3 {
            data[c * h * w + p] = ((hash >> (c * 8)) & 0xFF) as f64 / 255.0;
        }
    }
    ImageTensor::new(3, h, w, data).expect("label colours are finite")
}

fn boundary_overlay(img: &ImageTensor, seg: &SuperpixelSegmentation) -> Result<ImageTensor> {
    let mut out = img.to_rgb()?;
    let (h, w) = (seg.height, seg.width);
    for y in 0..h {
        for x in 0..w {
            let l = seg.label(y, x);
            let edge = (x + 1 < w && seg.label(y, x + 1) != l) || (y + 1 < h && seg.label(y + 1, x) != l);
            if edge {
                out.set(0, y, x, 1.0);
                out.set(1, y, x, 1.0);
                out.set(2, y, x, 0.0);
            }
        }
    }
    Ok(out)
}

pub fn run_slic(args: &SlicArgs) -> Result<SuperpixelSegmentation> {
    let img = load_image(&args.image)?;
    let params = SlicParams {
        compactness: args.compactness,
        ..SlicParams::with_segments(args.n_segments)
    };
    let seg = slic_segment(&img, &params)?;
    mkdir(&args.out)?;
    save_image(&label_colours(&seg), &args.out.join("labels.png"))?;
    save_image(&boundary_overlay(&img, &seg)?, &args.out.join("boundaries.png"))?;
    Ok(seg)
}

/// Writes `i_surf.png`, `m_surf.png` and `labels.png`; returns the mask.
pub fn run_surf_preview(args: &SurfArgs) -> Result<MaskMap> {
    let img = load_image(&args.image)?;
    let cfg = SurfConfig {
        n_segments: args.n_segments,
        fill_count: args.fill_count,
        seed: args.seed,
    };
    cfg.validate()?;
    let seg = slic_segment(&img, &SlicParams::with_segments(cfg.n_segments))?;
    let sample = surf_transform(&img, &seg, &cfg)?;
    mkdir(&args.out)?;
    save_image(&sample.distorted, &args.out.join("i_surf.png"))?;
    save_mask(&sample.mask, &args.out.join("m_surf.png"))?;
    save_image(&label_colours(&seg), &args.out.join("labels.png"))?;
    Ok(sample.mask)
}

pub fn run_synth(args: &SynthArgs) -> Result<SynthConfig> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    generate_synthetic(&cfg, &args.out)?;
    write_json(&cfg, &args.out.join(format!("{}.synth.json", cfg.category)))?;
    Ok(cfg)
}

fn last_loss_line(out: &Path) -> Option<String> {
    let text = fs::read_to_string(out.join(LOSS_FILE)).ok()?;
    text.lines().skip(1).last().map(str::to_owned)
}

/// Parse `args`, run, and map the outcome to an exit code: 0 success,
/// 1 usage or input error, 2 training divergence.
pub fn main_with_args<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    let result: Result<()> = match &cli.command {
        Command::Slic(a) => run_slic(a).map(|seg| println!("{} superpixels", seg.num_segments)),
        Command::Surf(a) => run_surf_preview(a).map(|m| {
            let frac = m.data().iter().sum::<f64>() / m.data().len() as f64;
            println!("mask fraction {:.4}", frac);
        }),
        Command::Synth(a) => run_synth(a).map(|c| println!("wrote category {} to {}", c.category, a.out.display())),
        Command::Train(a) => match run_train(a, exec) {
            Ok(o) => {
                if let Some(last) = o.history.last() {
                    println!("final total loss {:.6}", last.loss.total);
                }
                println!("checkpoint {}", o.checkpoint.display());
                Ok(())
            }
            Err(e @ Error::Diverged { .. }) => {
                eprintln!("error: {e}");
                if let Some(line) = last_loss_line(&a.out) {
                    eprintln!("last completed step (epoch,step,l_r,l_s,l_g,l_m,l_fne,total): {line}");
                }
                return ExitCode::from(2);
            }
            Err(e) => Err(e),
        },
        Command::Infer(a) => run_infer(a, exec).map(|rows| println!("scored {} images", rows.len())),
        Command::Eval(a) => run_eval(a).map(|r| print!("{}", format_table(&r))),
        Command::Viz(a) => run_viz(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_over_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.json");
        fs::write(&cfg_path, r#"{"data": {"root": "x", "category": "c"}, "train": {"epochs": 7, "learning_rate": 0.5}}"#)
            .unwrap();
        let args = TrainArgs {
            config: Some(cfg_path),
            out: dir.path().into(),
            epochs: Some(3),
            no_dcda: true,
            ..TrainArgs::default()
        };
        let cfg = resolve_run_config(&args).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.learning_rate, 0.5);
        assert!(!cfg.network.enable_dcd_a && !cfg.network.enable_fne);

        let plain = TrainArgs {
            category: Some("c".into()),
            ..TrainArgs::default()
        };
        assert_eq!(resolve_run_config(&plain).unwrap().train.learning_rate, 7e-5);
        assert!(resolve_run_config(&TrainArgs::default()).is_err());
    }

    #[test]
    fn overlay_extremes() {
        let img = ImageTensor::new(3, 2, 2, (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
        assert_eq!(overlay(&img, &MaskMap::zeros(2, 2)).unwrap(), img);
        let full = overlay(&img, &MaskMap::filled(2, 2, 1.0)).unwrap();
        for p in 0..4 {
            assert!((full.data()[p] - (0.5 * img.data()[p] + 0.5)).abs() < 1e-15);
            assert!((full.data()[4 + p] - 0.5 * img.data()[4 + p]).abs() < 1e-15);
        }
        assert!(overlay(&img, &MaskMap::zeros(2, 3)).is_err());
    }
}
