//! The `lesionseg` command line. Exit codes: 0 success, 1 usage error,
//! 2 data error.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{error::ErrorKind, ArgAction, Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{AugmentConfig, Sample, Transform};
use crate::imgio::{
    decode_checkpoint, decode_pgm, decode_ppm, decode_smf, encode_checkpoint, encode_pgm,
    encode_ppm, encode_smf, mask_from_gray, Mask, RgbImage, ScoreMap, SmfRaster,
};
use crate::metrics::{evaluate_dataset, DEFAULT_CUTOFF};
use crate::nn::{predict_scores, split_index, train_with, Tensor, TrainConfig, UNetConfig};
use crate::postprocess::{postprocess_pipeline, Mode, PostprocessConfig};
use crate::stats::{dataset_stats, mask_proportion, spatial_prior};
use crate::synth::{synth_sample, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "lesionseg", version, about = "Skin lesion segmentation toolkit")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Channel statistics, mole proportion and optional spatial prior.
    Stats(StatsArgs),
    /// Write a synthetic ellipse dataset.
    Synth(SynthArgs),
    /// Train a U-Net and write a checkpoint.
    Train(TrainArgs),
    /// Run a checkpoint on one image or a directory of images.
    Predict(PredictArgs),
    /// Turn score maps into masks.
    Postprocess(PostprocessArgs),
    /// Jaccard report of predicted masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Apply one seeded random flip/rotation to an image and its mask.
    Augment(AugmentArgs),
}

#[derive(Debug, Args)]
struct StatsArgs {
    img_dir: PathBuf,
    mask_dir: PathBuf,
    /// Write the spatial prior as a one-plane SMF file.
    #[arg(long)]
    prior_out: Option<PathBuf>,
    /// Side of the square prior map.
    #[arg(long, default_value_t = 64)]
    prior_size: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of img_NNNN.ppm / mask_NNNN.pgm pairs.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 8)]
    base: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    val_frac: f64,
    /// History CSV path; defaults to the checkpoint path with `.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Subtract the channel means without dividing by the std.
    #[arg(long)]
    center_only: bool,
    /// Per-sample work of each batch on all cores; same result as the default path.
    #[arg(long)]
    parallel: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A PPM file or a directory of them.
    #[arg(long = "in")]
    input: PathBuf,
    /// An SMF file, or a directory when `--in` is a directory.
    #[arg(long)]
    out_scores: PathBuf,
    /// Only predict the trailing validation split of a directory.
    #[arg(long)]
    val_frac: Option<f64>,
}

#[derive(Debug, Args)]
struct PostprocessArgs {
    /// An SMF file or a directory of them.
    #[arg(long)]
    scores: PathBuf,
    /// A PGM file, or a directory when `--scores` is a directory.
    #[arg(long)]
    out_mask: PathBuf,
    #[arg(long, default_value = "otsu")]
    mode: Mode,
    #[arg(long, default_value_t = 5.0)]
    sigma: f64,
    #[arg(long, default_value_t = 256)]
    bins: usize,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Directory of predicted masks.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth masks; matched to predictions by id.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: f64,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long)]
    img: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Output directory; file names are kept.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    p_flip_h: f64,
    #[arg(long, default_value_t = 0.5)]
    p_flip_v: f64,
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    rot90: bool,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I: IntoIterator<Item = String>>(argv: I) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{}", e.render());
                    0
                }
                _ => {
                    eprint!("{}", e.render());
                    1
                }
            };
        }
    };
    let result = match cli.command {
        Command::Stats(a) => run_stats(a),
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Predict(a) => run_predict(a),
        Command::Postprocess(a) => run_postprocess(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Augment(a) => run_augment(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

/// `img_0007.ppm`, `mask_0007.pgm` and `scores_0007.smf` all have id `0007`;
/// other names keep their stem minus a `_segmentation` suffix.
pub fn sample_id(path: &Path) -> Option<String> {
    let stem = path.file_stem()?.to_str()?;
    let stem = ["img_", "mask_", "scores_"]
        .iter()
        .find_map(|p| stem.strip_prefix(p))
        .unwrap_or(stem);
    Some(stem.strip_suffix("_segmentation").unwrap_or(stem).to_string())
}

/// Files in `dir` with extension `ext`, as `(id, path)` sorted by id.
fn list_dir(dir: &Path, ext: &str) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        if let Some(id) = sample_id(&path) {
            out.push((id, path));
        }
    }
    out.sort();
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read(path)?).with_context(|| format!("decoding {}", path.display()))
}

fn load_mask(path: &Path) -> Result<Mask> {
    let gray = decode_pgm(&read(path)?).with_context(|| format!("decoding {}", path.display()))?;
    Ok(mask_from_gray(&gray, 0.5)?)
}

fn load_scores(path: &Path) -> Result<ScoreMap> {
    let raster = decode_smf(&read(path)?).with_context(|| format!("decoding {}", path.display()))?;
    Ok(ScoreMap::try_from(raster)?)
}

/// Images of `img_dir` paired by id with masks of `mask_dir`.
fn load_pairs(img_dir: &Path, mask_dir: &Path) -> Result<Vec<(String, RgbImage, Mask)>> {
    let images = list_dir(img_dir, "ppm")?;
    ensure!(!images.is_empty(), "no .ppm images in {}", img_dir.display());
    let masks: std::collections::HashMap<String, PathBuf> =
        list_dir(mask_dir, "pgm")?.into_iter().collect();
    images
        .into_iter()
        .map(|(id, img_path)| {
            let mask_path = masks
                .get(&id)
                .with_context(|| format!("no mask for image {id} in {}", mask_dir.display()))?;
            Ok((id, load_ppm(&img_path)?, load_mask(mask_path)?))
        })
        .collect()
}

fn run_stats(a: StatsArgs) -> Result<()> {
    let pairs = load_pairs(&a.img_dir, &a.mask_dir)?;
    let images: Vec<RgbImage> = pairs.iter().map(|p| p.1.clone()).collect();
    let masks: Vec<Mask> = pairs.iter().map(|p| p.2.clone()).collect();
    let stats = dataset_stats(&images)?;
    let proportion = masks.iter().map(mask_proportion).sum::<f64>() / masks.len() as f64;
    if let Some(path) = &a.prior_out {
        let prior = spatial_prior(&masks, a.prior_size, a.prior_size)?;
        let raster = SmfRaster {
            width: prior.width,
            height: prior.height,
            planes: vec![prior.data],
        };
        write(path, &encode_smf(&raster))?;
    }
    println!(
        "{}",
        serde_json::json!({
            "mean": stats.mean,
            "std": stats.std,
            "mole_proportion": proportion,
            "n_images": images.len(),
        })
    );
    Ok(())
}

fn run_synth(a: SynthArgs) -> Result<()> {
    ensure!(a.n >= 1, "--n must be at least 1");
    ensure!(a.size >= 1, "--size must be positive");
    ensure!(a.noise_std >= 0.0, "--noise-std must be non-negative");
    let cfg = SynthConfig {
        n_images: a.n,
        size: a.size,
        seed: a.seed,
        noise_std: a.noise_std,
        ..Default::default()
    };
    create_dir(&a.out)?;
    for i in 0..a.n {
        let s = synth_sample(&cfg, i);
        write(&a.out.join(format!("img_{i:04}.ppm")), &encode_ppm(&s.image))?;
        write(&a.out.join(format!("mask_{i:04}.pgm")), &encode_pgm(&s.mask))?;
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let pairs = load_pairs(&a.data, &a.data)?;
    let dataset: Vec<(RgbImage, Mask)> = pairs.into_iter().map(|(_, i, m)| (i, m)).collect();
    let tcfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        center_only: a.center_only,
        parallel: a.parallel,
        ..Default::default()
    };
    let ucfg = UNetConfig::new(a.depth, a.base);
    let out = train_with(&dataset, a.val_frac, &tcfg, &ucfg, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.6}  val_jaccard {:.4}  lr {:.3e}",
            r.epoch, r.loss, r.val_jaccard, r.lr
        );
    })?;
    write(&a.out, &encode_checkpoint(&out.checkpoint))?;
    let history = a.history.unwrap_or_else(|| a.out.with_extension("history.csv"));
    write(&history, out.history.to_csv().as_bytes())?;
    let last = out.history.records.last();
    println!(
        "{}",
        serde_json::json!({
            "n_train": out.n_train,
            "n_val": dataset.len() - out.n_train,
            "class_weights": [out.class_weights.0, out.class_weights.1],
            "normalization": out.checkpoint.normalization,
            "final_loss": last.map(|r| r.loss),
            "final_val_jaccard": last.map(|r| r.val_jaccard),
        })
    );
    Ok(())
}

fn run_predict(a: PredictArgs) -> Result<()> {
    let checkpoint = decode_checkpoint(&read(&a.checkpoint)?)
        .with_context(|| format!("decoding {}", a.checkpoint.display()))?;
    if a.input.is_dir() {
        let mut images = list_dir(&a.input, "ppm")?;
        ensure!(!images.is_empty(), "no .ppm images in {}", a.input.display());
        if let Some(frac) = a.val_frac {
            let n_train = split_index(images.len(), frac)?;
            images.drain(..n_train);
        }
        create_dir(&a.out_scores)?;
        for (id, path) in images {
            let scores = predict_scores(&checkpoint, &load_ppm(&path)?)
                .with_context(|| format!("predicting {}", path.display()))?;
            let dst = a.out_scores.join(format!("scores_{id}.smf"));
            write(&dst, &encode_smf(&SmfRaster::from(&scores)))?;
        }
    } else {
        if a.val_frac.is_some() {
            bail!("--val-frac needs a directory for --in");
        }
        let scores = predict_scores(&checkpoint, &load_ppm(&a.input)?)?;
        write(&a.out_scores, &encode_smf(&SmfRaster::from(&scores)))?;
    }
    Ok(())
}

fn run_postprocess(a: PostprocessArgs) -> Result<()> {
    let cfg = PostprocessConfig {
        mode: a.mode,
        sigma: a.sigma,
        bins: a.bins,
    };
    let jobs: Vec<(String, PathBuf, PathBuf)> = if a.scores.is_dir() {
        create_dir(&a.out_mask)?;
        list_dir(&a.scores, "smf")?
            .into_iter()
            .map(|(id, src)| {
                let dst = a.out_mask.join(format!("mask_{id}.pgm"));
                (id, src, dst)
            })
            .collect()
    } else {
        let id = sample_id(&a.scores).unwrap_or_default();
        vec![(id, a.scores.clone(), a.out_mask.clone())]
    };
    ensure!(!jobs.is_empty(), "no .smf score maps in {}", a.scores.display());
    for (id, src, dst) in jobs {
        let out = postprocess_pipeline(&load_scores(&src)?, &cfg)
            .with_context(|| format!("post-processing {}", src.display()))?;
        write(&dst, &encode_pgm(&out.mask))?;
        println!(
            "{}",
            serde_json::json!({
                "id": id,
                "mode": cfg.mode,
                "threshold": out.threshold,
                "otsu": out.otsu,
            })
        );
    }
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    ensure!((0.0..=1.0).contains(&a.cutoff), "--cutoff must be in [0, 1]");
    let truth: std::collections::HashMap<String, PathBuf> =
        list_dir(&a.truth, "pgm")?.into_iter().collect();
    let pairs = list_dir(&a.pred, "pgm")?
        .into_iter()
        .map(|(id, path)| {
            let t = truth
                .get(&id)
                .with_context(|| format!("no ground truth for {id} in {}", a.truth.display()))?;
            Ok((load_mask(&path)?, load_mask(t)?, id))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_dataset(&pairs, a.cutoff)?;
    print!("{}", report.to_csv());
    println!("{}", report.summary_json());
    Ok(())
}

fn run_augment(a: AugmentArgs) -> Result<()> {
    let cfg = AugmentConfig {
        p_flip_h: a.p_flip_h,
        p_flip_v: a.p_flip_v,
        rot90: a.rot90,
    };
    cfg.validate()?;
    let img = load_ppm(&a.img)?;
    let mask = load_mask(&a.mask)?;
    let tensor = Tensor::from_vec(3, img.width, img.height, img.data);
    let sample = Sample::new(tensor, mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let t = Transform::draw(&mut rng, &cfg);
    let out = t.apply(&sample);
    let image = RgbImage::new(out.image.width, out.image.height, out.image.data)?;
    create_dir(&a.out)?;
    let name = |p: &Path| p.file_name().map(PathBuf::from).context("input path has no file name");
    write(&a.out.join(name(&a.img)?), &encode_ppm(&image))?;
    write(&a.out.join(name(&a.mask)?), &encode_pgm(&out.mask))?;
    println!(
        "{}",
        serde_json::json!({"flip_h": t.flip_h, "flip_v": t.flip_v, "rot90": t.rot90})
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> i32 {
        dispatch(std::iter::once("lesionseg").chain(args.iter().copied()).map(String::from))
    }

    #[test]
    fn ids_strip_known_prefixes() {
        assert_eq!(sample_id(Path::new("d/img_0007.ppm")).unwrap(), "0007");
        assert_eq!(sample_id(Path::new("mask_0007.pgm")).unwrap(), "0007");
        assert_eq!(sample_id(Path::new("scores_0007.smf")).unwrap(), "0007");
        assert_eq!(
            sample_id(Path::new("ISIC_0000001_segmentation.pgm")).unwrap(),
            "ISIC_0000001"
        );
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run(&[]), 1);
        assert_eq!(run(&["frobnicate"]), 1);
        assert_eq!(run(&["synth", "--n", "2"]), 1);
        assert_eq!(run(&["synth", "--bogus"]), 1);
        assert_eq!(run(&["--help"]), 0);
    }

    #[test]
    fn data_errors_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        let m = missing.to_str().unwrap();
        assert_eq!(run(&["stats", m, m]), 2);
        assert_eq!(run(&["evaluate", "--pred", m, "--truth", m]), 2);
        let bad = dir.path().join("bad.smf");
        fs::write(&bad, b"not a score map").unwrap();
        let out = dir.path().join("o.pgm");
        assert_eq!(
            run(&["postprocess", "--scores", bad.to_str().unwrap(), "--out-mask", out.to_str().unwrap()]),
            2
        );
    }
}
