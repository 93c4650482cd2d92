use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Map, Value};

use tbd_vos::augment::{maybe_augment, TrainingSequence};
use tbd_vos::evalio::io::{load_frames, read_mask};
use tbd_vos::evalio::synth::ShapeKind;
use tbd_vos::evalio::{evaluate_sequence, load_masks, load_sequence, save_masks, save_sequence, synth_sequence, MetricsReport, SynthSceneConfig};
use tbd_vos::learn::{self, AdamConfig, FitConfig, ParamsFile, SampleConfig, TrainableParams};
use tbd_vos::matching::{Locality, MatchingVariant, TemplateSet};
use tbd_vos::tracker::{track_sequence, EmbedderConfig, TrackerConfig};

#[derive(Parser)]
#[command(name = "tbd-vos", version, about = "Semi-supervised video object segmentation with a diversified template bank")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Propagate a first-frame mask through a frame directory
    Track(TrackArgs),
    /// Score predicted masks against ground truth (J, F, G as JSON on stdout)
    Eval(EvalArgs),
    /// Train distance, inertia and readout parameters on sequence directories
    Fit(FitArgs),
    /// Render a synthetic sequence with ground-truth masks
    Synth(SynthArgs),
    /// Swap and attach objects between two sequences
    Augment(AugmentArgs),
    /// Compare analytic gradients with central differences on a random micro-instance
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Templates {
    FineAndCoarse,
    FineOnly,
    CoarseOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum LocalityArg {
    Distance,
    Window,
    None,
}

#[derive(Args, Serialize)]
struct VariantArgs {
    #[arg(long, value_enum, default_value_t = Templates::FineAndCoarse)]
    templates: Templates,
    #[arg(long, value_enum, default_value_t = LocalityArg::Distance)]
    locality: LocalityArg,
    /// Half-width of the square window for `--locality window`, in feature cells
    #[arg(long, default_value_t = 2)]
    window_radius: usize,
}

impl VariantArgs {
    fn variant(&self) -> MatchingVariant {
        MatchingVariant {
            templates: match self.templates {
                Templates::FineAndCoarse => TemplateSet::FineAndCoarse,
                Templates::FineOnly => TemplateSet::FineOnly,
                Templates::CoarseOnly => TemplateSet::CoarseOnly,
            },
            locality: match self.locality {
                LocalityArg::Distance => Locality::DistanceScoring,
                LocalityArg::Window => Locality::HardWindow {
                    radius: self.window_radius,
                },
                LocalityArg::None => Locality::Unrestricted,
            },
        }
    }
}

#[derive(Args, Serialize)]
struct TrackArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    init_mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Parameter file from `fit`; built-in defaults when omitted
    #[arg(long)]
    params: Option<PathBuf>,
    /// Embedding projection seed (ignored with --params, which carries its own)
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 4)]
    stride: usize,
    #[command(flatten)]
    variant: VariantArgs,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Mask directory, or a directory of per-sequence mask directories
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Boundary match tolerance in pixels; default ceil(0.008 * image diagonal)
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args, Serialize)]
struct FitArgs {
    /// A sequence directory, or a directory of sequence directories
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    steps_per_epoch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.2)]
    augment_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 384)]
    crop: usize,
    #[arg(long, default_value_t = 10)]
    frames_per_clip: usize,
    #[arg(long, default_value_t = 100)]
    min_fg_pixels: usize,
    /// Embedding projection seed stored in the parameter file
    #[arg(long, default_value_t = 0)]
    embedder_seed: u64,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 4)]
    stride: usize,
    #[command(flatten)]
    variant: VariantArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Preset {
    Default,
    Static,
    Translating,
    Distractor,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Starting configuration; the flags below override it
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct AugmentArgs {
    #[arg(long)]
    seq_a: PathBuf,
    #[arg(long)]
    seq_b: PathBuf,
    /// Receives `a/` and `b/` sequence directories
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of micro-instances, seeded `seed, seed + 1, ...`
    #[arg(long, default_value_t = 1)]
    instances: u64,
    #[arg(long, default_value_t = 2)]
    clips: usize,
    /// Check at these parameters instead of random ones
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[command(flatten)]
    variant: VariantArgs,
}

/// Bad flags or input data exit with 2, failures after validation with 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn usage_err(msg: String) -> Failure {
    Failure::Usage(anyhow!(msg))
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    let mut info = Map::new();
    let (outcome, manifest, config) = match &cli.command {
        Command::Track(a) => (track(a, &mut info), Some(a.out.join("manifest.json")), to_value(a)),
        Command::Eval(a) => (eval(a), None, Value::Null),
        Command::Fit(a) => (fit(a, &mut info), Some(a.out.with_extension("manifest.json")), to_value(a)),
        Command::Synth(a) => (synth(a, &mut info), Some(a.out.join("manifest.json")), to_value(a)),
        Command::Augment(a) => (augment(a, &mut info), Some(a.out.join("manifest.json")), to_value(a)),
        Command::Gradcheck(a) => (gradcheck(a), None, Value::Null),
    };
    if let Some(path) = manifest {
        let mut doc = Map::new();
        doc.insert("config".into(), config);
        doc.append(&mut info);
        doc.insert("wall_time_s".into(), json!(start.elapsed().as_secs_f64()));
        let error = match &outcome {
            Err(Failure::Usage(e) | Failure::Runtime(e)) => json!(format!("{e:#}")),
            Ok(()) => Value::Null,
        };
        doc.insert("error".into(), error);
        if let Err(e) = write_json(&path, &Value::Object(doc)) {
            eprintln!("warning: could not write manifest {}: {e:#}", path.display());
        }
    }
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("flags serialize")
}

fn write_json(path: &Path, v: &Value) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

/// Prints a JSON document on stdout; a closed pipe is not an error.
fn emit(v: &Value) -> Outcome {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(v).expect("JSON values serialize")) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Runtime(e.into())),
        _ => Ok(()),
    }
}

fn require_dir(path: &Path, what: &str) -> Outcome {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage_err(format!("{what} directory {} does not exist", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage_err(format!("{what} {} does not exist", path.display())))
    }
}

fn load_params(path: &Path) -> Result<(TrainableParams, EmbedderConfig), Failure> {
    require_file(path, "parameter file")?;
    ParamsFile::load(path).and_then(|f| f.split()).usage()
}

fn track(a: &TrackArgs, info: &mut Map<String, Value>) -> Outcome {
    require_dir(&a.frames, "frames")?;
    require_file(&a.init_mask, "initial mask")?;
    let frames = load_frames(&a.frames).usage()?;
    if frames.is_empty() {
        return Err(usage_err(format!("no frames in {}", a.frames.display())));
    }
    let init = read_mask(&a.init_mask).usage()?;
    if (init.height(), init.width()) != (frames[0].height(), frames[0].width()) {
        return Err(usage_err(format!(
            "initial mask is {}x{} but frames are {}x{}",
            init.height(),
            init.width(),
            frames[0].height(),
            frames[0].width()
        )));
    }
    let variant = a.variant.variant();
    let cfg: TrackerConfig<f32> = match &a.params {
        Some(path) => {
            let (params, embedder) = load_params(path)?;
            info.insert("params_source".into(), json!(path));
            params.tracker_config(&embedder, variant).cast()
        }
        None => {
            info.insert("params_source".into(), json!("built-in defaults"));
            TrackerConfig {
                embedder: EmbedderConfig {
                    feature_dim: a.feature_dim,
                    stride: a.stride,
                    projection_seed: a.seed,
                    ..EmbedderConfig::default()
                },
                variant,
                ..TrackerConfig::default()
            }
        }
    };
    cfg.validate().usage()?;
    info.insert("embedder".into(), to_value(&cfg.embedder));
    info.insert("frame_count".into(), json!(frames.len()));
    fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .usage()?;
    let masks = track_sequence(&frames, &init, &cfg).runtime()?;
    save_masks(&a.out, &masks).runtime()
}

/// Mask directories to compare: `(name, pred, gt)`.
fn eval_pairs(pred: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>, Failure> {
    let masks_of = |d: PathBuf| {
        let inner = d.join("masks");
        if inner.is_dir() {
            inner
        } else {
            d
        }
    };
    let name = |p: &Path| {
        let p = if p.ends_with("masks") { p.parent().unwrap_or(p) } else { p };
        p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    };
    let gt_masks = masks_of(gt.to_path_buf());
    if !load_masks(&gt_masks).usage()?.is_empty() {
        return Ok(vec![(name(gt), masks_of(pred.to_path_buf()), gt_masks)]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(gt)
        .with_context(|| format!("reading {}", gt.display()))
        .usage()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(usage_err(format!("no masks or sequence directories in {}", gt.display())));
    }
    Ok(subdirs
        .into_iter()
        .map(|d| {
            let n = name(&d);
            (n.clone(), masks_of(pred.join(&n)), masks_of(d))
        })
        .collect())
}

fn eval(a: &EvalArgs) -> Outcome {
    require_dir(&a.pred, "prediction")?;
    require_dir(&a.gt, "ground-truth")?;
    if let Some(t) = a.tolerance {
        if !(t.is_finite() && t >= 0.0) {
            return Err(usage_err(format!("tolerance must be a non-negative number, got {t}")));
        }
    }
    let mut per_sequence = Vec::new();
    for (name, pred_dir, gt_dir) in eval_pairs(&a.pred, &a.gt)? {
        require_dir(&pred_dir, "prediction")?;
        let pred = load_masks(&pred_dir).usage()?;
        let gt = load_masks(&gt_dir).usage()?;
        per_sequence.push(evaluate_sequence(&name, &pred, &gt, a.tolerance).usage()?);
    }
    let report = MetricsReport::new(per_sequence);
    emit(&serde_json::to_value(&report).runtime()?)
}

fn load_dataset(dir: &Path) -> Result<Vec<TrainingSequence>, Failure> {
    require_dir(dir, "data")?;
    if dir.join("frames").is_dir() {
        return Ok(vec![load_sequence(dir).usage()?]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))
        .usage()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("frames").is_dir())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(usage_err(format!("no sequence directories in {}", dir.display())));
    }
    subdirs.iter().map(|d| load_sequence(d).usage()).collect()
}

fn fit(a: &FitArgs, info: &mut Map<String, Value>) -> Outcome {
    if !(a.lr.is_finite() && a.lr > 0.0) {
        return Err(usage_err(format!("learning rate must be positive, got {}", a.lr)));
    }
    if !(0.0..=1.0).contains(&a.augment_prob) {
        return Err(usage_err(format!("augmentation probability {} outside [0, 1]", a.augment_prob)));
    }
    let embedder = EmbedderConfig {
        feature_dim: a.feature_dim,
        stride: a.stride,
        projection_seed: a.embedder_seed,
        ..EmbedderConfig::default()
    };
    embedder.validate().usage()?;
    let data = load_dataset(&a.data)?;
    info.insert("sequences".into(), json!(data.len()));
    let cfg = FitConfig {
        sample: SampleConfig {
            crop: a.crop,
            frames_per_clip: a.frames_per_clip,
            min_fg_pixels: a.min_fg_pixels,
            batch_size: a.batch_size,
            ..SampleConfig::default()
        },
        embedder: embedder.clone(),
        variant: a.variant.variant(),
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        steps_per_epoch: a.steps_per_epoch,
        init: TrainableParams::initial(),
    };
    let result = learn::fit(&data, a.epochs, &cfg, a.augment_prob, a.seed).runtime()?;
    info.insert("loss_history".into(), json!(result.loss_history));
    info.insert("steps".into(), json!(result.steps));
    info.insert("augmented_pairs".into(), json!(result.augmented_pairs));
    ParamsFile::new(&result.params, &embedder).save(&a.out).runtime()
}

fn synth(a: &SynthArgs, info: &mut Map<String, Value>) -> Outcome {
    let mut cfg = match a.preset {
        Preset::Default => SynthSceneConfig {
            seed: a.seed,
            ..SynthSceneConfig::default()
        },
        Preset::Static => SynthSceneConfig::static_scene(a.seed),
        Preset::Translating => SynthSceneConfig::translating_square(a.seed),
        Preset::Distractor => SynthSceneConfig::distractor_scene(a.seed),
    };
    cfg.frames = a.frames.unwrap_or(cfg.frames);
    cfg.objects = a.objects.unwrap_or(cfg.objects);
    cfg.distractors = a.distractors.unwrap_or(cfg.distractors);
    cfg.height = a.height.unwrap_or(cfg.height);
    cfg.width = a.width.unwrap_or(cfg.width);
    cfg.validate().usage()?;
    info.insert(
        "scene".into(),
        json!({
            "frames": cfg.frames,
            "height": cfg.height,
            "width": cfg.width,
            "objects": cfg.objects,
            "distractors": cfg.distractors,
            "shapes": match cfg.shapes {
                ShapeKind::Rect => "rect",
                ShapeKind::Disc => "disc",
                ShapeKind::Mixed => "mixed",
            },
        }),
    );
    let seq = synth_sequence(&cfg).usage()?;
    save_sequence(&a.out, &seq).runtime()
}

/// Copies the frame and mask files of a sequence directory unchanged.
fn copy_sequence(src: &Path, dst: &Path) -> anyhow::Result<()> {
    for sub in ["frames", "masks"] {
        let to = dst.join(sub);
        fs::create_dir_all(&to)?;
        for entry in fs::read_dir(src.join(sub))? {
            let path = entry?.path();
            if path.is_file() {
                fs::copy(&path, to.join(path.file_name().expect("file has a name")))?;
            }
        }
    }
    Ok(())
}

fn augment(a: &AugmentArgs, info: &mut Map<String, Value>) -> Outcome {
    if !(0.0..=1.0).contains(&a.prob) {
        return Err(usage_err(format!("probability {} outside [0, 1]", a.prob)));
    }
    require_dir(&a.seq_a, "sequence")?;
    require_dir(&a.seq_b, "sequence")?;
    let seq_a = load_sequence(&a.seq_a).usage()?;
    let seq_b = load_sequence(&a.seq_b).usage()?;
    let out = maybe_augment(&seq_a, &seq_b, a.prob, a.seed).usage()?;
    info.insert("applied".into(), json!(out.applied));
    if out.applied {
        save_sequence(&a.out.join("a"), &out.a).runtime()?;
        save_sequence(&a.out.join("b"), &out.b).runtime()
    } else {
        copy_sequence(&a.seq_a, &a.out.join("a")).runtime()?;
        copy_sequence(&a.seq_b, &a.out.join("b")).runtime()
    }
}

#[derive(Serialize)]
struct InstanceReport {
    seed: u64,
    redraws: usize,
    max_rel_error: f64,
    report: learn::FiniteDiffReport,
}

fn gradcheck(a: &GradcheckArgs) -> Outcome {
    if a.instances == 0 || a.clips == 0 {
        return Err(usage_err("--instances and --clips must be positive".into()));
    }
    let params = a.params.as_deref().map(load_params).transpose()?.map(|(p, _)| p);
    let variant = a.variant.variant();
    let mut reports = Vec::new();
    for seed in a.seed..a.seed + a.instances {
        let m = learn::micro_instance(seed, a.clips, variant, params.as_ref()).runtime()?;
        let report = learn::finite_diff_check(&m.params, &m.clips, variant).runtime()?;
        reports.push(InstanceReport {
            seed,
            redraws: m.redraws,
            max_rel_error: report.max_rel_error(),
            report,
        });
    }
    let passed = reports.iter().all(|r| r.report.passes(a.tolerance));
    let doc = json!({ "tolerance": a.tolerance, "passed": passed, "instances": reports });
    emit(&doc)?;
    if passed {
        Ok(())
    } else {
        let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        Err(Failure::Runtime(anyhow!(
            "largest relative error {worst:e} exceeds {:e}",
            a.tolerance
        )))
    }
}
