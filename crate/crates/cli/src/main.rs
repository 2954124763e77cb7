use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lowlight::awb::{self, AwbConfig, CalibrationMap, ChromaHistogramModel, IlluminantEstimate, Loss, TrainParams};
use lowlight::motion_metering::{self, Gmm, Stability};
use lowlight::pipeline::{self, PipelineConfig};
use lowlight::raw_model;
use lowlight::synth_oracle::{self, AwbSynthParams, SynthSpec};
use lowlight::tonemap::{self, SceneStats};
use lowlight::{burst_align, burst_merge, Error};

#[derive(Parser)]
#[command(name = "lowlight", version, about = "Low-light burst photography engine")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meter a pre-shutter stream and plan the capture.
    Meter(MeterArgs),
    /// Plan a capture from a motion history.
    Plan(PlanArgs),
    /// Align a burst and write per-tile displacements as CSV.
    Align(BurstArgs),
    /// Align and merge a burst into a raw mosaic.
    Merge(MergeArgs),
    /// Render a merged mosaic to an 8-bit sRGB PNG.
    Finish(FinishArgs),
    /// Train a white-balance model on a dataset directory.
    AwbTrain(AwbTrainArgs),
    /// Three-fold cross-validation of white-balance training.
    AwbEval(AwbEvalArgs),
    /// Estimate the illuminant of a thumbnail or merged mosaic.
    AwbPredict(AwbPredictArgs),
    /// Generate a synthetic burst or white-balance dataset.
    Synth(SynthArgs),
    /// Run the full pipeline.
    Run(RunArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline config JSON; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> lowlight::Result<PipelineConfig> {
        match &self.config {
            Some(p) => PipelineConfig::load(p),
            None => Ok(PipelineConfig::default()),
        }
    }
}

#[derive(Args)]
struct MeterArgs {
    /// Metering stream manifest.
    manifest: PathBuf,
    /// Target sensitivity (exposure time x gain), overriding the manifest.
    #[arg(long)]
    target: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    metering: MeteringFlags,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct MeteringFlags {
    /// Confidence that the minimum motion stays below the prediction.
    #[arg(long)]
    p_conf: Option<f64>,
    /// Allowed motion blur per frame, pixels.
    #[arg(long)]
    blur_budget: Option<f64>,
    #[arg(long)]
    max_frames: Option<usize>,
}

impl MeteringFlags {
    fn apply(&self, p: &mut motion_metering::MeteringParams) {
        if let Some(v) = self.p_conf {
            p.p_conf = v;
        }
        if let Some(v) = self.blur_budget {
            p.blur_budget_px = v;
        }
        if let Some(v) = self.max_frames {
            p.max_frames = v;
        }
    }
}

#[derive(Args)]
struct MergeFlags {
    /// Temporal strength c.
    #[arg(long)]
    temporal_strength: Option<f64>,
    /// Mismatch scaling s.
    #[arg(long)]
    mismatch_s: Option<f64>,
    /// Fixed-strength merge (f = 1 everywhere).
    #[arg(long)]
    force_f1: bool,
}

impl MergeFlags {
    fn apply(&self, p: &mut burst_merge::MergeParams) {
        if let Some(v) = self.temporal_strength {
            p.temporal_strength = v;
        }
        if let Some(v) = self.mismatch_s {
            p.mismatch_s = v;
        }
        p.force_f1 |= self.force_f1;
    }
}

#[derive(Args)]
struct PlanArgs {
    /// Comma-separated motion history, pixels per frame.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    history: Vec<f64>,
    /// Target sensitivity (exposure time x gain), seconds.
    #[arg(long)]
    target: f64,
    /// Treat the camera as braced.
    #[arg(long)]
    stabilized: bool,
    /// Metering frame interval, seconds.
    #[arg(long, default_value_t = 1.0 / 15.0)]
    interval: f64,
    #[command(flatten)]
    metering: MeteringFlags,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct BurstArgs {
    /// Capture burst manifest.
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct MergeArgs {
    manifest: PathBuf,
    /// Output directory for merged.pgm, merged.json and n_eff.pgm.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    merge: MergeFlags,
    #[arg(long)]
    no_spatial: bool,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct ToneAblation {
    #[arg(long)]
    no_shadow_gain: bool,
    #[arg(long)]
    no_highlight_gain: bool,
    #[arg(long)]
    no_saturation: bool,
    #[arg(long)]
    no_vignette: bool,
    #[arg(long)]
    no_black_point: bool,
}

impl ToneAblation {
    fn apply(&self, flags: &mut tonemap::ToneFlags) {
        flags.shadow_gain &= !self.no_shadow_gain;
        flags.highlight_gain &= !self.no_highlight_gain;
        flags.saturation &= !self.no_saturation;
        flags.vignette &= !self.no_vignette;
        flags.black_point &= !self.no_black_point;
    }
}

#[derive(Args)]
struct FinishArgs {
    /// merged.json written by `merge`.
    merged: PathBuf,
    /// Illuminant JSON; gray world when omitted.
    #[arg(long)]
    illuminant: Option<PathBuf>,
    /// Scene stats JSON; derived from the mosaic and exposure when omitted.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    ablation: ToneAblation,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct TrainingArgs {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Calibration JSON of sensor/canonical log-UV pairs.
    #[arg(long)]
    calibration: Option<PathBuf>,
}

impl TrainingArgs {
    fn params(&self) -> TrainParams {
        let mut p = TrainParams::default();
        if let Some(i) = self.iterations {
            p.iterations = i;
        }
        if let Some(lr) = self.learning_rate {
            p.learning_rate = lr;
        }
        p
    }

    fn calibration(&self) -> lowlight::Result<Option<CalibrationMap>> {
        self.calibration.as_deref().map(CalibrationMap::load).transpose()
    }
}

#[derive(Args)]
struct AwbTrainArgs {
    dataset: PathBuf,
    #[arg(long, default_value = "are")]
    loss: Loss,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Args)]
struct AwbEvalArgs {
    dataset: PathBuf,
    /// Losses to compare; all four plus the untrained model by default.
    #[arg(long, value_delimiter = ',')]
    loss: Vec<Loss>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Args)]
struct AwbPredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// 16-bit linear RGB PPM thumbnail.
    #[arg(long, conflicts_with = "merged", required_unless_present = "merged")]
    thumbnail: Option<PathBuf>,
    /// merged.json written by `merge`.
    #[arg(long)]
    merged: Option<PathBuf>,
    #[arg(long)]
    exposure_time: Option<f64>,
    #[arg(long)]
    gain: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    iso_ratio: f64,
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Scene and capture spec JSON.
    #[arg(long, required_unless_present = "awb_dataset")]
    spec: Option<PathBuf>,
    /// Write a white-balance dataset of this many examples instead.
    #[arg(long)]
    awb_dataset: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Capture burst manifest.
    capture: PathBuf,
    /// Pre-shutter metering stream manifest.
    #[arg(long = "metering")]
    stream: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    awb_model: Option<PathBuf>,
    #[command(flatten)]
    metering: MeteringFlags,
    #[command(flatten)]
    merge: MergeFlags,
    #[arg(long)]
    no_spatial: bool,
    #[arg(long)]
    no_tone: bool,
    #[command(flatten)]
    ablation: ToneAblation,
    #[command(flatten)]
    config: ConfigArg,
}

fn emit<S: Serialize>(value: &S, out: Option<&Path>) -> lowlight::Result<()> {
    match out {
        Some(p) => synth_oracle::write_json(p, value),
        None => {
            let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
    }
}

fn meter(a: &MeterArgs) -> lowlight::Result<()> {
    let mut cfg = a.config.load()?;
    a.metering.apply(&mut cfg.metering);
    let burst = raw_model::load_burst(&a.manifest).map_err(|e| e.in_stage("load"))?;
    let target = a
        .target
        .or(burst.manifest.target_sensitivity_s)
        .or(cfg.target_sensitivity_s)
        .ok_or_else(|| Error::InvalidParameter("no target sensitivity given".into()))?;
    let weights = burst
        .manifest
        .weight_map
        .as_deref()
        .map(raw_model::load_weight_map)
        .transpose()?;
    let report = motion_metering::meter_stream(&burst, weights.as_ref(), target, &cfg.metering)?;
    emit(&report, a.out.as_deref())
}

fn plan(a: &PlanArgs) -> lowlight::Result<()> {
    let mut cfg = a.config.load()?;
    a.metering.apply(&mut cfg.metering);
    let gmm: Option<Gmm<f64>> = (!a.history.is_empty()).then(|| motion_metering::fit_gmm(&a.history));
    let stability = if a.stabilized {
        Stability {
            stabilized: true,
            ..Stability::handheld("stabilized by flag")
        }
    } else {
        Stability::handheld("no gyro trace")
    };
    let plan = motion_metering::plan_capture(gmm.as_ref(), &stability, a.target, a.interval, &cfg.metering)?;
    emit(&plan, None)
}

fn aligned(
    manifest: &Path,
    cfg: &PipelineConfig,
) -> lowlight::Result<(raw_model::Burst, usize, Vec<lowlight::LinearImage>, burst_align::TileAlignment)> {
    let burst = raw_model::load_burst(manifest).map_err(|e| e.in_stage("load"))?;
    let cfa = burst.manifest.cfa;
    let raw: Vec<lowlight::LinearImage> = burst.frames.iter().map(raw_model::normalize).collect();
    let reference = burst_align::select_reference(&raw, cfa, cfg.metering.reference_pool_k)?.index;
    let mosaics = burst.normalized::<f64>(reference);
    let noise = burst.noise_for(reference);
    let alignment = burst_align::align_burst(&mosaics, cfa, reference, &noise, &cfg.align).map_err(|e| e.in_stage("align"))?;
    Ok((burst, reference, mosaics, alignment))
}

fn align(a: &BurstArgs) -> lowlight::Result<()> {
    let cfg = a.config.load()?;
    let (_, _, _, alignment) = aligned(&a.manifest, &cfg)?;
    alignment.write_csv(&a.out)
}

fn merge(a: &MergeArgs) -> lowlight::Result<()> {
    let mut cfg = a.config.load()?;
    a.merge.apply(&mut cfg.merge);
    let (burst, reference, mosaics, alignment) = aligned(&a.manifest, &cfg)?;
    let noise = burst.noise_for(reference);
    let mm = burst_merge::mismatch_maps(&mosaics[reference], &alignment, &noise, &cfg.merge)?;
    let mut merged = burst_merge::merge_fourier(&mosaics, &alignment, &mm, &noise, &cfg.merge).map_err(|e| e.in_stage("merge"))?;
    if cfg.stages.spatial_denoise && !a.no_spatial {
        merged = burst_merge::spatial_denoise(&merged, &noise, &cfg.merge).map_err(|e| e.in_stage("spatial"))?;
    }
    let f = &burst.frames[reference];
    let path = pipeline::write_merged(&a.out, &merged, burst.manifest.cfa, f.exposure_time, f.gain)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn finish(a: &FinishArgs) -> lowlight::Result<()> {
    let mut cfg = a.config.load()?;
    a.ablation.apply(&mut cfg.tone.flags);
    let (meta, mosaic) = pipeline::read_merged(&a.merged)?;
    let illuminant = match &a.illuminant {
        Some(p) => IlluminantEstimate::load(p)?,
        None => pipeline::estimate_illuminant(&mosaic, meta.cfa, meta.exposure_time_s, meta.gain, &Default::default())?,
    };
    let stats = match &a.stats {
        Some(p) => SceneStats::load(p)?,
        None => tonemap::scene_stats(&mosaic, meta.cfa, &illuminant, meta.exposure_time_s, meta.gain, &cfg.tone)?,
    };
    let (img, _) = tonemap::finish(&mosaic, meta.cfa, &illuminant, &stats, &cfg.tone)?;
    img.write_png(&a.out)
}

fn awb_train(a: &AwbTrainArgs) -> lowlight::Result<()> {
    let data = awb::load_dataset(&a.dataset).map_err(|e| e.in_stage("load"))?;
    let calib = a.training.calibration()?;
    let model = awb::train_model(&data, a.loss, calib.as_ref(), &AwbConfig::default(), &a.training.params())?;
    model.save(&a.out)
}

#[derive(Serialize)]
struct EvalTable {
    untrained: Option<awb::EvalReport>,
    trained: Vec<awb::EvalReport>,
}

fn awb_eval(a: &AwbEvalArgs) -> lowlight::Result<()> {
    let data = awb::load_dataset(&a.dataset).map_err(|e| e.in_stage("load"))?;
    let calib = a.training.calibration()?;
    let cfg = AwbConfig::default();
    let params = a.training.params();
    let all = a.loss.is_empty();
    let losses = if all { Loss::ALL.to_vec() } else { a.loss.clone() };
    let untrained = if all {
        Some(awb::cross_validate(&data, None, calib.as_ref(), &cfg, &params)?)
    } else {
        None
    };
    let trained = losses
        .iter()
        .map(|&l| awb::cross_validate(&data, Some(l), calib.as_ref(), &cfg, &params))
        .collect::<lowlight::Result<Vec<_>>>()?;
    eprintln!("{:<14} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "loss", "ang", "ang25", "rep", "rep25", "are", "are25");
    for r in untrained.iter().chain(&trained) {
        eprintln!(
            "{:<14} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            r.loss.map_or("untrained", |l| l.name()),
            r.angular.mean,
            r.angular.worst25,
            r.reproduction.mean,
            r.reproduction.worst25,
            r.are.mean,
            r.are.worst25
        );
    }
    emit(&EvalTable { untrained, trained }, a.out.as_deref())
}

fn awb_predict(a: &AwbPredictArgs) -> lowlight::Result<()> {
    let model = ChromaHistogramModel::load(&a.model)?;
    let calib = a.calibration.as_deref().map(CalibrationMap::load).transpose()?;
    let (thumb, t, g) = match (&a.thumbnail, &a.merged) {
        (Some(p), _) => (awb::read_thumbnail(p)?, a.exposure_time, a.gain),
        (None, Some(p)) => {
            let (meta, mosaic) = pipeline::read_merged(p)?;
            let thumb = awb::thumbnail_from_mosaic(&mosaic, meta.cfa, model.config.thumb_width, model.config.thumb_height)?;
            (thumb, a.exposure_time.or(Some(meta.exposure_time_s)), a.gain.or(Some(meta.gain)))
        }
        (None, None) => unreachable!("clap requires one input"),
    };
    let (t, g) = match (t, g) {
        (Some(t), Some(g)) => (t, g),
        _ => return Err(Error::InvalidParameter("--exposure-time and --gain are required with --thumbnail".into())),
    };
    let est = awb::predict_illuminant(&model, &thumb, t, g, a.iso_ratio, None, calib.as_ref())?;
    emit(&est, a.out.as_deref())
}

fn synth(a: &SynthArgs) -> lowlight::Result<()> {
    if let Some(n) = a.awb_dataset {
        let data = synth_oracle::awb_dataset(n, a.seed, &AwbSynthParams::default());
        return awb::save_dataset(&a.out, &data);
    }
    let path = a.spec.as_deref().expect("clap requires --spec without --awb-dataset");
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: SynthSpec = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let burst = synth_oracle::generate_burst(&spec.scene, &spec.capture)?;
    synth_oracle::write_synthetic(&a.out, &burst)
}

fn run(a: &RunArgs) -> lowlight::Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(n) = cfg.threads {
        // a --threads flag has already sized the pool and wins
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    a.metering.apply(&mut cfg.metering);
    a.merge.apply(&mut cfg.merge);
    cfg.stages.spatial_denoise &= !a.no_spatial;
    cfg.stages.tone &= !a.no_tone;
    a.ablation.apply(&mut cfg.tone.flags);
    if let Some(m) = &a.awb_model {
        cfg.awb.model = Some(m.clone());
    }
    let out = pipeline::run_from_paths(a.stream.as_deref(), &a.capture, &cfg)?;
    pipeline::write_outputs(&a.out, &out, &cfg)?;
    eprintln!(
        "wrote {} ({} frames, reference {})",
        a.out.join(&cfg.outputs.image).display(),
        out.report.frames,
        out.report.reference.index
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> lowlight::Result<()> {
    match &cli.command {
        Command::Meter(a) => meter(a),
        Command::Plan(a) => plan(a),
        Command::Align(a) => align(a),
        Command::Merge(a) => merge(a),
        Command::Finish(a) => finish(a),
        Command::AwbTrain(a) => awb_train(a),
        Command::AwbEval(a) => awb_eval(a),
        Command::AwbPredict(a) => awb_predict(a),
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
