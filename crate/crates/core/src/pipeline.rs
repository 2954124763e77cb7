//! End-to-end orchestration: meter, plan, align, merge, white balance, finish.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::awb::{self, CalibrationMap, ChromaHistogramModel, IlluminantEstimate};
use crate::burst_align::{self, AlignParams, ReferenceChoice};
use crate::burst_merge::{self, MergeParams, MergedRaw};
use crate::error::{Error, Result};
use crate::motion_metering::{self, CapturePlan, Gmm, MeteringParams, Stability};
use crate::raw_model::{self, Burst, Cfa, LinearImage};
use crate::tonemap::{self, SceneStats, SrgbImage, ToneDecisions, ToneFlags, ToneParams};

/// Stage switches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub spatial_denoise: bool,
    /// Night tone mapping; when off the merged image is rendered with white
    /// balance and sRGB encoding only.
    pub tone: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles {
            spatial_denoise: true,
            tone: true,
        }
    }
}

/// White-balance inputs. Without a model the gray-world estimate is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AwbSection {
    pub model: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
}

/// File names written by `run`, relative to the output directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputNames {
    pub image: PathBuf,
    pub report: PathBuf,
    pub timings: PathBuf,
}

impl Default for OutputNames {
    fn default() -> Self {
        OutputNames {
            image: "final.png".into(),
            report: "report.json".into(),
            timings: "timings.json".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub metering: MeteringParams,
    pub align: AlignParams,
    pub merge: MergeParams,
    pub awb: AwbSection,
    pub tone: ToneParams,
    pub stages: StageToggles,
    pub outputs: OutputNames,
    /// Used when the metering manifest carries no target sensitivity.
    pub target_sensitivity_s: Option<f64>,
    /// Worker cap; `None` uses every core.
    pub threads: Option<usize>,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.metering.validate()?;
        self.align.validate()?;
        self.merge.validate()?;
        self.tone.validate()?;
        if self.threads == Some(0) {
            return Err(Error::InvalidParameter("threads must be positive".into()));
        }
        Ok(())
    }

    /// Reads a JSON config; unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const REPORT_VERSION: u32 = 1;

/// What metering saw; present when a metering stream was supplied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeteringSummary {
    pub samples: usize,
    pub usable_samples: usize,
    pub gmm: Option<Gmm<f64>>,
    pub stability: Stability,
}

/// Deterministic run report. Wall-clock times live in [`StageTiming`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<CapturePlan>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metering: Option<MeteringSummary>,
    pub reference: ReferenceChoice,
    pub tile_size: usize,
    pub reference_snr: f64,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Mean mismatch per frame.
    pub mean_mismatch: Vec<f64>,
    pub max_f: f64,
    pub mean_n_eff: f64,
    /// N_eff histogram over `frames` equal bins spanning [1, frames].
    pub n_eff_histogram: Vec<usize>,
    pub illuminant: IlluminantEstimate,
    pub scene: SceneStats,
    /// Absent when tone mapping is disabled.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tone: Option<ToneDecisions>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

pub struct PipelineOutput {
    pub image: SrgbImage,
    pub merged: MergedRaw<f64>,
    pub report: PipelineReport,
    pub timings: Vec<StageTiming>,
}

struct Timer(Vec<StageTiming>);

impl Timer {
    fn run<R>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<R>) -> Result<R> {
        let t0 = Instant::now();
        let r = f().map_err(|e| e.in_stage(stage));
        self.0.push(StageTiming {
            stage: stage.to_string(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        r
    }
}

/// Pre-loaded white-balance resources.
#[derive(Clone, Debug, Default)]
pub struct AwbResources {
    pub model: Option<ChromaHistogramModel>,
    pub calibration: Option<CalibrationMap>,
}

impl AwbResources {
    pub fn load(section: &AwbSection) -> Result<Self> {
        Ok(AwbResources {
            model: section.model.as_deref().map(ChromaHistogramModel::load).transpose()?,
            calibration: section.calibration.as_deref().map(CalibrationMap::load).transpose()?,
        })
    }
}

/// Illuminant for a merged mosaic: the model when present, else gray world.
pub fn estimate_illuminant(
    mosaic: &LinearImage<f64>,
    cfa: Cfa,
    exposure_time: f64,
    gain: f64,
    resources: &AwbResources,
) -> Result<IlluminantEstimate> {
    let (tw, th) = resources
        .model
        .as_ref()
        .map_or(((mosaic.width / 2).min(64), (mosaic.height / 2).min(48)), |m| {
            (m.config.thumb_width, m.config.thumb_height)
        });
    let thumb = awb::thumbnail_from_mosaic(mosaic, cfa, tw, th)?;
    match &resources.model {
        Some(m) => awb::predict_illuminant(m, &thumb, exposure_time, gain, 1.0, None, resources.calibration.as_ref()),
        None => awb::gray_world(&thumb),
    }
}

/// Demosaic, white balance and sRGB encoding with no tone adjustments.
pub fn plain_rendition(mosaic: &LinearImage<f64>, cfa: Cfa, illuminant: &IlluminantEstimate) -> Result<SrgbImage> {
    let params = ToneParams {
        base_gain_max: 1.0,
        fusion_sigma: 1.0,
        contrast: 0.0,
        flags: ToneFlags::none(),
        ..ToneParams::default()
    };
    let stats = SceneStats::new(params.lux_max, 1.0)?;
    Ok(tonemap::finish(mosaic, cfa, illuminant, &stats, &params)?.0)
}

/// Runs every stage. `metering` is the pre-shutter stream used for the
/// capture plan; the capture burst itself is merged.
pub fn run_pipeline(
    metering: Option<&Burst>,
    capture: &Burst,
    config: &PipelineConfig,
    resources: &AwbResources,
) -> Result<PipelineOutput> {
    config.validate()?;
    let mut timer = Timer(Vec::new());
    let (plan, metering_summary) = match metering {
        Some(stream) => {
            let report = timer.run("meter", || {
                let target = stream
                    .manifest
                    .target_sensitivity_s
                    .or(config.target_sensitivity_s)
                    .ok_or_else(|| Error::InvalidParameter("no target sensitivity in the manifest or config".into()))?;
                let weights = stream
                    .manifest
                    .weight_map
                    .as_deref()
                    .map(raw_model::load_weight_map)
                    .transpose()?;
                motion_metering::meter_stream(stream, weights.as_ref(), target, &config.metering)
            })?;
            let summary = MeteringSummary {
                samples: report.samples.len(),
                usable_samples: report.samples.iter().filter(|s| !s.no_signal).count(),
                gmm: report.gmm,
                stability: report.stability,
            };
            (Some(report.plan), Some(summary))
        }
        None => (None, None),
    };

    let cfa = capture.manifest.cfa;
    let (reference, mosaics) = timer.run("reference", || {
        let pool = config.metering.reference_pool_k;
        // reference choice only needs relative sharpness, so unnormalized frames suffice
        let raw: Vec<LinearImage<f64>> = capture.frames.iter().map(raw_model::normalize).collect();
        let choice = burst_align::select_reference(&raw, cfa, pool)?;
        let mosaics = capture.normalized::<f64>(choice.index);
        Ok((choice, mosaics))
    })?;
    let noise = capture.noise_for(reference.index);
    let alignment = timer.run("align", || {
        burst_align::align_burst(&mosaics, cfa, reference.index, &noise, &config.align)
    })?;
    let (mismatch, merged) = timer.run("merge", || {
        let mm = burst_merge::mismatch_maps(&mosaics[reference.index], &alignment, &noise, &config.merge)?;
        let merged = burst_merge::merge_fourier(&mosaics, &alignment, &mm, &noise, &config.merge)?;
        Ok((mm, merged))
    })?;
    let merged = if config.stages.spatial_denoise {
        timer.run("spatial", || burst_merge::spatial_denoise(&merged, &noise, &config.merge))?
    } else {
        merged
    };
    let ref_frame = &capture.frames[reference.index];
    let illuminant = timer.run("awb", || {
        estimate_illuminant(&merged.mosaic, cfa, ref_frame.exposure_time, ref_frame.gain, resources)
    })?;
    let (image, scene, tone) = timer.run("finish", || {
        let scene = tonemap::scene_stats(
            &merged.mosaic,
            cfa,
            &illuminant,
            ref_frame.exposure_time,
            ref_frame.gain,
            &config.tone,
        )?;
        if config.stages.tone {
            let (img, dec) = tonemap::finish(&merged.mosaic, cfa, &illuminant, &scene, &config.tone)?;
            Ok((img, scene, Some(dec)))
        } else {
            Ok((plain_rendition(&merged.mosaic, cfa, &illuminant)?, scene, None))
        }
    })?;

    let n = merged.n_eff.len().max(1) as f64;
    let report = PipelineReport {
        version: REPORT_VERSION,
        width: capture.width(),
        height: capture.height(),
        frames: capture.len(),
        plan,
        metering: metering_summary,
        reference,
        tile_size: alignment.tile_size,
        reference_snr: alignment.reference_snr,
        tiles_x: alignment.tiles_x,
        tiles_y: alignment.tiles_y,
        mean_mismatch: mismatch.frame_means(),
        max_f: mismatch.max_f(),
        mean_n_eff: merged.n_eff.iter().sum::<f64>() / n,
        n_eff_histogram: merged.n_eff_histogram(capture.len()),
        illuminant,
        scene,
        tone,
    };
    Ok(PipelineOutput {
        image,
        merged,
        report,
        timings: timer.0,
    })
}

/// Loads manifests (stage `load`) and runs the pipeline.
pub fn run_from_paths(metering: Option<&Path>, capture: &Path, config: &PipelineConfig) -> Result<PipelineOutput> {
    let stream = metering
        .map(raw_model::load_burst)
        .transpose()
        .map_err(|e| e.in_stage("load"))?;
    let burst = raw_model::load_burst(capture).map_err(|e| e.in_stage("load"))?;
    let resources = AwbResources::load(&config.awb).map_err(|e| e.in_stage("load"))?;
    run_pipeline(stream.as_ref(), &burst, config, &resources)
}

/// Writes the image, report and timings named in `config.outputs`.
pub fn write_outputs(dir: &Path, out: &PipelineOutput, config: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.image.write_png(&dir.join(&config.outputs.image))?;
    crate::synth_oracle::write_json(&dir.join(&config.outputs.report), &out.report)?;
    crate::synth_oracle::write_json(&dir.join(&config.outputs.timings), &out.timings)
}

/// Side information stored next to a merged mosaic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergedMeta {
    pub mosaic: PathBuf,
    pub cfa: Cfa,
    pub exposure_time_s: f64,
    pub gain: f64,
    pub frames: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub n_eff: Vec<f64>,
}

/// Merged mosaic as a 16-bit PGM (value x 65535) plus its metadata JSON.
pub fn write_merged(
    dir: &Path,
    merged: &MergedRaw<f64>,
    cfa: Cfa,
    exposure_time_s: f64,
    gain: f64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = &merged.mosaic;
    let data: Vec<u16> = m.data.iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    crate::pnm::write_gray16(&dir.join("merged.pgm"), m.width, m.height, &data)?;
    crate::pnm::write_gray8(
        &dir.join("n_eff.pgm"),
        merged.tiles_x,
        merged.tiles_y,
        &merged.n_eff_gray8(),
    )?;
    let meta = MergedMeta {
        mosaic: "merged.pgm".into(),
        cfa,
        exposure_time_s,
        gain,
        frames: merged.frames,
        tiles_x: merged.tiles_x,
        tiles_y: merged.tiles_y,
        n_eff: merged.n_eff.clone(),
    };
    let path = dir.join("merged.json");
    crate::synth_oracle::write_json(&path, &meta)?;
    Ok(path)
}

pub fn read_merged(meta_path: &Path) -> Result<(MergedMeta, LinearImage<f64>)> {
    let text = std::fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
    let meta: MergedMeta = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: meta_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = meta_path.parent().unwrap_or_else(|| Path::new("."));
    let img = crate::pnm::read(&base.join(&meta.mosaic))?;
    if img.channels != 1 {
        return Err(Error::CorruptHeader {
            path: base.join(&meta.mosaic),
            reason: "merged mosaic must be a PGM".into(),
        });
    }
    let s = 1.0 / img.maxval as f64;
    let mosaic = LinearImage::from_vec(img.width, img.height, 1, img.data.iter().map(|&v| v as f64 * s).collect())?;
    Ok((meta, mosaic))
}
