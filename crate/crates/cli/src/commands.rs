use std::path::{Path, PathBuf};

use layerbench_core::annotation::{build_annotations, match_tags, rescale_annotations, AnnotationInputs, Frame, SceneAnnotationSet};
use layerbench_core::calibration::{calibrate_single, calibrate_stereo, rectify, CameraSide, QualityGate, StereoOptions};
use layerbench_core::formats::{self, CalibrationFile, CameraCalibrationRecord, FormatError, GtPlanes};
use layerbench_core::io::write_atomic;
use layerbench_core::metrics::{self, EvalConfig, MetricReport, MetricsError, Sampling, Subset};
use layerbench_core::prediction::{self, BlockMatchConfig, GrayImage, PredictionError};
use layerbench_core::render::{annotations_from_gt, render_gt, render_rgb, RenderConfig};
use layerbench_core::scene::{randomize, RandomizeConfig, SceneSpec};
use layerbench_core::Error;

use super::*;

type Result<T> = std::result::Result<T, Error>;

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    write_atomic(path, contents.as_ref()).map_err(|e| Error::io(path, e))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| FormatError::Json { line: e.line(), message: format!("{}: {e}", path.display()) }.into())
}

fn to_json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into())
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Calibrate(a) => calibrate(a),
        Command::Rectify(a) => rectify_cmd(a),
        Command::Annotate(a) => annotate(a),
        Command::Randomize(a) => randomize_cmd(a, seed),
        Command::Render(a) => render(a),
        Command::PredictOracle(a) => predict_oracle(a, seed),
        Command::PredictBlockmatch(a) => blockmatch(a),
        Command::Prune(a) => prune(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
    }
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let obs = formats::parse_observations(&read_text(&a.obs)?)?;
    let (left, right): (Vec<_>, Vec<_>) = obs.into_iter().partition(|o| o.camera == CameraSide::Left);
    let single = |views: &[_]| -> Result<Option<(CameraCalibrationRecord, _)>> {
        if views.is_empty() {
            return Ok(None);
        }
        let cal = calibrate_single(views)?;
        log::info!("{} views, rms {:.4} px", views.len(), cal.rms_error);
        Ok(Some((CameraCalibrationRecord { intrinsics: cal.intrinsics, rms_error: cal.rms_error, views: views.len() }, cal)))
    };
    let l = single(&left)?;
    let r = single(&right)?;
    let mut file = CalibrationFile { left: l.as_ref().map(|x| x.0.clone()), right: r.as_ref().map(|x| x.0.clone()), ..Default::default() };
    if a.stereo {
        let (Some((lk, _)), Some((rk, _))) = (&l, &r) else {
            return Err(FormatError::InvalidContent("stereo calibration needs observations from both cameras".into()).into());
        };
        let size = a.image_size.expect("clap enforces --image-size with --stereo");
        let st = calibrate_stereo(&left, &right, &lk.intrinsics, &rk.intrinsics, size, &StereoOptions::default())?;
        log::info!("baseline {:.6} m, rms {:.4} px", st.rig.baseline(), st.rms_error);
        file.rig = Some(st.rig);
        file.stereo_rms_error = Some(st.rms_error);
    }
    write(&a.out, to_json(&file))
}

fn load_rig(path: &Path) -> Result<layerbench_core::geometry::StereoRig> {
    formats::parse_calibration(&read_text(path)?)?
        .rig
        .ok_or_else(|| FormatError::InvalidContent(format!("{}: no stereo rig; calibrate with --stereo", path.display())).into())
}

fn rectify_cmd(a: RectifyArgs) -> Result<()> {
    let map = rectify(&load_rig(&a.calib)?)?;
    write(&a.out, to_json(&map))
}

fn annotate(a: AnnotateArgs) -> Result<()> {
    let detections = formats::parse_detections(&read_text(&a.detections)?)?;
    let rig = load_rig(&a.calib)?;
    let labels = formats::parse_labels(&read_text(&a.labels)?)?;
    let map = rectify(&rig)?;
    let matched = match_tags(&detections.detections)?;
    let scene_id = a.scene_id.unwrap_or_else(|| stem(&a.out));
    let inputs = AnnotationInputs {
        scene_id: &scene_id,
        rig: &rig,
        rectify_map: &map,
        labels: &labels,
        gate: QualityGate { threshold: a.gate },
        image_sizes: &detections.image_sizes,
    };
    let (mut set, stats) = build_annotations(&matched, &inputs)?;
    log::info!("{stats:?}");
    if stats.calibration_flags > 0 {
        log::warn!("{} corners triangulate inconsistently; check the calibration", stats.calibration_flags);
    }
    if let Some(f) = a.scale {
        set = rescale_annotations(&set, f)?;
    }
    write(&a.out, formats::encode_annotations(&set))
}

fn randomize_cmd(a: RandomizeArgs, seed: u64) -> Result<()> {
    let base: SceneSpec = parse_json(&a.base)?;
    let cfg: RandomizeConfig = match &a.config {
        Some(p) => parse_json(p)?,
        None => RandomizeConfig::default(),
    };
    write(&a.out, randomize(&base, &cfg, seed)?.to_json() + "\n")
}

fn render(a: RenderArgs) -> Result<()> {
    let mut scene: SceneSpec = parse_json(&a.scene)?;
    if let Some(size) = a.size {
        scene = scene.with_image_size(size);
    }
    let cfg = RenderConfig::default();
    let maps = render_gt(&scene, &cfg)?;
    write(&a.out, formats::encode_mlgt(&GtPlanes::from_maps(&maps)))?;
    for (path, frame) in [(&a.rgb, Frame::T0), (&a.rgb_t1, Frame::T1)] {
        if let Some(path) = path {
            write(path, formats::encode_ppm(&render_rgb(&scene, frame, &cfg)?))?;
        }
    }
    if let Some(path) = &a.ann {
        write(path, formats::encode_annotations(&annotations_from_gt(&scene, &maps, &stem(path))))?;
    }
    Ok(())
}

fn predict_oracle(a: PredictOracleArgs, seed: u64) -> Result<()> {
    if !(a.sigma >= 0.0 && a.sigma.is_finite()) {
        return Err(PredictionError::Invalid(format!("noise sigma must be ≥ 0, got {}", a.sigma)).into());
    }
    let gt = formats::decode_mlgt(&read_bytes(&a.gt)?)?;
    write(&a.out, formats::encode_mlfl(&prediction::oracle_predictor(&gt, a.sigma, seed, a.layers)))
}

fn gray(path: &Path) -> Result<GrayImage> {
    let img = formats::decode_ppm(&read_bytes(path)?)?;
    Ok(GrayImage::new(img.width, img.height, img.to_gray()))
}

fn blockmatch(a: BlockmatchArgs) -> Result<()> {
    let cfg = BlockMatchConfig { window_radius: a.window_radius, levels: a.levels, ..Default::default() };
    let res = prediction::block_match_flow(&gray(&a.img0)?, &gray(&a.img1)?, &cfg)?;
    let low = res.low_confidence.iter().filter(|&&c| c).count();
    log::info!("{low} low-confidence pixels");
    write(&a.out, formats::encode_mlfl(&res.flow))
}

fn prune(a: PruneArgs) -> Result<()> {
    if !(a.delta >= 0.0 && a.delta.is_finite()) {
        return Err(PredictionError::Invalid(format!("delta must be ≥ 0, got {}", a.delta)).into());
    }
    let raw = formats::decode_mlfl(&read_bytes(&a.input)?)?;
    write(&a.out, formats::encode_mlfl(&prediction::prune(&raw, a.delta)))
}

fn annotation_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ann"))
        .collect();
    files.sort();
    Ok(files)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = EvalConfig {
        taus: metrics::parse_taus(&a.taus)?,
        sampling: match a.sampling {
            SamplingArg::Bilinear => Sampling::Bilinear,
            SamplingArg::Nearest => Sampling::Nearest,
        },
        subset: match a.subset {
            SubsetArg::First => Subset::First,
            SubsetArg::Last => Subset::Last,
            SubsetArg::All => Subset::All,
        },
        ..Default::default()
    };
    cfg.validate()?;
    let mut scenes: Vec<(SceneAnnotationSet, prediction::MultiLayerPrediction)> = Vec::new();
    for path in annotation_files(&a.ann)? {
        let set = formats::decode_annotations(&read_text(&path)?)?;
        let pred_path = a.pred.join(format!("{}.mlfl", stem(&path)));
        let mut pred = formats::decode_mlfl(&read_bytes(&pred_path)?)?;
        if a.workaround == Some(Workaround::Single) {
            pred = metrics::workaround_for(&pred, &[&metrics::apply_subset(&set, cfg.subset)]);
        }
        scenes.push((set, pred));
    }
    if scenes.is_empty() {
        return Err(MetricsError::EmptyDataset.into());
    }
    let refs: Vec<_> = scenes.iter().map(|(s, p)| (s, p)).collect();
    let report = metrics::evaluate(&refs, &cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write(&a.out.join("report.csv"), report.render_csv())?;
    write(&a.out.join("report.txt"), report.render_text())?;
    write(&a.out.join("report.json"), to_json(&report))?;
    print!("{}", report.render_text());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let report: MetricReport = parse_json(&a.input)?;
    let text = match a.format {
        ReportFormat::Text => report.render_text(),
        ReportFormat::Csv => report.render_csv(),
    };
    match &a.out {
        Some(path) => write(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
