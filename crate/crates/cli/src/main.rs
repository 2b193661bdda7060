use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cmk3d::calibration::{
    calibrate, ground_grid_rms, load_observations, render_grid_overlay, report_json, write_observations, CalibrationConfig,
    CalibrationResult,
};
use cmk3d::detection_fusion::{fuse_frames, load_detections, write_detections, FusionWeights};
use cmk3d::geometry::CameraModel;
use cmk3d::harness::scenario::{
    read_vehicle_gt, simulate_to_dir, RandomPedestrians, ScenarioConfig, Simulator, VehicleSpec,
};
use cmk3d::harness::{evaluate_mot, load_mot_csv, MotBox, MotReport, Pipeline, PipelineConfig};
use cmk3d::image::RgbImage;
use cmk3d::segmentation::connected_components;
use cmk3d::tracking::{save_tracks, TrackRecord};

/// Grid used to score a calibration against the true camera.
const GRID_EXTENT_M: f64 = 30.0;
const GRID_STEP_M: f64 = 1.0;

#[derive(Parser)]
#[command(name = "cmk3d", version, about = "Vehicle tracking with constrained multiple kernels on synthetic traffic scenes")]
struct Cli {
    /// Seed for every random stream (overrides the seed in a scenario file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML configuration: a scenario for `simulate` and `demo`, pipeline
    /// settings for `segment` and `track`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where outputs are written (defaults to the current directory).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene with ground truth.
    Simulate,
    /// Calibrate the camera from pedestrian head and foot observations.
    Calibrate(CalibrateArgs),
    /// Background subtraction and blob detection over a simulated scene.
    Segment(SceneArgs),
    /// Track vehicles through a simulated scene.
    Track(TrackArgs),
    /// Fuse two detectors' outputs with fitted weights.
    Fuse(FuseArgs),
    /// CLEAR MOT metrics of a hypothesis against ground truth.
    Evaluate(EvaluateArgs),
    /// Simulate, calibrate, segment, track and evaluate in one run.
    Demo(DemoArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    /// CSV with `frame_id,track_id,head_u,head_v,foot_u,foot_v`.
    observations: PathBuf,
    /// Image size as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_size)]
    image_size: (usize, usize),
    /// Ground-truth camera file; adds focal and grid errors to the report.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// PPM frame to draw the ground grid on (a black canvas otherwise).
    #[arg(long)]
    frame: Option<PathBuf>,
}

#[derive(Args)]
struct SceneArgs {
    /// Directory written by `simulate`.
    scene: PathBuf,
}

#[derive(Args)]
struct TrackArgs {
    /// Directory written by `simulate`.
    scene: PathBuf,
    /// Camera file (defaults to the scene's true camera).
    #[arg(long)]
    camera: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    /// Detections of detector A.
    #[arg(long)]
    a: PathBuf,
    /// Detections of detector B.
    #[arg(long)]
    b: PathBuf,
    /// Weights file (10 numbers).
    #[arg(long)]
    weights: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Ground-truth boxes (`frame,id,bb_left,bb_top,bb_width,bb_height`).
    gt: PathBuf,
    /// Hypothesis boxes, same columns.
    hyp: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
}

#[derive(Args)]
struct DemoArgs {
    /// Pipeline settings for the tracking stage.
    #[arg(long)]
    pipeline: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Data(String),
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w: usize = w.parse().map_err(|_| "bad width")?;
    let h: usize = h.parse().map_err(|_| "bad height")?;
    if w < 2 || h < 2 {
        return Err("image must be at least 2x2".into());
    }
    Ok((w, h))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {}", m.replace('\n', " "));
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let out = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    match &cli.command {
        Command::Simulate => {
            let cfg = scenario(&cli)?;
            std::fs::create_dir_all(&out).map_err(|e| data(format!("{}: {e}", out.display())))?;
            let s = simulate_to_dir(&cfg, &out).map_err(data)?;
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
            Ok(())
        }
        Command::Calibrate(a) => {
            if cli.config.is_some() {
                return Err(CliError::Usage("calibrate takes no --config".into()));
            }
            let obs = load_observations(&a.observations).map_err(data)?;
            let truth = a.truth.as_deref().map(CameraModel::load).transpose().map_err(data)?;
            let canvas = match &a.frame {
                Some(p) => load_frame(p)?,
                None => RgbImage::filled(a.image_size.0, a.image_size.1, [0, 0, 0]),
            };
            if (canvas.width, canvas.height) != a.image_size {
                return Err(data(format!(
                    "frame is {}x{}, expected {}x{}",
                    canvas.width, canvas.height, a.image_size.0, a.image_size.1
                )));
            }
            let r = calibrate(&obs, &CalibrationConfig::new(a.image_size, cli.seed.unwrap_or(0))).map_err(data)?;
            create(&out)?;
            r.camera.save(&out.join("camera.txt")).map_err(data)?;
            write(&out.join("report.json"), &report_json(&r))?;
            let overlay = render_grid_overlay(&canvas, &r.camera, GRID_EXTENT_M, GRID_STEP_M, [0, 255, 0]);
            overlay.save(&out.join("grid.ppm")).map_err(data)?;
            let report = calibration_report(&r, truth.as_ref(), a.image_size);
            write(&out.join("calibration.json"), &pretty(&report))?;
            println!("{}", pretty(&report));
            Ok(())
        }
        Command::Segment(a) => {
            let cfg = pipeline_config(cli.config.as_deref())?;
            let (frames, background) = scene_frames(&a.scene)?;
            let camera = CameraModel::load(&a.scene.join("camera.txt")).map_err(data)?;
            let mut p = Pipeline::new(camera, &background, cfg).map_err(data)?;
            p.cfg.mast = false;
            create(&out.join("masks"))?;
            let mut rows = String::from("frame,bb_left,bb_top,bb_width,bb_height,area\n");
            for (f, path) in frames.iter().enumerate() {
                let (mask, _) = p.segment(&load_frame(path)?).map_err(data)?;
                mask.save(&out.join("masks").join(format!("{f:06}.pgm"))).map_err(data)?;
                for c in connected_components(&mask, p.cfg.min_blob_area) {
                    let b = c.bbox;
                    rows.push_str(&format!("{f},{},{},{},{},{}\n", b.left, b.top, b.width, b.height, c.area));
                }
            }
            write(&out.join("blobs.csv"), &rows)?;
            println!("segmented {} frames", frames.len());
            Ok(())
        }
        Command::Track(a) => {
            let cfg = pipeline_config(cli.config.as_deref())?;
            let camera = CameraModel::load(&a.camera.clone().unwrap_or_else(|| a.scene.join("camera.txt"))).map_err(data)?;
            let records = track_scene(&a.scene, camera, cfg)?;
            create(&out)?;
            save_tracks(&out.join("tracks.csv"), &records).map_err(data)?;
            println!("{} track records over {} ids", records.len(), distinct_ids(&records));
            Ok(())
        }
        Command::Fuse(a) => {
            let da = load_detections(&a.a).map_err(data)?;
            let db = load_detections(&a.b).map_err(data)?;
            let w = FusionWeights::load(&a.weights).map_err(data)?;
            let fused = fuse_frames(&da, &db, &w).map_err(data)?;
            create(&out)?;
            let p = out.join("fused.csv");
            let f = std::fs::File::create(&p).map_err(|e| data(format!("{}: {e}", p.display())))?;
            write_detections(f, &fused).map_err(data)?;
            println!("{} fused detections", fused.len());
            Ok(())
        }
        Command::Evaluate(a) => {
            if !(a.iou > 0.0 && a.iou < 1.0) {
                return Err(CliError::Usage("--iou must lie in (0, 1)".into()));
            }
            let gt = load_mot_csv(&a.gt).map_err(data)?;
            let hyp = load_mot_csv(&a.hyp).map_err(data)?;
            let r = evaluate_mot(&gt, &hyp, a.iou);
            if let Some(dir) = &cli.out_dir {
                create(dir)?;
                write(&dir.join("report.json"), &(r.to_json() + "\n"))?;
            }
            println!("{}", r.to_json());
            eprintln!("{}", r.summary());
            Ok(())
        }
        Command::Demo(a) => demo(&cli, &out, a.pipeline.as_deref()),
    }
}

fn create(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| data(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json serializes") + "\n"
}

fn scenario(cli: &Cli) -> Result<ScenarioConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ScenarioConfig::load(p).map_err(data)?,
        None => demo_scenario(0),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn pipeline_config(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| data(format!("{}: {e}", p.display())))?;
            PipelineConfig::from_toml(&text).map_err(data)
        }
    }
}

/// Sorted `.ppm` files of a directory.
fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rd = std::fs::read_dir(dir).map_err(|e| data(format!("{}: {e}", dir.display())))?;
    let mut v: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "ppm")).collect();
    v.sort();
    Ok(v)
}

fn load_frame(path: &Path) -> Result<RgbImage, CliError> {
    RgbImage::load(path).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn scene_frames(scene: &Path) -> Result<(Vec<PathBuf>, Vec<RgbImage>), CliError> {
    let frames = ppm_files(&scene.join("frames"))?;
    let background = ppm_files(&scene.join("background"))?.iter().map(|p| load_frame(p)).collect::<Result<Vec<_>, _>>()?;
    if background.is_empty() {
        return Err(data(format!("{}: no background frames", scene.display())));
    }
    Ok((frames, background))
}

fn track_scene(scene: &Path, camera: CameraModel, cfg: PipelineConfig) -> Result<Vec<TrackRecord>, CliError> {
    let (frames, background) = scene_frames(scene)?;
    let mut p = Pipeline::new(camera, &background, cfg).map_err(data)?;
    let mut out = Vec::new();
    for path in &frames {
        out.extend(p.step(&load_frame(path)?).map_err(data)?.records);
    }
    Ok(out)
}

fn distinct_ids(records: &[TrackRecord]) -> usize {
    records.iter().map(|r| r.id).collect::<std::collections::BTreeSet<_>>().len()
}

fn calibration_report(r: &CalibrationResult, truth: Option<&CameraModel>, size: (usize, usize)) -> serde_json::Value {
    let mut v = json!({
        "focal": r.camera.fx,
        "principal": [r.camera.cx, r.camera.cy],
        "height_std": r.height_std,
        "reproj_error": r.reproj_error,
        "inlier_fraction": r.vanishing.inlier_fraction,
        "tracks": r.per_track_heights.len(),
    });
    if let Some(t) = truth {
        let g = ground_grid_rms(t, &r.camera, size, GRID_EXTENT_M, GRID_STEP_M);
        v["focal_relative_error"] = json!((r.camera.fx - t.fx).abs() / t.fx);
        v["grid_rms_px"] = json!(g.rms);
        v["grid_points"] = json!(g.points);
    }
    v
}

/// Two vehicles crossing the view, plus pedestrians for calibration.
fn demo_scenario(seed: u64) -> ScenarioConfig {
    let mut c = ScenarioConfig::empty(seed);
    c.frames = 30;
    c.pixel_noise = 2.0;
    c.head_foot_jitter = 1.0;
    let vehicle = |t: &str, x: f64, y: f64, heading: f64, chroma: [f64; 2]| VehicleSpec {
        vehicle_type: t.into(),
        shape: None,
        start: [x, y],
        heading_deg: heading,
        speed: 3.0,
        turn_rate_deg: 0.0,
        chroma: Some(chroma),
        first_frame: 0,
        last_frame: None,
    };
    c.vehicles.push(vehicle("suv", -4.0, -1.5, 0.0, [160.0, 110.0]));
    c.vehicles.push(vehicle("sedan", 5.0, 2.0, 180.0, [100.0, 170.0]));
    c.random_pedestrians = Some(RandomPedestrians { count: 12, heights: vec![1.6, 1.7, 1.8], speed: 1.2 });
    c
}

/// Frames of pedestrian observations gathered for calibration.
const CALIBRATION_FRAMES: usize = 200;

/// The scenario's pedestrians walk alone for [`CALIBRATION_FRAMES`] to
/// calibrate the camera; its vehicles are then rendered without them and
/// tracked with the calibrated camera.
fn demo(cli: &Cli, out: &Path, pipeline: Option<&Path>) -> Result<(), CliError> {
    let cfg = scenario(cli)?;
    let pcfg = pipeline_config(pipeline)?;
    let size = (cfg.width, cfg.height);
    let truth = cfg.camera().map_err(data)?;

    let mut walkers = cfg.clone();
    walkers.vehicles.clear();
    walkers.occluders.clear();
    walkers.frames = CALIBRATION_FRAMES;
    let obs = Simulator::new(walkers).map_err(data)?.observations();
    let obs_path = out.join("observations.csv");
    create(out)?;
    let f = std::fs::File::create(&obs_path).map_err(|e| data(format!("{}: {e}", obs_path.display())))?;
    write_observations(std::io::BufWriter::new(f), &obs).map_err(data)?;
    let cal = calibrate(&obs, &CalibrationConfig::new(size, cfg.seed)).map_err(data)?;
    cal.camera.save(&out.join("camera_calibrated.txt")).map_err(data)?;
    let cal_report = calibration_report(&cal, Some(&truth), size);

    let mut traffic = cfg.clone();
    traffic.pedestrians.clear();
    traffic.random_pedestrians = None;
    let sim_dir = out.join("scene");
    create(&sim_dir)?;
    let summary = simulate_to_dir(&traffic, &sim_dir).map_err(data)?;

    let records = track_scene(&sim_dir, cal.camera.clone(), pcfg.clone())?;
    save_tracks(&out.join("tracks.csv"), &records).map_err(data)?;

    let gt: Vec<MotBox> = read_vehicle_gt(&sim_dir.join("gt_vehicles.csv"))
        .map_err(data)?
        .iter()
        .map(|v| MotBox { frame: v.frame, id: v.id, bbox: v.bbox() })
        .collect();
    let hyp: Vec<MotBox> = records.iter().map(|r| MotBox { frame: r.frame, id: r.id, bbox: r.bbox() }).collect();
    let report: MotReport = evaluate_mot(&gt, &hyp, 0.5);
    write(&out.join("report.json"), &(report.to_json() + "\n"))?;

    let manifest = json!({
        "tool": "cmk3d",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "inputs": {
            "scenario": cli.config.as_ref().map(|p| p.display().to_string()),
            "pipeline": pipeline.map(|p| p.display().to_string()),
            "resolved_scenario": "scene/scenario.toml",
        },
        "outputs": ["observations.csv", "scene/", "camera_calibrated.txt", "tracks.csv", "report.json"],
        "simulation": summary,
        "calibration": cal_report,
        "tracking": { "records": records.len(), "ids": distinct_ids(&records), "mode": pcfg.tracker.mode },
        "metrics": serde_json::to_value(&report).expect("report serializes"),
    });
    write(&out.join("manifest.json"), &pretty(&manifest))?;
    println!("{}", report.to_json());
    eprintln!("{}", report.summary());
    Ok(())
}
