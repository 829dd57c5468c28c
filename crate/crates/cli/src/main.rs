use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sanerf_cli::{router, Session, SessionOptions};
use sanerf_core::checkpoint::Checkpoint;
use sanerf_core::config::TrainConfig;
use sanerf_core::mesh::{extract_mesh, write_obj, write_ply, SIGMA_THRESHOLD};
use sanerf_core::radiance::{evaluate_psnr, train_nerf, RadianceField};
use sanerf_core::scene::{Dataset, SceneSpec};
use sanerf_core::semantic::SemanticField;
use sanerf_core::teacher::{Teacher, TeacherKind, TeacherSpec};
use sanerf_core::trainer::{
    benchmark_inference, calibrate_prompts, evaluate_iou, metrics_row, train_semantic, EvalReport, Protocol,
    METRICS_HEADER, STAGE_ROWS,
};
use sanerf_core::Error;
use serde_json::json;

/// Exit status when the field has no surface at the requested level.
const EXIT_EMPTY_SURFACE: u8 = 3;

#[derive(Parser)]
#[command(name = "sanerf", version, about = "Radiance fields with imitated semantic features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneKind {
    TwoObject,
    OneSphere,
    Vacuum,
}

#[derive(Clone, Copy, ValueEnum)]
enum TeacherArg {
    Single,
    Multi,
}

#[derive(Subcommand)]
enum Command {
    /// Write a built-in scene with the standard camera rig.
    MakeScene {
        #[arg(long, value_enum, default_value = "two-object")]
        scene: SceneKind,
        /// Side of the captured images in pixels.
        #[arg(long, default_value_t = 64)]
        size: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the radiance field to a scene's training views.
    TrainNerf {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill teacher features into a semantic grid on a trained checkpoint.
    TrainFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        teacher: TeacherArg,
        #[arg(long, default_value_t = 0)]
        teacher_seed: u64,
        /// Defaults to the configuration stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to overwriting the input checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV of per-evaluation metrics.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Marching cubes on the radiance field; `.ply` outputs PLY, anything else OBJ.
    ExtractMesh {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 128)]
        resolution: usize,
        #[arg(long, default_value_t = SIGMA_THRESHOLD)]
        sigma: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out PSNR, feature MSE and mask IoU against the teacher.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-stage inference timing of the teacher and imitated paths.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        cost_multiplier: u32,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Image side; defaults to the training image size.
        #[arg(long)]
        resolution: Option<u32>,
    },
    /// Serve the interactive segmentation API.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = "SANERF_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = 96)]
        mesh_resolution: usize,
        #[arg(long)]
        no_mesh: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::EmptySurface(_) => ExitCode::from(EXIT_EMPTY_SURFACE),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(command: Command) -> sanerf_core::Result<()> {
    match command {
        Command::MakeScene { scene, size, out } => {
            let spec = match scene {
                SceneKind::TwoObject => SceneSpec::two_object(),
                SceneKind::OneSphere => SceneSpec::one_sphere(),
                SceneKind::Vacuum => SceneSpec::vacuum(),
            };
            Dataset::standard(spec, size, size)?.save(&out)?;
            log::info!("wrote {}", out.display());
            Ok(())
        }
        Command::TrainNerf { scene, config, out } => {
            let ds = Dataset::load(&scene)?;
            let cfg = load_config(config.as_deref(), None)?;
            let start = Instant::now();
            let (field, log) = train_nerf(&ds, &cfg)?;
            let psnr = log.final_psnr().unwrap_or(f64::NAN);
            log::info!(
                "trained {} steps in {:.1}s, test PSNR {psnr:.2} dB",
                log.losses.len(),
                start.elapsed().as_secs_f64()
            );
            let mut ck = Checkpoint::new(field);
            ck.config = Some(cfg);
            ck.scene = Some(ds.to_file());
            ck.save(&out)
        }
        Command::TrainFeatures {
            checkpoint,
            teacher,
            teacher_seed,
            config,
            out,
            metrics,
        } => train_features(&checkpoint, teacher, teacher_seed, config.as_deref(), out, metrics),
        Command::ExtractMesh {
            checkpoint,
            resolution,
            sigma,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mesh = extract_mesh(&ck.radiance, resolution, sigma)?;
            let mut w = BufWriter::new(File::create(&out)?);
            if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")) {
                write_ply(&mesh, &mut w)?;
            } else {
                write_obj(&mesh, &mut w)?;
            }
            w.flush()?;
            log::info!(
                "{} vertices, {} triangles -> {}",
                mesh.vertices.len(),
                mesh.triangles.len(),
                out.display()
            );
            Ok(())
        }
        Command::Eval { checkpoint, out, csv } => eval(&checkpoint, out, csv),
        Command::Bench {
            checkpoint,
            cost_multiplier,
            runs,
            resolution,
        } => bench(&checkpoint, cost_multiplier, runs, resolution),
        Command::Serve {
            checkpoint,
            port,
            mesh_resolution,
            no_mesh,
        } => serve(&checkpoint, port, (!no_mesh).then_some(mesh_resolution)),
    }
}

fn load_config(path: Option<&Path>, stored: Option<&TrainConfig>) -> sanerf_core::Result<TrainConfig> {
    let cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => stored.cloned().unwrap_or_default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_of(ck: &Checkpoint) -> sanerf_core::Result<Dataset> {
    let file = ck
        .scene
        .as_ref()
        .ok_or_else(|| Error::Usage("checkpoint carries no scene; train it with train-nerf".into()))?;
    Dataset::from_file(file)
}

fn train_features(
    path: &Path,
    teacher: TeacherArg,
    seed: u64,
    config: Option<&Path>,
    out: Option<PathBuf>,
    metrics: Option<PathBuf>,
) -> sanerf_core::Result<()> {
    let mut ck = Checkpoint::load(path)?;
    let ds = dataset_of(&ck)?;
    let cfg = load_config(config, ck.config.as_ref())?;
    let res = cfg.image_resolution();
    let mut teacher = Teacher::new(match teacher {
        TeacherArg::Single => TeacherSpec::single_scale(seed),
        TeacherArg::Multi => TeacherSpec::multi_scale(seed),
    })?;
    if teacher.kind() == TeacherKind::MultiScale {
        let vocabulary = calibrate_prompts(&teacher, &ds, res)?;
        log::info!(
            "prompt vocabulary: {:?}",
            vocabulary.iter().map(|p| &p.name).collect::<Vec<_>>()
        );
        teacher.set_vocabulary(vocabulary)?;
    }
    let mut sem = seeded_field(&ck.radiance, &teacher, &cfg)?;
    let mut csv = metrics.map(|p| File::create(p).map(BufWriter::new)).transpose()?;
    if let Some(w) = csv.as_mut() {
        writeln!(w, "{METRICS_HEADER}")?;
    }
    let psnr = mean(&evaluate_psnr(&ck.radiance, &ds, &ds.test));
    let protocol = Protocol::for_teacher(&teacher);
    let start = Instant::now();
    let mut paused = Duration::ZERO;
    let base = &ck.radiance;
    let log = train_semantic(base, &mut sem, &teacher, &ds, &cfg, |step, field| {
        let wall = (start.elapsed() - paused).as_secs_f64();
        let t = Instant::now();
        let eval = evaluate_iou(base, field, &teacher, &ds.test, &protocol, res, None)?;
        let mse = mean(&eval.feature_mse);
        log::info!("step {step}: feature MSE {mse:.5}, mask IoU {:.4}", eval.mask_iou.mean);
        if let Some(w) = csv.as_mut() {
            writeln!(w, "{}", metrics_row(step, psnr, mse, eval.mask_iou.mean, wall))?;
        }
        paused += t.elapsed();
        Ok(())
    })?;
    if let Some(mut w) = csv {
        w.flush()?;
    }
    log::info!(
        "{} steps in {:.1}s, {} teacher encodes",
        log.losses.len(),
        log.wall_time_s,
        log.encode_calls
    );
    ck.semantic = Some(sem);
    ck.teacher = Some(teacher.spec().clone());
    ck.config = Some(cfg);
    ck.save(out.as_deref().unwrap_or(path))
}

/// Fresh semantic field seeded from the training seed.
fn seeded_field(base: &RadianceField, teacher: &Teacher, cfg: &TrainConfig) -> sanerf_core::Result<SemanticField> {
    let res = cfg.image_resolution();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    SemanticField::new(
        base.bounds(),
        cfg.sem_grid_resolution,
        cfg.sem_channels,
        cfg.sem_head_hidden,
        &teacher.feature_dims(res, res),
        &mut rng,
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

struct Imitation {
    ck: Checkpoint,
    teacher: Teacher,
    cfg: TrainConfig,
}

fn load_imitation(path: &Path) -> sanerf_core::Result<Imitation> {
    let ck = Checkpoint::load(path)?;
    let spec = ck
        .teacher
        .clone()
        .ok_or_else(|| Error::Usage("checkpoint has no semantic field; run train-features first".into()))?;
    if ck.semantic.is_none() {
        return Err(Error::Usage(
            "checkpoint has no semantic field; run train-features first".into(),
        ));
    }
    let cfg = ck.config.clone().unwrap_or_default();
    Ok(Imitation {
        teacher: Teacher::new(spec)?,
        ck,
        cfg,
    })
}

fn eval(path: &Path, out: Option<PathBuf>, csv: Option<PathBuf>) -> sanerf_core::Result<()> {
    let Imitation { ck, teacher, cfg } = load_imitation(path)?;
    let ds = dataset_of(&ck)?;
    let sem = ck.semantic.as_ref().expect("checked on load");
    let start = Instant::now();
    let psnr = evaluate_psnr(&ck.radiance, &ds, &ds.test);
    let protocol = Protocol::for_teacher(&teacher);
    let res = cfg.image_resolution();
    let report = EvalReport::new(
        psnr,
        evaluate_iou(&ck.radiance, sem, &teacher, &ds.test, &protocol, res, None)?,
        None,
    );
    let text = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    if let Some(p) = csv {
        let row = metrics_row(
            cfg.sem_steps,
            mean(&report.psnr),
            mean(&report.feature_mse),
            report.mask_iou.mean,
            start.elapsed().as_secs_f64(),
        );
        std::fs::write(p, format!("{METRICS_HEADER}\n{row}\n"))?;
    }
    Ok(())
}

fn bench(path: &Path, multiplier: u32, runs: usize, resolution: Option<u32>) -> sanerf_core::Result<()> {
    let Imitation { ck, teacher, cfg } = load_imitation(path)?;
    let teacher = Teacher::new(TeacherSpec {
        cost_multiplier: multiplier,
        ..teacher.spec().clone()
    })?;
    let ds = dataset_of(&ck)?;
    let res = resolution.unwrap_or(cfg.image_resolution());
    let sem = ck.semantic.as_ref().expect("checked on load");
    let timing = benchmark_inference(&ck.radiance, sem, &teacher, &ds.test[0], res, runs)?;
    let stage = |original: f64, ours: f64| json!({ "original": original, "ours": ours });
    let stages = json!({
        STAGE_ROWS[0]: stage(timing.rgb_render_ms, timing.rgb_render_ms),
        STAGE_ROWS[1]: stage(timing.feature_encode_ms, timing.feature_render_ms),
        STAGE_ROWS[2]: stage(timing.decode_ms, timing.decode_ms),
        STAGE_ROWS[3]: stage(timing.fps_original, timing.fps_imitated),
    });
    for (name, original, ours) in timing.table() {
        eprintln!("{name:<24}{original:>12}{ours:>12}");
    }
    let report = json!({
        "costMultiplier": multiplier,
        "resolution": res,
        "speedup": timing.speedup(),
        "stages": stages,
        "timing": timing,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn serve(path: &Path, port: u16, mesh_resolution: Option<usize>) -> sanerf_core::Result<()> {
    let ck = Checkpoint::load(path)?;
    let session = Session::from_checkpoint(
        ck,
        &SessionOptions {
            mesh_resolution,
            ..SessionOptions::default()
        },
    )?;
    log::info!("snapshot {}", session.info().snapshot_id);
    let app = router(Arc::new(session));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, app).await
    })?;
    Ok(())
}
