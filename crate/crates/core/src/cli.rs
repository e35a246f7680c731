//! Command-line surface: dataset generation, artifact rendering, training,
//! sampling and the verification harness.
//!
//! Exit codes are stable API: 0 ok, 1 verification failure, 2 io,
//! 3 malformed input, 4 resume mismatch, 5 missing artifact.

use crate::config::{Manifest, RunConfig, TrainState, DtypeChoice, MANIFEST_VERSION};
use crate::diffusion::{
    sample, DualDiffusionModel, Phase, SampleOptions, Trainer,
};
use crate::error::{Error, Result};
use crate::fgmask::scene_mask;
use crate::formats::{write_dors, write_f32_le, write_mask_pgm, write_pgm_binary, Image};
use crate::ors::{render_ors, OrsFilter};
use crate::scene::gen::generate_scene;
use crate::scene::json::{load_scene, save_scene};
use crate::scene::raster::rasterize_reference;
use crate::tensor::{load_into_store, write_checkpoint, Scalar};
use clap::{Parser, Subcommand, ValueEnum};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "voxdiff", version, about = "Voxel-conditioned dual-branch diffusion on synthetic driving scenes")]
pub struct Cli {
    /// Run configuration file (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the configured global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scene dataset and its manifest.
    Gen {
        /// Number of scenes (defaults to the configured scene_count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Render one artifact of a scene file.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum)]
        what: RenderWhat,
        #[arg(long, default_value_t = 0)]
        cam: usize,
    },
    /// Run the configured training phase.
    Train {
        /// Phase override: base_pretrain, branch_train or joint.
        #[arg(long)]
        phase: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue the interrupted run recorded in the state sidecar.
        #[arg(long)]
        resume: bool,
    },
    /// Sample an image for a scene and report its error against the
    /// reference rasterization.
    Sample {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        cam: usize,
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Run every registered oracle and identity check.
    Verify {
        /// Smaller sample counts for a fast pass.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RenderWhat {
    Ors,
    Mask,
    Reference,
}

fn load_config(cli_config: &Option<PathBuf>, seed: &Option<u64>, out: &Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = match cli_config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = *s;
    }
    if let Some(dir) = out {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Entry point used by the binary; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let cfg = load_config(&cli.config, &cli.seed, &cli.out)?;
    match cli.command {
        Command::Gen { count } => {
            cmd_gen(&cfg, count)?;
            Ok(0)
        }
        Command::Render { scene, what, cam } => {
            cmd_render(&cfg, &scene, what, cam)?;
            Ok(0)
        }
        Command::Train { phase, steps, resume } => {
            match cfg.dtype {
                DtypeChoice::F32 => cmd_train::<f32>(&cfg, phase, steps, resume)?,
                DtypeChoice::F64 => cmd_train::<f64>(&cfg, phase, steps, resume)?,
            }
            Ok(0)
        }
        Command::Sample { scene, cam, guidance } => {
            match cfg.dtype {
                DtypeChoice::F32 => cmd_sample::<f32>(&cfg, &scene, cam, guidance)?,
                DtypeChoice::F64 => cmd_sample::<f64>(&cfg, &scene, cam, guidance)?,
            }
            Ok(0)
        }
        Command::Verify { quick } => {
            let ok = cmd_verify(quick);
            Ok(if ok { 0 } else { 1 })
        }
    }
}

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:06}.json")
}

pub fn cmd_gen(cfg: &RunConfig, count: Option<usize>) -> Result<()> {
    let count = count.unwrap_or(cfg.scene_count);
    let dir = cfg.scenes_dir();
    std::fs::create_dir_all(&dir)?;
    let mut seeds = Vec::with_capacity(count);
    for i in 0..count {
        let seed = cfg.seed + i as u64;
        let scene = generate_scene(seed, &cfg.generator)?;
        save_scene(&dir.join(scene_file_name(i)), &scene)?;
        seeds.push(seed);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        scene_count: count,
        seeds,
        config_hash: cfg.hash()?,
    };
    manifest.save(&cfg.manifest_path())?;
    println!("wrote {count} scenes to {}", dir.display());
    Ok(())
}

pub fn cmd_render(cfg: &RunConfig, scene_path: &Path, what: RenderWhat, cam: usize) -> Result<()> {
    let scene = load_scene(scene_path)?;
    if cam >= scene.cameras.len() {
        return Err(Error::MalformedInput {
            path: scene_path.display().to_string(),
            detail: format!("camera index {cam} out of range ({} cameras)", scene.cameras.len()),
        });
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let stem = scene_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "scene".to_string());
    match what {
        RenderWhat::Reference => {
            let img = rasterize_reference(&scene, cam)?;
            let path = cfg.out_dir.join(format!("{stem}_cam{cam}_ref.ppm"));
            img.save_ppm(&path)?;
            println!("wrote {}", path.display());
        }
        RenderWhat::Ors => {
            let plan = cfg.plan.resolve(&scene.grid, cfg.model.ors_samples)?;
            let feature = render_ors(&scene, cam, &plan, OrsFilter::Full)?;
            let dors = cfg.out_dir.join(format!("{stem}_cam{cam}_ors.dors"));
            write_dors(&dors, feature.width, feature.height, plan.n, &feature.labels)?;
            let pgm = cfg.out_dir.join(format!("{stem}_cam{cam}_ors.pgm"));
            let preview = feature.preview_pgm_bytes(scene.taxonomy.num_classes());
            write_pgm_binary(&pgm, feature.width, feature.height, &preview)?;
            println!("wrote {} and {}", dors.display(), pgm.display());
        }
        RenderWhat::Mask => {
            let mask = scene_mask(&scene.boxes, &scene.cameras[cam], cfg.model.latent);
            let pgm = cfg.out_dir.join(format!("{stem}_cam{cam}_mask.pgm"));
            write_mask_pgm(&pgm, mask.width, mask.height, &mask.weights)?;
            let raw = cfg.out_dir.join(format!("{stem}_cam{cam}_mask.f32"));
            write_f32_le(&raw, &mask.weights)?;
            println!("wrote {} and {}", pgm.display(), raw.display());
        }
    }
    Ok(())
}

fn parse_phase(s: &str) -> Result<Phase> {
    match s {
        "base_pretrain" => Ok(Phase::BasePretrain),
        "branch_train" => Ok(Phase::BranchTrain),
        "joint" => Ok(Phase::Joint),
        _ => Err(Error::InvalidConfig(format!("unknown phase {s:?}"))),
    }
}

pub fn cmd_train<S: Scalar>(
    cfg: &RunConfig,
    phase_override: Option<String>,
    steps_override: Option<u64>,
    resume: bool,
) -> Result<()> {
    let manifest = Manifest::load(&cfg.manifest_path())?;
    let dir = cfg.scenes_dir();
    let mut scenes = Vec::with_capacity(manifest.scene_count);
    for i in 0..manifest.scene_count {
        scenes.push(load_scene(&dir.join(scene_file_name(i)))?);
    }
    if scenes.is_empty() {
        return Err(Error::MissingArtifact("dataset has no scenes".into()));
    }

    let mut train_cfg = cfg.train.clone();
    if let Some(p) = phase_override {
        train_cfg.phase = parse_phase(&p)?;
    }
    if let Some(s) = steps_override {
        train_cfg.steps = s;
    }
    let config_hash = cfg.hash()?;
    let ckpt = cfg.checkpoint_path();

    let mut model = DualDiffusionModel::<S>::new(cfg.model.clone(), cfg.seed)?;
    let prior_state = TrainState::load(&ckpt).ok();
    let mut start_step = 0u64;
    if resume {
        let state = prior_state
            .clone()
            .ok_or_else(|| Error::MissingArtifact(format!("train state for {}", ckpt.display())))?;
        if state.config_hash != config_hash {
            return Err(Error::ResumeMismatch(format!(
                "state hash {} != config hash {config_hash}",
                state.config_hash
            )));
        }
        if state.phase != train_cfg.phase.tag() {
            return Err(Error::ResumeMismatch(format!(
                "state phase {} != requested phase {}",
                state.phase,
                train_cfg.phase.tag()
            )));
        }
        load_into_store(&ckpt, &mut model.store)?;
        start_step = state.step;
    } else if ckpt.exists() {
        // Continue from prior weights (e.g. branch phase on a pretrained
        // base) without resuming a step counter.
        load_into_store(&ckpt, &mut model.store)?;
    }

    std::fs::create_dir_all(&cfg.out_dir)?;
    let metrics_path = cfg.out_dir.join("metrics.log");
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;

    let steps = train_cfg.steps;
    let lr = train_cfg.lr;
    let phase = train_cfg.phase;
    let warm_start = train_cfg.warm_start
        && phase == Phase::BranchTrain
        && !resume
        && prior_state.map(|s| s.phase == Phase::BasePretrain.tag()).unwrap_or(true);

    let mut trainer = Trainer::new(&mut model, scenes, train_cfg, cfg.seed)?;
    trainer.apply_phase();
    if warm_start {
        trainer.warm_start_branches();
    }

    let save = |model: &DualDiffusionModel<S>, step: u64| -> Result<()> {
        write_checkpoint(&ckpt, &model.store)?;
        TrainState { phase: phase.tag().to_string(), step, config_hash: config_hash.clone() }
            .save(&ckpt)?;
        Ok(())
    };

    for step in start_step..steps {
        let loss = trainer.step(step)?;
        writeln!(metrics, "{step} {loss:.6} {lr:e} {}", phase.tag())?;
        if (step + 1) % trainer.cfg.checkpoint_every == 0 {
            save(trainer.model, step + 1)?;
        }
    }
    save(&model, steps.max(start_step))?;
    println!("trained {} steps (phase {}), checkpoint at {}", steps.saturating_sub(start_step), phase.tag(), ckpt.display());
    Ok(())
}

pub fn cmd_sample<S: Scalar>(
    cfg: &RunConfig,
    scene_path: &Path,
    cam: usize,
    guidance: Option<f64>,
) -> Result<()> {
    let ckpt = cfg.checkpoint_path();
    if !ckpt.exists() {
        return Err(Error::MissingArtifact(format!("checkpoint {}", ckpt.display())));
    }
    let scene = load_scene(scene_path)?;
    if cam >= scene.cameras.len() {
        return Err(Error::MalformedInput {
            path: scene_path.display().to_string(),
            detail: format!("camera index {cam} out of range"),
        });
    }
    let mut model = DualDiffusionModel::<S>::new(cfg.model.clone(), cfg.seed)?;
    load_into_store(&ckpt, &mut model.store)?;
    let cond = model.prepare_cond(&scene, cam, false)?;
    let opts = SampleOptions {
        guidance: guidance.unwrap_or(cfg.train.guidance),
        seed: cfg.seed,
        use_branches: true,
        checked: false,
    };
    let latent = sample(&model, Some(&cond), &cfg.train.sampler, &opts)?;
    let image = Image::from_latent(&latent)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let stem = scene_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "scene".to_string());
    let path = cfg
        .out_dir
        .join(format!("{stem}_cam{cam}_seed{}_sample.ppm", opts.seed));
    image.save_ppm(&path)?;
    let reference = rasterize_reference(&scene, cam)?;
    println!("wrote {} mae {:.6}", path.display(), image.mae(&reference));
    Ok(())
}

pub fn cmd_verify(quick: bool) -> bool {
    let results = crate::verify::run_all_checks(quick);
    let mut all_pass = true;
    for r in &results {
        let status = if r.pass { "PASS" } else { "FAIL" };
        println!("{} {} {}", r.name, status, r.metric);
        all_pass &= r.pass;
    }
    all_pass
}
