//! `couplenet` command-line driver.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use couplenet::commands::{self, InferInput};
use couplenet::config::{Branches, Overrides, RunConfig};
use couplenet::coupling::{Normalization, Strategy};
use couplenet::gradcheck::GradcheckOptions;
use couplenet::Error;

#[derive(Parser, Debug)]
#[command(name = "couplenet", version, about = "Coupled local/global detection head on synthetic scenes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: $COUPLENET_OUT_ROOT/<command>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root for default output directories.
    #[arg(long, global = true, env = "COUPLENET_OUT_ROOT", default_value = "runs")]
    out_root: PathBuf,
    /// Coupling strategy: sum|prod|max.
    #[arg(long, global = true)]
    coupling: Option<Strategy>,
    /// Branch normalization: none|l2|conv.
    #[arg(long, global = true)]
    norm: Option<String>,
    /// Enabled branches: local|global|both.
    #[arg(long, global = true)]
    branches: Option<Branches>,
    /// Context region for the global branch: on|off.
    #[arg(long, global = true)]
    context: Option<String>,
    /// Part grid resolution.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Comma-separated training scale factors, e.g. 0.75,1.0,1.25.
    #[arg(long, global = true, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset manifest (and optionally PGM renders).
    GenData {
        #[arg(long)]
        render_images: bool,
        #[arg(long)]
        train_scenes: Option<usize>,
        #[arg(long)]
        test_scenes: Option<usize>,
    },
    /// Train a model, save a checkpoint and evaluate it.
    Train {
        /// Use this dataset manifest instead of generating from the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        /// Run only suites whose name contains this string (e.g. psroi).
        #[arg(long)]
        scope: Option<String>,
        /// Deliberately perturb one analytic gradient of the named suite.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Train and evaluate the normalization x coupling grid and the single-branch baselines.
    Ablate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated cell labels, e.g. conv+sum,global-only.
        #[arg(long, value_delimiter = ',')]
        cells: Option<Vec<String>>,
    },
    /// Detect objects in one test scene or a PGM image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the test split.
        #[arg(long, conflicts_with = "image", required_unless_present = "image")]
        scene: Option<usize>,
        /// Binary PGM image.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        score_thresh: f64,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

/// Exit status: 1 for invalid input or configuration, 2 for failures while running.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => 1,
        _ => 2,
    }
}

fn on_off(s: &str) -> Result<bool, Error> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(Error::Config(format!("--context expects on|off, got {other:?}"))),
    }
}

fn resolve_config(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        seed: c.seed,
        strategy: c.coupling,
        normalization: c.norm.as_deref().map(str::parse::<Normalization>).transpose()?,
        branches: c.branches,
        context: c.context.as_deref().map(on_off).transpose()?,
        k: c.k,
        scales: c.scales.clone(),
    };
    cfg.apply(&overrides)?;
    Ok(cfg)
}

fn out_dir(c: &Common, command: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| c.out_root.join(command))
}

fn run(cli: Cli) -> Result<(), Error> {
    let c = &cli.common;
    let mut cfg = resolve_config(c)?;
    let dataset = |cfg: &RunConfig, manifest: &Option<PathBuf>| commands::load_dataset(cfg, manifest.as_deref());
    match &cli.command {
        Command::GenData {
            render_images,
            train_scenes,
            test_scenes,
        } => {
            if let Some(n) = train_scenes {
                cfg.dataset.train_scenes = *n;
            }
            if let Some(n) = test_scenes {
                cfg.dataset.test_scenes = *n;
            }
            let path = commands::cmd_gen_data(&cfg, &out_dir(c, "gen-data"), *render_images)?;
            println!("wrote {}", path.display());
        }
        Command::Train { manifest } => {
            let ds = dataset(&cfg, manifest)?;
            let out = out_dir(c, "train");
            let s = commands::cmd_train(&cfg, &ds, &out)?;
            println!(
                "trained {} iterations; test mAP@{} = {:.4}; checkpoint {}",
                s.iterations,
                s.eval.iou_thresh,
                s.eval.map,
                out.join(commands::CHECKPOINT_FILE).display()
            );
        }
        Command::Eval { checkpoint, manifest } => {
            let ds = dataset(&cfg, manifest)?;
            let r = commands::cmd_eval(&cfg, &ds, checkpoint, &out_dir(c, "eval"))?;
            println!("mAP@{} = {:.4}  COCO-style mAP = {:.4}", r.iou_thresh, r.map, r.coco_map);
            for (i, ap) in r.per_class_ap.iter().enumerate() {
                let name = couplenet::synth::ShapeClass::from_label(i + 1).map_or("?", |s| s.name());
                match ap {
                    Some(ap) => println!("  {name:<15} AP {ap:.4}"),
                    None => println!("  {name:<15} no instances"),
                }
            }
        }
        Command::Gradcheck { scope, corrupt } => {
            let opts = GradcheckOptions {
                scope: scope.clone(),
                corrupt: corrupt.clone(),
                seed: cfg.seed,
            };
            let (_, text, ok) = commands::cmd_gradcheck(&opts)?;
            print!("{text}");
            if !ok {
                return Err(Error::CheckFailed("gradient check".into()));
            }
        }
        Command::Ablate { manifest, seeds, cells } => {
            if let Some(s) = seeds {
                cfg.ablation.seeds = s.clone();
            }
            if let Some(cl) = cells {
                cfg.ablation.cells = Some(cl.clone());
            }
            cfg.validate()?;
            let ds = dataset(&cfg, manifest)?;
            let report = commands::cmd_ablate(&cfg, &ds, &out_dir(c, "ablate"))?;
            print!("{}", report.to_markdown());
        }
        Command::Infer {
            checkpoint,
            scene,
            image,
            score_thresh,
            manifest,
        } => {
            let (input, ds) = match (scene, image) {
                (Some(i), _) => (InferInput::TestScene(*i), Some(dataset(&cfg, manifest)?)),
                (None, Some(p)) => (InferInput::Image(p.clone()), None),
                (None, None) => return Err(Error::Config("pass --scene or --image".into())),
            };
            let out = out_dir(c, "infer");
            let dets = commands::cmd_infer(&cfg, ds.as_ref(), checkpoint, &input, *score_thresh, &out)?;
            println!("{} detections; overlay {}", dets.len(), out.join("overlay.ppm").display());
            for d in &dets {
                let name = couplenet::synth::ShapeClass::from_label(d.class).map_or("?", |s| s.name());
                println!(
                    "  {name:<15} {:.3}  ({:.1}, {:.1}, {:.1}, {:.1})",
                    d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
