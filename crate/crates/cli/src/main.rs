use std::io::{BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use seedprop_cli::options::PipelineArgs;
use seedprop_cli::service::{self, AppState, DEFAULT_PAIR_FRAMES};
use seedprop_core::eval::{combine, reports_csv, Averaging};
use seedprop_core::format::{read_seed_file, write_seed_file};
use seedprop_core::pipeline::{EvalSummary, RunOptions, RunOutcome};
use seedprop_core::store::{FRAMES_DIR, REPORTS_DIR};
use seedprop_core::wire::{self, Dispatcher};
use seedprop_core::*;

#[derive(Parser)]
#[command(name = "seedprop", version, about = "Seed, propagate and train video annotations")]
struct Cli {
    /// Directory holding all projects.
    #[arg(long, global = true, env = "SEEDPROP_ROOT", default_value = "projects")]
    root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a project.
    Init {
        project: String,
        #[arg(long, default_value_t = 1280)]
        width: u32,
        #[arg(long, default_value_t = 720)]
        height: u32,
        /// Frames in the video.
        #[arg(long)]
        frames: u32,
        /// Class names, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "object")]
        classes: Vec<String>,
        /// Directory of numbered images to import (`12.png`, `000012.jpg`).
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Import a seed annotation file as a new pair.
    Seed {
        project: String,
        file: PathBuf,
        /// Frames covered by the pair, seed frame included.
        #[arg(long, default_value_t = DEFAULT_PAIR_FRAMES)]
        frame_count: u32,
    },
    /// Run the chain through propagation.
    Propagate(StageArgs),
    /// Run the chain through box resizing.
    Segment(StageArgs),
    /// Run the chain through dataset emission.
    Emit(StageArgs),
    /// Run the chain through detector training.
    Train(StageArgs),
    /// Run the chain through inference on the whole video.
    Infer(StageArgs),
    /// Run the chain through evaluation.
    Eval(StageArgs),
    /// Run the full chain.
    Run(StageArgs),
    /// Run all eight ablation configurations.
    Sweep(StageArgs),
    /// Print the resolved pipeline config.
    Config(PipelineArgs),
    /// Table of evaluated runs, given as `project/report_id`.
    Report {
        #[arg(required = true)]
        runs: Vec<String>,
        /// Add a combined row.
        #[arg(long, value_enum)]
        combine: Option<Combine>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Require `Authorization: Bearer <token>` on every request.
        #[arg(long, env = "SEEDPROP_TOKEN")]
        token: Option<String>,
    },
    /// Answer tracker, segmenter and detector requests on stdin/stdout from
    /// a synthetic scene.
    OracleBackend {
        #[arg(long)]
        scene: PathBuf,
    },
    /// Generate a synthetic project: frames, scene, ground truth and seeds.
    Synth {
        project: String,
        #[arg(long, default_value_t = 60)]
        frames: u32,
        #[arg(long, default_value_t = 12)]
        drifting: usize,
        #[arg(long, default_value_t = 3)]
        exiting: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1280)]
        width: u32,
        #[arg(long, default_value_t = 720)]
        height: u32,
        /// Seed frames, comma separated; each gets both selection modes.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seed_frames: Vec<u32>,
        #[arg(long, default_value_t = DEFAULT_PAIR_FRAMES)]
        pair_frames: u32,
    },
}

#[derive(clap::Args)]
struct StageArgs {
    project: String,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Combine {
    Micro,
    Macro,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let open = || ProjectStore::open(&cli.root).with_context(|| format!("opening {}", cli.root.display()));
    match cli.command {
        Command::Init {
            project,
            width,
            height,
            frames,
            classes,
            images,
        } => {
            let store = open()?;
            let p = store.create_project(&project, ImageGeometry::new(width, height)?, frames, classes)?;
            let imported = match images {
                Some(dir) => import_images(&store, &p, &dir)?,
                None => 0,
            };
            println!("created {} ({} frames, {imported} images)", p.project_id, p.frame_count);
        }
        Command::Seed {
            project,
            file,
            frame_count,
        } => {
            let store = open()?;
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let seed = read_seed_file(&text).map_err(|e| anyhow!("{}: {e}", file.display()))?;
            let _lock = store.lock(&project)?;
            let mut p = store.load(&project)?;
            let pair = p.add_seed(seed, frame_count)?;
            store.save(&p)?;
            println!("pair {pair}");
        }
        Command::Propagate(a) => stage(&open()?, a, Stage::Propagate)?,
        Command::Segment(a) => stage(&open()?, a, Stage::Segment)?,
        Command::Emit(a) => stage(&open()?, a, Stage::Emit)?,
        Command::Train(a) => stage(&open()?, a, Stage::Train)?,
        Command::Infer(a) => stage(&open()?, a, Stage::Infer)?,
        Command::Eval(a) | Command::Run(a) => stage(&open()?, a, Stage::Eval)?,
        Command::Sweep(a) => {
            let store = open()?;
            let cfg = a.pipeline.build()?;
            let backends = Backends::from_config(&cfg.backends)?;
            let rows = ablation_sweep(&store, &a.project, &cfg, &backends)?;
            let table: Vec<_> = rows.iter().map(|r| (r.method.clone(), r.report.clone())).collect();
            print!("{}", reports_csv(&table));
            println!("# table: {}", store.project_dir(&a.project).join(REPORTS_DIR).join(format!("sweep-{}", cfg.run_id())).display());
        }
        Command::Config(a) => println!("{}", a.build()?.to_json()),
        Command::Report { runs, combine: how } => {
            let store = open()?;
            let mut rows = Vec::new();
            for r in &runs {
                let (project, id) = r
                    .split_once('/')
                    .ok_or_else(|| anyhow!("`{r}`: expected project/report_id"))?;
                let path = service::report_path(&store, project, id).ok_or_else(|| anyhow!("no report {r}"))?;
                let text = std::fs::read_to_string(&path)?;
                let s: EvalSummary = serde_json::from_str(&text).with_context(|| format!("{} is not a run report", path.display()))?;
                rows.push((format!("{r} {}", s.method), s.report));
            }
            if let Some(how) = how {
                let reports: Vec<_> = rows.iter().map(|r| r.1.clone()).collect();
                let (name, how) = match how {
                    Combine::Micro => ("combined (micro)", Averaging::Micro),
                    Combine::Macro => ("combined (macro)", Averaging::Macro),
                };
                rows.push((name.to_string(), combine(&reports, how).expect("at least one run")));
            }
            print!("{}", reports_csv(&rows));
        }
        Command::Serve { addr, token } => {
            let store = open()?;
            let app = service::router(AppState::new(store, token));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                eprintln!("listening on {}", listener.local_addr()?);
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                Ok::<_, anyhow::Error>(())
            })?;
        }
        Command::OracleBackend { scene } => {
            let text = std::fs::read_to_string(&scene).with_context(|| format!("reading {}", scene.display()))?;
            let scene = Arc::new(serde_json::from_str::<SyntheticScene>(&text)?);
            let tracker = OracleTracker::new(scene.clone());
            let segmenter = OracleSegmenter::new(scene);
            let detector = ReferenceDetector::default();
            let d = Dispatcher {
                info: Some(BackendInfo::named("oracle")),
                tracker: Some(&tracker),
                segmenter: Some(&segmenter),
                detector: Some(&detector),
            };
            let stdin = std::io::stdin();
            wire::serve(BufReader::new(stdin.lock()), std::io::stdout().lock(), |r| d.handle(r))?;
        }
        Command::Synth {
            project,
            frames,
            drifting,
            exiting,
            seed,
            width,
            height,
            seed_frames,
            pair_frames,
        } => {
            let store = open()?;
            let params = SceneParams {
                geometry: ImageGeometry::new(width, height)?,
                frame_count: frames,
                drifting,
                exiting,
                seed,
                ..SceneParams::default()
            };
            let scene = SyntheticScene::generate(&params).map_err(|e| anyhow!(e))?;
            let mut p = store.create_project(&project, scene.geometry, frames, vec!["object".into()])?;
            let dir = store.project_dir(&project);
            scene.write_frames(&dir.join(FRAMES_DIR))?;
            let side = dir.join("synthetic");
            std::fs::create_dir_all(&side)?;
            for &f in &seed_frames {
                for mode in [SelectionMode::VariableBox, SelectionMode::FixedBox] {
                    let s = scene.seed_annotation(f, mode).map_err(|e| anyhow!(e))?;
                    std::fs::write(side.join(format!("seed_{f:06}_{mode}.json")), write_seed_file(&s))?;
                    p.add_seed(s, pair_frames)?;
                }
            }
            store.save(&p)?;
            let scene_path = side.join("scene.json");
            std::fs::write(&scene_path, serde_json::to_string(&scene)?)?;
            let gt_path = side.join("gt.csv");
            std::fs::write(&gt_path, scene.to_mot_csv())?;
            println!("created {project}: {frames} frames, {} pairs", p.pairs.len());
            println!("scene {}", scene_path.display());
            println!("ground truth {}", gt_path.display());
        }
    }
    Ok(())
}

fn import_images(store: &ProjectStore, project: &Project, dir: &Path) -> Result<usize> {
    let mut n = 0;
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let (Some(stem), Some(ext)) = (
            path.file_stem().and_then(|s| s.to_str()),
            path.extension().and_then(|s| s.to_str()),
        ) else {
            continue;
        };
        let Ok(index) = stem.parse::<u32>() else { continue };
        store.put_frame(project, index, ext, &std::fs::read(&path)?)?;
        n += 1;
    }
    Ok(n)
}

fn stage(store: &ProjectStore, a: StageArgs, last: Stage) -> Result<()> {
    let cfg = a.pipeline.build()?;
    if last == Stage::Eval && cfg.ground_truth.is_none() {
        bail!("evaluation needs --gt (or ground_truth in the config)");
    }
    cfg.validate()?;
    let backends = Backends::from_config(&cfg.backends)?;
    let out = run_pipeline(store, &a.project, &cfg, &backends, RunOptions { stop_after: Some(last) })?;
    print_outcome(&out);
    Ok(())
}

fn print_outcome(out: &RunOutcome) {
    let mut w = std::io::stdout().lock();
    let _ = writeln!(w, "run {}", out.run_id);
    for j in &out.jobs {
        let secs = j.wall_seconds.map(|s| format!("{s:.2}s")).unwrap_or_else(|| "-".into());
        let note = if j.resumed { " (already committed)" } else { "" };
        let _ = writeln!(w, "  {:<10} {:?} {secs}{note}", j.stage.name(), j.status);
    }
    if let Some(s) = &out.summary {
        let _ = write!(w, "{}", reports_csv(&[(s.method.clone(), s.report.clone())]));
        let _ = writeln!(
            w,
            "throughput {:.2} FPS over {} frames; annotation ratio {}",
            s.throughput.fps, s.throughput.frames, s.ratio_display
        );
    }
}
