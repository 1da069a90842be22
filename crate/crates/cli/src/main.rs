use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use garmentflow::geometry::{GeodesicField, TriMesh};
use garmentflow::io::eval::{evaluate, penetration_stats, EvalOptions};
use garmentflow::io::obj::load_obj;
use garmentflow::io::sequence::{read_manifest, MANIFEST_FILE};
use garmentflow::io::{load_toml, read_sequence, write_atomic, write_sequence, Sequence};
use garmentflow::model::checkpoint::Checkpoint;
use garmentflow::model::{Model, ModelConfig};
use garmentflow::pipeline::{RolloutState, StageTimings};
use garmentflow::refine::RefineConfig;
use garmentflow::simdata::corpus::{read_corpus_manifest, CORPUS_MANIFEST};
use garmentflow::simdata::{default_corpus, make_corpus, CorpusEntry, CorpusSource};
use garmentflow::trainer::{checkpoint_path, Dataset, TrainConfig, Trainer};
use garmentflow::{Error, Result};

#[derive(Parser)]
#[command(name = "garmentflow", version, about = "Garment dynamics prediction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a corpus of garment sequences.
    Simulate {
        /// TOML file with `[[entries]]`; the built-in corpus when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Frames per simulated sequence (overrides the config).
        #[arg(long)]
        frames: Option<usize>,
        /// Base seed (entry k uses seed + k).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on sequence archives or corpus directories.
    Train {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// TOML file with `[model]` and `[train]` tables.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Auto-regressive prediction warm-started from ground-truth frames.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequence archive supplying the history and the collider motion.
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with `frames`, `start` and an optional `[refine]` table.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
        /// First history frame.
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        no_refine: bool,
        /// Geodesic cache file (created when missing).
        #[arg(long)]
        geodesics: Option<PathBuf>,
    },
    /// Compare a predicted archive with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Ground-truth frame matching the first predicted frame; read from
        /// the rollout manifest when omitted.
        #[arg(long)]
        offset: Option<usize>,
        #[arg(long, default_value_t = 4096)]
        pairs: usize,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Precompute the geodesic distance cache of a rest mesh.
    Geodesics {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize an OBJ mesh, sequence archive, corpus or checkpoint.
    Inspect { path: PathBuf },
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct CorpusFile {
    entries: Vec<CorpusEntry>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct RolloutFile {
    frames: usize,
    start: usize,
    refine: Option<RefineConfig>,
}

impl Default for RolloutFile {
    fn default() -> Self {
        RolloutFile {
            frames: 20,
            start: 0,
            refine: Some(RefineConfig::default()),
        }
    }
}

fn load_or_default<T: Default + serde::de::DeserializeOwned>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => load_toml(p),
        None => Ok(T::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        Ok(())
    })
}

fn simulate(config: &Option<PathBuf>, out: &Path, frames: Option<usize>, seed: Option<u64>) -> Result<()> {
    let mut entries = match config {
        Some(p) => load_toml::<CorpusFile>(p)?.entries,
        None => default_corpus(frames.unwrap_or(100), seed.unwrap_or(0)),
    };
    for (k, e) in entries.iter_mut().enumerate() {
        if let CorpusSource::Simulate { sim, frames: n, .. } = &mut e.source {
            if let Some(f) = frames {
                *n = f;
            }
            if let Some(s) = seed {
                sim.seed = s + k as u64;
            }
        }
    }
    let manifest = make_corpus(&entries, out)?;
    for r in &manifest.sequences {
        println!(
            "{}\t{} frames\t{} faces\tpenetration {:.2e} m",
            r.name, r.frame_count, r.face_count, r.max_penetration
        );
    }
    Ok(())
}

/// Every archive under `paths`: corpus directories expand to their members.
fn load_sequences(paths: &[PathBuf]) -> Result<Vec<Sequence>> {
    let mut out = Vec::new();
    for p in paths {
        if p.join(CORPUS_MANIFEST).exists() {
            for r in read_corpus_manifest(p)?.sequences {
                out.push(read_sequence(&p.join(&r.name))?.0);
            }
        } else {
            out.push(read_sequence(p)?.0);
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &[PathBuf],
    config: &Option<PathBuf>,
    out: &Path,
    steps: Option<u64>,
    seed: Option<u64>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    resume: &Option<PathBuf>,
) -> Result<()> {
    let mut file: TrainFile = load_or_default(config)?;
    if let Some(s) = steps {
        file.train.steps = s;
    }
    if let Some(s) = seed {
        file.train.seed = s;
    }
    if let Some(l) = lr {
        file.train.learning_rate = l;
    }
    if let Some(b) = batch_size {
        file.train.batch_size = b;
    }
    let corpus = load_sequences(data)?;
    let checkpoint = resume.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
    if let Some(c) = &checkpoint {
        file.model = c.model.config().clone();
    }
    file.model.validate()?;
    let m = &file.model;
    let dataset = Dataset::build(&corpus, m.n_hist, (m.n_conn > 0).then_some((m.p_geo, m.geo_scale)))?;
    let mut trainer = match checkpoint {
        Some(c) => Trainer::resume(c, file.train.clone())?,
        None => {
            let mut model = Model::new(
                file.model.clone(),
                dataset.fit_stats()?,
                &mut ChaCha8Rng::seed_from_u64(file.train.seed),
            )?;
            model.zero_output_heads();
            Trainer::new(model, file.train.clone())?
        }
    };
    let records = trainer.run(&dataset, Some(out))?;
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        println!(
            "steps {}..{}\tloss {:.6e} -> {:.6e}",
            first.step,
            last.step + 1,
            first.loss.total,
            last.loss.total
        );
    }
    println!("{}", checkpoint_path(out, None).display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn rollout(
    checkpoint: &Path,
    sequence: &Path,
    out: &Path,
    config: &Option<PathBuf>,
    frames: Option<usize>,
    start: Option<usize>,
    no_refine: bool,
    geodesics: &Option<PathBuf>,
) -> Result<()> {
    let mut file: RolloutFile = load_or_default(config)?;
    if let Some(f) = frames {
        file.frames = f;
    }
    if let Some(s) = start {
        file.start = s;
    }
    if no_refine {
        file.refine = None;
    }
    let model = Checkpoint::load(checkpoint)?.model;
    let n_hist = model.config().n_hist;
    let (seq, _) = read_sequence(sequence)?;
    let first = file.start + n_hist;
    if first + file.frames > seq.len() {
        return Err(Error::InvalidArgument(format!(
            "sequence has {} frames; start {} with {} history frames leaves fewer than {}",
            seq.len(),
            file.start,
            n_hist,
            file.frames
        )));
    }
    let field = if model.config().n_conn > 0 {
        Some(Arc::new(match geodesics {
            Some(p) => GeodesicField::load_or_compute(&seq.garment_rest, p)?,
            None => GeodesicField::compute(&seq.garment_rest),
        }))
    } else {
        None
    };
    let colliders = seq.colliders()?;
    let mut state = RolloutState::new(seq.garment_rest.clone(), n_hist, field, file.refine.clone())?;
    state.warm_start(&seq.garment_frames[file.start..first], &colliders[file.start..first])?;
    let predicted = state.rollout(&model, &colliders[first - 1..], file.frames)?;
    let mut timings = StageTimings::default();
    for p in &predicted {
        timings.features += p.timings.features;
        timings.sdf += p.timings.sdf;
        timings.network += p.timings.network;
        timings.poisson += p.timings.poisson;
        timings.refinement += p.timings.refinement;
    }
    let out_seq = Sequence {
        name: format!("{}_rollout", seq.name),
        frame_rate: seq.frame_rate,
        garment_rest: seq.garment_rest.clone(),
        garment_frames: predicted.iter().map(|p| p.positions.clone()).collect(),
        collider_rest: seq.collider_rest.clone(),
        collider_frames: seq.collider_frames[first..first + file.frames].to_vec(),
    };
    write_sequence(
        out,
        &out_seq,
        serde_json::json!({
            "first_frame": first,
            "checkpoint": checkpoint.display().to_string(),
            "source": sequence.display().to_string(),
            "refine": file.refine,
        }),
    )?;
    write_json(&out.join("timings.json"), &timings)?;
    println!("{} frames -> {}", file.frames, out.display());
    Ok(())
}

fn meshes(seq: &Sequence, range: std::ops::Range<usize>) -> Result<Vec<TriMesh>> {
    range.map(|k| seq.garment_mesh(k)).collect()
}

#[allow(clippy::too_many_arguments)]
fn eval(
    pred: &Path,
    gt: &Path,
    offset: Option<usize>,
    pairs: usize,
    samples: usize,
    seed: u64,
    out: &Option<PathBuf>,
) -> Result<()> {
    let (p, manifest) = read_sequence(pred)?;
    let (g, _) = read_sequence(gt)?;
    let offset = match offset {
        Some(o) => o,
        None => manifest.config.get("first_frame").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
    };
    if offset + p.len() > g.len() {
        return Err(Error::Dimension(format!(
            "{} predicted frames from offset {offset} exceed {} ground-truth frames",
            p.len(),
            g.len()
        )));
    }
    let opts = EvalOptions {
        n_geo_pairs: pairs,
        chamfer_samples: samples,
        seed,
    };
    let predicted = meshes(&p, 0..p.len())?;
    let mut report = evaluate(&predicted, &meshes(&g, offset..offset + p.len())?, &opts)?;
    report.penetration = Some(penetration_stats(&predicted, &p.colliders()?, 0.0)?);
    let timings: Option<serde_json::Value> = fs::read_to_string(pred.join("timings.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    let value = serde_json::json!({ "report": report, "timings": timings });
    match out {
        Some(path) => write_json(path, &value)?,
        None => println!("{}", serde_json::to_string_pretty(&value)?),
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    if path.is_dir() {
        if path.join(CORPUS_MANIFEST).exists() {
            let m = read_corpus_manifest(path)?;
            println!("corpus\t{} sequences", m.sequences.len());
            for r in m.sequences {
                println!("{}\t{} frames\t{} faces", r.name, r.frame_count, r.face_count);
            }
            return Ok(());
        }
        if path.join(MANIFEST_FILE).exists() {
            let m = read_manifest(path)?;
            println!("sequence\t{}", m.name);
            println!("frames\t{}", m.frame_count);
            println!("frame_rate\t{}", m.frame_rate);
            println!("garment\t{} vertices\t{} faces", m.garment.vertex_count, m.garment.face_count);
            println!("collider\t{} vertices\t{} faces", m.collider.vertex_count, m.collider.face_count);
            return Ok(());
        }
        return Err(Error::InvalidArgument(format!("{} holds no manifest", path.display())));
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => {
            let m = load_obj(path)?;
            println!("vertices\t{}", m.vertex_count());
            println!("faces\t{}", m.face_count());
            println!("components\t{}", m.topology().component_count());
            println!("boundary_edges\t{}", m.topology().boundary_edges().len());
            println!("bbox_diagonal\t{:.6}", m.bbox_diagonal());
            Ok(())
        }
        _ => {
            let c = Checkpoint::load(path)?;
            println!("checkpoint\t{}", path.display());
            println!("config\t{}", serde_json::to_string(c.model.config())?);
            println!("parameters\t{}", c.model.params().scalar_count());
            println!("optimizer_step\t{}", c.optimizer.as_ref().map_or(0, |o| o.step));
            println!("metadata\t{}", c.metadata);
            Ok(())
        }
    }
}

fn geodesics(mesh: &Path, out: &Path) -> Result<()> {
    let m = load_obj(mesh)?;
    let field = GeodesicField::load_or_compute(&m, out)?;
    println!("{} faces -> {}", field.face_count(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            config,
            out,
            frames,
            seed,
        } => simulate(&config, &out, frames, seed),
        Command::Train {
            data,
            config,
            out,
            steps,
            seed,
            lr,
            batch_size,
            resume,
        } => train(&data, &config, &out, steps, seed, lr, batch_size, &resume),
        Command::Rollout {
            checkpoint,
            sequence,
            out,
            config,
            frames,
            start,
            no_refine,
            geodesics: g,
        } => rollout(&checkpoint, &sequence, &out, &config, frames, start, no_refine, &g),
        Command::Eval {
            pred,
            gt,
            offset,
            pairs,
            samples,
            seed,
            out,
        } => eval(&pred, &gt, offset, pairs, samples, seed, &out),
        Command::Geodesics { mesh, out } => geodesics(&mesh, &out),
        Command::Inspect { path } => inspect(&path),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            eprintln!("error[usage]: invalid command line");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = match &e {
                Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => "usage",
                other => other.category(),
            };
            eprintln!("error[{category}]: {e}");
            ExitCode::from(if category == "usage" || category == "config" { 2 } else { 1 })
        }
    }
}
