//! `diar`: synthesize corpora, train metric-learning embedders, diarize,
//! score with DER, and sweep the configuration grid.
//!
//! Exit codes: 0 success, 2 usage or validation errors, 3 runtime errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use diar_core::der::{read_rttm, write_rttm, Annotation, DerBreakdown};
use diar_core::embedder::{load_checkpoint, save_checkpoint};
use diar_core::error::Error;
use diar_core::features::{parse_manifest, write_corpus, Corpus};
use diar_core::pipeline::{
    diarize_corpus, embedding_fingerprint, reference_annotations, score_annotations, EvalOptions,
};
use diar_core::synth::{concatenate_conversations, generate_corpus, SynthSpec};
use diar_core::trainer::{
    grid_preset, render_grid_table, run_grid, train, EvalSet, GridPreset, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "diar",
    about = "Metric-learning speaker diarization toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus (manifest + feature files + reference RTTM)
    Synth(SynthArgs),
    /// Train one metric-learning configuration and save a checkpoint
    Train(TrainArgs),
    /// Embed and cluster a corpus, writing hypothesis RTTM
    Diarize(DiarizeArgs),
    /// Score hypothesis RTTM against reference RTTM
    Score(ScoreArgs),
    /// Sweep the sampling x loss x margin configuration grid
    Grid(GridArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of speakers
    #[arg(long, default_value_t = 8)]
    speakers: usize,
    /// Segments per speaker
    #[arg(long, default_value_t = 20)]
    segs: usize,
    /// Feature dimension
    #[arg(long, default_value_t = 12)]
    dim: usize,
    /// Frames per segment
    #[arg(long, default_value_t = 50)]
    frames: usize,
    /// Speaker separation in noise-sigma units
    #[arg(long, default_value_t = 6.0)]
    sep: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Speakers sharing one conversation
    #[arg(long, default_value_t = 2)]
    speakers_per_conversation: usize,
    /// Use plain white noise instead of temporally colored noise
    #[arg(long)]
    white_noise: bool,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training configuration JSON (defaults apply for missing fields)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus manifest
    #[arg(long, required_unless_present = "print_config")]
    corpus: Option<PathBuf>,
    /// Output directory (checkpoint + run record)
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    /// Override the configured step count
    #[arg(long)]
    steps: Option<usize>,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Print the effective configuration as JSON and exit
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct DiarizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus manifest
    #[arg(long)]
    corpus: PathBuf,
    /// Output RTTM path
    #[arg(long)]
    out: PathBuf,
    /// Clustering seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Minimum cluster count
    #[arg(long, default_value_t = 2)]
    k_min: usize,
    /// Maximum cluster count (default: min(segments, 10))
    #[arg(long)]
    k_max: Option<usize>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Reference RTTM
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Hypothesis RTTM
    #[arg(long = "hyp")]
    hypothesis: PathBuf,
    /// Collar in seconds around reference turn boundaries
    #[arg(long, default_value_t = 0.25)]
    collar: f64,
    /// Exclude reference overlap regions (default)
    #[arg(long, overrides_with = "no_skip_overlap")]
    skip_overlap: bool,
    /// Score overlap regions too
    #[arg(long)]
    no_skip_overlap: bool,
    /// Per-group DER keyed by this manifest tag
    #[arg(long, requires = "manifest")]
    group_by: Option<String>,
    /// Manifest supplying conversation tags for --group-by
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Write the JSON breakdown here
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print JSON instead of the text summary
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GridArgs {
    /// Base training configuration JSON (loss/sampling/margin are overridden per cell)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_config")]
    train_corpus: Option<PathBuf>,
    #[arg(long)]
    eval_corpus: Option<PathBuf>,
    /// Grid preset: "full" (12 cells) or "table1" (11)
    #[arg(long, default_value = "full")]
    preset: String,
    /// Comma-separated target average speaker counts for stressed eval
    /// variants built by concatenating eval conversations (e.g. "4,6")
    #[arg(long)]
    speaker_stress: Option<String>,
    /// Thread count for concurrent runs (default: rayon's choice)
    #[arg(long)]
    jobs: Option<usize>,
    /// Collar for DER evaluation
    #[arg(long, default_value_t = 0.25)]
    collar: f64,
    /// Score overlap regions too
    #[arg(long)]
    no_skip_overlap: bool,
    /// Seed for stress-variant concatenation grouping
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for grid.json and grid.txt
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the effective base configuration as JSON and exit
    #[arg(long)]
    print_config: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Diarize(args) => cmd_diarize(args),
        Command::Score(args) => cmd_score(args),
        Command::Grid(args) => cmd_grid(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Numeric(_) | Error::Evaluation(_) => 3,
        _ => 2,
    }
}

fn read_config(path: Option<&Path>) -> diar_core::Result<Option<TrainConfig>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(Some(serde_json::from_str(&text).map_err(|e| {
                Error::Parse(format!("{}: {e}", p.display()))
            })?))
        }
    }
}

/// Base config: from file when given, otherwise defaults with the embedder
/// input sized to the corpus.
fn effective_config(file: Option<TrainConfig>, corpus: Option<&Corpus>) -> TrainConfig {
    match file {
        Some(cfg) => cfg,
        None => {
            let mut cfg = TrainConfig::default();
            if let Some(c) = corpus {
                cfg.embedder.input_dim = c.dim;
            }
            cfg
        }
    }
}

fn write_json(value: &impl serde::Serialize, path: &Path) -> diar_core::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn cmd_synth(args: SynthArgs) -> diar_core::Result<()> {
    let spec = SynthSpec {
        n_speakers: args.speakers,
        segments_per_speaker: args.segs,
        frames_per_segment: args.frames,
        dim: args.dim,
        separation: args.sep,
        seed: args.seed,
        speakers_per_conversation: args.speakers_per_conversation,
        temporal_coloring: !args.white_noise,
    };
    let corpus = generate_corpus(&spec)?;
    let manifest = write_corpus(&corpus, &args.out)?;
    let references = reference_annotations(&corpus)?;
    let rttm_path = args.out.join("ref.rttm");
    write_rttm(&references, &rttm_path)?;
    println!(
        "wrote {} conversations / {} segments to {}",
        corpus.conversations.len(),
        corpus.segment_count(),
        manifest.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> diar_core::Result<()> {
    let file_cfg = read_config(args.config.as_deref())?;
    let corpus = match &args.corpus {
        Some(p) => Some(parse_manifest(p)?),
        None => None,
    };
    let mut cfg = effective_config(file_cfg, corpus.as_ref());
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let corpus = corpus.expect("clap enforces --corpus");
    let out_dir = args.out.expect("clap enforces --out");
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let outcome = train(&cfg, &corpus)?;
    let ckpt_path = out_dir.join("model.ckpt");
    save_checkpoint(&outcome.model, &ckpt_path)?;

    // checkpoint tensors are f32, so fingerprint the reloaded model: a later
    // reload then reproduces the recorded hash exactly
    let reloaded = load_checkpoint(&ckpt_path)?;
    let hash = embedding_fingerprint(&reloaded, &corpus)?;

    let mut record = outcome.record;
    record.checkpoint = Some(ckpt_path.display().to_string());
    record.validation_embedding_hash = Some(hash);
    write_json(&record, &out_dir.join("run.json"))?;

    println!(
        "trained {} steps, final loss {:.6}, checkpoint {}",
        cfg.steps,
        record.loss_curve.last().copied().unwrap_or(f64::NAN),
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_diarize(args: DiarizeArgs) -> diar_core::Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let corpus = parse_manifest(&args.corpus)?;
    let opts = EvalOptions {
        seed: args.seed,
        k_min: args.k_min,
        k_max: args.k_max,
        ..Default::default()
    };
    let hypotheses = diarize_corpus(&model, &corpus, &opts)?;
    write_rttm(&hypotheses, &args.out)?;
    println!(
        "diarized {} conversations -> {}",
        hypotheses.len(),
        args.out.display()
    );
    Ok(())
}

fn summary_line(b: &DerBreakdown) -> String {
    format!(
        "DER {:.2}%  (miss {:.2}%, fa {:.2}%, conf {:.2}%)  scored {:.3}s",
        b.der * 100.0,
        b.missed / b.total * 100.0,
        b.false_alarm / b.total * 100.0,
        b.confusion / b.total * 100.0,
        b.total
    )
}

fn cmd_score(args: ScoreArgs) -> diar_core::Result<()> {
    let references = read_rttm(&args.reference)?;
    let hypotheses = read_rttm(&args.hypothesis)?;
    let skip_overlap = !args.no_skip_overlap;

    let overall = score_annotations(&references, &hypotheses, args.collar, skip_overlap)?;

    let mut groups: Vec<(String, DerBreakdown)> = Vec::new();
    if let Some(tag) = &args.group_by {
        let manifest = args.manifest.as_ref().expect("clap enforces --manifest");
        let corpus = parse_manifest(manifest)?;
        let mut by_value: std::collections::BTreeMap<String, Vec<&Annotation>> =
            Default::default();
        for reference in &references {
            let value = corpus
                .tag(&reference.file_id, tag)
                .unwrap_or("(untagged)")
                .to_string();
            by_value.entry(value).or_default().push(reference);
        }
        for (value, refs) in by_value {
            let refs_owned: Vec<Annotation> = refs.into_iter().cloned().collect();
            let b = score_annotations(&refs_owned, &hypotheses, args.collar, skip_overlap)?;
            groups.push((value, b));
        }
    }

    #[derive(serde::Serialize)]
    struct ScoreReport<'a> {
        overall: &'a DerBreakdown,
        #[serde(skip_serializing_if = "std::collections::BTreeMap::is_empty")]
        groups: std::collections::BTreeMap<&'a str, &'a DerBreakdown>,
    }
    let report = ScoreReport {
        overall: &overall,
        groups: groups.iter().map(|(k, v)| (k.as_str(), v)).collect(),
    };

    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        // corpus-level DER is time-weighted across conversations
        println!("{}", summary_line(&overall));
        for (value, b) in &groups {
            println!(
                "group {}={}: {}",
                args.group_by.as_deref().unwrap_or(""),
                value,
                summary_line(b)
            );
        }
    }
    if let Some(out) = &args.out {
        write_json(&report, out)?;
    }
    Ok(())
}

/// Group size that raises the average speaker count to roughly `target`.
fn stress_group_size(eval: &Corpus, target: usize) -> usize {
    let mut total = 0usize;
    for segments in eval.conversations.values() {
        let speakers: std::collections::BTreeSet<_> = segments
            .iter()
            .filter_map(|s| s.speaker.as_deref())
            .collect();
        total += speakers.len();
    }
    let avg = total as f64 / eval.conversations.len().max(1) as f64;
    ((target as f64 / avg).round() as usize).max(1)
}

fn cmd_grid(args: GridArgs) -> diar_core::Result<()> {
    let preset: GridPreset = args.preset.parse()?;
    let file_cfg = read_config(args.config.as_deref())?;
    let train_corpus = match &args.train_corpus {
        Some(p) => Some(parse_manifest(p)?),
        None => None,
    };
    let base = effective_config(file_cfg, train_corpus.as_ref());
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&base)?);
        return Ok(());
    }
    let train_corpus = train_corpus.expect("clap enforces --train-corpus");

    let mut evals: Vec<EvalSet> = Vec::new();
    if let Some(path) = &args.eval_corpus {
        let eval = parse_manifest(path)?;
        if let Some(stress) = &args.speaker_stress {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
            let mut variants = vec![("base".to_string(), eval.clone())];
            for part in stress.split(',') {
                let target: usize = part.trim().parse().map_err(|_| {
                    Error::Argument(format!("bad --speaker-stress value '{part}'"))
                })?;
                let group = stress_group_size(&eval, target);
                let corpus = concatenate_conversations(&eval, group, &mut rng)?;
                variants.push((format!("avg{target}"), corpus));
            }
            evals = variants
                .into_iter()
                .map(|(name, corpus)| EvalSet { name, corpus })
                .collect();
        } else {
            evals.push(EvalSet {
                name: "base".to_string(),
                corpus: eval,
            });
        }
    }

    let grid = grid_preset(preset, &base);
    let eval_opts = EvalOptions {
        collar: args.collar,
        skip_overlap: !args.no_skip_overlap,
        ..Default::default()
    };
    let result = match args.jobs {
        Some(jobs) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
            pool.install(|| run_grid(&grid, &train_corpus, &evals, &eval_opts))
        }
        None => run_grid(&grid, &train_corpus, &evals, &eval_opts),
    };

    let table = render_grid_table(&result);
    print!("{table}");
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_json(&result, &out.join("grid.json"))?;
        std::fs::write(out.join("grid.txt"), &table)
            .map_err(|e| Error::io(out.join("grid.txt"), e))?;
    }
    Ok(())
}
