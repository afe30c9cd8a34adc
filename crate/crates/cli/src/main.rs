use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bachprop::checkpoint::{load_checkpoint, save_checkpoint};
use bachprop::generate::{generate_score, SamplerConfig};
use bachprop::midi::write_midi;
use bachprop::model::{Model, Variant};
use bachprop::pipeline::{
    evaluate_corpora, load_dictionaries, preprocess_dir, provenance_header, read_file, score_from_midi, write_file,
    EvalConfig, Manifest,
};
use bachprop::score::{build_grid, ATOMS_PER_QUARTER, DEFAULT_GRID_CAP_QUARTERS};
use bachprop::train::{split_corpus, train, TrainConfig};
use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Division used for every MIDI file this tool writes.
const OUTPUT_DIVISION: u16 = 48;

#[derive(Parser)]
#[command(name = "bachprop", version, about = "Train and sample note-triplet music models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON file with `grid_cap_quarters`, `variant`, `train`, `sampler` and `eval` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a directory of MIDI files into a manifest and dictionaries.
    Preprocess {
        corpus_dir: PathBuf,
        /// Longest representable duration, in quarter notes.
        #[arg(long)]
        grid_cap: Option<u32>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a manifest.
    Train {
        manifest: PathBuf,
        /// Defaults to dictionaries.json next to the manifest.
        #[arg(long)]
        dictionaries: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        trunc_len: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Disable random transposition of training songs.
        #[arg(long)]
        no_augment: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Generate songs from a checkpoint.
    Sample {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        max_notes: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a corpus against a reference corpus.
    Evaluate {
        corpus: PathBuf,
        reference: PathBuf,
        /// Comma-separated pattern sizes for novelty, e.g. 2,4,6.
        #[arg(long, value_delimiter = ',')]
        pattern_sizes: Option<Vec<usize>>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    grid_cap_quarters: u32,
    variant: Variant,
    train: TrainConfig,
    sampler: SamplerConfig,
    eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid_cap_quarters: DEFAULT_GRID_CAP_QUARTERS,
            variant: Variant::BachProp,
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    fn load(common: &Common) -> Result<Self> {
        let mut config: RunConfig = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            config.train.seed = seed;
            config.sampler.seed = seed;
            config.eval.seed = seed;
        }
        Ok(config)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn json<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("config serializes")
}

fn preprocess(corpus_dir: &Path, grid_cap: Option<u32>, common: &Common) -> Result<()> {
    let mut config = RunConfig::load(common)?;
    if let Some(cap) = grid_cap {
        config.grid_cap_quarters = cap;
    }
    let out = preprocess_dir(corpus_dir, config.grid_cap_quarters)?;
    create_dir(&common.out)?;
    write_file(&common.out.join("manifest.json"), out.manifest.to_json())?;
    write_file(&common.out.join("dictionaries.json"), out.dictionaries.to_json() + "\n")?;
    let report = serde_json::to_string_pretty(&out.report)? + "\n";
    write_file(&common.out.join("report.json"), report)?;
    eprintln!(
        "converted {} files ({} notes), rejected {}; dictionary sizes {:?}",
        out.report.converted.len(),
        out.report.total_notes,
        out.report.rejected.len(),
        out.dictionaries.sizes()
    );
    for r in &out.report.rejected {
        eprintln!("  rejected {}: {}", r.source, r.reason);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    manifest: &Path,
    dictionaries: Option<&Path>,
    variant: Option<&str>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    trunc_len: Option<usize>,
    learning_rate: Option<f64>,
    no_augment: bool,
    common: &Common,
) -> Result<()> {
    let mut config = RunConfig::load(common)?;
    if let Some(v) = variant {
        config.variant = v.parse()?;
    }
    let t = &mut config.train;
    t.max_epochs = epochs.unwrap_or(t.max_epochs);
    t.batch_size = batch_size.unwrap_or(t.batch_size);
    t.trunc_len = trunc_len.unwrap_or(t.trunc_len);
    t.learning_rate = learning_rate.unwrap_or(t.learning_rate);
    t.augment &= !no_augment;
    t.validate()?;

    let corpus = Manifest::load(manifest)?.scores()?;
    let dict_path = match dictionaries {
        Some(p) => p.to_path_buf(),
        None => manifest.with_file_name("dictionaries.json"),
    };
    let dicts = load_dictionaries(&dict_path)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let (train_set, valid_set) = split_corpus(&corpus, config.train.validation_fraction, &mut rng);
    let mut model = Model::build(config.variant, &dicts, &mut rng)?;
    eprintln!(
        "{}: {} parameters, {} training / {} validation songs",
        config.variant,
        model.param_count(),
        train_set.len(),
        valid_set.len()
    );
    let log = train(&mut model, &train_set, &valid_set, &config.train, &mut rng, |e| match (e.val_nll, e.val_acc) {
        (Some(nll), Some(acc)) => eprintln!(
            "epoch {:4}  train nll {:.4}  val nll {:.4}  val acc {:.3}/{:.3}/{:.3}",
            e.epoch, e.train_nll, nll, acc[0], acc[1], acc[2]
        ),
        _ => eprintln!(
            "epoch {:4}  train nll {:.4}  train acc {:.3}/{:.3}/{:.3}",
            e.epoch, e.train_nll, e.train_acc[0], e.train_acc[1], e.train_acc[2]
        ),
    })?;

    create_dir(&common.out)?;
    let echo = json(&config);
    write_file(&common.out.join("checkpoint.bin"), save_checkpoint(&model, config.train.seed, echo.clone()))?;
    write_file(&common.out.join("trainlog.csv"), provenance_header(&echo) + &log.to_csv())?;
    eprintln!("kept epoch {} of {}", log.best_epoch, log.epochs.len());
    Ok(())
}

fn sample_cmd(
    checkpoint: &Path,
    count: usize,
    temperature: Option<f64>,
    max_notes: Option<usize>,
    common: &Common,
) -> Result<()> {
    let mut config = RunConfig::load(common)?;
    config.sampler.temperature = temperature.unwrap_or(config.sampler.temperature);
    config.sampler.max_notes = max_notes.unwrap_or(config.sampler.max_notes);
    config.sampler.validate()?;
    let (model, header) = load_checkpoint(&read_file(checkpoint)?)?;
    config.variant = header.architecture.variant;

    create_dir(&common.out)?;
    let seed = config.sampler.seed;
    let head = provenance_header(&json(&config));
    let longest = model.dicts.dt.iter().chain(&model.dicts.t).max().copied().unwrap_or(0);
    let grid = build_grid(longest.div_ceil(ATOMS_PER_QUARTER).max(config.grid_cap_quarters));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idx in 0..count {
        let score = generate_score(&model, &config.sampler, &mut rng)?;
        let bytes = write_midi(&score, OUTPUT_DIVISION)?;
        // the dump mirrors what the MIDI file encodes; overlapping notes of
        // equal pitch can be re-paired by note-off matching
        let stored = score_from_midi(&bytes, &grid)?;
        let mut dump = head.clone();
        if stored.notes != score.notes {
            dump.push_str("# note pairing differs from the sampled sequence\n");
            eprintln!("sample {idx}: overlapping equal-pitch notes re-paired when written to MIDI");
        }
        dump.push_str(&stored.to_note_list());
        let stem = format!("sample_{seed}_{idx:04}");
        write_file(&common.out.join(format!("{stem}.mid")), bytes)?;
        write_file(&common.out.join(format!("{stem}.txt")), dump)?;
        eprintln!("{stem}: {} notes", stored.len());
    }
    Ok(())
}

fn evaluate_cmd(corpus: &Path, reference: &Path, pattern_sizes: Option<Vec<usize>>, common: &Common) -> Result<()> {
    let mut config = RunConfig::load(common)?;
    if let Some(sizes) = pattern_sizes {
        config.eval.pattern_sizes = sizes;
    }
    if config.eval.pattern_sizes.is_empty() {
        bail!("at least one pattern size is required");
    }
    let songs = Manifest::load(corpus)?.scores()?;
    let reference_songs = Manifest::load(reference)?.scores()?;
    let report = evaluate_corpora(&songs, &reference_songs, &config.eval)?;
    report.write(&common.out, &json(&config.eval))?;
    for (name, d) in &report.distances {
        println!("{name}\t{d:.4}");
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Preprocess { corpus_dir, grid_cap, common } => preprocess(corpus_dir, *grid_cap, common),
        Command::Train {
            manifest,
            dictionaries,
            variant,
            epochs,
            batch_size,
            trunc_len,
            learning_rate,
            no_augment,
            common,
        } => train_cmd(
            manifest,
            dictionaries.as_deref(),
            variant.as_deref(),
            *epochs,
            *batch_size,
            *trunc_len,
            *learning_rate,
            *no_augment,
            common,
        ),
        Command::Sample { checkpoint, count, temperature, max_notes, common } => {
            sample_cmd(checkpoint, *count, *temperature, *max_notes, common)
        }
        Command::Evaluate { corpus, reference, pattern_sizes, common } => {
            evaluate_cmd(corpus, reference, pattern_sizes.clone(), common)
        }
    }
}
