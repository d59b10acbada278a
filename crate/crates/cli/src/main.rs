mod error;
mod settings;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cbag::condition_vocab::{ConditionVocab, DEFAULT_MIN_COUNT};
use cbag::corpus::{
    filter_and_split, load_records, tokenizer_sentences, write_records, AnnotatedRecord, LabelVocabs, WindowContext,
};
use cbag::generator::{generate, GenerationRecord, GenerationRequest, SamplingParams};
use cbag::metrics::{pair_generations, score_sentence, tokenize, DfCorpus, Metric, MetricReport};
use cbag::model::{Model, VocabSizes};
use cbag::tokenizer::{train_unigram, TokenizerModel, UnigramTrainerConfig, DEFAULT_VOCAB_SIZE};
use cbag::trainer::{Assets, Checkpoint, Trainer};
use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use error::{CliError, Context};
use settings::TrainSettings;

#[derive(Parser)]
#[command(name = "cbag", version, about = "Condition-aware abstract generation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Drop records without an abstract and split the rest by seeded id hash
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        test_out: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the unigram subword model on record titles and sentences
    TrainTokenizer {
        #[arg(long)]
        input: PathBuf,
        /// Regular pieces to keep; the four special tokens come on top
        #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
        vocab_size: usize,
        /// Train on this many randomly drawn sentences
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the year/keyword condition vocabulary and the label sets
    BuildVocab {
        #[arg(long)]
        input: PathBuf,
        /// Keywords found in fewer documents are dropped
        #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
        min_count: usize,
        /// Last indexed year; defaults to the latest observed one
        #[arg(long)]
        max_year: Option<i32>,
        #[arg(long)]
        out: PathBuf,
        /// Label sets file; defaults to `<out>.labels`
        #[arg(long)]
        labels_out: Option<PathBuf>,
    },
    /// Count n-gram document frequencies over training abstracts
    BuildDf {
        #[arg(long)]
        input: PathBuf,
        /// Use this many randomly drawn abstracts
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the model, writing checkpoints as it goes
    Train {
        /// Flat TOML file with the same keys as the flags below
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Label sets file; defaults to `<vocab>.labels`
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        checkpoint_dir: PathBuf,
        /// Continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        settings: TrainSettings,
    },
    /// Sample abstracts from a checkpoint
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        title: Option<String>,
        #[arg(long)]
        year: Option<i32>,
        /// Comma-separated keywords
        #[arg(long, value_delimiter = ',')]
        keywords: Vec<String>,
        /// Generate for every record of this file instead of a single title
        #[arg(long, conflicts_with_all = ["title", "year", "keywords"])]
        records: Option<PathBuf>,
        /// Samples per prompt
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long, default_value_t = 256)]
        max_tokens: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSONL output; stdout when absent
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Score generated sentences against reference abstracts
    Evaluate {
        #[arg(long)]
        generations: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        df: PathBuf,
        /// JSON report; stdout when absent
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { error::USAGE } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Split {
            input,
            train_out,
            test_out,
            train_fraction,
            seed,
        } => {
            let records = read_records(&input)?;
            let total = records.len();
            let (train, test) = filter_and_split(records, train_fraction, seed)?;
            write_records(&train_out, &train)?;
            write_records(&test_out, &test)?;
            log::info!(
                "{} train, {} test, {} without abstract",
                train.len(),
                test.len(),
                total - train.len() - test.len()
            );
            Ok(())
        }
        Command::TrainTokenizer {
            input,
            vocab_size,
            sample,
            seed,
            out,
        } => {
            let records = read_records(&input)?;
            let config = UnigramTrainerConfig {
                vocab_size,
                sample_sentences: sample,
                seed,
                ..Default::default()
            };
            let (model, report) = train_unigram(&tokenizer_sentences(&records), &config)?;
            model.save(&out).context(format!("writing {}", out.display()))?;
            log::info!(
                "{} pieces from {} seeds over an alphabet of {}",
                model.num_pieces(),
                report.seed_pieces,
                report.alphabet
            );
            Ok(())
        }
        Command::BuildVocab {
            input,
            min_count,
            max_year,
            out,
            labels_out,
        } => {
            let records = read_records(&input)?;
            let vocab = ConditionVocab::build(&records, min_count, max_year)?;
            vocab.save(&out).context(format!("writing {}", out.display()))?;
            let labels = LabelVocabs::build(&records);
            let labels_path = labels_out.unwrap_or_else(|| sibling(&out, "labels"));
            std::fs::write(&labels_path, labels.to_tsv()).context(format!("writing {}", labels_path.display()))?;
            log::info!(
                "years {}..={}, {} keywords; {} pos, {} dep, {} entity labels",
                vocab.year_base(),
                vocab.last_year(),
                vocab.keyword_count(),
                labels.pos.len(),
                labels.dep.len(),
                labels.ent.len()
            );
            Ok(())
        }
        Command::BuildDf {
            input,
            sample,
            seed,
            out,
        } => {
            let mut records = read_records(&input)?;
            if let Some(n) = sample {
                records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                records.truncate(n);
            }
            let docs: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.abstract_text())).collect();
            let df = DfCorpus::build(&docs)?;
            df.save(&out).context(format!("writing {}", out.display()))?;
            log::info!("document frequencies over {} abstracts", df.documents());
            Ok(())
        }
        Command::Train {
            config,
            data,
            tokenizer,
            vocab,
            labels,
            checkpoint_dir,
            resume,
            settings,
        } => {
            let settings = match config {
                Some(path) => settings.over(TrainSettings::from_file(&path)?),
                None => settings,
            };
            train(TrainInputs {
                data,
                tokenizer,
                labels: labels.unwrap_or_else(|| sibling(&vocab, "labels")),
                vocab,
                checkpoint_dir,
                resume,
                settings,
            })
        }
        Command::Generate {
            checkpoint,
            title,
            year,
            keywords,
            records,
            n,
            temperature,
            top_k,
            top_p,
            max_tokens,
            seed,
            out,
            workers,
        } => {
            let prompts = match records {
                Some(path) => read_records(&path)?
                    .into_iter()
                    .map(|r| Prompt {
                        id: r.id.clone(),
                        title: r.title_text(),
                        year: r.year,
                        keywords: r.keywords,
                    })
                    .collect(),
                None => {
                    let title = title.ok_or_else(|| CliError::usage("--title is required without --records"))?;
                    let year = year.ok_or_else(|| CliError::usage("--year is required without --records"))?;
                    vec![Prompt {
                        id: "generated".into(),
                        title,
                        year,
                        keywords,
                    }]
                }
            };
            let sampling = SamplingParams {
                temperature,
                top_k,
                top_p,
            };
            let lines = generate_all(&checkpoint, &prompts, n, sampling, max_tokens, seed, workers)?;
            write_output(out.as_deref(), &lines)
        }
        Command::Evaluate {
            generations,
            references,
            df,
            out,
            workers,
        } => {
            let generations = read_generations(&generations)?;
            let references = read_records(&references)?;
            let df = DfCorpus::load(&df).context(format!("reading {}", df.display()))?;
            let report = evaluate(&generations, &references, &df, workers)?;
            let json = serde_json::to_string_pretty(&report)?;
            write_output(out.as_deref(), &[json])?;
            let means: Vec<String> = Metric::ALL
                .iter()
                .map(|&m| format!("{} {:.4}", m.name(), report.mean(m)))
                .collect();
            log::info!(
                "{} sentences from {} generations; {} unmatched ids; {}",
                report.sentences,
                report.generations,
                report.unmatched_ids.len(),
                means.join(", ")
            );
            Ok(())
        }
    }
}

/// `dir/name.ext` becomes `dir/name.ext.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn read_records(path: &Path) -> Result<Vec<AnnotatedRecord>, CliError> {
    let report = load_records(path)?;
    if report.skipped > 0 {
        log::warn!("{}: skipped {} malformed records", path.display(), report.skipped);
    }
    if report.records.is_empty() {
        return Err(CliError::data(format!("{} holds no usable records", path.display())));
    }
    Ok(report.records)
}

fn read_generations(path: &Path) -> Result<Vec<GenerationRecord>, CliError> {
    let text = std::fs::read_to_string(path).context(format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).context(format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn write_output(path: Option<&Path>, lines: &[String]) -> Result<(), CliError> {
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    match path {
        Some(p) => std::fs::write(p, text).context(format!("writing {}", p.display())),
        None => std::io::stdout().write_all(text.as_bytes()).context("writing stdout"),
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    if workers == 0 {
        return Err(CliError::usage("--workers must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::data(format!("cannot start workers: {e}")))
}

struct TrainInputs {
    data: PathBuf,
    tokenizer: PathBuf,
    vocab: PathBuf,
    labels: PathBuf,
    checkpoint_dir: PathBuf,
    resume: Option<PathBuf>,
    settings: TrainSettings,
}

fn train(inputs: TrainInputs) -> Result<(), CliError> {
    let TrainInputs {
        data,
        tokenizer,
        vocab,
        labels,
        checkpoint_dir,
        resume,
        settings,
    } = inputs;
    let records = read_records(&data)?;
    let tok = TokenizerModel::load(&tokenizer).context(format!("reading {}", tokenizer.display()))?;
    let conditions = ConditionVocab::load(&vocab).context(format!("reading {}", vocab.display()))?;
    let labels_text = std::fs::read_to_string(&labels).context(format!("reading {}", labels.display()))?;
    let label_sets = LabelVocabs::from_tsv(&labels_text).context(format!("reading {}", labels.display()))?;

    let sizes = VocabSizes {
        token: tok.vocab_size(),
        pos: label_sets.pos.len(),
        dep: label_sets.dep.len(),
        ent: label_sets.ent.len(),
        condition: conditions.total(),
    };
    let model_config = settings.model_config(sizes);
    let train_config = settings.train_config()?;
    model_config.validate()?;
    train_config.validate()?;
    let ctx = WindowContext {
        tokenizer: &tok,
        labels: &label_sets,
        conditions: &conditions,
        n: model_config.max_seq,
        segmentation: train_config.segmentation(),
    };

    let mut trainer = match &resume {
        Some(path) => {
            let ckpt = Checkpoint::<f32>::load_matching(path, &model_config, &train_config)
                .context(format!("resuming from {}", path.display()))?;
            Trainer::resume(ckpt, &records, ctx)?
        }
        None => {
            let model = Model::<f32>::new(model_config.clone(), train_config.seed)?;
            let assets = Assets {
                tokenizer: tok.to_tsv(),
                conditions: conditions.to_tsv(),
                labels: labels_text,
            };
            Trainer::new(model, train_config, &records, ctx)?.with_assets(assets)
        }
    };
    log::info!(
        "{} parameters, {} usable records, starting at step {}",
        trainer.model().num_parameters(),
        trainer.num_records(),
        trainer.step_count()
    );

    let total = settings.steps();
    let remaining = total.saturating_sub(trainer.step_count());
    let log_every = settings.log_every();
    std::fs::create_dir_all(&checkpoint_dir).context(format!("creating {}", checkpoint_dir.display()))?;
    let log_path = checkpoint_dir.join("steps.jsonl");
    let mut step_log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .context(format!("opening {}", log_path.display()))?;
    let mut write_error = None;
    let result = trainer.run(remaining, Some(&checkpoint_dir), |log| {
        if log.step % log_every == 0 || log.step == total {
            log::info!(
                "step {} lr {:.2e} loss {:.4} (token {:.4}, pos {:.4}, dep {:.4}, ent {:.4})",
                log.step,
                log.lr,
                log.loss.total,
                log.loss.token,
                log.loss.pos,
                log.loss.dep,
                log.loss.ent
            );
        }
        let line = serde_json::to_string(log).expect("step log serializes");
        if let Err(e) = writeln!(step_log, "{line}") {
            write_error.get_or_insert(e);
        }
    });
    if let Some(e) = write_error {
        return Err(CliError::from(e)).context(format!("writing {}", log_path.display()));
    }
    let written = result?;
    match written.last() {
        Some(last) => log::info!("finished at step {}; last checkpoint {}", trainer.step_count(), last.display()),
        None => log::info!("nothing to do: already at step {}", trainer.step_count()),
    }
    Ok(())
}

struct Prompt {
    id: String,
    title: String,
    year: i32,
    keywords: Vec<String>,
}

/// Each sample's seed is `seed + index` over prompts in order, so output
/// does not depend on the worker count.
fn generate_all(
    checkpoint: &Path,
    prompts: &[Prompt],
    n: usize,
    sampling: SamplingParams,
    max_tokens: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<String>, CliError> {
    if n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    let ckpt = Checkpoint::<f32>::load(checkpoint).context(format!("reading {}", checkpoint.display()))?;
    let assets = ckpt
        .assets
        .as_ref()
        .ok_or_else(|| CliError::data(format!("{} carries no tokenizer or vocabulary", checkpoint.display())))?;
    let tok = TokenizerModel::from_tsv(&assets.tokenizer).context("checkpoint tokenizer")?;
    let conditions = ConditionVocab::from_tsv(&assets.conditions).context("checkpoint vocabulary")?;
    let jobs: Vec<(&Prompt, u64)> = prompts
        .iter()
        .flat_map(|p| std::iter::repeat_n(p, n))
        .zip(0u64..)
        .map(|(p, i)| (p, seed.wrapping_add(i)))
        .collect();
    let model = &ckpt.model;
    let results: Vec<Result<String, CliError>> = pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|(p, seed)| {
                let request = GenerationRequest {
                    title: p.title.clone(),
                    year: p.year,
                    keywords: p.keywords.clone(),
                    max_tokens,
                    sampling,
                    seed: *seed,
                };
                let out = generate(model, &tok, &conditions, &request).context(format!("prompt {}", p.id))?;
                let record = GenerationRecord {
                    id: p.id.clone(),
                    title: p.title.clone(),
                    year: p.year,
                    keywords: p.keywords.clone(),
                    generated: out.abstract_text,
                    sentences: out.sentences,
                    termination: out.termination.as_str().to_string(),
                    seed: *seed,
                };
                Ok(serde_json::to_string(&record)?)
            })
            .collect()
    });
    results.into_iter().collect()
}

fn evaluate(
    generations: &[GenerationRecord],
    references: &[AnnotatedRecord],
    df: &DfCorpus,
    workers: usize,
) -> Result<MetricReport, CliError> {
    let (matched, unmatched) = pair_generations(generations, references);
    if !unmatched.is_empty() {
        log::warn!("{} generations have no reference record", unmatched.len());
    }
    let jobs: Vec<_> = matched
        .iter()
        .flat_map(|(g, refs)| g.sentences.iter().map(move |s| (s, refs)))
        .collect();
    let scores = pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|(s, refs)| score_sentence(&tokenize(s), &refs.sentences, &refs.title, df))
            .collect::<Vec<_>>()
    });
    Ok(MetricReport::from_scores(generations.len(), unmatched, &scores))
}
