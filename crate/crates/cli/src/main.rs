use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use d2t_core::backend::map_bounded;
use d2t_core::corpus::{self, CorpusFormat, ParseOptions};
use d2t_core::disambiguation::{ensure_templates, load_manual_templates, PromptSpec, TemplateStore};
use d2t_core::fusion::linearize_baseline;
use d2t_core::harness::{
    self, export_fusion_training_pairs, generate_all, make_experiment_grid, passthrough_pairs,
    read_hypotheses, read_jsonl, run_pipeline, verbalize, write_atomic, write_jsonl, BackendSpec,
    GenerationInput, RunConfig,
};
use d2t_core::metrics::{evaluate, EvalConfig};
use d2t_core::{DataInstance, DecodeConfig, Split};

/// Two-stage data-to-text generation toolkit.
#[derive(Parser)]
#[command(name = "d2t", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a raw corpus file into canonical JSONL.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// webnlg_xml, dart_json, e2e_csv or canonical_jsonl; guessed from the extension if omitted.
        #[arg(long)]
        format: Option<String>,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        error_budget: f64,
    },
    /// Keep test instances whose predicates never occur in train or validation.
    SplitUnseen {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        validation: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Draw a seeded few-shot sample.
    Sample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Template store maintenance.
    Templates {
        #[command(subcommand)]
        command: TemplatesCommand,
    },
    /// Turn each instance into disambiguated sentences and a fusion input.
    Verbalize {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Build marker-linearized baseline inputs.
    Linearize {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run generation over `{id, input}` records.
    Fuse {
        #[arg(long)]
        input: PathBuf,
        /// Backend spec as inline JSON or a path to a JSON file.
        #[arg(long)]
        backend: String,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score hypotheses against a labeled corpus.
    Evaluate {
        #[command(flatten)]
        corpus: CorpusArg,
        /// `{id, text}` JSONL, or plain text with one line per instance.
        #[arg(long)]
        hypotheses: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run one experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run an experiment for each shot count.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,10,20,50,100")]
        shots: Vec<usize>,
        /// Print the expanded configs without running them.
        #[arg(long)]
        dry_run: bool,
    },
    /// Write fusion training pairs.
    ExportPairs {
        #[command(flatten)]
        corpus: OptionalCorpusArg,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Convert an existing pair file instead of building pairs from a corpus.
        #[arg(long, conflicts_with = "input")]
        passthrough: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum TemplatesCommand {
    /// Fill the store with a template for every predicate in the corpus.
    Mine {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        store: PathBuf,
        /// Backend spec as inline JSON or a path; `{"kind": "offline"}` uses fallbacks.
        #[arg(long)]
        backend: String,
        #[arg(long)]
        manual: Option<PathBuf>,
        /// File holding a replacement prompt prefix.
        #[arg(long)]
        prompt_prefix: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
    },
}

#[derive(Args)]
struct CorpusArg {
    /// Corpus file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct OptionalCorpusArg {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, default_value_t = 5)]
    beam_width: u32,
    #[arg(long, default_value_t = 256)]
    max_new_tokens: u32,
    #[arg(long)]
    stop_sequence: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
}

impl From<DecodeArgs> for DecodeConfig {
    fn from(a: DecodeArgs) -> Self {
        DecodeConfig {
            beam_width: a.beam_width,
            max_new_tokens: a.max_new_tokens,
            stop_sequence: a.stop_sequence,
            temperature: a.temperature,
        }
    }
}

fn parse_format_name(name: Option<&str>, path: &Path) -> Result<CorpusFormat> {
    let name = match name {
        Some(n) => n.to_string(),
        None => match path.extension().and_then(|e| e.to_str()) {
            Some("xml") => "webnlg_xml".into(),
            Some("json") => "dart_json".into(),
            Some("csv") => "e2e_csv".into(),
            _ => "canonical_jsonl".into(),
        },
    };
    serde_json::from_value(serde_json::Value::String(name.clone()))
        .with_context(|| format!("unknown corpus format {name:?}"))
}

fn load_corpus(path: &Path, format: Option<&str>, split: Split, budget: f64) -> Result<Vec<DataInstance>> {
    let format = parse_format_name(format, path)?;
    let bytes = corpus::read_file(path)?;
    let options = ParseOptions::new(split).with_error_budget(budget);
    let outcome = corpus::parse_format(format, &bytes, &options)
        .with_context(|| format!("parsing {}", path.display()))?;
    log::info!(
        "{}: {} instances from {} records ({} skipped, {} errors)",
        path.display(),
        outcome.instances.len(),
        outcome.source_records,
        outcome.skipped,
        outcome.errors.len()
    );
    Ok(outcome.instances)
}

fn load_arg(arg: &CorpusArg) -> Result<Vec<DataInstance>> {
    load_corpus(&arg.input, arg.format.as_deref(), Split::Test, 0.01)
}

fn backend_spec(arg: &str) -> Result<BackendSpec> {
    if arg.trim_start().starts_with('{') {
        return serde_json::from_str(arg).context("parsing inline backend spec");
    }
    let path = Path::new(arg);
    let json = std::fs::read_to_string(path).with_context(|| format!("reading {arg}"))?;
    let mut spec: BackendSpec = serde_json::from_str(&json).with_context(|| format!("parsing {arg}"))?;
    if let BackendSpec::Mock { fixture, .. } = &mut spec {
        if fixture.is_relative() {
            *fixture = path.parent().unwrap_or(Path::new(".")).join(&*fixture);
        }
    }
    Ok(spec)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            input,
            format,
            split,
            output,
            error_budget,
        } => {
            let instances = load_corpus(&input, format.as_deref(), split, error_budget)?;
            corpus::save_canonical(&output, &instances)?;
            println!("{} instances -> {}", instances.len(), output.display());
        }
        Command::SplitUnseen {
            train,
            validation,
            test,
            output,
        } => {
            let train = corpus::load_canonical(&train)?;
            let validation = corpus::load_canonical(&validation)?;
            let test_set = corpus::load_canonical(&test)?;
            let unseen = corpus::build_unseen_predicate_split(&train, &validation, &test_set);
            corpus::save_canonical(&output, &unseen)?;
            println!("{} of {} test instances are unseen", unseen.len(), test_set.len());
        }
        Command::Sample { input, k, seed, output } => {
            let pool = corpus::load_canonical(&input)?;
            let sample = corpus::sample_few_shot(&pool, k, seed)?;
            corpus::save_canonical(&output, &sample)?;
        }
        Command::Templates {
            command:
                TemplatesCommand::Mine {
                    corpus,
                    store: store_path,
                    backend,
                    manual,
                    prompt_prefix,
                    parallelism,
                },
        } => {
            let instances: Vec<DataInstance> = load_arg(&corpus)?
                .iter()
                .map(DataInstance::without_references)
                .collect();
            let mut store = TemplateStore::load(&store_path)?;
            if let Some(manual) = manual {
                for (_, entry) in load_manual_templates(&manual)?.entries() {
                    store.insert_with_timestamp(entry.template.clone(), entry.created_at.clone());
                }
            }
            let mut spec = PromptSpec::default();
            if let Some(prefix) = prompt_prefix {
                spec = spec.with_prefix(std::fs::read_to_string(&prefix)?);
            }
            let completion = backend_spec(&backend)?.completion()?;
            let report = ensure_templates(&instances, &mut store, completion.as_deref(), &spec, parallelism);
            store.save(&store_path)?;
            print_json(&report)?;
        }
        Command::Verbalize { corpus, store, output } => {
            let instances = load_arg(&corpus)?;
            let store = TemplateStore::load(&store)?;
            let records = verbalize(&instances, &store)?;
            write_jsonl(&output, &records)?;
        }
        Command::Linearize { corpus, output } => {
            let records: Vec<GenerationInput> = load_arg(&corpus)?
                .iter()
                .map(|inst| GenerationInput {
                    id: inst.id().to_string(),
                    input: linearize_baseline(inst),
                })
                .collect();
            write_jsonl(&output, &records)?;
        }
        Command::Fuse {
            input,
            backend,
            decode,
            parallelism,
            output,
        } => {
            let inputs: Vec<GenerationInput> = read_jsonl(&input)?;
            let decode: DecodeConfig = decode.into();
            decode.validate()?;
            let generation = backend_spec(&backend)?.generation()?;
            let results = generate_all(&inputs, &decode, generation.as_ref(), parallelism.max(1));
            let mut failed = 0;
            let hyps: Vec<_> = results
                .into_iter()
                .map(|(h, status)| {
                    if let harness::InstanceStatus::Failed { error, .. } = status {
                        log::warn!("{}: {error}", h.id);
                        failed += 1;
                    }
                    h
                })
                .collect();
            write_jsonl(&output, &hyps)?;
            if failed > 0 {
                eprintln!("{failed} of {} generations failed", hyps.len());
            }
        }
        Command::Evaluate {
            corpus,
            hypotheses,
            lambda,
            output,
        } => {
            let instances = load_arg(&corpus)?;
            let hyps = read_hypotheses(&hypotheses, &instances)?;
            let pairs: Vec<(String, String)> = hyps.into_iter().map(|h| (h.id, h.text)).collect();
            let config = EvalConfig {
                parent_lambda: lambda,
                ..EvalConfig::default()
            };
            let report = evaluate(&pairs, &instances, &config)?;
            match output {
                Some(path) => write_atomic(&path, report.to_json().as_bytes())?,
                None => print!("{}", report.to_json()),
            }
            eprintln!(
                "BLEU {:.2}  PARENT P {:.4} R {:.4} F1 {:.4}",
                report.bleu, report.parent_precision, report.parent_recall, report.parent_f1
            );
        }
        Command::Run { config } => {
            let config = RunConfig::load(&config)?;
            let manifest = run_pipeline(&config)?;
            print_json(&manifest.counters)?;
        }
        Command::Grid {
            config,
            shots,
            dry_run,
        } => {
            let base = RunConfig::load(&config)?;
            let grid = make_experiment_grid(&base, &shots);
            if dry_run {
                return print_json(&grid);
            }
            let results = map_bounded(&grid, 1, |c| run_pipeline(c).map(|m| (c.name.clone(), m.counters)));
            for r in results {
                let (name, counters) = r?;
                println!("{name}: {} ok, {} failed", counters.instances_ok, counters.instances_failed);
            }
        }
        Command::ExportPairs {
            corpus,
            store,
            passthrough,
            output,
        } => {
            let summary = match (passthrough, corpus.input) {
                (Some(pairs), _) => passthrough_pairs(&pairs, &output)?,
                (None, Some(input)) => {
                    let Some(store) = store else {
                        bail!("--store is required with --input");
                    };
                    let instances = load_corpus(&input, corpus.format.as_deref(), Split::Train, 0.01)?;
                    let store = TemplateStore::load(&store)?;
                    export_fusion_training_pairs(&instances, &store, &output)?
                }
                (None, None) => bail!("give --input or --passthrough"),
            };
            print_json(&summary)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
