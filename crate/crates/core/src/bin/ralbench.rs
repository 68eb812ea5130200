use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use ralbench::correct::{correct_corpus, JudgeTemplates};
use ralbench::corpus::{load_corpus, TaskKind};
use ralbench::generate::{BackendRegistry, BackendSpec, GenerationRecord, Generator};
use ralbench::metrics::score;
use ralbench::perturb::{corrupt, make_negative_corpus, merge_diverse, strip_labels, Manifest};
use ralbench::retrieve::{
    BuildContext, EmbedOptions, ProviderRegistry, ProviderSpec, RetrieverRegistry, RetrieverSpec,
};
use ralbench::runner::{execute, plan, report, CellStatus, ExecuteOptions, RunConfig};
use ralbench::select::{build_triplets, train, TrainConfig};
use ralbench::util::{read_jsonl, write_jsonl};

#[derive(Parser)]
#[command(name = "ralbench", version, about = "Robustness harness for retrieval-augmented language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Testbed {
    Unlabeled,
    Counterfactual,
    Diverse,
    Negative,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus file and optionally rewrite it in canonical form.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Derive a testbed corpus from a labeled corpus.
    BuildCorpus {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long, value_enum)]
        kind: Testbed,
        #[arg(long, default_value_t = 1.0)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Source corpora for a diverse corpus (repeatable).
        #[arg(long)]
        other: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Perturbation manifest; defaults to `<out>.manifest.jsonl`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Print the top-k examples for a query.
    Retrieve {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        task: TaskKind,
        /// Retriever kind: bm25, dense, selector or none.
        #[arg(long, default_value = "bm25")]
        retriever: String,
        /// Retriever parameters as a JSON object.
        #[arg(long, default_value = "{}")]
        params: String,
        #[arg(long)]
        query: String,
        #[arg(short, long, default_value_t = 1)]
        k: usize,
    },
    /// Execute a run config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: bool,
        /// Stop after this many instances (for testing interruption).
        #[arg(long, hide = true)]
        budget: Option<usize>,
    },
    /// Compute metrics for a records file.
    Score {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        task: TaskKind,
        /// Comma-separated label space.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
    },
    /// Rewrite a corpus with an LLM judge.
    CorrectCorpus {
        /// Judge backend kind (mock-echo, mock-fixed, http, oracle).
        #[arg(long)]
        judge: String,
        /// Judge parameters as a JSON object.
        #[arg(long, default_value = "{}")]
        judge_params: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        out: PathBuf,
        /// Judgment log; defaults to `<out>.corrections.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Clause inserted into the labeling prompt.
        #[arg(long, default_value = "")]
        purpose: String,
    },
    /// Train the example selector projection.
    TrainSelector {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        task: TaskKind,
        /// Embedding provider spec as JSON, e.g. '{"kind":"hash","dim":64}'.
        #[arg(long)]
        provider: String,
        #[arg(long)]
        out: PathBuf,
        /// Training config as JSON; omitted fields keep their defaults.
        #[arg(long, default_value = "{}")]
        train_config: String,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Regenerate the reports of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn json_object(text: &str, what: &str) -> Result<Map<String, Value>> {
    match serde_json::from_str(text).with_context(|| format!("parsing {what}"))? {
        Value::Object(m) => Ok(m),
        _ => bail!("{what} must be a JSON object"),
    }
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cwd() -> PathBuf {
    PathBuf::from(".")
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ingest { input, task, out } => {
            let c = load_corpus(&input, task)?;
            let space = c
                .label_space
                .as_ref()
                .map(|s| s.iter().cloned().collect::<Vec<_>>().join(", "))
                .unwrap_or_else(|| "-".into());
            println!("{}: {} entries, {}, labels: {space}", c.name, c.len(), c.kind.label());
            if let Some(out) = out {
                c.save(&out)?;
            }
        }
        Command::BuildCorpus {
            input,
            task,
            kind,
            rate,
            seed,
            other,
            out,
            manifest,
        } => {
            let src = load_corpus(&input, task)?;
            let (corpus, m) = match kind {
                Testbed::Unlabeled => (strip_labels(&src)?, Manifest::default()),
                Testbed::Counterfactual => {
                    let p = corrupt(&src, rate, seed)?;
                    (p.corpus, p.manifest)
                }
                Testbed::Negative => {
                    let p = make_negative_corpus(&src, seed)?;
                    (p.corpus, p.manifest)
                }
                Testbed::Diverse => {
                    if other.is_empty() {
                        bail!("a diverse corpus needs at least one --other corpus");
                    }
                    let others = other
                        .iter()
                        .map(|p| load_corpus(p, task))
                        .collect::<ralbench::Result<Vec<_>>>()?;
                    let refs: Vec<_> = others.iter().collect();
                    (merge_diverse(&src, &refs)?, Manifest::default())
                }
            };
            corpus.save(&out)?;
            let mpath = manifest.unwrap_or_else(|| sidecar(&out, ".manifest.jsonl"));
            m.save(&mpath)?;
            println!("{}: {} entries, {} changed", corpus.name, corpus.len(), m.entries.len());
        }
        Command::Retrieve {
            corpus,
            task,
            retriever,
            params,
            query,
            k,
        } => {
            let c = load_corpus(&corpus, task)?;
            let spec = RetrieverSpec {
                name: retriever.clone(),
                kind: retriever,
                params: json_object(&params, "--params")?,
            };
            let r = RetrieverRegistry::builtin().build(&spec, &c, &BuildContext::default())?;
            for hit in r.search(&query, k)? {
                let e = c.get(&hit.id).context("retriever returned an unknown id")?;
                println!(
                    "{}",
                    json!({"rank": hit.rank, "id": hit.id, "score": hit.score, "key": e.key, "value": e.response()})
                );
            }
        }
        Command::Run { config, resume, budget } => {
            let cfg = RunConfig::load(&config)?;
            let p = plan(&cfg)?;
            let s = execute(&p, ExecuteOptions { resume, budget })?;
            let m = &s.manifest;
            println!(
                "run {}: {} done, {} failed, {} pending; {} cells executed, {} skipped; {} backend calls, {} judge calls",
                m.run_id,
                m.count(CellStatus::Done),
                m.count(CellStatus::Failed),
                m.count(CellStatus::Pending),
                s.executed,
                s.skipped,
                s.backend_calls,
                s.judge_calls
            );
            for c in m.cells.iter().filter(|c| c.status == CellStatus::Failed) {
                eprintln!("failed: {}: {}", c.id, c.error.as_deref().unwrap_or(""));
            }
            println!("outputs in {}", cfg.run_dir().display());
        }
        Command::Score { records, task, labels } => {
            let recs: Vec<GenerationRecord> = read_jsonl(&records)?;
            let space: Option<BTreeSet<String>> = (!labels.is_empty()).then(|| labels.into_iter().collect());
            let m = score(task, &recs, space.as_ref())?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::CorrectCorpus {
            judge,
            judge_params,
            input,
            task,
            out,
            log,
            cache,
            purpose,
        } => {
            let c = load_corpus(&input, task)?;
            let spec = BackendSpec {
                name: judge.clone(),
                kind: judge,
                params: json_object(&judge_params, "--judge-params")?,
            };
            let backend = BackendRegistry::builtin().build(&spec, &cwd())?;
            let gen = Arc::new(Generator::new(backend, cache.as_deref()));
            let templates = JudgeTemplates {
                purpose,
                ..JudgeTemplates::default()
            };
            let space = c.label_space.clone();
            let (fixed, logs) = correct_corpus(&c, gen.clone(), space, templates)?;
            fixed.save(&out)?;
            write_jsonl(&log.unwrap_or_else(|| sidecar(&out, ".corrections.jsonl")), &logs)?;
            let revised = logs.iter().filter(|l| l.revised_value.is_some()).count();
            println!(
                "{}: {} entries kept of {}, {} revised, {} judge calls",
                fixed.name,
                fixed.len(),
                c.len(),
                revised,
                gen.backend_calls()
            );
        }
        Command::TrainSelector {
            corpus,
            task,
            provider,
            out,
            train_config,
            cache,
        } => {
            let c = load_corpus(&corpus, task)?;
            let spec: ProviderSpec = serde_json::from_str(&provider).context("parsing --provider")?;
            let p = ProviderRegistry::builtin().build(&spec, &cwd())?;
            let cfg: TrainConfig = serde_json::from_str(&train_config).context("parsing --train-config")?;
            let opts = EmbedOptions {
                cache_dir: cache,
                ..EmbedOptions::default()
            };
            let triplets = build_triplets(&c, p.as_ref(), cfg.negatives_per_anchor, cfg.seed, &opts)?;
            let mut outcome = train(&triplets, &cfg)?;
            outcome.model.provider_id = p.id().to_string();
            outcome.model.save(&out)?;
            let trace: Vec<String> = outcome.loss_trace.iter().map(|l| format!("{l:.6}")).collect();
            println!("{} triplets; loss by epoch: {}", triplets.len(), trace.join(" "));
        }
        Command::Report { run } => {
            let r = report(&run)?;
            print!("{}", r.markdown);
        }
    }
    Ok(())
}
