use std::path::{Path, PathBuf};
use std::io::Write;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use paraug_core::augment::{self, build_training_sets, emit_dpo_dataset, emit_sft_dataset};
use paraug_core::corpus::{load_dataset, Dataset, DatasetFormat, TokenPolicy};
use paraug_core::coreset::{
    self, CcsParams, ImportanceMethod, ImportanceRecord, Orientation, SelectionStrategy, SplitFile,
    SplitRatio,
};
use paraug_core::embedding::{write_vectors, DistanceMeasure, PrecomputedVectors, TextEmbedder};
use paraug_core::metrics::{self, DiversityReport, EmbeddedDataset};
use paraug_core::pipeline::{self, PipelineConfig, Providers};
use paraug_core::trainmath;
use paraug_core::{jsonl, Error, ErrorClass, Result};

#[derive(Parser, Debug)]
#[command(name = "paraug", version, about = "Coreset-focused paraphrase augmentation toolkit")]
struct Cli {
    /// JSON pipeline configuration; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Use the offline hash embedder, template generator and mock judge.
    #[arg(long, global = true)]
    dry_run: bool,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Embed every sample of a dataset and write `{id, text_hash, vector}` lines.
    Embed {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Diversity report (four embedding metrics plus lexical counts).
    Diversity {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        vectors: VectorArgs,
    },
    /// Affinity of an augmented dataset to its original.
    Affinity {
        #[arg(long)]
        augmented: PathBuf,
        #[arg(long)]
        original: PathBuf,
        #[command(flatten)]
        vectors: VectorArgs,
    },
    /// Importance scores from training dynamics.
    Score {
        #[arg(long)]
        dynamics: PathBuf,
        #[arg(long, default_value = "variance")]
        method: ImportanceMethod,
    },
    /// Rank scores and split them into augment/retain/prune tiers.
    Select {
        /// Score file written by `score`.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value = "monotonic", value_parser = ["monotonic", "ccs"])]
        strategy: String,
        #[arg(long)]
        ratio: Option<SplitRatio>,
        #[arg(long, default_value_t = CcsParams::default().bins)]
        bins: usize,
        #[arg(long, default_value_t = CcsParams::default().hard_prune_fraction)]
        hard_prune_fraction: f64,
    },
    /// Build SFT and DPO training sets from a paraphrase corpus.
    Prefs {
        /// JSONL of `{id?, original, paraphrases: [...]}`.
        #[arg(long)]
        corpus: PathBuf,
        /// Share of corpus entries routed to the SFT set.
        #[arg(long, default_value_t = 0.5)]
        sft_fraction: f64,
        #[arg(long)]
        measure: Option<DistanceMeasure>,
    },
    /// Full augmentation run.
    Augment {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        dynamics: Option<PathBuf>,
        #[arg(long)]
        ratio: Option<SplitRatio>,
        #[arg(long)]
        top_n: Option<usize>,
        #[arg(long)]
        candidates: Option<usize>,
    },
    /// Recompute DPO loss and reward margin over a trainer log.
    DpoCheck {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = trainmath::DEFAULT_BETA)]
        beta: f64,
    },
    /// Min-max normalize diversity reports into one table.
    Report {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct VectorArgs {
    /// Precomputed vectors keyed by id or text hash; skips the embedder.
    #[arg(long)]
    vectors: Option<PathBuf>,
}

// Summaries go to stdout after every artifact is on disk, so a closed pipe is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

macro_rules! say_raw {
    ($($arg:tt)*) => {{
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Validation => ExitCode::from(1),
                ErrorClass::ProviderOrIo => ExitCode::from(2),
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = match &cli.config {
        Some(p) => jsonl::read_json(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.dry_run {
        cfg.dry_run = true;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn out_dir(cfg: &PipelineConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    Ok(&cfg.out_dir)
}

fn embed_dataset(ds: &Dataset, cfg: &PipelineConfig, vectors: &VectorArgs) -> Result<EmbeddedDataset> {
    if let Some(path) = &vectors.vectors {
        let pre = PrecomputedVectors::load(path)?;
        let vs = ds
            .samples()
            .iter()
            .map(|s| {
                pre.lookup(&s.id, &s.text)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("no precomputed vector for sample `{}`", s.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        return EmbeddedDataset::from_dataset(ds, vs);
    }
    let mut providers = Providers::for_config(cfg)?;
    let texts: Vec<String> = ds.samples().iter().map(|s| s.text.clone()).collect();
    let vs = providers.embedder.embed_texts(&texts)?;
    providers.embedder.persist()?;
    EmbeddedDataset::from_dataset(ds, vs)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let policy = TokenPolicy::from_config(&cfg.tokens)?;
    match cli.command {
        Command::Embed { dataset } => {
            let ds = load_dataset(&dataset, DatasetFormat::Jsonl)?;
            let emb = embed_dataset(&ds, &cfg, &VectorArgs { vectors: None })?;
            let rows: Vec<_> = ds
                .samples()
                .iter()
                .zip(emb.entries())
                .map(|(s, e)| (s.id.clone(), s.text.clone(), e.vector.clone()))
                .collect();
            let path = out_dir(&cfg)?.join("vectors.jsonl");
            write_vectors(&path, &rows)?;
            say!("wrote {} vectors (dim {}) to {}", rows.len(), emb.dim(), path.display());
        }
        Command::Diversity { dataset, vectors } => {
            let ds = load_dataset(&dataset, DatasetFormat::Jsonl)?;
            let emb = embed_dataset(&ds, &cfg, &vectors)?;
            let report = metrics::diversity_report(&emb, &ds, &policy)?;
            jsonl::write_json(&out_dir(&cfg)?.join(format!("report_{}.json", ds.name())), &report)?;
            say_raw!("{}", report.to_text());
        }
        Command::Affinity {
            augmented,
            original,
            vectors,
        } => {
            let aug = load_dataset(&augmented, DatasetFormat::Jsonl)?;
            let orig = load_dataset(&original, DatasetFormat::Jsonl)?;
            let a = metrics::affinity(
                &embed_dataset(&aug, &cfg, &vectors)?,
                &embed_dataset(&orig, &cfg, &vectors)?,
            )?;
            jsonl::write_json(
                &out_dir(&cfg)?.join("affinity.json"),
                &serde_json::json!({ "augmented": aug.name(), "original": orig.name(), "affinity": a }),
            )?;
            say!("affinity {a}");
        }
        Command::Score { dynamics, method } => {
            let records = coreset::load_dynamics(&dynamics)?;
            for (id, epochs) in coreset::missing_epochs(&records) {
                log::warn!("sample `{id}` is missing epochs {epochs:?}");
            }
            let scores = coreset::score_records(records.values(), method, None)?;
            let path = out_dir(&cfg)?.join("scores.jsonl");
            jsonl::write(&path, &scores)?;
            say!("scored {} samples with {} into {}", scores.len(), method.as_str(), path.display());
        }
        Command::Select {
            scores,
            strategy,
            ratio,
            bins,
            hard_prune_fraction,
        } => {
            let scores: Vec<ImportanceRecord> = jsonl::read(&scores)?.into_iter().map(|(_, r)| r).collect();
            let method = scores
                .first()
                .map(|r| r.method)
                .ok_or_else(|| Error::EmptyDataset("score file".into()))?;
            let strategy = match strategy.as_str() {
                "ccs" => SelectionStrategy::Ccs(CcsParams {
                    bins,
                    hard_prune_fraction,
                }),
                _ => SelectionStrategy::Monotonic,
            };
            let ratio = ratio.unwrap_or(cfg.ratio);
            let split = coreset::select_split(&scores, strategy, ratio, cfg.seed)?;
            let (a, r, p) = (split.augment.len(), split.retain.len(), split.prune.len());
            let path = out_dir(&cfg)?.join(pipeline::SPLIT_FILE);
            jsonl::write_json(&path, &SplitFile::new(split, method, strategy, ratio, cfg.seed))?;
            let direction = match scores[0].orientation {
                Orientation::HigherIsMoreImportant => "higher",
                Orientation::LowerIsMoreImportant => "lower",
            };
            say!("augment {a} / retain {r} / prune {p} ({direction} score is more important)");
        }
        Command::Prefs {
            corpus,
            sft_fraction,
            measure,
        } => {
            let entries = augment::load_paraphrase_corpus(&corpus)?;
            let mut providers = Providers::for_config(&cfg)?;
            let measure = measure.unwrap_or(cfg.measure);
            let sets = build_training_sets(&entries, &mut providers.embedder, measure, sft_fraction, cfg.seed)?;
            providers.embedder.persist()?;
            let dir = out_dir(&cfg)?;
            emit_sft_dataset(&sets.sft, &dir.join("sft.jsonl"))?;
            emit_dpo_dataset(&sets.dpo.pairs, &dir.join("dpo.jsonl"))?;
            say!(
                "sft: {} pairs from {} sources; dpo: {} pairs from {} sources ({} skipped)",
                sets.sft.len(),
                sets.sft_sources,
                sets.dpo.pairs.len(),
                sets.dpo_sources,
                sets.dpo.skipped.len()
            );
        }
        Command::Augment {
            dataset,
            dynamics,
            ratio,
            top_n,
            candidates,
        } => {
            let mut cfg = cfg;
            if let Some(d) = dataset {
                cfg.dataset = d;
            }
            if dynamics.is_some() {
                cfg.dynamics = dynamics;
            }
            if let Some(r) = ratio {
                cfg.ratio = r;
            }
            if let Some(n) = top_n {
                cfg.top_n = n;
            }
            if let Some(k) = candidates {
                cfg.num_candidates = k;
            }
            let out = pipeline::run_augmentation(&cfg)?;
            let c = &out.manifest.counts;
            say!(
                "augment {} / retain {} / prune {} -> {} samples ({} paraphrases)",
                c.augment, c.retain, c.prune, c.output, c.paraphrases
            );
            for (k, v) in &out.gain {
                say!("  gain {k:<12} {v:>+14.6}");
            }
            if let Some(v) = &out.manifest.validity {
                say!("  validity {:.4} ({}/{})", v.rate, v.valid, v.total);
            }
        }
        Command::DpoCheck { log, beta } => {
            let check = trainmath::check_trainer_log(&log, beta)?;
            jsonl::write_json(&out_dir(&cfg)?.join("dpo_check.json"), &check)?;
            say!(
                "{} lines: mean loss {:.6}, mean margin {:.6}",
                check.lines.len(),
                check.mean_loss,
                check.mean_margin
            );
            if let Some(err) = check.max_abs_error {
                say!("max |recomputed - logged| = {err:.3e}");
            }
        }
        Command::Report { reports } => {
            let reports = reports
                .iter()
                .map(|p| jsonl::read_json::<DiversityReport>(p))
                .collect::<Result<Vec<_>>>()?;
            let table = metrics::normalize_reports(&reports)?;
            jsonl::write_json(&out_dir(&cfg)?.join("normalized.json"), &table)?;
            say_raw!("{}", table.to_text());
        }
    }
    Ok(())
}
