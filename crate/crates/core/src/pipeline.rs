//! End-to-end coreset augmentation: score, rank, split, paraphrase the
//! augment tier, keep the most distant candidates, assemble, and report.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    self, mock::ProgrammedJudge, mock::TemplateGenerator, ChatBackend, ChatRequest,
    GenerationProviderConfig, ValidityReport,
};
use crate::corpus::{self, Dataset, DatasetFormat, Origin, TextSample, TokenPolicy, TokenPolicyConfig};
use crate::coreset::{
    self, DynamicsRecord, ImportanceMethod, SelectionStrategy, SplitFile, SplitRatio,
};
use crate::embedding::{
    DistanceMeasure, Embedder, EmbeddingCache, EmbeddingProviderConfig, HashEmbedder, TextEmbedder,
};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::metrics::{self, Affinity, DiversityReport, EmbeddedDataset};

pub const AUGMENTED_FILE: &str = "augmented.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const BASELINE_REPORT_FILE: &str = "report_baseline.json";
pub const AUGMENTED_REPORT_FILE: &str = "report_augmented.json";
pub const GAIN_FILE: &str = "diversity_gain.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const QUARANTINE_DIR: &str = "quarantine";

/// Valid share of the mock judge used in dry runs (97 of every 100).
pub const DRY_RUN_JUDGE: (usize, usize) = (97, 100);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    /// Training-dynamics JSONL. Dry runs without one synthesize dynamics
    /// from the seed.
    pub dynamics: Option<PathBuf>,
    pub importance_method: ImportanceMethod,
    pub strategy: SelectionStrategy,
    pub ratio: SplitRatio,
    pub num_candidates: usize,
    pub top_n: usize,
    pub measure: DistanceMeasure,
    pub embedding: EmbeddingProviderConfig,
    pub embedding_cache: Option<PathBuf>,
    pub generation: GenerationProviderConfig,
    pub judge: Option<GenerationProviderConfig>,
    pub tokens: TokenPolicyConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dry_run: bool,
    pub mock_embedding_dim: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            dynamics: None,
            importance_method: ImportanceMethod::Variance,
            strategy: SelectionStrategy::Monotonic,
            ratio: SplitRatio::default(),
            num_candidates: 5,
            top_n: 1,
            measure: DistanceMeasure::Euclidean,
            embedding: EmbeddingProviderConfig::default(),
            embedding_cache: None,
            generation: GenerationProviderConfig::default(),
            judge: None,
            tokens: TokenPolicyConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("out"),
            dry_run: false,
            mock_embedding_dim: 64,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.ratio.validate()?;
        if self.top_n == 0 || self.top_n > self.num_candidates {
            return Err(Error::invalid(format!(
                "need K >= top_n >= 1, got K={} top_n={}",
                self.num_candidates, self.top_n
            )));
        }
        if self.dynamics.is_none() && !self.dry_run {
            return Err(Error::invalid("a dynamics file is required outside dry-run mode"));
        }
        if self.mock_embedding_dim == 0 {
            return Err(Error::invalid("mock_embedding_dim must be positive"));
        }
        Ok(())
    }

    /// Generation settings with `K` taken from this config.
    pub fn generation_config(&self) -> GenerationProviderConfig {
        GenerationProviderConfig {
            num_candidates: self.num_candidates,
            ..self.generation.clone()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub input: usize,
    pub scored: usize,
    pub augment: usize,
    pub retain: usize,
    pub prune: usize,
    pub candidates: usize,
    pub paraphrases: usize,
    pub output: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderCalls {
    pub embedding: usize,
    pub generation: usize,
    pub judge: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

/// Audit record of one run; written even when the run fails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<StageFailure>,
    pub counts: StageCounts,
    /// Wall-clock seconds per stage; the only non-deterministic field.
    pub timing: IndexMap<String, f64>,
    pub provider_calls: ProviderCalls,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub affinity: Option<Affinity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validity: Option<ValidityReport>,
    pub warnings: Vec<String>,
}

/// Services the pipeline talks to.
pub struct Providers {
    pub embedder: Embedder,
    pub generator: Arc<dyn ChatBackend>,
    pub judge: Option<Arc<dyn ChatBackend>>,
}

impl Providers {
    /// Hash embedder, template generator and, when a judge is configured,
    /// the programmed mock judge.
    pub fn mock(cfg: &PipelineConfig) -> Result<Self> {
        let embedder = Embedder::new(
            cfg.embedding.clone(),
            Arc::new(HashEmbedder::new(cfg.mock_embedding_dim)),
            EmbeddingCache::in_memory(),
        )?;
        let judge: Option<Arc<dyn ChatBackend>> = cfg
            .judge
            .as_ref()
            .map(|_| Arc::new(ProgrammedJudge::new(DRY_RUN_JUDGE.0, DRY_RUN_JUDGE.1)) as Arc<dyn ChatBackend>);
        Ok(Self {
            embedder,
            generator: Arc::new(TemplateGenerator::new()),
            judge,
        })
    }

    /// HTTP clients for every configured endpoint.
    pub fn http(cfg: &PipelineConfig) -> Result<Self> {
        let cache = match &cfg.embedding_cache {
            Some(p) => EmbeddingCache::open(p)?,
            None => EmbeddingCache::in_memory(),
        };
        let judge = match &cfg.judge {
            Some(j) => Some(Arc::new(augment::HttpChatClient::new(j)?) as Arc<dyn ChatBackend>),
            None => None,
        };
        Ok(Self {
            embedder: Embedder::http(cfg.embedding.clone(), cache)?,
            generator: Arc::new(augment::HttpChatClient::new(&cfg.generation_config())?),
            judge,
        })
    }

    pub fn for_config(cfg: &PipelineConfig) -> Result<Self> {
        if cfg.dry_run {
            Self::mock(cfg)
        } else {
            Self::http(cfg)
        }
    }
}

/// Counts requests passing through to a chat backend.
struct Counted<'a> {
    inner: &'a dyn ChatBackend,
    calls: AtomicUsize,
}

impl ChatBackend for Counted<'_> {
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(req)
    }

    fn supports_multiple_choices(&self) -> bool {
        self.inner.supports_multiple_choices()
    }
}

/// An augment-tier source with the paraphrases kept for it.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSource {
    pub source: TextSample,
    pub paraphrases: Vec<String>,
}

/// Mints the paraphrase id for the `k`-th kept paraphrase of `source_id`.
pub fn paraphrase_id(source_id: &str, k: usize) -> String {
    format!("{source_id}#p{k}")
}

/// Each augment source followed by its paraphrases, then the retain set.
/// Paraphrases inherit their source's label.
pub fn assemble(name: &str, augment: &[AugmentedSource], retain: &[TextSample]) -> Result<Dataset> {
    let mut out = Vec::with_capacity(
        augment.iter().map(|a| 1 + a.paraphrases.len()).sum::<usize>() + retain.len(),
    );
    for a in augment {
        out.push(a.source.clone().with_origin(Origin::Original));
        for (k, text) in a.paraphrases.iter().enumerate() {
            out.push(
                TextSample::new(paraphrase_id(&a.source.id, k), text.clone(), a.source.label.clone())
                    .with_origin(Origin::Paraphrase),
            );
        }
    }
    out.extend(retain.iter().map(|s| s.clone().with_origin(Origin::Retained)));
    Dataset::new(name, out)
}

/// Synthetic three-epoch dynamics for dry runs, deterministic in the seed.
pub fn mock_dynamics(dataset: &Dataset, seed: u64) -> Result<Vec<DynamicsRecord>> {
    let classes = dataset.label_registry().len().max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dataset
        .samples()
        .iter()
        .map(|s| {
            let gold = dataset
                .label_registry()
                .get_index_of(&s.label)
                .expect("label registered");
            let epochs: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..classes).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let refs: Vec<&[f64]> = epochs.iter().map(Vec::as_slice).collect();
            DynamicsRecord::from_logits(&s.id, gold, &refs)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
struct CandidateLine<'a> {
    source_id: &'a str,
    candidates: Vec<(String, f64)>,
    kept: Vec<String>,
}

/// Artifacts produced so far; flushed to the output directory on success
/// and to the quarantine directory on failure.
#[derive(Default)]
struct Artifacts {
    split: Option<SplitFile>,
    candidates: Option<Vec<String>>,
    augmented: Option<Dataset>,
    baseline_report: Option<DiversityReport>,
    augmented_report: Option<DiversityReport>,
    gain: Option<IndexMap<String, f64>>,
}

impl Artifacts {
    fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some(s) = &self.split {
            jsonl::write_json(&dir.join(SPLIT_FILE), s)?;
        }
        if let Some(lines) = &self.candidates {
            let path = dir.join(CANDIDATES_FILE);
            let body: String = lines.iter().map(|l| format!("{l}\n")).collect();
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        if let Some(d) = &self.augmented {
            corpus::write_dataset(d, &dir.join(AUGMENTED_FILE))?;
        }
        if let Some(r) = &self.baseline_report {
            jsonl::write_json(&dir.join(BASELINE_REPORT_FILE), r)?;
        }
        if let Some(r) = &self.augmented_report {
            jsonl::write_json(&dir.join(AUGMENTED_REPORT_FILE), r)?;
        }
        if let Some(g) = &self.gain {
            jsonl::write_json(&dir.join(GAIN_FILE), g)?;
        }
        Ok(())
    }
}

/// Everything a successful run returns.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub augmented: Dataset,
    pub manifest: RunManifest,
    pub baseline_report: DiversityReport,
    pub augmented_report: DiversityReport,
    pub gain: IndexMap<String, f64>,
}

/// Runs the pipeline with the providers implied by `cfg`.
pub fn run_augmentation(cfg: &PipelineConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut providers = Providers::for_config(cfg)?;
    run_with_providers(cfg, &mut providers)
}

/// Runs the pipeline against explicit providers. The manifest is written
/// to `cfg.out_dir` whatever the outcome; a failure also writes the
/// artifacts produced so far to the quarantine directory.
pub fn run_with_providers(cfg: &PipelineConfig, providers: &mut Providers) -> Result<RunOutput> {
    cfg.validate()?;
    let mut run = Run {
        cfg,
        providers,
        artifacts: Artifacts::default(),
        manifest: RunManifest {
            config: cfg.clone(),
            status: "running".into(),
            failure: None,
            counts: StageCounts::default(),
            timing: IndexMap::new(),
            provider_calls: ProviderCalls::default(),
            affinity: None,
            validity: None,
            warnings: Vec::new(),
        },
    };
    let result = run.execute();
    run.manifest.provider_calls.embedding = run.providers.embedder.backend_calls();
    if let Err(e) = run.providers.embedder.persist() {
        run.manifest.warnings.push(format!("embedding cache not persisted: {e}"));
    }
    let out_dir = &cfg.out_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    match result {
        Ok((augmented, baseline_report, augmented_report, gain)) => {
            run.manifest.status = "ok".into();
            run.artifacts.write(out_dir)?;
            jsonl::write_json(&out_dir.join(MANIFEST_FILE), &run.manifest)?;
            Ok(RunOutput {
                augmented,
                manifest: run.manifest,
                baseline_report,
                augmented_report,
                gain,
            })
        }
        Err(e) => {
            let stage = match &e {
                Error::Stage { stage, .. } => stage.to_string(),
                _ => "unknown".into(),
            };
            run.manifest.status = "failed".into();
            run.manifest.failure = Some(StageFailure {
                stage,
                message: e.to_string(),
            });
            if let Err(qe) = run.artifacts.write(&out_dir.join(QUARANTINE_DIR)) {
                log::error!("could not write quarantine artifacts: {qe}");
            }
            jsonl::write_json(&out_dir.join(MANIFEST_FILE), &run.manifest)?;
            Err(e)
        }
    }
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    providers: &'a mut Providers,
    artifacts: Artifacts,
    manifest: RunManifest,
}

type Reports = (Dataset, DiversityReport, DiversityReport, IndexMap<String, f64>);

impl Run<'_> {
    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        log::info!("stage {name}");
        let start = Instant::now();
        let out = f(self).map_err(|e| e.at_stage(name));
        self.manifest
            .timing
            .insert(name.to_string(), start.elapsed().as_secs_f64());
        out
    }

    fn execute(&mut self) -> Result<Reports> {
        let cfg = self.cfg;
        let (dataset, policy) = self.stage("load", |run| {
            let ds = corpus::load_dataset(&cfg.dataset, DatasetFormat::Jsonl)?;
            run.manifest.counts.input = ds.len();
            Ok((ds, TokenPolicy::from_config(&cfg.tokens)?))
        })?;

        let scores = self.stage("score", |run| {
            let records = match &cfg.dynamics {
                Some(p) => coreset::load_dynamics(p)?.into_values().collect(),
                None => mock_dynamics(&dataset, cfg.seed)?,
            };
            let by_id: HashSet<&str> = records.iter().map(|r| r.sample_id.as_str()).collect();
            let missing: Vec<&str> = dataset
                .samples()
                .iter()
                .map(|s| s.id.as_str())
                .filter(|id| !by_id.contains(id))
                .collect();
            if !missing.is_empty() {
                return Err(Error::invalid(format!(
                    "{} sample(s) have no training dynamics, first: `{}`",
                    missing.len(),
                    missing[0]
                )));
            }
            let extra = records.iter().filter(|r| dataset.get(&r.sample_id).is_none()).count();
            if extra > 0 {
                run.manifest
                    .warnings
                    .push(format!("{extra} dynamics record(s) ignored: not in the dataset"));
            }
            let kept = records.iter().filter(|r| dataset.get(&r.sample_id).is_some());
            let scores = coreset::score_records(kept, cfg.importance_method, None)?;
            run.manifest.counts.scored = scores.len();
            Ok(scores)
        })?;

        let split = self.stage("split", |run| {
            let split = coreset::select_split(&scores, cfg.strategy, cfg.ratio, cfg.seed)?;
            let counts = &mut run.manifest.counts;
            (counts.augment, counts.retain, counts.prune) =
                (split.augment.len(), split.retain.len(), split.prune.len());
            run.artifacts.split = Some(SplitFile::new(
                split.clone(),
                cfg.importance_method,
                cfg.strategy,
                cfg.ratio,
                cfg.seed,
            ));
            Ok(split)
        })?;
        let sample = |id: &String| dataset.get(id).expect("split ids come from the dataset").clone();
        let augment_sources: Vec<TextSample> = split.augment.iter().map(sample).collect();
        let retain: Vec<TextSample> = split.retain.iter().map(sample).collect();

        let gen_cfg = cfg.generation_config();
        let candidates = self.stage("generate", |run| {
            let counted = Counted {
                inner: run.providers.generator.as_ref(),
                calls: AtomicUsize::new(0),
            };
            let texts: Vec<String> = augment_sources.iter().map(|s| s.text.clone()).collect();
            let out = augment::generate_all(&texts, &gen_cfg, &counted);
            run.manifest.provider_calls.generation = counted.calls.load(Ordering::SeqCst);
            let out = out?;
            run.manifest.counts.candidates = out.iter().map(Vec::len).sum();
            Ok(out)
        })?;

        let augmented_sources = self.stage("sample", |run| {
            let mut lines = Vec::with_capacity(augment_sources.len());
            let mut kept_all = Vec::with_capacity(augment_sources.len());
            for (src, cands) in augment_sources.iter().zip(&candidates) {
                let ranked = augment::rank_candidates(&src.text, cands, &mut run.providers.embedder, cfg.measure)?;
                let kept: Vec<String> = ranked
                    .iter()
                    .take(cfg.top_n)
                    .map(|(i, _)| cands[*i].clone())
                    .collect();
                let line = CandidateLine {
                    source_id: &src.id,
                    candidates: cands
                        .iter()
                        .enumerate()
                        .map(|(i, c)| {
                            let d = ranked.iter().find(|(j, _)| *j == i).map(|(_, d)| *d).unwrap_or(f64::NAN);
                            (c.clone(), d)
                        })
                        .collect(),
                    kept: kept.clone(),
                };
                lines.push(serde_json::to_string(&line)?);
                kept_all.push(AugmentedSource {
                    source: src.clone(),
                    paraphrases: kept,
                });
            }
            run.manifest.counts.paraphrases = kept_all.iter().map(|a| a.paraphrases.len()).sum();
            run.artifacts.candidates = Some(lines);
            Ok(kept_all)
        })?;

        let augmented = self.stage("assemble", |run| {
            let name = format!("{}-augmented", dataset.name());
            let ds = assemble(&name, &augmented_sources, &retain)?;
            run.manifest.counts.output = ds.len();
            run.artifacts.augmented = Some(ds.clone());
            Ok(ds)
        })?;

        if let Some(judge) = self.providers.judge.clone() {
            let judge_cfg = cfg.judge.clone().unwrap_or_default();
            self.stage("judge", |run| {
                let counted = Counted {
                    inner: judge.as_ref(),
                    calls: AtomicUsize::new(0),
                };
                let items: Vec<(String, String, String)> = augmented_sources
                    .iter()
                    .flat_map(|a| {
                        a.paraphrases
                            .iter()
                            .map(|p| (a.source.text.clone(), p.clone(), a.source.label.clone()))
                    })
                    .collect();
                let report = augment::judge_batch(&items, &judge_cfg, &counted);
                run.manifest.provider_calls.judge = counted.calls.load(Ordering::SeqCst);
                run.manifest.validity = Some(report?);
                Ok(())
            })?;
        }

        self.stage("report", |run| {
            let baseline_samples: Vec<TextSample> = augment_sources
                .iter()
                .cloned()
                .chain(retain.iter().cloned())
                .collect();
            let baseline = Dataset::new(format!("{}-baseline", dataset.name()), baseline_samples)?;
            let embed = |run: &mut Self, ds: &Dataset| -> Result<EmbeddedDataset> {
                let texts: Vec<String> = ds.samples().iter().map(|s| s.text.clone()).collect();
                let vectors = run.providers.embedder.embed_texts(&texts)?;
                EmbeddedDataset::from_dataset(ds, vectors)
            };
            let base_emb = embed(run, &baseline)?;
            let aug_emb = embed(run, &augmented)?;
            let base_report = metrics::diversity_report(&base_emb, &baseline, &policy)?;
            let aug_report = metrics::diversity_report(&aug_emb, &augmented, &policy)?;
            let gain = metrics::diversity_gain(&base_report, &aug_report)?;
            run.manifest.affinity = Some(metrics::affinity(&aug_emb, &base_emb)?);
            for w in base_report.warnings.iter().chain(&aug_report.warnings) {
                run.manifest.warnings.push(w.clone());
            }
            run.artifacts.baseline_report = Some(base_report.clone());
            run.artifacts.augmented_report = Some(aug_report.clone());
            run.artifacts.gain = Some(gain.clone());
            Ok((augmented.clone(), base_report, aug_report, gain))
        })
    }
}
