//! Stage runners behind the CLI.
//!
//! Each stage writes into `<out>/<stage>-<key>`, where the key hashes the
//! stage's own config section together with the key of the stage it reads
//! from. A stage directory is built under a temporary name and renamed into
//! place only once every artifact is written, so a failed run never leaves a
//! partial artifact behind, and an existing directory is reused as is.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::catalog::{
    chronological_split, generate_catalog_with, generate_interactions_with, truncate_histories, Catalog, DatasetSplit,
    InteractionLog, TITLE_VOCAB,
};
use crate::cf::train_cf_baseline;
use crate::config::{RunConfig, Variant};
use crate::decode::SidTrie;
use crate::error::{Error, Result};
use crate::eval::{append_ledger, evaluate_model, evaluate_static, popularity_baseline, MetricsReport, RunMeta};
use crate::grpo::{build_rl_prompts, rl_train, write_metrics_csv, RewardContext};
use crate::io;
use crate::policy::{Checkpoint, Policy};
use crate::sft::{build_corpus, build_generative_retrieval, save_corpus, sft_train, write_loss_csv, PromptBuilder};
use crate::tokenizer::{fit_tokenizer, Codebook, SidTable};
use crate::vocab::VocabLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Data,
    Tokenizer,
    Sft,
    Rl,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Tokenizer => "tokenizer",
            Stage::Sft => "sft",
            Stage::Rl => "rl",
            Stage::Eval => "eval",
        }
    }
}

/// What a finished stage wrote, with the hash of every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub dir: PathBuf,
    pub artifacts: BTreeMap<String, String>,
    pub started_at: u64,
    pub finished_at: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    /// Keyed by stage directory name.
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            line: e.line(),
            detail: e.to_string(),
        })
    }

    /// Re-hashes every recorded artifact; returns the ones that changed or
    /// disappeared.
    pub fn stale(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for rec in self.stages.values() {
            for (name, hash) in &rec.artifacts {
                let p = rec.dir.join(name);
                match fs::read(&p) {
                    Ok(bytes) if io::sha256_hex(&bytes) == *hash => {}
                    _ => out.push(p),
                }
            }
        }
        out
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub struct Dataset {
    pub catalog: Catalog,
    pub log: InteractionLog,
    pub split: DatasetSplit,
}

pub struct Tokenized {
    pub codebook: Codebook,
    pub sids: SidTable,
    pub layout: VocabLayout,
    pub tries: SidTrie,
}

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.jsonl";
pub const CODEBOOK_FILE: &str = "codebook.bin";
pub const SIDS_FILE: &str = "sids.jsonl";
pub const POLICY_FILE: &str = "policy.ckpt";
pub const RECORD_FILE: &str = "stage.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LEDGER_FILE: &str = "ledger.csv";

/// Reports written by the evaluation stage.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub popularity: MetricsReport,
    pub sft: MetricsReport,
    pub rl: Option<MetricsReport>,
}

impl EvalSummary {
    /// The most trained model's report.
    pub fn final_report(&self) -> &MetricsReport {
        self.rl.as_ref().unwrap_or(&self.sft)
    }

    pub fn all(&self) -> Vec<&MetricsReport> {
        let mut v = vec![&self.popularity, &self.sft];
        v.extend(self.rl.as_ref());
        v
    }
}

pub struct Pipeline {
    pub config: RunConfig,
    /// Rebuild stages even when their directory exists.
    pub force: bool,
}

struct StageWriter {
    tmp: PathBuf,
    dir: PathBuf,
    record: StageRecord,
}

impl StageWriter {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        io::write_bytes(&self.tmp.join(name), bytes)?;
        self.record.artifacts.insert(name.to_string(), io::sha256_hex(bytes));
        Ok(())
    }

    fn write_file(&mut self, name: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let p = self.tmp.join(name);
        f(&p)?;
        let bytes = io::read_bytes(&p)?;
        self.record.artifacts.insert(name.to_string(), io::sha256_hex(&bytes));
        Ok(())
    }
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Self {
        Self { config, force: false }
    }

    pub fn out(&self) -> &Path {
        &self.config.out
    }

    /// Content key of a stage.
    pub fn key(&self, stage: Stage) -> String {
        let c = &self.config;
        let text = match stage {
            Stage::Data => format!("data\nseed = {}\n{}", c.seed, c.render_sections(&["data."])),
            Stage::Tokenizer => format!("tokenizer\n{}\n{}", self.key(Stage::Data), c.render_sections(&["tokenizer."])),
            Stage::Sft => format!(
                "sft\n{}\n{}",
                self.key(Stage::Tokenizer),
                c.render_sections(&["policy.", "sft."])
            ),
            Stage::Rl => format!("rl\n{}\n{}", self.key(Stage::Sft), c.render_sections(&["rl."])),
            Stage::Eval => {
                let rl = if self.exists(Stage::Rl) { self.key(Stage::Rl) } else { "none".into() };
                format!("eval\n{}\n{rl}\n{}", self.key(Stage::Sft), c.render_sections(&["eval."]))
            }
        };
        io::sha256_hex(text.as_bytes())[..16].to_string()
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.out().join(format!("{}-{}", stage.name(), self.key(stage)))
    }

    pub fn exists(&self, stage: Stage) -> bool {
        self.dir(stage).join(RECORD_FILE).is_file()
    }

    fn require(&self, stage: Stage, file: &str) -> Result<PathBuf> {
        let p = self.dir(stage).join(file);
        if self.exists(stage) && p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { path: p })
        }
    }

    fn begin(&self, stage: Stage) -> Result<StageWriter> {
        let dir = self.dir(stage);
        let tmp = self.out().join(format!(".{}.tmp{}", stage.name(), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        Ok(StageWriter {
            tmp,
            dir: dir.clone(),
            record: StageRecord {
                stage: stage.name().into(),
                key: self.key(stage),
                dir,
                artifacts: BTreeMap::new(),
                started_at: now(),
                finished_at: 0,
            },
        })
    }

    fn commit(&self, mut w: StageWriter) -> Result<StageRecord> {
        let config_text = self.config.render_portable();
        w.write("config.txt", config_text.as_bytes())?;
        w.record.finished_at = now();
        let rec_json = serde_json::to_string_pretty(&w.record).expect("record serializes");
        io::write_bytes(&w.tmp.join(RECORD_FILE), rec_json.as_bytes())?;
        if w.dir.exists() {
            fs::remove_dir_all(&w.dir).map_err(|e| Error::io(&w.dir, e))?;
        }
        fs::rename(&w.tmp, &w.dir).map_err(|e| Error::io(&w.dir, e))?;
        self.record_in_manifest(&w.record)?;
        log::info!("{} stage written to {}", w.record.stage, w.dir.display());
        Ok(w.record)
    }

    fn record_in_manifest(&self, rec: &StageRecord) -> Result<()> {
        let path = self.out().join(MANIFEST_FILE);
        let mut m = if path.is_file() { RunManifest::load(&path)? } else { RunManifest::default() };
        m.config_hash = self.config.hash();
        let name = rec.dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        m.stages.insert(name, rec.clone());
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        io::write_bytes(&path, json.as_bytes())
    }

    fn cached(&self, stage: Stage) -> Result<Option<StageRecord>> {
        if self.force || !self.exists(stage) {
            return Ok(None);
        }
        let p = self.dir(stage).join(RECORD_FILE);
        let rec: StageRecord = serde_json::from_str(&io::read_string(&p)?).map_err(|e| Error::Parse {
            context: p.display().to_string(),
            line: e.line(),
            detail: e.to_string(),
        })?;
        log::info!("{} stage reused from {}", stage.name(), rec.dir.display());
        Ok(Some(rec))
    }

    pub fn gen_data(&self) -> Result<StageRecord> {
        self.config.validate()?;
        if let Some(r) = self.cached(Stage::Data)? {
            return Ok(r);
        }
        let d = &self.config.data;
        let catalog = generate_catalog_with(self.config.seed, &d.catalog_params())?;
        let log = generate_interactions_with(self.config.seed, &catalog, &d.interaction_params())?;
        let mut w = self.begin(Stage::Data)?;
        w.write(CATALOG_FILE, io::to_jsonl(catalog.items())?.as_bytes())?;
        w.write_file(INTERACTIONS_FILE, |p| log.save(p))?;
        self.commit(w)
    }

    pub fn load_data(&self) -> Result<Dataset> {
        let cp = self.require(Stage::Data, CATALOG_FILE)?;
        let lp = self.require(Stage::Data, INTERACTIONS_FILE)?;
        let catalog = Catalog::load(&cp)?;
        let log = InteractionLog::load(&lp, &catalog)?;
        let split = truncate_histories(&chronological_split(&log)?, self.config.data.max_history)?;
        Ok(Dataset { catalog, log, split })
    }

    pub fn train_tokenizer(&self) -> Result<StageRecord> {
        self.config.validate()?;
        let data = self.load_data()?;
        if let Some(r) = self.cached(Stage::Tokenizer)? {
            return Ok(r);
        }
        let fit = fit_tokenizer(&data.catalog, &self.config.tokenizer, self.config.seed)?;
        let mut w = self.begin(Stage::Tokenizer)?;
        w.write(CODEBOOK_FILE, &fit.codebook.to_bytes())?;
        w.write(SIDS_FILE, fit.sids.to_jsonl()?.as_bytes())?;
        let report = serde_json::json!({
            "kind": self.config.get("tokenizer.kind"),
            "utilization": fit.sids.utilization(),
            "colliding_items": fit.sids.n_colliding_items(),
            "max_disambiguation": fit.sids.max_disambiguation(),
            "lloyd_sse": fit.kmeans_trace.as_ref().map(|t| t.sse.clone()),
            "mean_residual_norm": fit.kmeans_trace.as_ref().map(|t| t.mean_residual_norm.clone()),
            "rqvae_loss": fit.rqvae.as_ref().map(|(_, r)| r.loss_history.clone()),
            "rqvae_aborted": fit.rqvae.as_ref().and_then(|(_, r)| r.aborted.clone()),
        });
        w.write("tokenizer_report.json", serde_json::to_string_pretty(&report).expect("json").as_bytes())?;
        self.commit(w)
    }

    pub fn load_tokenizer(&self, catalog: &Catalog) -> Result<Tokenized> {
        let cb = Codebook::load(&self.require(Stage::Tokenizer, CODEBOOK_FILE)?)?;
        let sids = SidTable::load(&self.require(Stage::Tokenizer, SIDS_FILE)?, cb.k())?;
        if sids.len() != catalog.len() {
            return Err(Error::invalid(format!(
                "SID table has {} items, catalog has {}",
                sids.len(),
                catalog.len()
            )));
        }
        let layout = VocabLayout::for_table(TITLE_VOCAB, &sids);
        let tries = SidTrie::build(&sids, &layout, catalog)?;
        Ok(Tokenized {
            codebook: cb,
            sids,
            layout,
            tries,
        })
    }

    fn builder<'a>(&self, data: &'a Dataset, tok: &'a Tokenized) -> PromptBuilder<'a> {
        PromptBuilder {
            catalog: &data.catalog,
            sids: &tok.sids,
            layout: &tok.layout,
            max_len: self.config.policy.max_len,
        }
    }

    pub fn sft(&self) -> Result<StageRecord> {
        self.config.validate()?;
        let data = self.load_data()?;
        let tok = self.load_tokenizer(&data.catalog)?;
        if let Some(r) = self.cached(Stage::Sft)? {
            return Ok(r);
        }
        let pb = self.builder(&data, &tok);
        let train = build_corpus(&data.split.train, &pb, &self.config.sft_mix(), self.config.seed)?;
        let valid = build_generative_retrieval(&data.split.valid, &pb)?;
        let policy = Policy::init(self.config.policy_config(), tok.layout)?;
        let out = sft_train(Checkpoint::new(policy), &train, &valid, &self.config.sft_config())?;
        let mut w = self.begin(Stage::Sft)?;
        w.write_file("corpus.jsonl", |p| save_corpus(p, &train))?;
        w.write(POLICY_FILE, &Checkpoint::new(out.best.clone()).to_bytes())?;
        w.write("last.ckpt", &out.last.to_bytes())?;
        w.write_file("loss.csv", |p| write_loss_csv(p, &out.history))?;
        let report = serde_json::json!({
            "train_examples": train.len(),
            "valid_examples": valid.len(),
            "best_epoch": out.best_epoch,
            "best_valid_loss": out.best_valid_loss,
            "epochs_run": out.history.len(),
            "stopped_early": out.stopped_early,
            "aborted": out.aborted,
        });
        w.write("sft_report.json", serde_json::to_string_pretty(&report).expect("json").as_bytes())?;
        self.commit(w)
    }

    pub fn load_policy(&self, stage: Stage, layout: &VocabLayout) -> Result<Policy> {
        let p = self.require(stage, POLICY_FILE)?;
        Ok(Checkpoint::load_expecting(&p, layout, &self.config.policy_config())?.policy)
    }

    pub fn rl(&self) -> Result<StageRecord> {
        self.config.validate()?;
        let data = self.load_data()?;
        let tok = self.load_tokenizer(&data.catalog)?;
        let start = self.load_policy(Stage::Sft, &tok.layout)?;
        if let Some(r) = self.cached(Stage::Rl)? {
            return Ok(r);
        }
        let pb = self.builder(&data, &tok);
        let prompts = build_rl_prompts(&data.split.train, &pb, &self.config.rl_mix(), self.config.seed)?;
        let cfg = self.config.rl_config();
        let cf = if cfg.recipe.collaborative != 0.0 {
            Some(train_cf_baseline(&data.split.train, data.catalog.len(), &self.config.rl.cf, self.config.seed)?.0)
        } else {
            None
        };
        let ctx = RewardContext {
            catalog: &data.catalog,
            cf: cf.as_ref(),
        };
        let out = rl_train(&start, &prompts, &tok.tries, &ctx, &cfg)?;
        let mut w = self.begin(Stage::Rl)?;
        w.write(POLICY_FILE, &Checkpoint::new(out.policy.clone()).to_bytes())?;
        w.write_file("metrics.csv", |p| write_metrics_csv(p, &out.history))?;
        if cfg.trace {
            w.write("traces.jsonl", io::to_jsonl(&out.traces)?.as_bytes())?;
        }
        let report = serde_json::json!({
            "prompts": prompts.len(),
            "steps": out.history.len(),
            "sampler": cfg.sampler.name(),
            "reward": cfg.recipe.name(),
            "warnings": out.warnings,
        });
        w.write("rl_report.json", serde_json::to_string_pretty(&report).expect("json").as_bytes())?;
        self.commit(w)
    }

    /// Evaluates the popularity baseline, the SFT checkpoint and, when it
    /// exists, the RL checkpoint on the test split.
    pub fn eval(&self) -> Result<EvalSummary> {
        self.config.validate()?;
        let data = self.load_data()?;
        let tok = self.load_tokenizer(&data.catalog)?;
        let sft = self.load_policy(Stage::Sft, &tok.layout)?;
        let rl = if self.exists(Stage::Rl) {
            Some(self.load_policy(Stage::Rl, &tok.layout)?)
        } else {
            None
        };
        if let Some(rec) = self.cached(Stage::Eval)? {
            let load = |s: &str| MetricsReport::load(&rec.dir.join(format!("metrics_{s}.json")));
            return Ok(EvalSummary {
                popularity: load("popularity")?,
                sft: load("sft")?,
                rl: rl.as_ref().map(|_| load("rl")).transpose()?,
            });
        }
        let pb = self.builder(&data, &tok);
        let test = &data.split.test;
        let n = self.config.eval.max_examples.map_or(test.len(), |m| m.min(test.len()));
        let meta = |stage: Stage, name: &str| RunMeta {
            run_id: self.dir(stage).file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            stage: name.into(),
            seed: self.config.seed,
            config_hash: self.config.hash(),
        };
        let ranking = popularity_baseline(&data.split.train, data.catalog.len());
        let summary = EvalSummary {
            popularity: evaluate_static(&ranking, &test[..n], &self.config.eval.ks, &meta(Stage::Data, "popularity"))?,
            sft: evaluate_model(&sft, test, &pb, &tok.tries.sid, &self.config.eval, &meta(Stage::Sft, "sft"))?,
            rl: rl
                .as_ref()
                .map(|p| evaluate_model(p, test, &pb, &tok.tries.sid, &self.config.eval, &meta(Stage::Rl, "rl")))
                .transpose()?,
        };
        let mut w = self.begin(Stage::Eval)?;
        for r in summary.all() {
            w.write(&format!("metrics_{}.json", r.stage), r.to_json()?.as_bytes())?;
        }
        self.commit(w)?;
        let ledger = self.out().join(LEDGER_FILE);
        for r in summary.all() {
            append_ledger(&ledger, r)?;
        }
        Ok(summary)
    }

    /// Every stage in order, reusing whatever already exists.
    pub fn run_all(&self) -> Result<EvalSummary> {
        self.gen_data()?;
        self.train_tokenizer()?;
        self.sft()?;
        self.rl()?;
        self.eval()
    }

    /// Runs each variant on top of this pipeline's config. Stages a variant
    /// shares with the base (data, tokenizer, often SFT) are reused.
    pub fn ablate(&self, variants: &[Variant]) -> Result<AblationReport> {
        let need = self.dir(Stage::Tokenizer).join(SIDS_FILE);
        if !self.exists(Stage::Tokenizer) {
            return Err(Error::MissingArtifact { path: need });
        }
        let mut rows = Vec::new();
        for v in variants {
            let cfg = v.apply(&self.config)?;
            log::info!("ablation variant {} changes {:?}", v.name, self.config.diff(&cfg));
            let p = Pipeline {
                config: cfg,
                force: self.force,
            };
            let summary = p.run_all()?;
            rows.push((v.name.clone(), summary.final_report().clone()));
        }
        let report = AblationReport { rows };
        let dir = self.out().join(format!("ablation-{}", self.key(Stage::Tokenizer)));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        io::write_bytes(&dir.join("ablation.csv"), report.to_csv().as_bytes())?;
        Ok(report)
    }
}

/// Final-model metrics for each ablation variant.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<(String, MetricsReport)>,
}

impl AblationReport {
    fn metrics(r: &MetricsReport) -> Vec<(String, f64)> {
        let mut m: Vec<(String, f64)> = r.hr.iter().map(|(k, v)| (format!("hr@{k}"), *v)).collect();
        m.extend(r.ndcg.iter().map(|(k, v)| (format!("ndcg@{k}"), *v)));
        m.push(("diversity".into(), r.mean_diversity));
        m
    }

    /// One `variant,metric,value` row per variant per metric.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,metric,value\n");
        for (name, r) in &self.rows {
            for (m, v) in Self::metrics(r) {
                let _ = writeln!(s, "{name},{m},{v}");
            }
        }
        s
    }

    /// Metrics as rows, variants as columns.
    pub fn side_by_side(&self) -> String {
        let mut s = format!("{:<12}", "metric");
        for (name, _) in &self.rows {
            let _ = write!(s, " {name:>18}");
        }
        s.push('\n');
        let Some((_, first)) = self.rows.first() else {
            return s;
        };
        for (i, (m, _)) in Self::metrics(first).iter().enumerate() {
            let _ = write!(s, "{m:<12}");
            for (_, r) in &self.rows {
                let _ = write!(s, " {:>18.4}", Self::metrics(r)[i].1);
            }
            s.push('\n');
        }
        s
    }
}
