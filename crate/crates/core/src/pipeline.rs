//! Run orchestration: sft -> lcdd -> extract -> trigger -> eval, with one
//! directory and manifest per stage.
//!
//! Each stage's `config_hash` chains its own config section with the hash
//! of the stage before it, so changing an early section invalidates every
//! later stage. Inputs are checked against the digests recorded by the
//! stage that produced them.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::carrier::{extract_carrier, CarrierSpec};
use crate::checkpoint::{load_gates, save_gates, CheckpointTriple};
use crate::data::{self, instruction_corpus, parse_corpus, split_corpus, Splits, TaskKind, TaskSpec, Vocab};
use crate::eraser::{optimize_trigger, Objective, SoftTrigger, TriggerConfig};
use crate::error::{Error, Result};
use crate::eval::{
    format_reports, format_table, run_condition_suite, Condition, DecodeConfig, EvalReport, KlPair,
    SuiteConfig, SuiteModels, TriggerHost,
};
use crate::lcdd::{compute_sparsity, lcdd_train, LCDDConfig};
use crate::model::{Gating, ModelConfig, Weights};
use crate::sft::{finetune, pretrain_base, task_examples, TrainConfig};

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub train_samples: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: TaskKind::FixedResponse,
            train_samples: 76,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Tab-separated corpus file; the built-in corpus when absent.
    pub corpus: Option<PathBuf>,
    pub sft_prompts: usize,
    pub trigger_prompts: usize,
    pub eval_prompts: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            corpus: None,
            sft_prompts: 76,
            trigger_prompts: 64,
            eval_prompts: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub max_new_tokens: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { max_new_tokens: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub task: TaskSection,
    pub data: DataSection,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub sft: TrainConfig,
    pub lcdd: LCDDConfig,
    pub trigger: TriggerConfig,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            out_dir: PathBuf::from("runs"),
            seed: 0,
            task: TaskSection::default(),
            data: DataSection::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            sft: TrainConfig::default(),
            lcdd: LCDDConfig::default(),
            trigger: TriggerConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = Self::from_text(&text, path)?;
        if let Some(c) = cfg.data.corpus.as_mut() {
            if c.is_relative() {
                *c = path.parent().unwrap_or(Path::new(".")).join(&*c);
            }
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec::new(self.task.kind, self.task.train_samples)
    }

    /// Copies with every stage seed replaced by its derivation from the
    /// root seed.
    pub fn with_derived_seeds(&self) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = derive_seed(self.seed, "pretrain");
        c.sft.seed = derive_seed(self.seed, "sft");
        c.lcdd.seed = derive_seed(self.seed, "lcdd");
        c.trigger.seed = derive_seed(self.seed, "trigger");
        c
    }
}

/// First eight bytes of `sha256("<root>/<stage>")`, little-endian.
pub fn derive_seed(root: u64, stage: &str) -> u64 {
    let d = Sha256::digest(format!("{root}/{stage}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    Sft,
    Lcdd,
    Extract,
    Trigger,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Sft, Stage::Lcdd, Stage::Extract, Stage::Trigger, Stage::Eval];

    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Sft => "sft",
            Stage::Lcdd => "lcdd",
            Stage::Extract => "extract",
            Stage::Trigger => "trigger",
            Stage::Eval => "eval",
        }
    }

    fn prev(self) -> Option<Stage> {
        let i = Stage::ALL.iter().position(|&s| s == self).expect("listed");
        i.checked_sub(1).map(|j| Stage::ALL[j])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
    /// `config_hash` of the stage that wrote the artifact.
    pub producer_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started: u64,
    pub finished: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub stage: Stage,
    pub config_hash: String,
    pub seed: u64,
    pub input_artifacts: Vec<ArtifactRecord>,
    pub output_artifacts: Vec<ArtifactRecord>,
    pub timestamps: Timestamps,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).expect("manifest serialises");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// SHA-256 over a file, or over a directory's files (relative path and
/// contents) in sorted order.
pub fn digest_path(path: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let full = if rel.as_os_str().is_empty() {
            path.to_path_buf()
        } else {
            path.join(&rel)
        };
        let bytes = fs::read(&full).map_err(|e| Error::io(&full, e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        return Ok(());
    }
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        collect_files(root, &entry.path(), out)?;
    }
    Ok(())
}

fn section_text<T: Serialize>(v: &T) -> String {
    toml::to_string(v).expect("config serialises")
}

/// config hash per stage, chained.
pub fn stage_hashes(cfg: &PipelineConfig) -> Vec<(Stage, String)> {
    let mut prev = String::new();
    let mut out = Vec::new();
    for stage in Stage::ALL {
        let own = match stage {
            Stage::Sft => format!(
                "{}{}{}{}{}{}",
                cfg.seed,
                section_text(&cfg.task),
                section_text(&cfg.data),
                section_text(&cfg.model),
                section_text(&cfg.pretrain),
                section_text(&cfg.sft)
            ),
            Stage::Lcdd => section_text(&cfg.lcdd),
            Stage::Extract => String::new(),
            Stage::Trigger => section_text(&cfg.trigger),
            Stage::Eval => section_text(&cfg.eval),
        };
        let mut h = Sha256::new();
        h.update(prev.as_bytes());
        h.update(stage.dir_name().as_bytes());
        h.update(own.as_bytes());
        prev = hex::encode(h.finalize());
        out.push((stage, prev.clone()));
    }
    out
}

fn hash_of(cfg: &PipelineConfig, stage: Stage) -> String {
    stage_hashes(cfg)
        .into_iter()
        .find(|(s, _)| *s == stage)
        .map(|(_, h)| h)
        .expect("every stage hashed")
}

pub fn load_corpus(cfg: &PipelineConfig) -> Result<Vec<data::Example>> {
    match &cfg.data.corpus {
        Some(p) => parse_corpus(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => Ok(instruction_corpus()),
    }
}

pub fn splits(cfg: &PipelineConfig, corpus: &[data::Example]) -> Result<Splits> {
    split_corpus(
        corpus,
        cfg.data.sft_prompts,
        cfg.data.trigger_prompts,
        cfg.data.eval_prompts,
        derive_seed(cfg.seed, "split"),
    )
}

/// Artifact paths, relative to the run directory.
pub mod layout {
    pub const TRIPLE: &str = "sft/triple";
    pub const SFT_LOG: &str = "sft/train_log.toml";
    pub const LCDD_GATES: &str = "lcdd/gates";
    pub const LCDD_TRIPLE: &str = "lcdd/triple";
    pub const LCDD_LOG: &str = "lcdd/step_log.tsv";
    pub const CARRIER: &str = "extract/carrier.toml";
    pub const TRIGGER: &str = "trigger/trigger.npy";
    pub const TRIGGER_LOG: &str = "trigger/step_log.tsv";
    pub const TRIGGER_MANIFEST: &str = "trigger/trigger.toml";
    pub const REPORT: &str = "eval/report.txt";
    pub const TABLE: &str = "eval/table.csv";
}

#[derive(Debug)]
pub enum StageState {
    Missing,
    /// Ran under a different config.
    Stale,
    /// Ran under this config, but an output no longer verifies.
    Corrupt(Error),
    Complete,
}

pub struct Runner {
    pub config: PipelineConfig,
    pub run_dir: PathBuf,
    /// Progress lines go here (stderr for the CLI).
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
    pub reports: Vec<EvalReport>,
}

impl Runner {
    pub fn new(config: PipelineConfig) -> Self {
        let config = config.with_derived_seeds();
        let run_dir = config.run_dir();
        Self {
            config,
            run_dir,
            verbose: false,
        }
    }

    fn note(&self, msg: &str) {
        if self.verbose {
            eprintln!("[{}] {msg}", self.config.run_id);
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(stage.dir_name()).join(MANIFEST)
    }

    fn record(&self, rel: &str, producer_hash: &str) -> Result<ArtifactRecord> {
        Ok(ArtifactRecord {
            path: PathBuf::from(rel),
            sha256: digest_path(&self.path(rel))?,
            producer_hash: producer_hash.to_string(),
        })
    }

    /// Checks that `rel` still matches the digest its producing stage
    /// recorded, and returns the record for the consumer's manifest.
    fn verified_input(&self, producer: Stage, rel: &str) -> Result<ArtifactRecord> {
        let mpath = self.manifest_path(producer);
        if !mpath.exists() {
            return Err(Error::MissingArtifacts(vec![mpath]));
        }
        let m = RunManifest::load(&mpath)?;
        let expected = hash_of(&self.config, producer);
        if m.config_hash != expected {
            return Err(Error::Provenance {
                path: mpath,
                reason: format!("stage config hash {} does not match current {}", m.config_hash, expected),
            });
        }
        let rec = m
            .output_artifacts
            .iter()
            .find(|a| a.path == Path::new(rel))
            .ok_or_else(|| Error::Provenance {
                path: self.path(rel),
                reason: format!("not listed as an output of {}", producer.dir_name()),
            })?;
        let full = self.path(rel);
        if !full.exists() {
            return Err(Error::MissingArtifacts(vec![full]));
        }
        let actual = digest_path(&full)?;
        if actual != rec.sha256 {
            return Err(Error::Provenance {
                path: full,
                reason: format!("digest {actual} does not match recorded {}", rec.sha256),
            });
        }
        Ok(rec.clone())
    }

    /// Whether the stage ran under the current config and its outputs still
    /// match their recorded digests.
    pub fn stage_state(&self, stage: Stage) -> StageState {
        let Ok(m) = RunManifest::load(&self.manifest_path(stage)) else {
            return StageState::Missing;
        };
        if m.config_hash != hash_of(&self.config, stage) {
            return StageState::Stale;
        }
        for a in &m.output_artifacts {
            let full = self.run_dir.join(&a.path);
            match digest_path(&full) {
                Ok(d) if d == a.sha256 => {}
                Ok(d) => {
                    return StageState::Corrupt(Error::Provenance {
                        path: full,
                        reason: format!("digest {d} does not match recorded {}", a.sha256),
                    })
                }
                Err(_) => return StageState::Corrupt(Error::MissingArtifacts(vec![full])),
            }
        }
        StageState::Complete
    }

    pub fn stage_complete(&self, stage: Stage) -> bool {
        matches!(self.stage_state(stage), StageState::Complete)
    }

    /// Ok if `stage` is complete; its provenance error if its outputs were
    /// tampered with; missing-artifact otherwise.
    fn require_complete(&self, stage: Stage) -> Result<()> {
        match self.stage_state(stage) {
            StageState::Complete => Ok(()),
            StageState::Corrupt(e) => Err(e),
            StageState::Missing | StageState::Stale => Err(Error::MissingArtifacts(vec![self.manifest_path(stage)])),
        }
    }

    fn finish(
        &self,
        stage: Stage,
        seed: u64,
        started: u64,
        inputs: Vec<ArtifactRecord>,
        outputs: &[&str],
    ) -> Result<()> {
        let hash = hash_of(&self.config, stage);
        let output_artifacts = outputs
            .iter()
            .map(|rel| self.record(rel, &hash))
            .collect::<Result<Vec<_>>>()?;
        RunManifest {
            run_id: self.config.run_id.clone(),
            stage,
            config_hash: hash,
            seed,
            input_artifacts: inputs,
            output_artifacts,
            timestamps: Timestamps {
                started,
                finished: now(),
            },
        }
        .save(&self.manifest_path(stage))
    }

    fn fresh_stage_dir(&self, stage: Stage) -> Result<()> {
        let dir = self.run_dir.join(stage.dir_name());
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))
    }

    /// Runs all stages in order. With `resume`, stages whose manifests and
    /// outputs verify against the current config are skipped, up to the
    /// first one that does not.
    pub fn run(&self, resume: bool) -> Result<RunSummary> {
        fs::create_dir_all(&self.run_dir).map_err(|e| Error::io(&self.run_dir, e))?;
        let mut executed = Vec::new();
        let mut skipped = Vec::new();
        let mut still_resuming = resume;
        for stage in Stage::ALL {
            if still_resuming {
                match self.stage_state(stage) {
                    StageState::Complete => {
                        self.note(&format!("{} already complete", stage.dir_name()));
                        skipped.push(stage);
                        continue;
                    }
                    StageState::Corrupt(e) => return Err(e),
                    StageState::Missing | StageState::Stale => {}
                }
            }
            still_resuming = false;
            self.run_stage(stage)?;
            executed.push(stage);
        }
        let reports = self.load_reports()?;
        Ok(RunSummary {
            run_dir: self.run_dir.clone(),
            executed,
            skipped,
            reports,
        })
    }

    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        if let Some(prev) = stage.prev() {
            self.require_complete(prev)?;
        }
        self.note(&format!("running {}", stage.dir_name()));
        let started = now();
        match stage {
            Stage::Sft => self.stage_sft(started),
            Stage::Lcdd => self.stage_lcdd(started),
            Stage::Extract => self.stage_extract(started),
            Stage::Trigger => self.stage_trigger(started),
            Stage::Eval => self.stage_eval(started),
        }
    }

    fn stage_sft(&self, started: u64) -> Result<()> {
        let c = &self.config;
        let vocab = Vocab::standard();
        let corpus = load_corpus(c)?;
        let sp = splits(c, &corpus)?;
        self.fresh_stage_dir(Stage::Sft)?;
        let (base, plog) = pretrain_base(&corpus, &vocab, c.model, &c.pretrain)?;
        self.note(&format!("pretrain loss {:.4} -> {:.4}", plog.initial_loss, plog.final_loss));
        let (triple, slog) = finetune(&base, &c.task_spec(), &sp.sft, &vocab, &c.sft)?;
        self.note(&format!("sft loss {:.4} -> {:.4}", slog.initial_loss, slog.final_loss));
        triple.save(&self.path(layout::TRIPLE))?;
        #[derive(Serialize)]
        struct Logs<'a> {
            pretrain: &'a crate::sft::TrainLog,
            sft: &'a crate::sft::TrainLog,
        }
        let text = toml::to_string(&Logs {
            pretrain: &plog,
            sft: &slog,
        })
        .expect("log serialises");
        let p = self.path(layout::SFT_LOG);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        self.finish(Stage::Sft, c.sft.seed, started, Vec::new(), &[layout::TRIPLE, layout::SFT_LOG])
    }

    fn stage_lcdd(&self, started: u64) -> Result<()> {
        let c = &self.config;
        let input = self.verified_input(Stage::Sft, layout::TRIPLE)?;
        let triple = CheckpointTriple::load(&self.path(layout::TRIPLE))?;
        let vocab = Vocab::standard();
        let sp = splits(c, &load_corpus(c)?)?;
        let data = task_examples(&c.task_spec(), &sp.sft)?;
        self.fresh_stage_dir(Stage::Lcdd)?;
        let out = lcdd_train(&triple, &data, &vocab, &c.lcdd)?;
        self.note(&format!(
            "lcdd stop {:?} after {} steps, sparsity {:.4} (gates {:.4})",
            out.stop,
            out.steps.len(),
            out.sparsity.weight_level,
            out.sparsity.gate_level
        ));
        save_gates(&out.gates, &self.path(layout::LCDD_GATES))?;
        out.triple.save(&self.path(layout::LCDD_TRIPLE))?;
        let p = self.path(layout::LCDD_LOG);
        fs::write(&p, out.step_log()).map_err(|e| Error::io(&p, e))?;
        self.finish(
            Stage::Lcdd,
            c.lcdd.seed,
            started,
            vec![input],
            &[layout::LCDD_GATES, layout::LCDD_TRIPLE, layout::LCDD_LOG],
        )
    }

    fn stage_extract(&self, started: u64) -> Result<()> {
        let input = self.verified_input(Stage::Lcdd, layout::LCDD_GATES)?;
        let gates = load_gates(&self.path(layout::LCDD_GATES))?;
        self.fresh_stage_dir(Stage::Extract)?;
        let carrier = extract_carrier(&gates);
        carrier.save(&self.path(layout::CARRIER))?;
        self.finish(Stage::Extract, self.config.seed, started, vec![input], &[layout::CARRIER])
    }

    fn stage_trigger(&self, started: u64) -> Result<()> {
        let c = &self.config;
        let inputs = vec![
            self.verified_input(Stage::Extract, layout::CARRIER)?,
            self.verified_input(Stage::Lcdd, layout::LCDD_TRIPLE)?,
            self.verified_input(Stage::Lcdd, layout::LCDD_GATES)?,
        ];
        let carrier = CarrierSpec::load(&self.path(layout::CARRIER))?;
        let triple = CheckpointTriple::load(&self.path(layout::LCDD_TRIPLE))?;
        let gates = load_gates(&self.path(layout::LCDD_GATES))?;
        let lcdd = triple.delta_model().materialize(Gating::Gates(&gates))?;
        let sp = splits(c, &load_corpus(c)?)?;
        let prompts = encode_prompts(&sp.trigger);
        self.fresh_stage_dir(Stage::Trigger)?;
        let out = optimize_trigger(&lcdd, &triple.base, &carrier, &prompts, &c.trigger)?;
        for w in &out.warnings {
            self.note(w);
        }
        out.trigger.save(&self.path(layout::TRIGGER))?;
        let p = self.path(layout::TRIGGER_LOG);
        fs::write(&p, out.log_text()).map_err(|e| Error::io(&p, e))?;
        write_trigger_manifest(&self.path(layout::TRIGGER_MANIFEST), &c.trigger, &out)?;
        self.finish(
            Stage::Trigger,
            c.trigger.seed,
            started,
            inputs,
            &[layout::TRIGGER, layout::TRIGGER_LOG, layout::TRIGGER_MANIFEST],
        )
    }

    fn stage_eval(&self, started: u64) -> Result<()> {
        let c = &self.config;
        let inputs = vec![
            self.verified_input(Stage::Sft, layout::TRIPLE)?,
            self.verified_input(Stage::Lcdd, layout::LCDD_TRIPLE)?,
            self.verified_input(Stage::Lcdd, layout::LCDD_GATES)?,
            self.verified_input(Stage::Trigger, layout::TRIGGER)?,
        ];
        let sft_triple = CheckpointTriple::load(&self.path(layout::TRIPLE))?;
        let lcdd_triple = CheckpointTriple::load(&self.path(layout::LCDD_TRIPLE))?;
        let gates = load_gates(&self.path(layout::LCDD_GATES))?;
        let trigger = SoftTrigger::load(&self.path(layout::TRIGGER))?;
        let lcdd = lcdd_triple.delta_model().materialize(Gating::Gates(&gates))?;
        let sparsity = compute_sparsity(&gates, &lcdd_triple)?.weight_level;
        let sp = splits(c, &load_corpus(c)?)?;
        self.fresh_stage_dir(Stage::Eval)?;
        let models = SuiteModels {
            base: &sft_triple.base,
            sft: &sft_triple.finetuned,
            lcdd: &lcdd,
            sparsity,
        };
        let reports = run_condition_suite(
            &models,
            Some((trigger.view(), TriggerHost::Lcdd)),
            &Condition::ALL,
            &Vocab::standard(),
            &sp.eval,
            &self.suite_config(),
        )?;
        for (path, text) in [
            (layout::REPORT, format_reports(&reports)),
            (layout::TABLE, format_table(c.task.kind, &reports)),
        ] {
            let p = self.path(path);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        self.finish(Stage::Eval, c.seed, started, inputs, &[layout::REPORT, layout::TABLE])
    }

    fn suite_config(&self) -> SuiteConfig {
        SuiteConfig {
            decode: DecodeConfig {
                greedy: true,
                max_new_tokens: self.config.eval.max_new_tokens,
            },
            ..SuiteConfig::default()
        }
    }

    fn load_reports(&self) -> Result<Vec<EvalReport>> {
        let p = self.path(layout::REPORT);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        parse_reports(&text, &p)
    }

    /// The 2x2 structure/objective trigger matrix plus a mask-only LCDD
    /// row. Needs completed sft and lcdd stages.
    pub fn ablate(&self) -> Result<Vec<AblationRow>> {
        self.require_complete(Stage::Sft)?;
        self.require_complete(Stage::Lcdd)?;
        let c = &self.config;
        self.verified_input(Stage::Sft, layout::TRIPLE)?;
        self.verified_input(Stage::Lcdd, layout::LCDD_TRIPLE)?;
        self.verified_input(Stage::Lcdd, layout::LCDD_GATES)?;
        let sft_triple = CheckpointTriple::load(&self.path(layout::TRIPLE))?;
        let lcdd_triple = CheckpointTriple::load(&self.path(layout::LCDD_TRIPLE))?;
        let gates = load_gates(&self.path(layout::LCDD_GATES))?;
        let carrier = extract_carrier(&gates);
        let lcdd = lcdd_triple.delta_model().materialize(Gating::Gates(&gates))?;
        let sparsity = compute_sparsity(&gates, &lcdd_triple)?.weight_level;
        let vocab = Vocab::standard();
        let sp = splits(c, &load_corpus(c)?)?;
        let prompts = encode_prompts(&sp.trigger);
        let suite = self.suite_config();
        let dir = self.run_dir.join("ablate");
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let mut rows = Vec::new();
        let mut run_row = |name: &str,
                           host: TriggerHost,
                           objective: Objective,
                           lcdd_w: &Weights,
                           carrier: &CarrierSpec,
                           sparsity: f64|
         -> Result<()> {
            self.note(&format!("ablation row {name}"));
            let tcfg = TriggerConfig {
                objective,
                ..c.trigger.clone()
            };
            let target = match host {
                TriggerHost::Lcdd => lcdd_w,
                TriggerHost::Sft => &sft_triple.finetuned,
            };
            let out = optimize_trigger(target, &sft_triple.base, carrier, &prompts, &tcfg)?;
            out.trigger.save(&dir.join(format!("{name}.npy")))?;
            let models = SuiteModels {
                base: &sft_triple.base,
                sft: &sft_triple.finetuned,
                lcdd: lcdd_w,
                sparsity,
            };
            let before = match host {
                TriggerHost::Lcdd => Condition::Lcdd,
                TriggerHost::Sft => Condition::Sft,
            };
            let reports = run_condition_suite(
                &models,
                Some((out.trigger.view(), host)),
                &[before, Condition::Trig],
                &vocab,
                &sp.eval,
                &suite,
            )?;
            let rate_before = reports[0].behavior_rate(c.task.kind);
            let trig = &reports[1];
            rows.push(AblationRow {
                name: name.to_string(),
                structure: match host {
                    TriggerHost::Lcdd => "lcdd".into(),
                    TriggerHost::Sft => "sft".into(),
                },
                objective,
                sparsity: if host == TriggerHost::Lcdd { sparsity } else { 0.0 },
                rate_before,
                rate_trig: trig.behavior_rate(c.task.kind),
                kl_sft_trig: trig.kl(KlPair::SftTrig).unwrap_or(0.0),
                kl_base_trig: trig.kl(KlPair::BaseTrig).unwrap_or(0.0),
            });
            Ok(())
        };
        for (name, host, obj) in [
            ("lcdd_circuit", TriggerHost::Lcdd, Objective::Circuit),
            ("lcdd_output_only", TriggerHost::Lcdd, Objective::OutputOnly),
            ("sft_circuit", TriggerHost::Sft, Objective::Circuit),
            ("sft_output_only", TriggerHost::Sft, Objective::OutputOnly),
        ] {
            run_row(name, host, obj, &lcdd, &carrier, sparsity)?;
        }

        self.note("mask-only lcdd");
        let data = task_examples(&c.task_spec(), &sp.sft)?;
        let mcfg = LCDDConfig {
            mask_only: true,
            ..c.lcdd.clone()
        };
        let mo = lcdd_train(&sft_triple, &data, &vocab, &mcfg)?;
        save_gates(&mo.gates, &dir.join("mask_only_gates"))?;
        let mo_model = mo.triple.delta_model().materialize(Gating::Gates(&mo.gates))?;
        let mo_carrier = extract_carrier(&mo.gates);
        run_row(
            "mask_only_circuit",
            TriggerHost::Lcdd,
            Objective::Circuit,
            &mo_model,
            &mo_carrier,
            mo.sparsity.weight_level,
        )?;
        let table = format_ablation(&rows);
        let p = dir.join("table.csv");
        fs::write(&p, table).map_err(|e| Error::io(&p, e))?;
        Ok(rows)
    }
}

fn encode_prompts(examples: &[data::Example]) -> Vec<Vec<usize>> {
    let vocab = Vocab::standard();
    examples.iter().map(|e| vocab.encode_prompt(&e.prompt)).collect()
}

/// Trigger manifest: config echo and final loss components.
pub fn write_trigger_manifest(path: &Path, cfg: &TriggerConfig, out: &crate::eraser::TriggerOutcome) -> Result<()> {
    #[derive(Serialize)]
    struct M<'a> {
        format: &'a str,
        config: &'a TriggerConfig,
        final_loss: Option<crate::eraser::LossParts>,
        warnings: &'a [String],
    }
    let text = toml::to_string(&M {
        format: "sparse-carrier/trigger-v1",
        config: cfg,
        final_loss: out.log.last().map(|s| s.parts),
        warnings: &out.warnings,
    })
    .expect("manifest serialises");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub structure: String,
    pub objective: Objective,
    pub sparsity: f64,
    pub rate_before: f64,
    pub rate_trig: f64,
    pub kl_sft_trig: f64,
    pub kl_base_trig: f64,
}

impl AblationRow {
    pub fn drop(&self) -> f64 {
        self.rate_before - self.rate_trig
    }
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut out = String::from("row,structure,objective,sparsity,rate_before,rate_trig,drop,kl_sft_trig,kl_base_trig\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.name,
            r.structure,
            r.objective.name(),
            r.sparsity,
            r.rate_before,
            r.rate_trig,
            r.drop(),
            r.kl_sft_trig,
            r.kl_base_trig
        ));
    }
    out
}

/// Reads back the records written by [`format_reports`].
pub fn parse_reports(text: &str, path: &Path) -> Result<Vec<EvalReport>> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut out: Vec<EvalReport> = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let condition = Condition::ALL
                .into_iter()
                .find(|c| c.name() == name)
                .ok_or_else(|| bad(format!("unknown condition {name}")))?;
            out.push(EvalReport {
                condition,
                fixed_response_rate: 0.0,
                awr: 0.0,
                kl_records: Vec::new(),
                sparsity: 0.0,
                prompts_evaluated: 0,
                decode: DecodeConfig::default(),
            });
            continue;
        }
        let r = out.last_mut().ok_or_else(|| bad("field before any section".into()))?;
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| bad(format!("malformed line {line:?}")))?;
        let num = |v: &str| v.parse::<f64>().map_err(|e| bad(format!("{k}: {e}")));
        match k {
            "fixed_response_rate" => r.fixed_response_rate = num(v)?,
            "awr" => r.awr = num(v)?,
            "sparsity" => r.sparsity = num(v)?,
            "prompts_evaluated" => r.prompts_evaluated = num(v)? as usize,
            "decode" => {
                for part in v.split_whitespace() {
                    match part.split_once(':') {
                        Some(("greedy", g)) => r.decode.greedy = g == "true",
                        Some(("max_new_tokens", n)) => r.decode.max_new_tokens = num(n)? as usize,
                        _ => return Err(bad(format!("decode field {part:?}"))),
                    }
                }
            }
            other => {
                let pair = other
                    .strip_prefix("kl[")
                    .and_then(|s| s.strip_suffix(']'))
                    .and_then(|s| [KlPair::SftLcdd, KlPair::SftTrig, KlPair::BaseTrig].into_iter().find(|p| p.name() == s))
                    .ok_or_else(|| bad(format!("unknown field {other}")))?;
                r.kl_records.push((pair, num(v)?));
            }
        }
    }
    Ok(out)
}
