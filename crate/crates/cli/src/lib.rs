//! Experiment orchestration: deterministic seed fan-out, on-disk artifact
//! layout, and the staged pipeline
//! synth → record → preprocess → features → train → evaluate → online → report.
//!
//! Every stage reads its inputs from the output directory and writes its
//! products back there, so the `pipeline` run and a manual concatenation of
//! stage subcommands produce identical artifacts. A manifest records a
//! SHA-256 per artifact; reruns with the same master seed reproduce every
//! hash bit-for-bit.

use erp_core::decode::{decide_session, online_session, FeedbackEvent};
use erp_core::error::{Error, Result};
use erp_core::eval::{
    aggregate_entries, render_table, score_model_set, train_subject_models, EvalOptions,
    EvalReport, ModelFamily, ModelGroup, SubjectCorpus, SubjectModelSet, TrainTag,
};
use erp_core::features::{extract_all, write_features_csv};
use erp_core::models::{Cnn, Forest};
use erp_core::preprocess::{preprocess_recording, PreprocessOptions, RejectionReport};
use erp_core::quality::{
    anova_oneway, band_power, bonferroni, erp_stats, median_waveform, pearson, trial_rms,
    welch_psd, welch_ttest, ErpStatsReport, RmsSegment, RmsSummary, StatResult, WelchParams,
};
use erp_core::stream::{
    read_epochs, read_recording, record_session, replay, write_epochs, write_recording,
    EpochsFile, EpochsHeader, LossModel, MarkerEvent, Recording, EPOCHS_KIND,
};
use erp_core::synth::{default_roster, generate_session, GenerationOptions, SubjectGroup, SubjectModel};
use erp_core::types::{Channel, Condition, Epoch, QualityFlag, SessionSpec};
use erp_core::{Real, Sample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Everything a full experiment needs. All fields have defaults, so a JSON
/// config may specify only the overrides it cares about.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Roster file; `None` uses the built-in ten-subject roster.
    pub roster_path: Option<PathBuf>,
    /// Restrict the experiment to these subject ids (default: all).
    pub subjects: Option<Vec<String>>,
    pub n_lab_sessions: usize,
    pub n_car_sessions: usize,
    pub car_runs_per_session: u32,
    pub generation: GenerationOptions,
    pub loss_in_lab: LossModel,
    pub loss_in_car: LossModel,
    pub preprocess: PreprocessOptions,
    pub eval: EvalOptions,
    /// Model replayed by the online simulation (split 0 of this cell).
    pub online_tag: TrainTag,
    pub online_family: ModelFamily,
    /// Stream-time/wall-time multiplier for replay; `None` replays without
    /// pacing.
    pub online_rate: Option<f64>,
    pub output_dir: PathBuf,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // The default training profile compensates the short epoch budget
        // with a larger step size; the model's own default learning rate is
        // tuned for long schedules.
        let mut eval = EvalOptions::default();
        eval.cnn.learning_rate = 3e-4;
        eval.cnn_epoch_grid = vec![7];
        ExperimentConfig {
            roster_path: None,
            subjects: None,
            n_lab_sessions: 6,
            n_car_sessions: 3,
            car_runs_per_session: 50,
            generation: GenerationOptions::default(),
            loss_in_lab: LossModel::in_lab(),
            loss_in_car: LossModel::in_car(),
            preprocess: PreprocessOptions::default(),
            eval,
            online_tag: TrainTag::InCar,
            online_family: ModelFamily::Forest,
            online_rate: None,
            output_dir: PathBuf::from("erp-out"),
            master_seed: 20_240_001,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.roster_path {
            if !p.exists() {
                return Err(Error::invalid(format!("roster file not found: {}", p.display())));
            }
        }
        if self.n_lab_sessions != erp_core::eval::N_LAB_SESSIONS
            || self.n_car_sessions != erp_core::eval::N_CAR_SESSIONS
        {
            return Err(Error::invalid(format!(
                "the evaluation protocol needs exactly {} lab and {} car sessions",
                erp_core::eval::N_LAB_SESSIONS,
                erp_core::eval::N_CAR_SESSIONS
            )));
        }
        if self.car_runs_per_session == 0 {
            return Err(Error::invalid("car_runs_per_session must be ≥ 1"));
        }
        if self.eval.tags.is_empty() || self.eval.families.is_empty() {
            return Err(Error::invalid("eval.tags and eval.families must be non-empty"));
        }
        if let Some(r) = self.online_rate {
            if !(r > 0.0) {
                return Err(Error::invalid("online_rate must be > 0"));
            }
        }
        Ok(())
    }

    /// Digest of the scientific content of the config: everything except
    /// the output directory, so runs into different directories compare
    /// equal.
    pub fn digest(&self) -> String {
        let mut normalized = self.clone();
        normalized.output_dir = PathBuf::new();
        let text = serde_json::to_string(&normalized).expect("config serializes");
        sha256_hex(text.as_bytes())
    }

    /// The roster after resolution and subject filtering.
    pub fn resolve_roster(&self) -> Result<Vec<SubjectModel>> {
        let full = match &self.roster_path {
            Some(p) => erp_core::synth::load_roster(p)?,
            None => default_roster(),
        };
        let Some(wanted) = &self.subjects else {
            return Ok(full);
        };
        let mut out = Vec::with_capacity(wanted.len());
        for id in wanted {
            match full.iter().find(|s| &s.subject_id == id) {
                Some(s) => out.push(s.clone()),
                None => return Err(Error::invalid(format!("subject {id} is not in the roster"))),
            }
        }
        Ok(out)
    }

    /// Session ids with their condition, lab sessions first.
    pub fn session_ids(&self) -> Vec<(String, Condition)> {
        let mut out = Vec::new();
        for i in 1..=self.n_lab_sessions {
            out.push((format!("lab-{i:02}"), Condition::InLab));
        }
        for i in 1..=self.n_car_sessions {
            out.push((format!("car-{i:02}"), Condition::InCar));
        }
        out
    }

    /// The session layout of one session, seeded for synthesis.
    pub fn session_spec(&self, subject: &str, session_id: &str, condition: Condition) -> SessionSpec {
        let seed = self.stage_seed(&format!("synth/{subject}/{session_id}"));
        match condition {
            Condition::InLab => SessionSpec::in_lab(seed),
            Condition::InCar => SessionSpec::in_car(self.car_runs_per_session, seed),
        }
    }

    /// Deterministic per-stage seed: master seed XOR the first eight bytes
    /// of SHA-256 over the stage name.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let digest = Sha256::digest(stage.as_bytes());
        let mut eight = [0u8; 8];
        eight.copy_from_slice(&digest[..8]);
        self.master_seed ^ u64::from_le_bytes(eight)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

// ---------------------------------------------------------------------------
// Artifact layout
// ---------------------------------------------------------------------------

/// Relative artifact paths under the output directory.
pub mod paths {
    pub fn roster() -> String {
        "roster.json".into()
    }
    pub fn config() -> String {
        "config.json".into()
    }
    pub fn raw(subject: &str, session: &str) -> String {
        format!("raw/{subject}/{session}.json")
    }
    pub fn recording(subject: &str, session: &str) -> String {
        format!("recordings/{subject}/{session}.erpb")
    }
    pub fn epochs(subject: &str, session: &str) -> String {
        format!("epochs/{subject}/{session}.epochs.erpb")
    }
    pub fn rejection(subject: &str) -> String {
        format!("preprocess/{subject}.json")
    }
    pub fn features(subject: &str, session: &str) -> String {
        format!("features/{subject}/{session}.csv")
    }
    pub fn model(subject: &str, tag: &str, family: &str, split: usize) -> String {
        format!("models/{subject}/{tag}_{family}_{split:02}.json")
    }
    pub fn train_summary(subject: &str) -> String {
        format!("train/{subject}.json")
    }
    pub fn subject_eval(subject: &str) -> String {
        format!("eval/{subject}.json")
    }
    pub fn eval_report() -> String {
        "eval/report.json".into()
    }
    pub fn eval_table() -> String {
        "eval/table.txt".into()
    }
    pub fn online(subject: &str) -> String {
        format!("online/{subject}.json")
    }
    pub fn erp_stats() -> String {
        "report/erp_stats.json".into()
    }
    pub fn waveforms() -> String {
        "report/waveforms.csv".into()
    }
    pub fn psd() -> String {
        "report/psd.csv".into()
    }
    pub fn psd_tests() -> String {
        "report/psd_tests.json".into()
    }
    pub fn rms() -> String {
        "report/rms.json".into()
    }
    pub fn correlations() -> String {
        "report/correlations.json".into()
    }
    pub fn correlations_csv() -> String {
        "report/correlations.csv".into()
    }
    pub fn manifest() -> String {
        "manifest.json".into()
    }
}

fn write_atomic(root: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, &path)?;
    Ok(())
}

fn write_json<T: Serialize>(root: &Path, rel: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(root, rel, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(root: &Path, rel: &str) -> Result<T> {
    let path = root.join(rel);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

pub const STAGE_NAMES: [&str; 8] = [
    "roster",
    "record",
    "preprocess",
    "features",
    "train",
    "evaluate",
    "online",
    "report",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStatus {
    Incomplete,
    Complete,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_digest: String,
    pub master_seed: u64,
    pub status: PipelineStatus,
    pub failed_stage: Option<String>,
    pub completed_stages: Vec<String>,
    /// Relative artifact path → SHA-256 of the file bytes.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    fn new(config: &ExperimentConfig) -> Manifest {
        Manifest {
            schema_version: 1,
            config_digest: config.digest(),
            master_seed: config.master_seed,
            status: PipelineStatus::Incomplete,
            failed_stage: None,
            completed_stages: Vec::new(),
            artifacts: BTreeMap::new(),
        }
    }

    fn save(&self, root: &Path) -> Result<()> {
        write_json(root, &paths::manifest(), self)
    }

    pub fn load(root: &Path) -> Result<Manifest> {
        read_json(root, &paths::manifest())
    }

    /// Hash and register one artifact that was just written.
    fn register(&mut self, root: &Path, rel: &str) -> Result<()> {
        let digest = sha256_file(&root.join(rel))?;
        self.artifacts.insert(rel.to_string(), digest);
        Ok(())
    }

    fn register_all(&mut self, root: &Path, rels: impl IntoIterator<Item = String>) -> Result<()> {
        for rel in rels {
            self.register(root, &rel)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Stage: synthesis and recording
// ---------------------------------------------------------------------------

/// Raw synthesized session before wireless transport — the intermediate of
/// the `synth` subcommand, consumed by `record`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawSession {
    pub subject: String,
    pub session_id: String,
    pub spec: SessionSpec,
    /// `[channel][sample]`, µV.
    pub channels: Vec<Vec<Real>>,
    pub markers: Vec<MarkerEvent>,
}

/// Synthesize one session (continuous stream + markers).
pub fn synth_session(
    config: &ExperimentConfig,
    subject: &SubjectModel,
    session_id: &str,
    condition: Condition,
) -> Result<RawSession> {
    let spec = config.session_spec(&subject.subject_id, session_id, condition);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (channels, markers) = generate_session(&spec, subject, &config.generation, &mut rng)?;
    Ok(RawSession {
        subject: subject.subject_id.clone(),
        session_id: session_id.to_string(),
        spec,
        channels,
        markers,
    })
}

/// Simulate wireless transport of a raw session into a recording.
pub fn record_raw(config: &ExperimentConfig, raw: &RawSession) -> Result<Recording> {
    let loss = match raw.spec.condition {
        Condition::InLab => &config.loss_in_lab,
        Condition::InCar => &config.loss_in_car,
    };
    let seed = config.stage_seed(&format!("record/{}/{}", raw.subject, raw.session_id));
    record_session(
        &raw.spec,
        &raw.subject,
        &raw.session_id,
        &raw.channels,
        &raw.markers,
        loss,
        seed,
    )
}

fn for_each_subject<T: Send>(
    roster: &[SubjectModel],
    f: impl Fn(&SubjectModel) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = roster.par_iter().map(|s| f(s)).collect();
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        out.push(r?);
    }
    Ok(out)
}

/// Synthesize every session to raw-session JSON files (manual staging;
/// `run_pipeline` keeps the raw sessions in memory instead).
pub fn stage_synth_raw(config: &ExperimentConfig, roster: &[SubjectModel]) -> Result<Vec<String>> {
    let sessions = config.session_ids();
    let nested = for_each_subject(roster, |subject| {
        let mut written = Vec::new();
        for (session_id, condition) in &sessions {
            let raw = synth_session(config, subject, session_id, *condition)?;
            let rel = paths::raw(&subject.subject_id, session_id);
            write_json(&config.output_dir, &rel, &raw)?;
            written.push(rel);
        }
        log::info!("synthesized {} raw sessions for {}", sessions.len(), subject.subject_id);
        Ok(written)
    })?;
    Ok(nested.into_iter().flatten().collect())
}

/// Turn previously written raw sessions into recordings (manual staging
/// counterpart of the fused path inside `stage_record`).
pub fn stage_record_from_raw(
    config: &ExperimentConfig,
    roster: &[SubjectModel],
) -> Result<Vec<String>> {
    let sessions = config.session_ids();
    let nested = for_each_subject(roster, |subject| {
        let sid = &subject.subject_id;
        let mut written = Vec::new();
        for (session_id, _) in &sessions {
            let raw: RawSession = read_json(&config.output_dir, &paths::raw(sid, session_id))?;
            let rec = record_raw(config, &raw)?;
            let rel = paths::recording(sid, session_id);
            let path = config.output_dir.join(&rel);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            write_recording(&path, &rec)?;
            written.push(rel);
        }
        Ok(written)
    })?;
    Ok(nested.into_iter().flatten().collect())
}

/// Synthesize and record every session of every subject.
pub fn stage_record(config: &ExperimentConfig, roster: &[SubjectModel]) -> Result<Vec<String>> {
    let sessions = config.session_ids();
    let nested = for_each_subject(roster, |subject| {
        let mut written = Vec::new();
        for (session_id, condition) in &sessions {
            let raw = synth_session(config, subject, session_id, *condition)?;
            let rec = record_raw(config, &raw)?;
            let rel = paths::recording(&subject.subject_id, session_id);
            let path = config.output_dir.join(&rel);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            write_recording(&path, &rec)?;
            written.push(rel);
        }
        log::info!("recorded {} sessions for {}", sessions.len(), subject.subject_id);
        Ok(written)
    })?;
    Ok(nested.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// Stage: preprocessing
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionRejection {
    pub session_id: String,
    pub condition: Condition,
    pub skipped_edge: usize,
    pub report: RejectionReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubjectRejection {
    pub subject: String,
    pub sessions: Vec<SessionRejection>,
}

/// Filter, epoch and reject every recorded session; write epoch containers
/// and per-subject rejection reports.
pub fn stage_preprocess(config: &ExperimentConfig, roster: &[SubjectModel]) -> Result<Vec<String>> {
    let sessions = config.session_ids();
    let nested = for_each_subject(roster, |subject| {
        let sid = &subject.subject_id;
        let mut written = Vec::new();
        let mut rejections = Vec::new();
        for (session_id, condition) in &sessions {
            let rec = read_recording(&config.output_dir.join(paths::recording(sid, session_id)))?;
            let out = preprocess_recording(&rec, &config.preprocess)?;
            let rel = paths::epochs(sid, session_id);
            let path = config.output_dir.join(&rel);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            write_epochs(
                &path,
                &EpochsFile {
                    header: EpochsHeader {
                        schema_version: rec.header.schema_version,
                        kind: EPOCHS_KIND.to_string(),
                        subject: rec.header.subject.clone(),
                        session_id: rec.header.session_id.clone(),
                        condition: rec.header.condition,
                        channels: rec.header.channels.clone(),
                        sampling_rate_hz: rec.header.sampling_rate_hz,
                    },
                    epochs: out.epochs,
                },
            )?;
            written.push(rel);
            rejections.push(SessionRejection {
                session_id: session_id.clone(),
                condition: *condition,
                skipped_edge: out.skipped_edge,
                report: out.report,
            });
        }
        let rel = paths::rejection(sid);
        write_json(
            &config.output_dir,
            &rel,
            &SubjectRejection { subject: sid.clone(), sessions: rejections },
        )?;
        written.push(rel);
        Ok(written)
    })?;
    Ok(nested.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// Stage: features
// ---------------------------------------------------------------------------

/// Extract the per-epoch feature table of every kept epoch, one CSV per
/// session.
pub fn stage_features(config: &ExperimentConfig, roster: &[SubjectModel]) -> Result<Vec<String>> {
    let sessions = config.session_ids();
    let nested = for_each_subject(roster, |subject| {
        let sid = &subject.subject_id;
        let mut written = Vec::new();
        for (session_id, _) in &sessions {
            let file = read_epochs(&config.output_dir.join(paths::epochs(sid, session_id)))?;
            let kept: Vec<Epoch> = file
                .epochs
                .into_iter()
                .filter(|e| e.quality == QualityFlag::Kept)
                .collect();
            let rows = extract_all(&kept);
            let mut buf = Vec::new();
            write_features_csv(&mut buf, &rows)?;
            let rel = paths::features(sid, session_id);
            write_atomic(&config.output_dir, &rel, &buf)?;
            written.push(rel);
        }
        Ok(written)
    })?;
    Ok(nested.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// Stage: training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainGroupSummary {
    pub tag: TrainTag,
    pub family: ModelFamily,
    pub cnn_epochs: Option<usize>,
    pub n_train_trials: Vec<usize>,
    pub model_files: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub subject: String,
    pub test_digest: String,
    pub groups: Vec<TrainGroupSummary>,
}

/// Load one subject's epoch corpus from the epoch artifacts.
pub fn load_corpus(config: &ExperimentConfig, subject: &str) -> Result<SubjectCorpus> {
    let mut lab = Vec::new();
    let mut car = Vec::new();
    for (session_id, condition) in config.session_ids() {
        let file = read_epochs(&config.output_dir.join(paths::epochs(subject, &session_id)))?;
        match condition {
            Condition::InLab => lab.push(file.epochs),
            Condition::InCar => car.push(file.epochs),
        }
    }
    SubjectCorpus::new(subject.to_string(), lab, car)
}

/// Fit the per-subject model sets and persist every fitted model.
pub fn stage_train(config: &ExperimentConfig, roster: &[SubjectModel]) -> Result<Vec<String>> {
    let nested = for_each_subject(roster, |subject| {
        let sid = &subject.subject_id;
        let corpus = load_corpus(config, sid)?;
        let seed = config.stage_seed(&format!("train/{sid}"));
        let set = train_subject_models(&corpus, &config.eval, seed)?;
        let mut written = Vec::new();
        let mut groups = Vec::new();
        for g in &set.groups {
            let mut model_files = Vec::new();
            for (k, forest) in g.forests.iter().enumerate() {
                let rel = paths::model(sid, g.tag.name(), g.family.name(), k);
                write_atomic(&config.output_dir, &rel, forest.to_json()?.as_bytes())?;
                model_files.push(rel.clone());
                written.push(rel);
            }
            for (k, net) in g.cnns.iter().enumerate() {
                let rel = paths::model(sid, g.tag.name(), g.family.name(), k);
                write_atomic(&config.output_dir, &rel, net.to_json()?.as_bytes())?;
                model_files.push(rel.clone());
                written.push(rel);
            }
            groups.push(TrainGroupSummary {
                tag: g.tag,
                family: g.family,
                cnn_epochs: g.cnn_epochs,
                n_train_trials: g.n_train_trials.clone(),
                model_files,
            });
        }
        let rel = paths::train_summary(sid);
        write_json(
            &config.output_dir,
            &rel,
            &TrainSummary { subject: sid.clone(), test_digest: set.test_digest.clone(), groups },
        )?;
        written.push(rel);
        log::info!("trained {} model groups for {sid}", set.groups.len());
        Ok(written)
    })?;
    Ok(nested.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// Stage: evaluation
// ---------------------------------------------------------------------------

/// Reload one subject's fitted models from disk.
pub fn load_model_set(config: &ExperimentConfig, subject: &str) -> Result<SubjectModelSet> {
    let summary: TrainSummary = read_json(&config.output_dir, &paths::train_summary(subject))?;
    let mut groups = Vec::new();
    for g in &summary.groups {
        let mut forests = Vec::new();
        let mut cnns: Vec<Cnn<Sample>> = Vec::new();
        for rel in &g.model_files {
            let text = fs::read_to_string(config.output_dir.join(rel))?;
            match g.family {
                ModelFamily::Forest => forests.push(Forest::from_json(&text)?),
                ModelFamily::Cnn => cnns.push(Cnn::from_json(&text)?),
            }
        }
        groups.push(ModelGroup {
            tag: g.tag,
            family: g.family,
            cnn_epochs: g.cnn_epochs,
            n_train_trials: g.n_train_trials.clone(),
            forests,
            cnns,
        });
    }
    Ok(SubjectModelSet {
        subject: summary.subject.clone(),
        test_digest: summary.test_digest.clone(),
        groups,
    })
}

fn test_session_id(config: &ExperimentConfig) -> String {
    format!("car-{:02}", config.n_car_sessions)
}

/// Score every persisted model on its subject's held-out session and write
/// the per-subject and aggregate reports.
pub fn stage_evaluate(config: &ExperimentConfig, roster: &[SubjectModel]) -> Result<(EvalReport, Vec<String>)> {
    let test_id = test_session_id(config);
    let mut evals = for_each_subject(roster, |subject| {
        let sid = &subject.subject_id;
        let set = load_model_set(config, sid)?;
        let test = read_epochs(&config.output_dir.join(paths::epochs(sid, &test_id)))?;
        let eval = score_model_set(&set, &test.epochs, config.eval.reps_per_icon)?;
        if eval.test_digest != set.test_digest {
            return Err(Error::invalid(format!(
                "test session of {sid} changed between training and evaluation"
            )));
        }
        let rel = paths::subject_eval(sid);
        write_json(&config.output_dir, &rel, &eval)?;
        log::info!("evaluated {sid}");
        Ok((eval, rel))
    })?;
    let mut written = Vec::new();
    let mut subjects = Vec::new();
    for (eval, rel) in evals.drain(..) {
        subjects.push(eval);
        written.push(rel);
    }
    let aggregates = aggregate_entries(&subjects, &config.eval.tags, &config.eval.families);
    let report = EvalReport { subjects, aggregates };
    write_json(&config.output_dir, &paths::eval_report(), &report)?;
    write_atomic(&config.output_dir, &paths::eval_table(), render_table(&report).as_bytes())?;
    written.push(paths::eval_report());
    written.push(paths::eval_table());
    Ok((report, written))
}

// ---------------------------------------------------------------------------
// Stage: online simulation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OnlineComparison {
    pub subject: String,
    pub session_id: String,
    pub tag: TrainTag,
    pub family: ModelFamily,
    pub offline: Vec<FeedbackEvent>,
    pub online: Vec<FeedbackEvent>,
    /// Per-run agreement of the two decoders (timing aside).
    pub runs_match: Vec<bool>,
    pub all_match: bool,
    pub online_run_accuracy: f64,
}

enum OnlineScorer {
    Forest(Box<Forest>),
    Cnn(Box<Cnn<Sample>>),
}

impl OnlineScorer {
    fn score(&self, epochs: &[Epoch]) -> Result<Vec<f64>> {
        match self {
            OnlineScorer::Forest(f) => {
                let (x, _) = erp_core::eval::features_matrix(epochs);
                Ok(f.predict_proba(x.view()))
            }
            OnlineScorer::Cnn(net) => {
                let refs: Vec<&Epoch> = epochs.iter().collect();
                net.predict_proba(erp_core::models::stack_cnn_inputs::<Sample>(&refs).view())
            }
        }
    }
}

/// Replay every subject's held-out recording through the online decoder and
/// compare each run's decision with the offline pipeline's.
pub fn stage_online(config: &ExperimentConfig, roster: &[SubjectModel]) -> Result<Vec<String>> {
    let test_id = test_session_id(config);
    let tag = config.online_tag;
    let family = config.online_family;
    if !config.eval.tags.contains(&tag) || !config.eval.families.contains(&family) {
        return Err(Error::invalid(format!(
            "online model {}/{} is not part of the evaluated cells",
            tag.name(),
            family.name()
        )));
    }
    for_each_subject(roster, |subject| {
        let sid = &subject.subject_id;
        let text =
            fs::read_to_string(config.output_dir.join(paths::model(sid, tag.name(), family.name(), 0)))?;
        let scorer = match family {
            ModelFamily::Forest => OnlineScorer::Forest(Box::new(Forest::from_json(&text)?)),
            ModelFamily::Cnn => OnlineScorer::Cnn(Box::new(Cnn::from_json(&text)?)),
        };

        let rec = read_recording(&config.output_dir.join(paths::recording(sid, &test_id)))?;
        let offline_epochs = preprocess_recording(&rec, &config.preprocess)?.epochs;
        let offline = decide_session(&offline_epochs, &rec.gaps, &config.preprocess, |es| {
            scorer.score(es)
        })?;

        let feed = replay(&rec, config.online_rate.unwrap_or(f64::INFINITY))?;
        let online = online_session(feed, &rec.header, &config.preprocess, |es| scorer.score(es))?;

        let runs_match: Vec<bool> = offline
            .iter()
            .zip(&online)
            .map(|(a, b)| a.same_decision(b))
            .collect();
        let all_match = offline.len() == online.len() && runs_match.iter().all(|&m| m);
        let comparison = OnlineComparison {
            subject: sid.clone(),
            session_id: test_id.clone(),
            tag,
            family,
            online_run_accuracy: erp_core::decode::run_accuracy(&online),
            offline,
            online,
            runs_match,
            all_match,
        };
        let rel = paths::online(sid);
        write_json(&config.output_dir, &rel, &comparison)?;
        log::info!("online simulation for {sid}: all_match={all_match}");
        Ok(rel)
    })
}

// ---------------------------------------------------------------------------
// Stage: signal-quality report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BandPowerTest {
    pub band: String,
    pub lo_hz: f64,
    pub hi_hz: f64,
    pub per_subject_lab: BTreeMap<String, f64>,
    pub per_subject_car: BTreeMap<String, f64>,
    /// Absent when the roster is too small for a two-sample test.
    pub lab_vs_car: Option<StatResult>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupComparison {
    pub metric: String,
    pub anova: StatResult,
    /// Bonferroni-corrected pairwise Welch tests, keyed "groupA_vs_groupB".
    pub pairwise: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Pearson correlations within the canonical-response group; absent
    /// when fewer than two subjects qualify.
    pub canonical_p2p_vs_run_accuracy: Option<f64>,
    pub canonical_latency_vs_run_accuracy: Option<f64>,
    pub all_p2p_vs_run_accuracy: Option<f64>,
    pub all_latency_vs_run_accuracy: Option<f64>,
    pub n_canonical: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RmsReport {
    pub lab_baseline: RmsSummary,
    pub lab_whole: RmsSummary,
    pub car_baseline: RmsSummary,
    pub car_whole: RmsSummary,
}

fn kept_condition_epochs(
    config: &ExperimentConfig,
    roster: &[SubjectModel],
    condition: Condition,
) -> Result<Vec<Epoch>> {
    let mut out = Vec::new();
    for subject in roster {
        for (session_id, c) in config.session_ids() {
            if c != condition {
                continue;
            }
            let file =
                read_epochs(&config.output_dir.join(paths::epochs(&subject.subject_id, &session_id)))?;
            out.extend(file.epochs.into_iter().filter(|e| e.quality == QualityFlag::Kept));
        }
    }
    Ok(out)
}

/// Signal-quality statistics: ERP morphology with significance tests,
/// grand-average waveforms, condition spectra, trial RMS, group comparisons
/// and accuracy correlations.
pub fn stage_report(config: &ExperimentConfig, roster: &[SubjectModel]) -> Result<Vec<String>> {
    let root = &config.output_dir;
    let mut written = Vec::new();

    // --- ERP stats over kept lab epochs, all subjects pooled ------------
    let lab_epochs = kept_condition_epochs(config, roster, Condition::InLab)?;
    let stats: ErpStatsReport = erp_stats(&lab_epochs)?;
    write_json(root, &paths::erp_stats(), &stats)?;
    written.push(paths::erp_stats());

    // --- grand-average waveforms (median across trials) -----------------
    {
        let mut csv = String::from("subject,channel,kind,t_ms,uv\n");
        for subject in roster {
            let sid = &subject.subject_id;
            for ch in [Channel::Cz, Channel::Pz] {
                for (kind, is_target) in [("target", true), ("non_target", false)] {
                    let traces: Vec<&[Real]> = lab_epochs
                        .iter()
                        .filter(|e| &e.subject == sid && e.label.is_target() == is_target)
                        .map(|e| e.channel(ch))
                        .collect();
                    if traces.is_empty() {
                        continue;
                    }
                    let wave = median_waveform(&traces);
                    for (i, v) in wave.iter().enumerate() {
                        csv.push_str(&format!(
                            "{sid},{ch:?},{kind},{},{v}\n",
                            Epoch::sample_time_ms(i)
                        ));
                    }
                }
            }
        }
        write_atomic(root, &paths::waveforms(), csv.as_bytes())?;
        written.push(paths::waveforms());
    }

    // --- condition spectra on the reconstructed continuous streams ------
    {
        let params = WelchParams::default();
        let mut csv = String::from("subject,condition,freq_hz,power\n");
        let mut theta = BandPowerTest {
            band: "theta".into(),
            lo_hz: 4.0,
            hi_hz: 8.0,
            per_subject_lab: BTreeMap::new(),
            per_subject_car: BTreeMap::new(),
            lab_vs_car: None,
        };
        let mut alpha = BandPowerTest {
            band: "alpha".into(),
            lo_hz: 8.0,
            hi_hz: 13.0,
            per_subject_lab: BTreeMap::new(),
            per_subject_car: BTreeMap::new(),
            lab_vs_car: None,
        };
        for subject in roster {
            let sid = &subject.subject_id;
            for (session_id, condition) in [
                ("lab-01".to_string(), Condition::InLab),
                ("car-01".to_string(), Condition::InCar),
            ] {
                let rec = read_recording(&root.join(paths::recording(sid, &session_id)))?;
                let stream = erp_core::stream::reconstruct(&rec)?;
                let pz = &stream.channels[Channel::Pz.index()];
                let (freqs, power) =
                    welch_psd(pz, rec.header.sampling_rate_hz as f64, params)?;
                for (f, p) in freqs.iter().zip(&power) {
                    if *f <= 45.0 {
                        csv.push_str(&format!("{sid},{condition:?},{f},{p}\n"));
                    }
                }
                let th = band_power(&freqs, &power, 4.0, 8.0);
                let al = band_power(&freqs, &power, 8.0, 13.0);
                match condition {
                    Condition::InLab => {
                        theta.per_subject_lab.insert(sid.clone(), th);
                        alpha.per_subject_lab.insert(sid.clone(), al);
                    }
                    Condition::InCar => {
                        theta.per_subject_car.insert(sid.clone(), th);
                        alpha.per_subject_car.insert(sid.clone(), al);
                    }
                }
            }
        }
        for test in [&mut theta, &mut alpha] {
            let lab: Vec<f64> = test.per_subject_lab.values().copied().collect();
            let car: Vec<f64> = test.per_subject_car.values().copied().collect();
            if lab.len() >= 2 && car.len() >= 2 {
                test.lab_vs_car = Some(welch_ttest(&lab, &car)?);
            }
        }
        write_atomic(root, &paths::psd(), csv.as_bytes())?;
        write_json(root, &paths::psd_tests(), &vec![theta, alpha])?;
        written.push(paths::psd());
        written.push(paths::psd_tests());
    }

    // --- trial RMS per condition and segment ----------------------------
    {
        let car_epochs = kept_condition_epochs(config, roster, Condition::InCar)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.stage_seed("report/rms"));
        let rms = RmsReport {
            lab_baseline: trial_rms(&lab_epochs, RmsSegment::Baseline, 50, 100, &mut rng)?,
            lab_whole: trial_rms(&lab_epochs, RmsSegment::Whole, 50, 100, &mut rng)?,
            car_baseline: trial_rms(&car_epochs, RmsSegment::Baseline, 50, 100, &mut rng)?,
            car_whole: trial_rms(&car_epochs, RmsSegment::Whole, 50, 100, &mut rng)?,
        };
        write_json(root, &paths::rms(), &rms)?;
        written.push(paths::rms());
    }

    // --- group comparisons and accuracy correlations --------------------
    {
        let report: EvalReport = read_json(root, &paths::eval_report())?;
        let forest_acc: BTreeMap<String, f64> = report
            .subjects
            .iter()
            .map(|s| {
                let cells: Vec<f64> = s
                    .entries
                    .iter()
                    .filter(|e| e.family == ModelFamily::Forest)
                    .map(|e| e.run_accuracy)
                    .collect();
                (s.subject.clone(), cells.iter().sum::<f64>() / cells.len().max(1) as f64)
            })
            .collect();

        let mut csv = String::from("subject,group,p2p_uv,peak_latency_ms,forest_run_accuracy\n");
        let mut rows: Vec<(SubjectGroup, f64, f64, f64)> = Vec::new();
        for subject in roster {
            let sid = &subject.subject_id;
            let Some(summary) = stats.per_subject.iter().find(|s| &s.subject == sid) else {
                continue;
            };
            let Some(acc) = forest_acc.get(sid) else { continue };
            let p2p = summary.target.p2p_uv;
            let lat = summary.target.peak_latency_ms;
            csv.push_str(&format!("{sid},{:?},{p2p},{lat},{acc}\n", subject.group));
            rows.push((subject.group, p2p, lat, *acc));
        }
        let correlate = |keep: &dyn Fn(SubjectGroup) -> bool,
                         x: &dyn Fn(&(SubjectGroup, f64, f64, f64)) -> f64|
         -> Option<f64> {
            let xs: Vec<f64> = rows.iter().filter(|r| keep(r.0)).map(x).collect();
            let ys: Vec<f64> =
                rows.iter().filter(|r| keep(r.0)).map(|r| r.3).collect();
            pearson(&xs, &ys).ok()
        };
        let canonical = |g: SubjectGroup| g == SubjectGroup::CanonicalErp;
        let everyone = |_: SubjectGroup| true;
        let correlations = CorrelationReport {
            canonical_p2p_vs_run_accuracy: correlate(&canonical, &|r| r.1),
            canonical_latency_vs_run_accuracy: correlate(&canonical, &|r| r.2),
            all_p2p_vs_run_accuracy: correlate(&everyone, &|r| r.1),
            all_latency_vs_run_accuracy: correlate(&everyone, &|r| r.2),
            n_canonical: rows.iter().filter(|r| canonical(r.0)).count(),
        };
        write_json(root, &paths::correlations(), &correlations)?;
        write_atomic(root, &paths::correlations_csv(), csv.as_bytes())?;
        written.push(paths::correlations());
        written.push(paths::correlations_csv());

        // one-way ANOVA of per-subject median target p2p across groups,
        // with Bonferroni-corrected pairwise Welch tests on the per-trial
        // values
        let mut per_group: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
        let group_name = |g: SubjectGroup| match g {
            SubjectGroup::OcularContaminated => "ocular",
            SubjectGroup::CanonicalErp => "canonical",
            SubjectGroup::Ambiguous => "ambiguous",
        };
        for (g, p2p, ..) in &rows {
            per_group.entry(group_name(*g)).or_default().push(*p2p);
        }
        let groups: Vec<&[f64]> = per_group.values().map(|v| v.as_slice()).collect();
        if groups.len() >= 2 && groups.iter().all(|g| g.len() >= 2) {
            let anova = anova_oneway(&groups)?;
            let names: Vec<&&str> = per_group.keys().collect();
            let mut raw = Vec::new();
            let mut labels = Vec::new();
            for i in 0..names.len() {
                for j in (i + 1)..names.len() {
                    let t = welch_ttest(&per_group[*names[i]], &per_group[*names[j]])?;
                    raw.push(t.p_value);
                    labels.push(format!("{}_vs_{}", names[i], names[j]));
                }
            }
            let corrected = bonferroni(&raw, raw.len());
            let pairwise: BTreeMap<String, f64> =
                labels.into_iter().zip(corrected).collect();
            let comparison = GroupComparison {
                metric: "median_target_p2p_uv".into(),
                anova,
                pairwise,
            };
            write_json(root, "report/group_tests.json", &comparison)?;
            written.push("report/group_tests.json".to_string());
        }
    }

    Ok(written)
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Run every stage in order, hashing artifacts into the manifest as each
/// stage completes. On failure the manifest stays on disk with
/// `failed_stage` set and all finished artifacts intact.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<EvalReport> {
    config.validate()?;
    let roster = config.resolve_roster()?;
    let root = &config.output_dir;
    fs::create_dir_all(root)?;

    let mut manifest = Manifest::new(config);
    manifest.save(root)?;

    let run_stage = |manifest: &mut Manifest,
                         name: &str,
                         f: &mut dyn FnMut() -> Result<Vec<String>>|
     -> Result<()> {
        log::info!("stage {name}");
        match f() {
            Ok(artifacts) => {
                manifest.register_all(root, artifacts)?;
                manifest.completed_stages.push(name.to_string());
                manifest.save(root)?;
                Ok(())
            }
            Err(e) => {
                manifest.failed_stage = Some(name.to_string());
                manifest.save(root)?;
                Err(e)
            }
        }
    };

    run_stage(&mut manifest, "roster", &mut || {
        write_json(root, &paths::roster(), &roster)?;
        // The stored copy describes the experiment, not its location: the
        // output directory is the directory the file sits in. Keeping the
        // field empty makes artifact digests location-independent.
        let stored = ExperimentConfig { output_dir: PathBuf::new(), ..config.clone() };
        write_json(root, &paths::config(), &stored)?;
        Ok(vec![paths::roster(), paths::config()])
    })?;
    run_stage(&mut manifest, "record", &mut || stage_record(config, &roster))?;
    run_stage(&mut manifest, "preprocess", &mut || stage_preprocess(config, &roster))?;
    run_stage(&mut manifest, "features", &mut || stage_features(config, &roster))?;
    run_stage(&mut manifest, "train", &mut || stage_train(config, &roster))?;
    let mut report_slot: Option<EvalReport> = None;
    run_stage(&mut manifest, "evaluate", &mut || {
        let (report, written) = stage_evaluate(config, &roster)?;
        report_slot = Some(report);
        Ok(written)
    })?;
    run_stage(&mut manifest, "online", &mut || stage_online(config, &roster))?;
    run_stage(&mut manifest, "report", &mut || stage_report(config, &roster))?;

    manifest.status = PipelineStatus::Complete;
    manifest.save(root)?;
    Ok(report_slot.expect("evaluate stage ran"))
}
