//! Experiment pipeline stages behind the `uqasr` CLI: dataset synthesis,
//! training, alignment export, attack sweeps, uncertainty measurement,
//! detector fitting/evaluation, and report assembly.
//!
//! Every stage stamps and checks the effective config hash, so artifacts
//! from different configurations cannot be mixed. All stage outputs are
//! plain text (TSV with headers) or WAV; reruns with the same master seed
//! reproduce them byte for byte. Per-utterance work runs on the rayon
//! pool; results are reduced in utterance order so the worker count never
//! changes any output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acoustic::{forward, AcousticModel, Mode, ModelKind, Trainer};
use crate::attack::{build_attack_target, pgd_attack, sample_target_transcript, AttackConfig};
use crate::audio::{load_wav, save_wav};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::ExperimentConfig;
use crate::dataset::{
    load_split_features, load_split_waveforms, parse_transcript, read_manifest, synth_split,
    transcript_to_string, Split,
};
use crate::error::{Error, Result};
use crate::eval::{
    anomaly_score, check_disjoint_ids, fit_detector, histogram, roc_auroc, word_accuracy,
    DetectorModel,
};
use crate::features::{FeatureConfig, MfccPipeline};
use crate::hmm::{
    estimate_priors, flat_start_alignment, viterbi_decode, viterbi_train_epoch, HmmSystem,
};
use crate::seed;
use crate::uncertainty::{measure_utterance, Measure, UncertaintyScores};

/// Filesystem layout under the experiment's output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub out: PathBuf,
}

pub fn eps_tag(eps: f64) -> String {
    format!("{eps:.4}")
}

impl Paths {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Paths { out: cfg.run.out_dir.clone() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn model_dir(&self, kind: ModelKind) -> PathBuf {
        self.out.join("models").join(kind.as_str())
    }

    pub fn alignment_file(&self, kind: ModelKind, split: Split) -> PathBuf {
        self.out.join("alignments").join(format!("{}_{}.ali", kind.as_str(), split.as_str()))
    }

    pub fn attack_dir(&self, kind: ModelKind, eps: f64) -> PathBuf {
        self.out.join("attacks").join(kind.as_str()).join(format!("eps_{}", eps_tag(eps)))
    }

    pub fn attack_records(&self, kind: ModelKind, eps: f64) -> PathBuf {
        self.attack_dir(kind, eps).join("records.tsv")
    }

    pub fn scores_dir(&self, kind: ModelKind) -> PathBuf {
        self.out.join("scores").join(kind.as_str())
    }

    pub fn score_file(&self, kind: ModelKind, set: &ScoreSet) -> PathBuf {
        self.scores_dir(kind).join(format!("{}.tsv", set.label()))
    }

    pub fn detect_dir(&self, kind: ModelKind) -> PathBuf {
        self.out.join("detect").join(kind.as_str())
    }

    pub fn evaluate_dir(&self, kind: ModelKind) -> PathBuf {
        self.out.join("evaluate").join(kind.as_str())
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out.join("report")
    }

    pub fn run_manifest(&self) -> PathBuf {
        self.out.join("manifest.json")
    }
}

/// Which utterance set a score file covers.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreSet {
    Heldout,
    EvalBenign,
    Adversarial(f64),
}

impl ScoreSet {
    pub fn label(&self) -> String {
        match self {
            ScoreSet::Heldout => "heldout".to_string(),
            ScoreSet::EvalBenign => "eval_benign".to_string(),
            ScoreSet::Adversarial(eps) => format!("adv_eps_{}", eps_tag(*eps)),
        }
    }

    pub fn epsilon(&self) -> f64 {
        match self {
            ScoreSet::Adversarial(e) => *e,
            _ => 0.0,
        }
    }
}

/// Run-level manifest: config hash, seeds, and every artifact path.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub created_unix: u64,
    pub updated_unix: u64,
    /// Label -> path relative to the output directory.
    pub artifacts: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    fn now() -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
    }

    pub fn create(cfg: &ExperimentConfig) -> Self {
        let now = Self::now();
        RunManifest {
            config_hash: cfg.hash(),
            master_seed: cfg.run.master_seed,
            created_unix: now,
            updated_unix: now,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn load(paths: &Paths) -> Result<Self> {
        let p = paths.run_manifest();
        let raw = fs::read_to_string(&p).map_err(|_| Error::MissingArtifact {
            path: p.clone(),
            hint: "run `uqasr synth-data` first".to_string(),
        })?;
        serde_json::from_str(&raw)
            .map_err(|e| Error::Other(format!("manifest parse {}: {e}", p.display())))
    }

    pub fn save(&self, paths: &Paths) -> Result<()> {
        let p = paths.run_manifest();
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&p, json).map_err(|e| Error::io(&p, e))
    }

    pub fn register(&mut self, label: &str, path: PathBuf) {
        self.artifacts.insert(label.to_string(), path);
        self.updated_unix = Self::now();
    }
}

/// Load the run manifest and refuse to proceed under a different config.
fn manifest_checked(cfg: &ExperimentConfig, paths: &Paths) -> Result<RunManifest> {
    let m = RunManifest::load(paths)?;
    let expect = cfg.hash();
    if m.config_hash != expect {
        return Err(Error::ConfigHashMismatch {
            path: paths.run_manifest(),
            found: m.config_hash,
            expected: expect,
        });
    }
    Ok(m)
}

fn checkpoint_checked(cfg: &ExperimentConfig, paths: &Paths, kind: ModelKind) -> Result<Checkpoint> {
    let dir = paths.model_dir(kind);
    if !dir.join("meta.json").exists() {
        return Err(Error::MissingArtifact {
            path: dir,
            hint: format!("run `uqasr train --model {}` first", kind.as_str()),
        });
    }
    let ckpt = load_checkpoint(&dir)?;
    let expect = cfg.hash();
    if ckpt.config_hash != expect {
        return Err(Error::ConfigHashMismatch { path: dir, found: ckpt.config_hash, expected: expect });
    }
    Ok(ckpt)
}

/// Every artifact registered in the manifest must exist.
pub fn validate_run(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let paths = Paths::new(cfg);
    let m = manifest_checked(cfg, &paths)?;
    let mut missing = Vec::new();
    let mut present = Vec::new();
    for (label, rel) in &m.artifacts {
        let p = paths.out.join(rel);
        if p.exists() {
            present.push(p);
        } else {
            missing.push(format!("{label} -> {}", p.display()));
        }
    }
    if missing.is_empty() {
        Ok(present)
    } else {
        Err(Error::Other(format!("manifest references missing artifacts: {}", missing.join(", "))))
    }
}

fn feature_pipeline() -> Result<MfccPipeline> {
    MfccPipeline::new(FeatureConfig::default())
}

fn write_tsv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = String::new();
    let _ = writeln!(out, "{}", header.join("\t"));
    for row in rows {
        let _ = writeln!(out, "{}", row.join("\t"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_tsv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let raw = fs::read_to_string(path).map_err(|_| Error::MissingArtifact {
        path: path.to_path_buf(),
        hint: "artifact not produced yet".to_string(),
    })?;
    let mut lines = raw.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Other(format!("{}: empty file", path.display())))?
        .split('\t')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| "null".to_string())
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Other(format!("cannot parse {what} value '{s}'")))
}

fn parse_opt_f64(s: &str, what: &str) -> Result<Option<f64>> {
    if s == "null" {
        Ok(None)
    } else {
        parse_f64(s, what).map(Some)
    }
}

// ---------------------------------------------------------------------
// synth-data
// ---------------------------------------------------------------------

#[derive(Debug)]
pub struct SynthReport {
    pub sizes: Vec<(Split, usize)>,
}

pub fn cmd_synth_data(cfg: &ExperimentConfig, force: bool) -> Result<SynthReport> {
    cfg.validate()?;
    let paths = Paths::new(cfg);
    if paths.out.exists() {
        let non_empty = fs::read_dir(&paths.out).map_err(|e| Error::io(&paths.out, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::OutputNotEmpty { path: paths.out.clone() });
            }
            fs::remove_dir_all(&paths.out).map_err(|e| Error::io(&paths.out, e))?;
        }
    }
    fs::create_dir_all(paths.data_dir()).map_err(|e| Error::io(paths.data_dir(), e))?;

    let mut manifest = RunManifest::create(cfg);
    let mut sizes = Vec::new();
    for split in Split::ALL {
        let entries = synth_split(&paths.data_dir(), split, &cfg.dataset, cfg.run.master_seed)?;
        sizes.push((split, entries.len()));
        manifest.register(
            &format!("dataset/{}", split.as_str()),
            PathBuf::from("data").join(format!("{}.tsv", split.as_str())),
        );
    }
    manifest.save(&paths)?;
    Ok(SynthReport { sizes })
}

// ---------------------------------------------------------------------
// train
// ---------------------------------------------------------------------

#[derive(Debug)]
pub struct ViterbiSummary {
    pub total_log_score: f64,
    pub skipped: usize,
    pub train_loss: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub kind: ModelKind,
    pub ce_losses: Vec<f64>,
    pub viterbi: Vec<ViterbiSummary>,
    pub checkpoint_dir: PathBuf,
}

pub fn cmd_train(cfg: &ExperimentConfig, kind: ModelKind) -> Result<TrainReport> {
    cfg.validate()?;
    let paths = Paths::new(cfg);
    let mut manifest = manifest_checked(cfg, &paths)?;
    let pipeline = feature_pipeline()?;

    let dataset = load_split_features(&paths.data_dir(), Split::Train, &pipeline)?;
    eprintln!("[train/{}] {} utterances loaded", kind.as_str(), dataset.len());

    // Flat-start targets bootstrap the first cross-entropy phase.
    let mut aligned = Vec::with_capacity(dataset.len());
    for utt in &dataset {
        let alignment = flat_start_alignment(utt.feats.num_frames(), &utt.transcript)?;
        aligned.push(crate::acoustic::AlignedUtterance {
            id: utt.id.clone(),
            feats: utt.feats.clone(),
            alignment,
        });
    }
    let flat_alignments: Vec<&[usize]> = aligned.iter().map(|u| u.alignment.as_slice()).collect();
    let mut sys = HmmSystem {
        priors: estimate_priors(&flat_alignments)?,
        ..HmmSystem::default()
    };

    let train_cfg = cfg.train_config_for(kind);
    let mut trainer = Trainer::new(kind, &train_cfg)?;
    let mut ce_losses = Vec::with_capacity(train_cfg.epochs_ce);
    for epoch in 0..train_cfg.epochs_ce {
        let loss = trainer.run_epoch(&aligned)?;
        eprintln!("[train/{}] ce epoch {epoch}: loss {loss:.4}", kind.as_str());
        ce_losses.push(loss);
    }

    let mut viterbi = Vec::with_capacity(train_cfg.epochs_viterbi);
    for epoch in 0..train_cfg.epochs_viterbi {
        let align_seed = seed::derive_indexed(
            cfg.run.master_seed,
            &format!("viterbi-align/{}", kind.as_str()),
            epoch as u64,
        );
        let report = viterbi_train_epoch(&mut trainer, &dataset, &mut sys, align_seed)?;
        eprintln!(
            "[train/{}] viterbi epoch {epoch}: align score {:.1}, loss {:.4}, skipped {}",
            kind.as_str(),
            report.total_log_score,
            report.train_loss,
            report.skipped.len()
        );
        viterbi.push(ViterbiSummary {
            total_log_score: report.total_log_score,
            skipped: report.skipped.len(),
            train_loss: report.train_loss,
        });
    }

    let dir = paths.model_dir(kind);
    save_checkpoint(&dir, &trainer.model, &sys, train_cfg.seed, &cfg.hash())?;
    manifest.register(
        &format!("model/{}", kind.as_str()),
        PathBuf::from("models").join(kind.as_str()).join("meta.json"),
    );
    manifest.save(&paths)?;
    Ok(TrainReport { kind, ce_losses, viterbi, checkpoint_dir: dir })
}

// ---------------------------------------------------------------------
// align
// ---------------------------------------------------------------------

#[derive(Debug)]
pub struct AlignReport {
    pub path: PathBuf,
    pub aligned: usize,
    pub skipped: Vec<String>,
}

/// Force-align a split with a trained model and write the alignment file:
/// one line per utterance, id followed by space-separated state ids.
pub fn cmd_align(cfg: &ExperimentConfig, kind: ModelKind, split: Split) -> Result<AlignReport> {
    cfg.validate()?;
    let paths = Paths::new(cfg);
    let mut manifest = manifest_checked(cfg, &paths)?;
    let ckpt = checkpoint_checked(cfg, &paths, kind)?;
    let pipeline = feature_pipeline()?;
    let utts = load_split_features(&paths.data_dir(), split, &pipeline)?;

    let results: Vec<(String, Result<Vec<usize>>)> = utts
        .par_iter()
        .enumerate()
        .map(|(i, utt)| {
            let mode = Mode::Mean {
                seed: seed::derive_indexed(
                    cfg.run.master_seed,
                    &format!("align/{}/{}", kind.as_str(), split.as_str()),
                    i as u64,
                ),
            };
            let res = forward(&ckpt.model, &utt.feats, mode)
                .and_then(|post| crate::hmm::forced_align(&post, &ckpt.sys, &utt.transcript))
                .map(|(a, _)| a);
            (utt.id.clone(), res)
        })
        .collect();

    let mut lines = String::new();
    let mut skipped = Vec::new();
    let mut aligned = 0usize;
    for (id, res) in results {
        match res {
            Ok(states) => {
                let joined: Vec<String> = states.iter().map(|s| s.to_string()).collect();
                let _ = writeln!(lines, "{id} {}", joined.join(" "));
                aligned += 1;
            }
            Err(_) => skipped.push(id),
        }
    }
    let path = paths.alignment_file(kind, split);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    manifest.register(
        &format!("alignments/{}/{}", kind.as_str(), split.as_str()),
        path.strip_prefix(&paths.out).unwrap_or(&path).to_path_buf(),
    );
    manifest.save(&paths)?;
    Ok(AlignReport { path, aligned, skipped })
}

// ---------------------------------------------------------------------
// attack
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AttackRecord {
    pub id: String,
    pub epsilon: f64,
    pub target: Vec<u8>,
    pub decoded: Vec<u8>,
    pub iterations: usize,
    pub best_iteration: usize,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub linf: f64,
    pub acc_vs_target: f64,
    pub acc_vs_original: f64,
}

#[derive(Debug)]
pub struct AttackEpsSummary {
    pub epsilon: f64,
    pub attacked: usize,
    pub aborted: usize,
    pub mean_acc_target: f64,
    pub mean_acc_original: f64,
}

#[derive(Debug)]
pub struct AttackReport {
    pub kind: ModelKind,
    pub per_eps: Vec<AttackEpsSummary>,
}

const TARGET_RETRIES: usize = 10;

fn attack_one(
    cfg: &ExperimentConfig,
    kind: ModelKind,
    ckpt: &Checkpoint,
    pipeline: &MfccPipeline,
    eps: f64,
    idx: usize,
    id: &str,
    original: &crate::audio::Waveform,
    original_transcript: &[u8],
) -> Result<(AttackRecord, crate::audio::Waveform)> {
    let utt_seed = seed::derive_indexed(
        cfg.run.master_seed,
        &format!("attack/{}/{}", kind.as_str(), eps_tag(eps)),
        idx as u64,
    );
    let mut target_rng = seed::rng(seed::derive(utt_seed, "target"));

    // Draw a fresh target; if the utterance is too short for its forced
    // alignment, redraw (bounded), then give up on the pair.
    let mut chosen: Option<(Vec<u8>, Vec<usize>)> = None;
    let mut last_err = None;
    for _ in 0..TARGET_RETRIES {
        let target = sample_target_transcript(&mut target_rng, original_transcript);
        match build_attack_target(
            original,
            &target,
            &ckpt.model,
            &ckpt.sys,
            pipeline,
            seed::derive(utt_seed, "target-align"),
        ) {
            Ok(alignment) => {
                chosen = Some((target, alignment));
                break;
            }
            Err(e @ Error::AttackAborted { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    let (target, target_alignment) = chosen.ok_or_else(|| {
        last_err.unwrap_or(Error::AttackAborted { detail: format!("{id}: no feasible target") })
    })?;

    let attack_cfg = AttackConfig {
        epsilon: eps,
        step_size: cfg.attack.step_size.unwrap_or(if eps > 0.0 { eps / 20.0 } else { 1e-3 }),
        iterations: cfg.attack.iterations,
        gradient_mode: cfg.attack.gradient_mode,
        seed: seed::derive(utt_seed, "pgd"),
        mean_grad_samples: cfg.attack.mean_grad_samples,
    };
    let adv = pgd_attack(original, &target, &target_alignment, &ckpt.model, pipeline, &attack_cfg)?;
    adv.validate(eps)?;

    let adv_wave = adv.adversarial_waveform();
    let feats = pipeline.compute(&adv_wave)?;
    let posteriors =
        forward(&ckpt.model, &feats, Mode::Mean { seed: seed::derive(utt_seed, "decode") })?;
    let decoded = viterbi_decode(&posteriors, &ckpt.sys)?.transcript;
    let acc_vs_target = word_accuracy(&target, &decoded)?;
    let acc_vs_original = word_accuracy(original_transcript, &decoded)?;

    Ok((
        AttackRecord {
            id: id.to_string(),
            epsilon: eps,
            target,
            decoded,
            iterations: attack_cfg.iterations,
            best_iteration: adv.best_iteration,
            initial_loss: adv.losses[0],
            best_loss: adv.losses[adv.best_iteration],
            linf: adv.linf_norm(),
            acc_vs_target,
            acc_vs_original,
        },
        adv_wave,
    ))
}

/// Attack the adversarial-source split at each requested budget. With
/// `eps_filter`, only those grid entries run (they must be in the grid).
pub fn cmd_attack(
    cfg: &ExperimentConfig,
    kind: ModelKind,
    eps_filter: Option<&[f64]>,
) -> Result<AttackReport> {
    cfg.validate()?;
    let paths = Paths::new(cfg);
    let mut manifest = manifest_checked(cfg, &paths)?;
    let ckpt = checkpoint_checked(cfg, &paths, kind)?;
    let pipeline = feature_pipeline()?;
    let sources = load_split_waveforms(&paths.data_dir(), Split::EvalAdvSrc)?;

    let eps_list: Vec<f64> = match eps_filter {
        None => cfg.attack.epsilons.clone(),
        Some(filter) => {
            for &e in filter {
                if !cfg.attack.epsilons.iter().any(|&a| a == e) {
                    return Err(Error::InvalidConfig {
                        detail: format!("epsilon {e} is not in the configured attack grid"),
                    });
                }
            }
            filter.to_vec()
        }
    };

    let mut per_eps = Vec::with_capacity(eps_list.len());
    for &eps in &eps_list {
        let dir = paths.attack_dir(kind, eps);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let outcomes: Vec<Result<(AttackRecord, crate::audio::Waveform)>> = sources
            .par_iter()
            .enumerate()
            .map(|(idx, (entry, wave))| {
                attack_one(cfg, kind, &ckpt, &pipeline, eps, idx, &entry.id, wave, &entry.transcript)
            })
            .collect();

        let mut rows = Vec::new();
        let mut records = Vec::new();
        let mut aborted = 0usize;
        for (outcome, (entry, _)) in outcomes.into_iter().zip(&sources) {
            match outcome {
                Ok((record, adv_wave)) => {
                    save_wav(&adv_wave, &dir.join(format!("{}.wav", entry.id)), true)?;
                    rows.push(vec![
                        record.id.clone(),
                        fmt_f64(record.epsilon),
                        transcript_to_string(&record.target),
                        transcript_to_string(&record.decoded),
                        record.iterations.to_string(),
                        record.best_iteration.to_string(),
                        fmt_f64(record.initial_loss),
                        fmt_f64(record.best_loss),
                        fmt_f64(record.linf),
                        fmt_f64(record.acc_vs_target),
                        fmt_f64(record.acc_vs_original),
                    ]);
                    records.push(record);
                }
                Err(Error::AttackAborted { detail }) => {
                    eprintln!("[attack/{}] {}: aborted ({detail})", kind.as_str(), entry.id);
                    aborted += 1;
                }
                Err(e) => return Err(e),
            }
        }
        write_tsv(
            &paths.attack_records(kind, eps),
            &[
                "id",
                "epsilon",
                "target",
                "decoded",
                "iterations",
                "best_iteration",
                "initial_loss",
                "best_loss",
                "linf",
                "acc_vs_target",
                "acc_vs_original",
            ],
            &rows,
        )?;
        manifest.register(
            &format!("attacks/{}/{}", kind.as_str(), eps_tag(eps)),
            PathBuf::from("attacks").join(kind.as_str()).join(format!("eps_{}", eps_tag(eps))).join("records.tsv"),
        );

        let n = records.len().max(1) as f64;
        let summary = AttackEpsSummary {
            epsilon: eps,
            attacked: records.len(),
            aborted,
            mean_acc_target: records.iter().map(|r| r.acc_vs_target).sum::<f64>() / n,
            mean_acc_original: records.iter().map(|r| r.acc_vs_original).sum::<f64>() / n,
        };
        eprintln!(
            "[attack/{}] eps {}: {} attacked, {} aborted, acc_target {:.3}, acc_original {:.3}",
            kind.as_str(),
            eps_tag(eps),
            summary.attacked,
            summary.aborted,
            summary.mean_acc_target,
            summary.mean_acc_original
        );
        per_eps.push(summary);
    }
    manifest.save(&paths)?;
    Ok(AttackReport { kind, per_eps })
}

pub fn read_attack_records(paths: &Paths, kind: ModelKind, eps: f64) -> Result<Vec<AttackRecord>> {
    let (_, rows) = read_tsv(&paths.attack_records(kind, eps))?;
    rows.into_iter()
        .map(|r| {
            if r.len() != 11 {
                return Err(Error::Other(format!("attack record has {} fields", r.len())));
            }
            Ok(AttackRecord {
                id: r[0].clone(),
                epsilon: parse_f64(&r[1], "epsilon")?,
                target: parse_transcript(&r[2])?,
                decoded: parse_transcript(&r[3])?,
                iterations: r[4].parse().unwrap_or(0),
                best_iteration: r[5].parse().unwrap_or(0),
                initial_loss: parse_f64(&r[6], "initial_loss")?,
                best_loss: parse_f64(&r[7], "best_loss")?,
                linf: parse_f64(&r[8], "linf")?,
                acc_vs_target: parse_f64(&r[9], "acc_vs_target")?,
                acc_vs_original: parse_f64(&r[10], "acc_vs_original")?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------
// measure
// ---------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ScoreRecord {
    pub id: String,
    pub epsilon: f64,
    pub entropy: f64,
    pub mutual_information: Option<f64>,
    pub variance: Option<f64>,
    pub akld: Option<f64>,
}

impl ScoreRecord {
    pub fn get(&self, measure: Measure) -> Option<f64> {
        match measure {
            Measure::Entropy => Some(self.entropy),
            Measure::MutualInformation => self.mutual_information,
            Measure::Variance => self.variance,
            Measure::Akld => self.akld,
        }
    }
}

fn sample_count(cfg: &ExperimentConfig, model: &AcousticModel) -> usize {
    match model.kind() {
        ModelKind::Fnn => 1,
        ModelKind::Ensemble => model.num_samples().unwrap_or(cfg.train.ensemble_size),
        ModelKind::Dropout => cfg.train.dropout_samples,
        ModelKind::Bnn => cfg.train.bnn_samples,
    }
}

fn measure_set(
    cfg: &ExperimentConfig,
    kind: ModelKind,
    model: &AcousticModel,
    utterances: &[(String, crate::features::FeatureMatrix)],
    set: &ScoreSet,
) -> Result<Vec<ScoreRecord>> {
    let t = sample_count(cfg, model);
    let agg = cfg.detect.aggregation;
    utterances
        .par_iter()
        .enumerate()
        .map(|(i, (id, feats))| {
            let s = seed::derive_indexed(
                cfg.run.master_seed,
                &format!("measure/{}/{}", kind.as_str(), set.label()),
                i as u64,
            );
            let scores: UncertaintyScores = measure_utterance(model, feats, t, s, agg)?;
            Ok(ScoreRecord {
                id: id.clone(),
                epsilon: set.epsilon(),
                entropy: scores.entropy,
                mutual_information: scores.mutual_information,
                variance: scores.variance,
                akld: scores.akld,
            })
        })
        .collect()
}

fn write_scores(path: &Path, kind: ModelKind, records: &[ScoreRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.id.clone(),
                kind.as_str().to_string(),
                fmt_f64(r.epsilon),
                fmt_f64(r.entropy),
                fmt_opt(r.mutual_information),
                fmt_opt(r.variance),
                fmt_opt(r.akld),
            ]
        })
        .collect();
    write_tsv(
        path,
        &["id", "model", "epsilon", "entropy", "mutual_information", "variance", "akld"],
        &rows,
    )
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let (_, rows) = read_tsv(path)?;
    rows.into_iter()
        .map(|r| {
            if r.len() != 7 {
                return Err(Error::Other(format!("score record has {} fields", r.len())));
            }
            Ok(ScoreRecord {
                id: r[0].clone(),
                epsilon: parse_f64(&r[2], "epsilon")?,
                entropy: parse_f64(&r[3], "entropy")?,
                mutual_information: parse_opt_f64(&r[4], "mutual_information")?,
                variance: parse_opt_f64(&r[5], "variance")?,
                akld: parse_opt_f64(&r[6], "akld")?,
            })
        })
        .collect()
}

#[derive(Debug)]
pub struct MeasureReport {
    pub kind: ModelKind,
    pub files: Vec<PathBuf>,
}

/// Uncertainty scores for the held-out benign set, the evaluation benign
/// set, and the adversarial WAVs at each detection budget.
pub fn cmd_measure(cfg: &ExperimentConfig, kind: ModelKind) -> Result<MeasureReport> {
    cfg.validate()?;
    let paths = Paths::new(cfg);
    let mut manifest = manifest_checked(cfg, &paths)?;
    let ckpt = checkpoint_checked(cfg, &paths, kind)?;
    let pipeline = feature_pipeline()?;

    let mut files = Vec::new();
    for set in [ScoreSet::Heldout, ScoreSet::EvalBenign] {
        let split = match set {
            ScoreSet::Heldout => Split::Heldout,
            _ => Split::EvalBenign,
        };
        let utts = load_split_features(&paths.data_dir(), split, &pipeline)?;
        let keyed: Vec<(String, crate::features::FeatureMatrix)> =
            utts.into_iter().map(|u| (u.id, u.feats)).collect();
        let records = measure_set(cfg, kind, &ckpt.model, &keyed, &set)?;
        let path = paths.score_file(kind, &set);
        write_scores(&path, kind, &records)?;
        manifest.register(
            &format!("scores/{}/{}", kind.as_str(), set.label()),
            path.strip_prefix(&paths.out).unwrap_or(&path).to_path_buf(),
        );
        files.push(path);
    }

    for &eps in &cfg.detect.epsilons {
        let set = ScoreSet::Adversarial(eps);
        let records = read_attack_records(&paths, kind, eps)?;
        let keyed: Vec<(String, crate::features::FeatureMatrix)> = records
            .par_iter()
            .map(|r| {
                let wav = load_wav(&paths.attack_dir(kind, eps).join(format!("{}.wav", r.id)))?;
                Ok((r.id.clone(), pipeline.compute(&wav)?))
            })
            .collect::<Result<_>>()?;
        let score_records = measure_set(cfg, kind, &ckpt.model, &keyed, &set)?;
        let path = paths.score_file(kind, &set);
        write_scores(&path, kind, &score_records)?;
        manifest.register(
            &format!("scores/{}/{}", kind.as_str(), set.label()),
            path.strip_prefix(&paths.out).unwrap_or(&path).to_path_buf(),
        );
        files.push(path);
    }
    manifest.save(&paths)?;
    Ok(MeasureReport { kind, files })
}

// ---------------------------------------------------------------------
// detect
// ---------------------------------------------------------------------

#[derive(Debug)]
pub struct DetectReport {
    pub kind: ModelKind,
    /// (measure, epsilon, AUROC); None when the measure is unavailable for
    /// this model family.
    pub auroc: Vec<(Measure, f64, Option<f64>)>,
}

/// Fit one Gaussian detector per available measure on held-out benign
/// scores, then report AUROC per measure and per requested budget.
pub fn cmd_detect(cfg: &ExperimentConfig, kind: ModelKind) -> Result<DetectReport> {
    cfg.validate()?;
    let paths = Paths::new(cfg);
    let mut manifest = manifest_checked(cfg, &paths)?;

    let heldout = read_scores(&paths.score_file(kind, &ScoreSet::Heldout))?;
    let benign = read_scores(&paths.score_file(kind, &ScoreSet::EvalBenign))?;

    let mut detectors: Vec<(Measure, Option<DetectorModel>)> = Vec::new();
    for &measure in &cfg.detect.measures {
        let values: Vec<f64> = heldout.iter().filter_map(|r| r.get(measure)).collect();
        if values.len() == heldout.len() && !heldout.is_empty() {
            detectors.push((measure, Some(fit_detector(&values, measure.as_str())?)));
        } else {
            detectors.push((measure, None));
        }
    }

    let detector_rows: Vec<Vec<String>> = detectors
        .iter()
        .map(|(m, d)| match d {
            Some(d) => vec![
                m.as_str().to_string(),
                fmt_f64(d.mean),
                fmt_f64(d.std),
                d.train_size.to_string(),
            ],
            None => vec![m.as_str().to_string(), "null".into(), "null".into(), "0".into()],
        })
        .collect();
    write_tsv(
        &paths.detect_dir(kind).join("detectors.tsv"),
        &["measure", "mean", "std", "train_size"],
        &detector_rows,
    )?;

    let mut auroc_rows = Vec::new();
    let mut auroc_out = Vec::new();
    for &eps in &cfg.detect.epsilons {
        let adv = read_scores(&paths.score_file(kind, &ScoreSet::Adversarial(eps)))?;
        for (measure, detector) in &detectors {
            let auroc = match detector {
                None => None,
                Some(det) => {
                    let b: Vec<f64> = benign
                        .iter()
                        .filter_map(|r| r.get(*measure))
                        .map(|v| anomaly_score(det, v))
                        .collect();
                    let a: Vec<f64> = adv
                        .iter()
                        .filter_map(|r| r.get(*measure))
                        .map(|v| anomaly_score(det, v))
                        .collect();
                    let roc = roc_auroc(&b, &a)?;
                    let roc_rows: Vec<Vec<String>> =
                        roc.points.iter().map(|(x, y)| vec![fmt_f64(*x), fmt_f64(*y)]).collect();
                    write_tsv(
                        &paths
                            .detect_dir(kind)
                            .join(format!("roc_{}_eps_{}.tsv", measure.as_str(), eps_tag(eps))),
                        &["fpr", "tpr"],
                        &roc_rows,
                    )?;

                    // Histogram of the raw measure values over a shared range.
                    let raw_b: Vec<f64> = benign.iter().filter_map(|r| r.get(*measure)).collect();
                    let raw_a: Vec<f64> = adv.iter().filter_map(|r| r.get(*measure)).collect();
                    let lo = raw_b.iter().chain(&raw_a).cloned().fold(f64::INFINITY, f64::min);
                    let hi = raw_b.iter().chain(&raw_a).cloned().fold(f64::NEG_INFINITY, f64::max);
                    let hi = if hi > lo { hi } else { lo + 1e-9 };
                    let hb = histogram(&raw_b, lo, hi, cfg.detect.histogram_bins);
                    let ha = histogram(&raw_a, lo, hi, cfg.detect.histogram_bins);
                    let hist_rows: Vec<Vec<String>> = hb
                        .iter()
                        .zip(&ha)
                        .map(|((left, cb), (_, ca))| {
                            vec![fmt_f64(*left), cb.to_string(), ca.to_string()]
                        })
                        .collect();
                    write_tsv(
                        &paths
                            .detect_dir(kind)
                            .join(format!("hist_{}_eps_{}.tsv", measure.as_str(), eps_tag(eps))),
                        &["bin_left", "benign_count", "adversarial_count"],
                        &hist_rows,
                    )?;
                    Some(roc.auroc)
                }
            };
            auroc_rows.push(vec![measure.as_str().to_string(), fmt_f64(eps), fmt_opt(auroc)]);
            auroc_out.push((*measure, eps, auroc));
        }
    }
    write_tsv(
        &paths.detect_dir(kind).join("auroc.tsv"),
        &["measure", "epsilon", "auroc"],
        &auroc_rows,
    )?;
    manifest.register(
        &format!("detect/{}", kind.as_str()),
        PathBuf::from("detect").join(kind.as_str()).join("auroc.tsv"),
    );
    manifest.save(&paths)?;
    Ok(DetectReport { kind, auroc: auroc_out })
}

pub fn read_auroc_table(paths: &Paths, kind: ModelKind) -> Result<Vec<(Measure, f64, Option<f64>)>> {
    let (_, rows) = read_tsv(&paths.detect_dir(kind).join("auroc.tsv"))?;
    rows.into_iter()
        .map(|r| {
            Ok((
                Measure::parse(&r[0])?,
                parse_f64(&r[1], "epsilon")?,
                parse_opt_f64(&r[2], "auroc")?,
            ))
        })
        .collect()
}

// ---------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------

#[derive(Debug)]
pub struct EvaluateReport {
    pub kind: ModelKind,
    pub benign_accuracy: f64,
    pub benign_count: usize,
    /// (epsilon, attacked, mean acc vs target, mean acc vs original).
    pub accuracy_rows: Vec<(f64, usize, f64, f64)>,
    pub auroc_rows: Vec<(Measure, f64, Option<f64>)>,
}

/// Combine benign decoding accuracy, the attack curve, and the detection
/// table for one model, enforcing the held-out/evaluation disjointness
/// precondition.
pub fn cmd_evaluate(cfg: &ExperimentConfig, kind: ModelKind) -> Result<EvaluateReport> {
    cfg.validate()?;
    let paths = Paths::new(cfg);
    let mut manifest = manifest_checked(cfg, &paths)?;
    let ckpt = checkpoint_checked(cfg, &paths, kind)?;
    let pipeline = feature_pipeline()?;

    // Held-out ids must be disjoint from both evaluation sets.
    let heldout = read_manifest(&paths.data_dir().join("heldout.tsv"))?;
    let benign = read_manifest(&paths.data_dir().join("eval_benign.tsv"))?;
    let adv_src = read_manifest(&paths.data_dir().join("eval_adv_src.tsv"))?;
    check_disjoint_ids(
        heldout.iter().map(|e| e.id.as_str()),
        benign.iter().map(|e| e.id.as_str()).chain(adv_src.iter().map(|e| e.id.as_str())),
    )?;

    // Benign word accuracy on the evaluation split.
    let utts = load_split_features(&paths.data_dir(), Split::EvalBenign, &pipeline)?;
    let accuracies: Vec<f64> = utts
        .par_iter()
        .enumerate()
        .map(|(i, utt)| {
            let mode = Mode::Mean {
                seed: seed::derive_indexed(
                    cfg.run.master_seed,
                    &format!("evaluate-decode/{}", kind.as_str()),
                    i as u64,
                ),
            };
            let posteriors = forward(&ckpt.model, &utt.feats, mode)?;
            let decoded = viterbi_decode(&posteriors, &ckpt.sys)?.transcript;
            word_accuracy(&utt.transcript, &decoded)
        })
        .collect::<Result<_>>()?;
    let benign_accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;

    // Attack curve from whichever grid budgets have records.
    let mut accuracy_rows = Vec::new();
    for &eps in &cfg.attack.epsilons {
        if !paths.attack_records(kind, eps).exists() {
            continue;
        }
        let records = read_attack_records(&paths, kind, eps)?;
        if records.is_empty() {
            continue;
        }
        let n = records.len();
        accuracy_rows.push((
            eps,
            n,
            records.iter().map(|r| r.acc_vs_target).sum::<f64>() / n as f64,
            records.iter().map(|r| r.acc_vs_original).sum::<f64>() / n as f64,
        ));
    }

    let auroc_rows = read_auroc_table(&paths, kind)?;

    let dir = paths.evaluate_dir(kind);
    write_tsv(
        &dir.join("summary.tsv"),
        &["model", "benign_accuracy", "eval_utterances"],
        &[vec![kind.as_str().to_string(), fmt_f64(benign_accuracy), accuracies.len().to_string()]],
    )?;
    write_tsv(
        &dir.join("accuracy_vs_eps.tsv"),
        &["epsilon", "attacked", "acc_vs_target", "acc_vs_original"],
        &accuracy_rows
            .iter()
            .map(|(e, n, t, o)| vec![fmt_f64(*e), n.to_string(), fmt_f64(*t), fmt_f64(*o)])
            .collect::<Vec<_>>(),
    )?;
    write_tsv(
        &dir.join("report.tsv"),
        &["measure", "epsilon", "auroc"],
        &auroc_rows
            .iter()
            .map(|(m, e, a)| vec![m.as_str().to_string(), fmt_f64(*e), fmt_opt(*a)])
            .collect::<Vec<_>>(),
    )?;
    manifest.register(
        &format!("evaluate/{}", kind.as_str()),
        PathBuf::from("evaluate").join(kind.as_str()).join("report.tsv"),
    );
    manifest.save(&paths)?;

    Ok(EvaluateReport {
        kind,
        benign_accuracy,
        benign_count: accuracies.len(),
        accuracy_rows,
        auroc_rows,
    })
}

// ---------------------------------------------------------------------
// report
// ---------------------------------------------------------------------

#[derive(Debug)]
pub struct ReportOutput {
    pub files: Vec<PathBuf>,
}

/// Cross-model plot data: accuracy-over-epsilon curves, AUROC summary,
/// entropy histograms, and ROC points. Numeric text files only; point any
/// plotting tool at them.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<ReportOutput> {
    cfg.validate()?;
    let paths = Paths::new(cfg);
    let mut manifest = manifest_checked(cfg, &paths)?;
    let dir = paths.report_dir();

    let mut missing: Vec<String> = Vec::new();
    let mut curve_rows: Vec<Vec<String>> = Vec::new();
    let mut auroc_rows: Vec<Vec<String>> = Vec::new();
    let mut files = Vec::new();

    for &kind in &cfg.run.models {
        let acc_path = paths.evaluate_dir(kind).join("accuracy_vs_eps.tsv");
        match read_tsv(&acc_path) {
            Ok((_, rows)) => {
                for r in rows {
                    let mut row = vec![kind.as_str().to_string()];
                    row.extend(r);
                    curve_rows.push(row);
                }
            }
            Err(_) => missing.push(acc_path.display().to_string()),
        }
        let auroc_path = paths.detect_dir(kind).join("auroc.tsv");
        match read_tsv(&auroc_path) {
            Ok((_, rows)) => {
                for r in rows {
                    let mut row = vec![kind.as_str().to_string()];
                    row.extend(r);
                    auroc_rows.push(row);
                }
            }
            Err(_) => missing.push(auroc_path.display().to_string()),
        }
        for &eps in &cfg.detect.epsilons {
            for stem in ["hist_entropy", "roc_entropy"] {
                let src = paths.detect_dir(kind).join(format!("{stem}_eps_{}.tsv", eps_tag(eps)));
                if src.exists() {
                    let dst = dir.join(format!("{stem}_{}_eps_{}.tsv", kind.as_str(), eps_tag(eps)));
                    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
                    files.push(dst);
                } else {
                    missing.push(src.display().to_string());
                }
            }
        }
    }

    if !missing.is_empty() {
        return Err(Error::Other(format!("report inputs missing: {}", missing.join(", "))));
    }

    let curves = dir.join("accuracy_curves.tsv");
    write_tsv(
        &curves,
        &["model", "epsilon", "attacked", "acc_vs_target", "acc_vs_original"],
        &curve_rows,
    )?;
    files.push(curves);
    let auroc = dir.join("auroc_summary.tsv");
    write_tsv(&auroc, &["model", "measure", "epsilon", "auroc"], &auroc_rows)?;
    files.push(auroc);

    manifest.register("report", PathBuf::from("report").join("accuracy_curves.tsv"));
    manifest.save(&paths)?;
    Ok(ReportOutput { files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eps_tags_are_stable() {
        assert_eq!(eps_tag(0.05), "0.0500");
        assert_eq!(eps_tag(0.0), "0.0000");
        assert_eq!(eps_tag(0.1), "0.1000");
    }

    #[test]
    fn tsv_round_trip() {
        let dir = std::env::temp_dir().join("uqasr-pipeline-tests");
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("t.tsv");
        write_tsv(&p, &["a", "b"], &[vec!["1".into(), "null".into()]]).unwrap();
        let (header, rows) = read_tsv(&p).unwrap();
        assert_eq!(header, vec!["a", "b"]);
        assert_eq!(rows, vec![vec!["1".to_string(), "null".to_string()]]);
    }

    #[test]
    fn f64_formatting_round_trips() {
        for v in [0.1, 1.0 / 3.0, 4.553876891600541, -0.0000123, 1e300] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
    }
}
