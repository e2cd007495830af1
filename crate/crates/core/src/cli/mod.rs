//! The commands behind the `tumorseg` binary. Each one writes a
//! `manifest.json` next to its outputs.

mod config;

pub use config::{RunConfig, LOSS_KEYS, NETWORK_KEYS, POSTPROCESS_KEYS};

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{render_table, score_case, summarize, write_case_csv, write_summary_csv, CaseScores, MetricsReport};
use crate::inference::segment_volume;
use crate::network::{Model, WeightArchive};
use crate::sampling::TrainingCase;
use crate::trainer::{self, EpochRecord, TrainOutput, FINAL_CHECKPOINT};
use crate::volumedata::{find_labels, generate_phantom, load_case, normalize, read_labels, save_case, write_grid, write_labels};

pub const RUN_MANIFEST: &str = "manifest.json";
pub const SCORES_CSV: &str = "scores.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const CONFIG_COPY: &str = "config.toml";
pub const PROBABILITY_SUFFIXES: [&str; 3] = ["prob_wt", "prob_tc", "prob_et"];

/// Process-wide flags shared by every command.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunContext {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub deterministic: bool,
}

/// Provenance record written alongside the outputs of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub code_version: String,
    pub timestamp: String,
    pub jobs: Option<usize>,
    pub deterministic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub settings: Option<RunConfig>,
}

impl RunManifest {
    pub fn new(command: &str, ctx: &RunContext) -> Self {
        Self {
            command: command.to_string(),
            config: None,
            seed: ctx.seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            jobs: ctx.jobs,
            deterministic: ctx.deterministic,
            settings: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Serialization(e.to_string()))?;
        crate::write_atomic(&dir.join(RUN_MANIFEST), &json)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&text).map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn is_nifti(name: &str) -> bool {
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// Case directories under `dir`: visible subdirectories holding at least
/// one NIfTI file, sorted by name.
pub fn case_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') || !path.is_dir() {
            continue;
        }
        let has_volume = fs::read_dir(&path)
            .map_err(|e| Error::io(&path, e))?
            .filter_map(|e| e.ok())
            .any(|e| is_nifti(&e.file_name().to_string_lossy()));
        if has_volume {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn dir_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Phantom case seeds: `seed`, `seed + 1`, ...
pub fn phantom_seeds(seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| seed.wrapping_add(i)).collect()
}

/// Writes `count` phantom cases under `out`, one directory each, with the
/// case seed recorded in every header description. Returns the case ids.
pub fn cmd_phantom(out: &Path, count: usize, shape: [usize; 3], spacing: [f64; 3], ctx: &RunContext) -> Result<Vec<String>> {
    let seed = ctx.seed.unwrap_or(0);
    let cases = phantom_seeds(seed, count)
        .into_par_iter()
        .map(|s| generate_phantom(s, shape, spacing).map(|c| (s, c)))
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    let mut manifest = RunManifest::new("phantom", ctx);
    manifest.seed = Some(seed);
    let mut ids = Vec::with_capacity(count);
    for (s, (vol, labels)) in &cases {
        let dir = out.join(&vol.case_id);
        save_case(&dir, vol, Some(labels), &format!("phantom seed={s}"))?;
        manifest.outputs.push(dir);
        ids.push(vol.case_id.clone());
    }
    manifest.write(out)?;
    Ok(ids)
}

/// Loads every labeled case under `data`, normalized for training.
pub fn load_training_cases(data: &Path) -> Result<Vec<TrainingCase>> {
    let dirs = case_dirs(data)?;
    if dirs.is_empty() {
        return Err(Error::Empty(format!("no case directories in {}", data.display())));
    }
    dirs.par_iter()
        .map(|dir| {
            let (vol, labels) = load_case(dir)?;
            let labels = labels.ok_or_else(|| Error::Empty(format!("case {} has no label map", vol.case_id)))?;
            TrainingCase::new(normalize(&vol)?, labels)
        })
        .collect()
}

/// What [`cmd_train`] produced.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub final_checkpoint: PathBuf,
}

/// Builds the model from `config`, optionally seeds it from `weights`, and
/// trains on every labeled case under `data`.
///
/// An archive whose fingerprint matches the configured network is loaded in
/// full; any other archive must carry a matching encoder and contributes
/// only encoder tensors. Either check fails before data is read.
pub fn cmd_train(
    data: &Path,
    config: &Path,
    out: &Path,
    weights: Option<&Path>,
    ctx: &RunContext,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    let mut run = RunConfig::load(config)?;
    if let Some(seed) = ctx.seed {
        run.train.seed = seed;
    }
    let mut model: Model<f32> = Model::new(run.network.clone(), run.train.seed)?;
    if let Some(path) = weights {
        let archive = WeightArchive::load(path)?;
        if archive.manifest.fingerprint == run.network.fingerprint() {
            model.load_weights(&archive, true)?;
        } else {
            model.load_encoder_weights(&archive)?;
        }
    }
    let cases = load_training_cases(data)?;
    create_dir(out)?;
    crate::write_atomic(&out.join(CONFIG_COPY), run.to_toml().as_bytes())?;
    let records = trainer::train(&mut model, &cases, &run.train, &run.loss, &TrainOutput { dir: Some(out.to_path_buf()) }, on_epoch)?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    let mut manifest = RunManifest::new("train", ctx);
    manifest.config = Some(config.to_path_buf());
    manifest.seed = Some(run.train.seed);
    manifest.inputs.push(data.to_path_buf());
    manifest.inputs.extend(weights.map(Path::to_path_buf));
    manifest.outputs = vec![out.join(trainer::LOG_FILE), final_checkpoint.clone(), out.join(CONFIG_COPY)];
    manifest.settings = Some(run);
    manifest.write(out)?;
    Ok(TrainSummary { records, final_checkpoint })
}

/// Segments every case under `data` with the archived model. Label maps go
/// to `<out>/<case>/<case>_seg.nii`; with `probs`, the fused class
/// probabilities go next to them. Postprocessing settings come from
/// `config` when given.
pub fn cmd_predict(
    data: &Path,
    weights: &Path,
    out: &Path,
    probs: bool,
    config: Option<&Path>,
    ctx: &RunContext,
) -> Result<Vec<String>> {
    let archive = WeightArchive::load(weights)?;
    let model: Model<f32> = Model::from_archive(&archive)?;
    let post = match config {
        Some(p) => RunConfig::load(p)?.postprocess,
        None => Default::default(),
    };
    let dirs = case_dirs(data)?;
    if dirs.is_empty() {
        return Err(Error::Empty(format!("no case directories in {}", data.display())));
    }
    create_dir(out)?;
    let mut manifest = RunManifest::new("predict", ctx);
    manifest.config = config.map(Path::to_path_buf);
    manifest.inputs = vec![data.to_path_buf(), weights.to_path_buf()];
    let mut ids = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let (vol, _) = load_case(dir)?;
        let seg = segment_volume(&model, &vol, &post)?;
        let case_out = out.join(&vol.case_id);
        create_dir(&case_out)?;
        let label_path = case_out.join(format!("{}_seg.nii", vol.case_id));
        write_labels(&label_path, &seg.labels, "tumorseg prediction")?;
        manifest.outputs.push(label_path);
        if probs {
            for (grid, suffix) in seg.probabilities.classes.iter().zip(PROBABILITY_SUFFIXES) {
                let path = case_out.join(format!("{}_{suffix}.nii", vol.case_id));
                write_grid(&path, grid, vol.spacing, "tumorseg probability")?;
                manifest.outputs.push(path);
            }
        }
        ids.push(vol.case_id);
    }
    manifest.write(out)?;
    Ok(ids)
}

fn label_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for d in case_dirs(dir)? {
        if let Some(p) = find_labels(&d)? {
            out.push((dir_name(&d), p));
        }
    }
    Ok(out)
}

/// What [`cmd_evaluate`] produced.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub scores: Vec<CaseScores>,
    pub report: MetricsReport,
    pub table: String,
}

/// Scores predictions against ground truth case by case. Both directories
/// must hold exactly the same case ids.
pub fn cmd_evaluate(pred: &Path, truth: &Path, out: &Path, sample_std: bool, ctx: &RunContext) -> Result<Evaluation> {
    let truth_cases = label_dirs(truth)?;
    let pred_cases = label_dirs(pred)?;
    if truth_cases.is_empty() {
        return Err(Error::Empty(format!("no labeled cases in {}", truth.display())));
    }
    for (id, _) in &truth_cases {
        if !pred_cases.iter().any(|(p, _)| p == id) {
            return Err(Error::UnmatchedCase(format!("{id} has no prediction in {}", pred.display())));
        }
    }
    for (id, _) in &pred_cases {
        if !truth_cases.iter().any(|(t, _)| t == id) {
            return Err(Error::UnmatchedCase(format!("{id} has no ground truth in {}", truth.display())));
        }
    }
    let scores: Vec<CaseScores> = truth_cases
        .par_iter()
        .map(|(id, truth_path)| {
            let pred_path = &pred_cases.iter().find(|(p, _)| p == id).expect("matched above").1;
            let t = read_labels(truth_path)?;
            let p = read_labels(pred_path)?;
            score_case(id, &p, &t, t.spacing)
        })
        .collect::<Result<_>>()?;
    let report = summarize(&scores, sample_std)?;
    let table = render_table(&report);
    create_dir(out)?;
    write_case_csv(&out.join(SCORES_CSV), &scores)?;
    write_summary_csv(&out.join(SUMMARY_CSV), &report)?;
    crate::write_atomic(&out.join(SUMMARY_TXT), table.as_bytes())?;
    let mut manifest = RunManifest::new("evaluate", ctx);
    manifest.inputs = vec![pred.to_path_buf(), truth.to_path_buf()];
    manifest.outputs = [SCORES_CSV, SUMMARY_CSV, SUMMARY_TXT].iter().map(|f| out.join(f)).collect();
    manifest.write(out)?;
    Ok(Evaluation { scores, report, table })
}

/// The archive listing printed by `inspect`.
pub fn cmd_inspect(archive: &Path) -> Result<String> {
    Ok(WeightArchive::load(archive)?.summary())
}
