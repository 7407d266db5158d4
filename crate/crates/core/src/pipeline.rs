//! End-to-end stages over an artifacts directory.
//!
//! Layout under the root:
//!
//! ```text
//! config.json
//! dataset/   calib.json meta.json gt.jsonl identities.json detections/<cam>.jsonl
//! labels/    <cam>.jsonl
//! sets/      selection.json tau_sweep.csv <cam>/{manifest.json,pairs.jsonl,cs_labels.jsonl}
//! train/     <cam>/{params.json,losses.csv,summary.json}
//! eval/      report.json
//! report/    summary.txt *.csv
//! ```
//!
//! Every stage writes a `.stamp` holding the config it ran with; `run` skips
//! a stage whose stamp matches and whose upstream stages were skipped too.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{
    assemble, coarse_pairs, reachable_true_pairs, AssociationConfig, CoarseSet, StudentTier, TrackletPair,
    TrainingSets,
};
use crate::config::{ConfigError, FrameSplit, PipelineConfig, SCHEMA_VERSION};
use crate::evalmetrics::{
    average_precision, best_tau, tau_grid, tau_sweep, tier_quality, AssociationPr, EvalCounts, EvalReport, GtBoxes,
    PrCounter, SweepPoint, DEFAULT_IOU_THRESH,
};
use crate::geometry::CameraModel;
use crate::io::{self, IoError};
use crate::labels::{assign_tiers, DetectionStreams, PseudoLabel};
use crate::rng::substream;
use crate::simulator::{
    gen_embedding, gen_scene, render_detections, source_domain_samples, CameraStyle, GtFrame, Identity, SceneConfig,
};
use crate::trainer::{
    accuracy, pretrain, train_two_phase, ConsistencyPair, EpochLoss, LabeledSample, ToyModelParams, TrainConfig, TrainOutcome,
};

pub const PARAMS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Simulate,
    SplitLabels,
    Associate,
    Train,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Simulate,
        Stage::SplitLabels,
        Stage::Associate,
        Stage::Train,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::SplitLabels => "split-labels",
            Stage::Associate => "associate",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    fn dir(&self) -> &'static str {
        match self {
            Stage::Simulate => "dataset",
            Stage::SplitLabels => "labels",
            Stage::Associate => "sets",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage}: {message}")]
    Stage { stage: Stage, message: String },
    #[error("missing artifacts: {0}")]
    MissingArtifacts(String),
}

impl PipelineError {
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}

fn failed<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

fn require(path: &Path) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifacts(path.display().to_string()))
    }
}

/// Paths inside an artifacts root.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn calib(&self) -> PathBuf {
        self.dataset().join("calib.json")
    }
    pub fn meta(&self) -> PathBuf {
        self.dataset().join("meta.json")
    }
    pub fn gt(&self) -> PathBuf {
        self.dataset().join("gt.jsonl")
    }
    pub fn identities(&self) -> PathBuf {
        self.dataset().join("identities.json")
    }
    pub fn detections(&self) -> PathBuf {
        self.dataset().join("detections")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("labels")
    }
    pub fn sets(&self) -> PathBuf {
        self.root.join("sets")
    }
    pub fn selection(&self) -> PathBuf {
        self.sets().join("selection.json")
    }
    pub fn student_sets(&self, cam: &str) -> PathBuf {
        self.sets().join(cam)
    }
    pub fn train(&self, cam: &str) -> PathBuf {
        self.root.join("train").join(cam)
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("eval").join("report.json")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    fn stamp(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir()).join(".stamp")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub n_frames: usize,
    pub cameras: Vec<String>,
    pub scene: SceneConfig,
}

/// Generates a scene and writes the dataset files into `dir`.
pub fn simulate_to(dir: &Path, scene: &SceneConfig, seed: u64) -> Result<DatasetMeta, PipelineError> {
    let st = Stage::Simulate;
    let generated = gen_scene(scene, seed).map_err(failed(st))?;
    let streams =
        render_detections(&generated.gt, &generated.cameras, &generated.styles, scene, seed).map_err(failed(st))?;
    io::write_calib(&dir.join("calib.json"), &generated.cameras).map_err(failed(st))?;
    io::write_detections(&dir.join("detections"), &streams).map_err(failed(st))?;
    io::write_jsonl(&dir.join("gt.jsonl"), &generated.gt.frames).map_err(failed(st))?;
    io::write_json(&dir.join("identities.json"), &generated.gt.identities).map_err(failed(st))?;
    let meta = DatasetMeta {
        seed,
        n_frames: scene.n_frames,
        cameras: generated.cameras.iter().map(|c| c.id.clone()).collect(),
        scene: scene.clone(),
    };
    io::write_json(&dir.join("meta.json"), &meta).map_err(failed(st))?;
    Ok(meta)
}

fn n_frames_hint(detections_dir: &Path) -> Option<usize> {
    let meta = detections_dir.parent()?.join("meta.json");
    io::read_json::<DatasetMeta>(&meta).ok().map(|m| m.n_frames)
}

/// Reads raw detections, stamps tiers and writes them to `out`.
pub fn split_labels_dir(detections: &Path, out: &Path, t_cls: f64) -> Result<DetectionStreams, PipelineError> {
    let st = Stage::SplitLabels;
    let mut streams = io::read_detections(detections, n_frames_hint(detections)).map_err(failed(st))?;
    for frames in streams.values_mut() {
        for dets in frames.iter_mut() {
            assign_tiers(dets, t_cls).map_err(failed(st))?;
        }
    }
    io::write_detections(out, &streams).map_err(failed(st))?;
    Ok(streams)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetsManifest {
    pub student_cam: String,
    pub ncs_pairs: String,
    pub cs_labels: String,
    /// Pairs built from confident student labels, for the ablation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confident_pairs: Option<String>,
    pub tau: f64,
    pub frames: [u64; 2],
    pub n_pairs: usize,
    pub n_cs_labels: usize,
    pub pruning_factor: f64,
    pub stats: crate::association::AssociationStats,
    pub warnings: Vec<String>,
}

/// Writes one student's training sets and returns the manifest.
pub fn write_training_sets(
    dir: &Path,
    sets: &TrainingSets,
    tau: f64,
    frames: std::ops::Range<u64>,
    confident_pairs: Option<&[TrackletPair]>,
) -> Result<SetsManifest, IoError> {
    io::write_jsonl(&dir.join("pairs.jsonl"), &sets.ncs_pairs)?;
    io::write_jsonl(&dir.join("cs_labels.jsonl"), &sets.cs_labels)?;
    if let Some(pairs) = confident_pairs {
        io::write_jsonl(&dir.join("confident_pairs.jsonl"), pairs)?;
    }
    let manifest = SetsManifest {
        student_cam: sets.student_cam.clone(),
        ncs_pairs: "pairs.jsonl".into(),
        cs_labels: "cs_labels.jsonl".into(),
        confident_pairs: confident_pairs.map(|_| "confident_pairs.jsonl".into()),
        tau,
        frames: [frames.start, frames.end],
        n_pairs: sets.ncs_pairs.len(),
        n_cs_labels: sets.cs_labels.len(),
        pruning_factor: sets.stats.pruning_factor(),
        stats: sets.stats.clone(),
        warnings: sets.warnings.clone(),
    };
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauSelectionReport {
    pub tau: f64,
    /// `validation` or `config`.
    pub source: String,
    pub frames: [u64; 2],
    pub sweep: Vec<SweepPoint>,
}

/// Coarse sets and the pooled recall denominator for every student over `frames`.
pub fn coarse_for_students(
    students: &[String],
    labels: &DetectionStreams,
    cameras: &[CameraModel],
    config: &AssociationConfig,
    frames: std::ops::Range<u64>,
) -> Result<(Vec<CoarseSet>, usize), PipelineError> {
    let mut sets = Vec::new();
    let mut reachable = 0;
    for s in students {
        sets.push(coarse_pairs(s, labels, cameras, config, frames.clone()).map_err(failed(Stage::Associate))?);
        reachable += reachable_true_pairs(s, labels, config, frames.clone());
    }
    Ok((sets, reachable))
}

/// Picks tau on the validation block, or takes it from the config.
pub fn select_tau(
    config: &PipelineConfig,
    labels: &DetectionStreams,
    cameras: &[CameraModel],
    split: &FrameSplit,
) -> Result<TauSelectionReport, PipelineError> {
    let sel = &config.tau_selection;
    if !sel.enabled {
        return Ok(TauSelectionReport {
            tau: config.association.tau,
            source: "config".into(),
            frames: [split.val.start, split.val.end],
            sweep: Vec::new(),
        });
    }
    let students = config.student_cameras();
    let (coarse, reachable) =
        coarse_for_students(&students, labels, cameras, &config.association, split.val.clone())?;
    let refs: Vec<&CoarseSet> = coarse.iter().collect();
    let sweep = tau_sweep(&refs, reachable, &tau_grid(sel.max, sel.steps));
    let tau = best_tau(&sweep).unwrap_or(config.association.tau);
    Ok(TauSelectionReport {
        tau,
        source: "validation".into(),
        frames: [split.val.start, split.val.end],
        sweep,
    })
}

fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("tau,accepted,true_positives,reachable,precision,recall,f1\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            p.tau,
            p.pr.accepted,
            p.pr.true_positives,
            p.pr.reachable,
            opt(p.pr.precision),
            opt(p.pr.recall),
            p.pr.f1
        );
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn load_labels(art: &Artifacts, stage: Stage) -> Result<DetectionStreams, PipelineError> {
    require(&art.labels())?;
    let n = io::read_json::<DatasetMeta>(&art.meta()).ok().map(|m| m.n_frames);
    io::read_detections(&art.labels(), n).map_err(failed(stage))
}

fn load_calib(art: &Artifacts, stage: Stage) -> Result<Vec<CameraModel>, PipelineError> {
    require(&art.calib())?;
    io::read_calib(&art.calib()).map_err(failed(stage))
}

/// Association stage: tau selection plus per-student training sets on the
/// train block.
pub fn associate_stage(config: &PipelineConfig, art: &Artifacts) -> Result<(), PipelineError> {
    let st = Stage::Associate;
    let cameras = load_calib(art, st)?;
    let labels = load_labels(art, st)?;
    let split = config.frame_split();
    let selection = select_tau(config, &labels, &cameras, &split)?;
    info!("tau = {} ({})", selection.tau, selection.source);
    io::write_json(&art.selection(), &selection).map_err(failed(st))?;
    io::write_string(&art.sets().join("tau_sweep.csv"), &sweep_csv(&selection.sweep)).map_err(failed(st))?;

    for student in config.student_cameras() {
        let coarse = coarse_pairs(&student, &labels, &cameras, &config.association, split.train.clone())
            .map_err(failed(st))?;
        let sets = assemble(coarse, &labels, selection.tau, split.train.clone());
        let confident = if config.ablations {
            let cfg = AssociationConfig {
                student_tier: StudentTier::Confident,
                ..config.association.clone()
            };
            let coarse =
                coarse_pairs(&student, &labels, &cameras, &cfg, split.train.clone()).map_err(failed(st))?;
            Some(coarse.finalize(selection.tau))
        } else {
            None
        };
        let m = write_training_sets(
            &art.student_sets(&student),
            &sets,
            selection.tau,
            split.train.clone(),
            confident.as_deref(),
        )
        .map_err(failed(st))?;
        info!("{student}: {} pairs, {} confident labels", m.n_pairs, m.n_cs_labels);
    }
    Ok(())
}

/// One consistency item per aligned frame of each accepted pair.
pub fn consistency_items(pairs: &[TrackletPair]) -> Vec<ConsistencyPair> {
    pairs
        .iter()
        .filter(|p| p.is_accepted())
        .flat_map(|p| {
            p.a.embeddings.iter().zip(&p.b.embeddings).map(|(s, t)| ConsistencyPair {
                student: s.clone(),
                teacher: t.clone(),
            })
        })
        .collect()
}

pub fn labeled_samples(labels: &[PseudoLabel]) -> Vec<LabeledSample> {
    labels
        .iter()
        .map(|l| LabeledSample {
            x: l.embedding.clone(),
            label: l.class_id as usize,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub format_version: u32,
    pub student_cam: String,
    pub variant: String,
    pub params: ToyModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub student_cam: String,
    pub variant: String,
    pub n_pairs: usize,
    pub n_consistency_items: usize,
    pub n_cs_labels: usize,
    pub initial_consistency: Option<f64>,
    pub final_consistency: Option<f64>,
    pub phase1_ran: bool,
    pub warnings: Vec<String>,
}

pub fn losses_csv(curve: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,phase,loss\n");
    for e in curve {
        let _ = writeln!(s, "{},{},{}", e.epoch, e.phase, e.loss);
    }
    s
}

/// Training variants run for a student camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Consistency on uncertain-student pairs, then detection.
    Full,
    /// Detection phase only.
    Phase2Only,
    /// Consistency on confident-student pairs, then detection.
    ConfidentBackbone,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Phase2Only => "phase2_only",
            Variant::ConfidentBackbone => "confident_backbone",
        }
    }

    fn file(&self) -> String {
        match self {
            Variant::Full => "params.json".into(),
            v => format!("params_{}.json", v.name()),
        }
    }
}

/// Trains one variant from a sets directory and writes its outputs to `out`.
#[allow(clippy::too_many_arguments)]
pub fn train_variant(
    sets_dir: &Path,
    out: &Path,
    variant: Variant,
    train: &TrainConfig,
    init: &ToyModelParams,
    seed: u64,
) -> Result<TrainOutcome, PipelineError> {
    let st = Stage::Train;
    let manifest_path = sets_dir.join("manifest.json");
    require(&manifest_path)?;
    let manifest: SetsManifest = io::read_json(&manifest_path).map_err(failed(st))?;
    let pair_file = match variant {
        Variant::ConfidentBackbone => manifest
            .confident_pairs
            .clone()
            .ok_or_else(|| PipelineError::MissingArtifacts(format!("{}: confident pairs", sets_dir.display())))?,
        _ => manifest.ncs_pairs.clone(),
    };
    let pairs: Vec<TrackletPair> = io::read_jsonl(&sets_dir.join(pair_file)).map_err(failed(st))?;
    let cs: Vec<PseudoLabel> = io::read_jsonl(&sets_dir.join(&manifest.cs_labels)).map_err(failed(st))?;
    let items = consistency_items(&pairs);
    let samples = labeled_samples(&cs);
    let cfg = TrainConfig {
        skip_phase1: train.skip_phase1 || variant == Variant::Phase2Only,
        ..train.clone()
    };
    let outcome = train_two_phase(init.clone(), &items, &samples, &cfg, seed).map_err(failed(st))?;
    let params = ParamsFile {
        format_version: PARAMS_FORMAT_VERSION,
        student_cam: manifest.student_cam.clone(),
        variant: variant.name().into(),
        params: outcome.params.clone(),
    };
    io::write_json(&out.join(variant.file()), &params).map_err(failed(st))?;
    let suffix = match variant {
        Variant::Full => String::new(),
        v => format!("_{}", v.name()),
    };
    io::write_string(&out.join(format!("losses{suffix}.csv")), &losses_csv(&outcome.curve)).map_err(failed(st))?;
    let summary = TrainSummary {
        student_cam: manifest.student_cam,
        variant: variant.name().into(),
        n_pairs: pairs.len(),
        n_consistency_items: items.len(),
        n_cs_labels: samples.len(),
        initial_consistency: outcome.initial_consistency,
        final_consistency: outcome.final_consistency(),
        phase1_ran: outcome.phase1_ran,
        warnings: outcome.warnings.clone(),
    };
    io::write_json(&out.join(format!("summary{suffix}.json")), &summary).map_err(failed(st))?;
    Ok(outcome)
}

/// Initial parameters shared by every variant of a run: a random model,
/// optionally pretrained on source-domain descriptors.
pub fn initial_params(config: &PipelineConfig) -> Result<ToyModelParams, PipelineError> {
    let emb = &config.scene.embedding;
    let m = &config.model;
    let init = ToyModelParams::random(emb.dim, m.hidden, emb.n_classes as usize + 1, m.init_scale, config.seed);
    if m.pretrain_epochs == 0 {
        return Ok(init);
    }
    let source = source_domain_samples(&config.scene, config.seed, m.source_identities, m.source_draws)
        .map_err(failed(Stage::Train))?;
    let samples: Vec<LabeledSample> = source
        .into_iter()
        .map(|(x, c)| LabeledSample { x, label: c as usize })
        .collect();
    pretrain(init, &samples, m.pretrain_epochs, &config.train, config.seed).map_err(failed(Stage::Train))
}

pub fn variants(config: &PipelineConfig) -> Vec<Variant> {
    if config.ablations {
        vec![Variant::Full, Variant::Phase2Only, Variant::ConfidentBackbone]
    } else {
        vec![Variant::Full]
    }
}

pub fn train_stage(config: &PipelineConfig, art: &Artifacts) -> Result<(), PipelineError> {
    let init = initial_params(config)?;
    for student in config.student_cameras() {
        for v in variants(config) {
            train_variant(
                &art.student_sets(&student),
                &art.train(&student),
                v,
                &config.train,
                &init,
                config.seed,
            )?;
        }
    }
    Ok(())
}

/// Visible GT boxes per camera and frame.
pub fn gt_boxes(frames: &[GtFrame]) -> GtBoxes {
    let mut out: GtBoxes = BTreeMap::new();
    for f in frames {
        for cam in f.cameras.keys() {
            let entry = out.entry(cam.clone()).or_default();
            entry.resize(f.frame as usize + 1, Vec::new());
            entry[f.frame as usize] = f.visible(cam).map(|b| b.bbox).collect();
        }
    }
    out
}

/// Student-camera detections of real objects in `frames`, labelled with the
/// object's true class.
pub fn held_out_samples(
    labels: &DetectionStreams,
    gt: &[GtFrame],
    camera: &str,
    frames: std::ops::Range<u64>,
) -> Vec<LabeledSample> {
    let class_of: BTreeMap<u64, u32> = gt
        .first()
        .map(|f| f.objects.iter().map(|o| (o.identity, o.class_id)).collect())
        .unwrap_or_default();
    let Some(stream) = labels.get(camera) else {
        return Vec::new();
    };
    frames
        .filter_map(|f| stream.get(f as usize))
        .flatten()
        .filter_map(|d| {
            let id = d.gt_identity?;
            Some(LabeledSample {
                x: d.embedding.clone(),
                label: *class_of.get(&id)? as usize,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingEval {
    pub n_held_out: usize,
    pub initial_consistency: Option<f64>,
    pub final_consistency: Option<f64>,
    pub accuracy: f64,
    pub phase2_only_accuracy: Option<f64>,
    pub confident_backbone_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraReport {
    pub camera: String,
    pub association: AssociationPr,
    pub pruning_factor: f64,
    pub n_train_pairs: usize,
    pub n_cs_labels: usize,
    pub warnings: Vec<String>,
    pub training: TrainingEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema_version: u32,
    pub seed: u64,
    pub tau_source: String,
    pub test_frames: [u64; 2],
    #[serde(flatten)]
    pub summary: EvalReport,
    pub cameras: Vec<CameraReport>,
}

fn load_gt(path: &Path, stage: Stage) -> Result<Vec<GtFrame>, PipelineError> {
    require(path)?;
    io::read_jsonl(path).map_err(failed(stage))
}

fn read_params(path: &Path) -> Result<ToyModelParams, PipelineError> {
    require(path)?;
    let f: ParamsFile = io::read_json(path).map_err(failed(Stage::Eval))?;
    if f.format_version != PARAMS_FORMAT_VERSION {
        return Err(PipelineError::Stage {
            stage: Stage::Eval,
            message: format!("{}: unsupported params format {}", path.display(), f.format_version),
        });
    }
    Ok(f.params)
}

/// Evaluates tiers, detector AP and association on the test block, and the
/// trained models on held-out student detections.
pub fn eval_stage(config: &PipelineConfig, art: &Artifacts, gt_path: &Path) -> Result<PipelineReport, PipelineError> {
    let st = Stage::Eval;
    let cameras = load_calib(art, st)?;
    let labels = load_labels(art, st)?;
    let gt = load_gt(gt_path, st)?;
    require(&art.selection())?;
    let selection: TauSelectionReport = io::read_json(&art.selection()).map_err(failed(st))?;
    let split = config.frame_split();
    let test = split.test.clone();
    let boxes = gt_boxes(&gt);
    let cam_ids: Vec<String> = labels.keys().cloned().collect();

    let test_labels: Vec<PseudoLabel> = labels
        .values()
        .flat_map(|frames| frames[test.start as usize..test.end as usize].iter().flatten())
        .cloned()
        .collect();
    let tiers =
        tier_quality(&test_labels, &boxes, &cam_ids, test.clone(), DEFAULT_IOU_THRESH).map_err(failed(st))?;
    let ap = average_precision(&test_labels, &boxes, &cam_ids, test.clone(), DEFAULT_IOU_THRESH)
        .map_err(failed(st))?;

    let mut pooled = PrCounter::default();
    let mut counts = EvalCounts {
        gt_boxes: tiers.n_gt,
        reachable_pairs: 0,
        all_pairs: 0,
        candidates: 0,
        accepted: 0,
    };
    let mut reports = Vec::new();
    for student in config.student_cameras() {
        let coarse = coarse_pairs(&student, &labels, &cameras, &config.association, test.clone())
            .map_err(failed(st))?;
        let reachable = reachable_true_pairs(&student, &labels, &config.association, test.clone());
        let accepted = coarse.finalize(selection.tau);
        let mut counter = PrCounter::default();
        for p in &accepted {
            counter.push(p);
            pooled.push(p);
        }
        counts.reachable_pairs += reachable;
        counts.all_pairs += coarse.stats.all_pairs;
        counts.candidates += coarse.stats.candidates;
        counts.accepted += accepted.len();

        let manifest: SetsManifest =
            io::read_json(&art.student_sets(&student).join("manifest.json")).map_err(failed(st))?;
        let summary: TrainSummary = io::read_json(&art.train(&student).join("summary.json")).map_err(failed(st))?;
        let held_out = held_out_samples(&labels, &gt, &student, test.clone());
        let acc = |v: Variant| -> Result<Option<f64>, PipelineError> {
            if !variants(config).contains(&v) {
                return Ok(None);
            }
            let p = read_params(&art.train(&student).join(v.file()))?;
            Ok(Some(accuracy(&p, &held_out).map_err(failed(st))?))
        };
        let mut warnings = manifest.warnings.clone();
        warnings.extend(summary.warnings.iter().cloned());
        warnings.dedup();
        reports.push(CameraReport {
            camera: student.clone(),
            association: counter.finish(reachable),
            pruning_factor: coarse.stats.pruning_factor(),
            n_train_pairs: manifest.n_pairs,
            n_cs_labels: manifest.n_cs_labels,
            warnings,
            training: TrainingEval {
                n_held_out: held_out.len(),
                initial_consistency: summary.initial_consistency,
                final_consistency: summary.final_consistency,
                accuracy: acc(Variant::Full)?.unwrap_or(0.0),
                phase2_only_accuracy: acc(Variant::Phase2Only)?,
                confident_backbone_accuracy: acc(Variant::ConfidentBackbone)?,
            },
        });
    }
    let report = PipelineReport {
        schema_version: SCHEMA_VERSION,
        seed: config.seed,
        tau_source: selection.source,
        test_frames: [test.start, test.end],
        summary: EvalReport {
            tiers,
            association: pooled.finish(counts.reachable_pairs),
            tau: selection.tau,
            pruning_factor: crate::association::pruning_factor(counts.all_pairs, counts.candidates),
            ap_at_08: ap,
            counts,
        },
        cameras: reports,
    };
    io::write_json(&art.report_json(), &report).map_err(failed(st))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityPoint {
    pub style_scale: f64,
    pub oracle_f1: f64,
}

/// Best achievable F1 of a distance threshold separating same-identity from
/// different-identity cross-camera embedding pairs, per style scale.
pub fn separability_curve(
    identities: &[Identity],
    cameras: &[String],
    scene: &SceneConfig,
    seed: u64,
    scales: &[f64],
    draws: usize,
) -> Result<Vec<SeparabilityPoint>, PipelineError> {
    let emb = &scene.embedding;
    let mut out = Vec::new();
    for &scale in scales {
        let mut per_cam: Vec<Vec<(u64, Vec<f64>)>> = Vec::new();
        for cam in cameras {
            let style = CameraStyle::sample(cam, emb.dim, scale, seed);
            let mut rng = substream(seed, &format!("separability/{cam}"));
            let mut v = Vec::new();
            for id in identities {
                for _ in 0..draws {
                    let e = gen_embedding(&id.latent, &style, emb.noise_sigma, &mut rng).map_err(failed(Stage::Report))?;
                    v.push((id.identity, e));
                }
            }
            per_cam.push(v);
        }
        let mut scored: Vec<(f64, bool)> = Vec::new();
        for i in 0..per_cam.len() {
            for j in i + 1..per_cam.len() {
                for (ia, ea) in &per_cam[i] {
                    for (ib, eb) in &per_cam[j] {
                        let d = ea.iter().zip(eb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                        scored.push((d, ia == ib));
                    }
                }
            }
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        let positives = scored.iter().filter(|s| s.1).count();
        let mut tp = 0usize;
        let mut best: f64 = 0.0;
        for (k, (_, pos)) in scored.iter().enumerate() {
            tp += usize::from(*pos);
            if positives > 0 {
                best = best.max(2.0 * tp as f64 / ((k + 1) as f64 + positives as f64));
            }
        }
        out.push(SeparabilityPoint {
            style_scale: scale,
            oracle_f1: best,
        });
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

/// Human-readable summary and CSV tables from the evaluation artifacts.
pub fn report_stage(art: &Artifacts) -> Result<String, PipelineError> {
    let st = Stage::Report;
    require(&art.report_json())?;
    require(&art.config())?;
    let report: PipelineReport = io::read_json(&art.report_json()).map_err(failed(st))?;
    let config = PipelineConfig::from_json(&io::read_string(&art.config()).map_err(failed(st))?)?;
    let dir = art.report_dir();
    let s = &report.summary;

    let mut tiers = String::from("tier,n_labels,true_positives,precision,recall\n");
    for (name, t) in [("confident", &s.tiers.confident), ("uncertain", &s.tiers.uncertain), ("combined", &s.tiers.combined)] {
        let _ = writeln!(tiers, "{name},{},{},{},{}", t.n_labels, t.true_positives, opt(t.precision), opt(t.recall));
    }
    io::write_string(&dir.join("tiers.csv"), &tiers).map_err(failed(st))?;

    let mut assoc = String::from("camera,accepted,true_positives,reachable,precision,recall,f1,pruning_factor\n");
    for c in &report.cameras {
        let a = &c.association;
        let _ = writeln!(
            assoc,
            "{},{},{},{},{},{},{},{}",
            c.camera,
            a.accepted,
            a.true_positives,
            a.reachable,
            opt(a.precision),
            opt(a.recall),
            a.f1,
            c.pruning_factor
        );
    }
    io::write_string(&dir.join("association.csv"), &assoc).map_err(failed(st))?;

    let sweep = io::read_string(&art.sets().join("tau_sweep.csv")).map_err(failed(st))?;
    io::write_string(&dir.join("tau_sweep.csv"), &sweep).map_err(failed(st))?;

    let mut losses = String::from("camera,variant,epoch,phase,loss\n");
    let mut training = String::from("camera,variant,accuracy\n");
    for c in &report.cameras {
        for v in variants(&config) {
            let suffix = match v {
                Variant::Full => String::new(),
                v => format!("_{}", v.name()),
            };
            let csv = io::read_string(&art.train(&c.camera).join(format!("losses{suffix}.csv"))).map_err(failed(st))?;
            for line in csv.lines().skip(1) {
                let _ = writeln!(losses, "{},{},{line}", c.camera, v.name());
            }
            let acc = match v {
                Variant::Full => Some(c.training.accuracy),
                Variant::Phase2Only => c.training.phase2_only_accuracy,
                Variant::ConfidentBackbone => c.training.confident_backbone_accuracy,
            };
            let _ = writeln!(training, "{},{},{}", c.camera, v.name(), opt(acc));
        }
    }
    io::write_string(&dir.join("losses.csv"), &losses).map_err(failed(st))?;
    io::write_string(&dir.join("training.csv"), &training).map_err(failed(st))?;

    let identities: Vec<Identity> = io::read_json(&art.identities()).map_err(failed(st))?;
    let meta: DatasetMeta = io::read_json(&art.meta()).map_err(failed(st))?;
    let curve = separability_curve(
        &identities,
        &meta.cameras,
        &meta.scene,
        meta.seed,
        &config.separability.style_scales,
        config.separability.draws,
    )?;
    let mut sep = String::from("style_scale,oracle_f1\n");
    for p in &curve {
        let _ = writeln!(sep, "{},{}", p.style_scale, p.oracle_f1);
    }
    io::write_string(&dir.join("separability.csv"), &sep).map_err(failed(st))?;

    let mut out = String::new();
    let _ = writeln!(out, "seed {}  tau {} ({})", report.seed, s.tau, report.tau_source);
    let _ = writeln!(out, "test frames {}..{}", report.test_frames[0], report.test_frames[1]);
    let _ = writeln!(out);
    let _ = writeln!(out, "tier quality at IoU {}:", s.tiers.iou_thresh);
    for (name, t) in [("confident", &s.tiers.confident), ("uncertain", &s.tiers.uncertain), ("combined", &s.tiers.combined)] {
        let _ = writeln!(
            out,
            "  {name:<10} n={:<6} precision={} recall={}",
            t.n_labels,
            fmt_opt(t.precision),
            fmt_opt(t.recall)
        );
    }
    let _ = writeln!(out, "detector AP@0.8: {:.4}", s.ap_at_08);
    let _ = writeln!(out, "pruning factor: {:.2}", s.pruning_factor);
    let a = &s.association;
    let _ = writeln!(
        out,
        "association: precision={} recall={} f1={:.4} ({} accepted, {} reachable)",
        fmt_opt(a.precision),
        fmt_opt(a.recall),
        a.f1,
        a.accepted,
        a.reachable
    );
    let _ = writeln!(out);
    for c in &report.cameras {
        let t = &c.training;
        let _ = writeln!(
            out,
            "{}: pairs={} cs_labels={} f1={:.4} pruning={:.2}",
            c.camera, c.n_train_pairs, c.n_cs_labels, c.association.f1, c.pruning_factor
        );
        let _ = writeln!(
            out,
            "  consistency {} -> {}  accuracy full={:.4} phase2_only={} confident_backbone={}",
            fmt_opt(t.initial_consistency),
            fmt_opt(t.final_consistency),
            t.accuracy,
            fmt_opt(t.phase2_only_accuracy),
            fmt_opt(t.confident_backbone_accuracy)
        );
        for w in &c.warnings {
            let _ = writeln!(out, "  warning: {w}");
        }
    }
    io::write_string(&dir.join("summary.txt"), &out).map_err(failed(st))?;
    Ok(out)
}

fn stamp_matches(art: &Artifacts, stage: Stage, fingerprint: &str) -> bool {
    io::read_string(&art.stamp(stage)).is_ok_and(|s| s == fingerprint)
}

/// Config sections a stage reads, chained with the previous stage's stamp so
/// a change upstream invalidates everything after it.
fn stage_fingerprint(config: &PipelineConfig, stage: Stage, previous: &str) -> String {
    let own = match stage {
        Stage::Simulate => serde_json::json!({ "schema_version": config.schema_version, "seed": config.seed, "scene": config.scene }),
        Stage::SplitLabels => serde_json::json!({ "t_cls": config.t_cls }),
        Stage::Associate => serde_json::json!({
            "association": config.association,
            "tau_selection": config.tau_selection,
            "split": config.split,
            "students": config.students,
            "ablations": config.ablations,
        }),
        Stage::Train => serde_json::json!({ "train": config.train, "model": config.model }),
        Stage::Eval => serde_json::Value::Null,
        Stage::Report => serde_json::json!({ "separability": config.separability }),
    };
    format!("{previous}{}: {own}\n", stage.name())
}

/// Runs the stages in order, skipping any whose stamp is current. `force`
/// reruns everything.
pub fn run(config: &PipelineConfig, art: &Artifacts, force: bool) -> Result<PipelineReport, PipelineError> {
    config.validate()?;
    io::create_dir(&art.root).map_err(failed(Stage::Simulate))?;
    io::write_string(&art.config(), &config.to_json()).map_err(failed(Stage::Simulate))?;
    let mut dirty = force;
    let mut fingerprint = String::new();
    for stage in Stage::ALL {
        fingerprint = stage_fingerprint(config, stage, &fingerprint);
        if !dirty && stamp_matches(art, stage, &fingerprint) {
            info!("{stage}: up to date");
            continue;
        }
        dirty = true;
        let _ = std::fs::remove_file(art.stamp(stage));
        info!("{stage}: running");
        match stage {
            Stage::Simulate => {
                simulate_to(&art.dataset(), &config.scene, config.seed)?;
            }
            Stage::SplitLabels => {
                split_labels_dir(&art.detections(), &art.labels(), config.t_cls)?;
            }
            Stage::Associate => associate_stage(config, art)?,
            Stage::Train => train_stage(config, art)?,
            Stage::Eval => {
                eval_stage(config, art, &art.gt())?;
            }
            Stage::Report => {
                report_stage(art)?;
            }
        }
        io::write_string(&art.stamp(stage), &fingerprint).map_err(failed(stage))?;
    }
    io::read_json(&art.report_json()).map_err(failed(Stage::Eval))
}
