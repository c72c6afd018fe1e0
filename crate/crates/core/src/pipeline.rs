//! Config-driven pipeline stages: phantom, edges, sample, train, predict, eval.
//!
//! Every stage reads its inputs from disk, writes its artifacts under
//! `output_dir/<stage>/` and leaves a `manifest.json` there with the config hash,
//! seed, tool version and SHA-256 of every file it read.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::convnet::{
    derive_seed, history_csv, load_model, save_model, train, ArchName, ConvNetModel, LayerSpec,
    NetError, TrainConfig,
};
use crate::detector::{cluster_detections, detections_csv, predict_map, DetectError, ProbabilityMap};
use crate::edgemap::{extract_edges, EdgeError, EdgeMap, DEFAULT_THRESHOLD_PERCENTILE};
use crate::evaluation::{
    annotate_matches, froc, froc_csv, roc, roc_csv, score_thresholds, sensitivity_at_fp, EvalError,
    EvalSummary, MatchMode, DEFAULT_MATCH_RADIUS_MM,
};
use crate::patch::{
    build_patchset, label_index, Label, MirrorAxis, PatchError, PatchSet, SamplerConfig,
    Strategy, DEFAULT_POS_FRACTION, DEFAULT_RADIUS_MM, PATCH_SIZE,
};
use crate::phantom::{generate, PhantomError, PhantomSpec};
use crate::orientation::{OrientMode, DEFAULT_WINDOW_RADIUS};
use crate::volume::{load_annotations, load_volume, save_annotations, save_volume, Annotation, Volume, VolumeError};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const LOCK_FILE: &str = ".spinecade.lock";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("ConfigInvalid: {0}")]
    ConfigInvalid(String),
    #[error("MissingUpstreamArtifact: {0} (run the earlier stage first)")]
    MissingUpstreamArtifact(PathBuf),
    #[error("Locked: {0} exists; another run is using this output directory")]
    Locked(PathBuf),
    #[error("Volume: {0}")]
    Volume(#[from] VolumeError),
    #[error("Edge: {0}")]
    Edge(#[from] EdgeError),
    #[error("Patch: {0}")]
    Patch(#[from] PatchError),
    #[error("Net: {0}")]
    Net(#[from] NetError),
    #[error("Detect: {0}")]
    Detect(#[from] DetectError),
    #[error("Eval: {0}")]
    Eval(#[from] EvalError),
    #[error("Phantom: {0}")]
    Phantom(#[from] PhantomError),
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Variant name, for the one-line error report.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::ConfigInvalid(_) => "ConfigInvalid",
            Self::MissingUpstreamArtifact(_) => "MissingUpstreamArtifact",
            Self::Locked(_) => "Locked",
            Self::Volume(_) => "Volume",
            Self::Edge(_) => "Edge",
            Self::Patch(_) => "Patch",
            Self::Net(_) => "Net",
            Self::Detect(_) => "Detect",
            Self::Eval(_) => "Eval",
            Self::Phantom(_) => "Phantom",
            Self::Io(_) => "Io",
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub image: Option<PathBuf>,
    #[serde(default)]
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    pub split: Split,
}

/// Generated training and test phantoms; case `i` uses a seed derived from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSuite {
    pub n_train: usize,
    pub n_test: usize,
    pub spec: PhantomSpec,
}

impl Default for PhantomSuite {
    fn default() -> Self {
        Self {
            n_train: 8,
            n_test: 4,
            spec: PhantomSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeParams {
    pub threshold_percentile: f64,
}

impl Default for EdgeParams {
    fn default() -> Self {
        Self {
            threshold_percentile: DEFAULT_THRESHOLD_PERCENTILE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingParams {
    pub strategy: Strategy,
    pub radius_mm: f64,
    /// Total patches over all training cases.
    pub target_count: usize,
    pub pos_fraction: f64,
    pub mirror_axis: MirrorAxis,
    pub orient_mode: OrientMode,
    pub window_radius: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            strategy: Strategy::Oriented,
            radius_mm: DEFAULT_RADIUS_MM,
            target_count: 3000,
            pos_fraction: DEFAULT_POS_FRACTION,
            mirror_axis: MirrorAxis::Horizontal,
            orient_mode: OrientMode::Tangent,
            window_radius: DEFAULT_WINDOW_RADIUS,
        }
    }
}

impl SamplingParams {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            radius_mm: self.radius_mm,
            mirror_axis: self.mirror_axis,
            orient_mode: self.orient_mode,
            window_radius: self.window_radius,
        }
    }
}

/// A named architecture or an explicit layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetSpec {
    Named(ArchName),
    Layers(Vec<LayerSpec>),
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec::Named(ArchName::default())
    }
}

impl NetSpec {
    pub fn layers(&self) -> Vec<LayerSpec> {
        match self {
            NetSpec::Named(a) => a.layers(),
            NetSpec::Layers(l) => l.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub match_radius_mm: f64,
    pub fp_targets: Vec<f64>,
    pub match_mode: MatchMode,
    /// Threshold used for the exported detection lists (the FROC sweep re-clusters).
    pub cluster_threshold: f64,
    pub batch_size: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            match_radius_mm: DEFAULT_MATCH_RADIUS_MM,
            fp_targets: vec![5.0, 10.0],
            match_mode: MatchMode::Distance,
            cluster_threshold: 0.5,
            batch_size: crate::detector::DEFAULT_BATCH_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub phantom: Option<PhantomSuite>,
    pub cases: Vec<CaseConfig>,
    pub edges: EdgeParams,
    pub sampling: SamplingParams,
    pub net: NetSpec,
    pub train: TrainConfig,
    pub eval: EvalParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("spinecade-out"),
            seed: 0,
            phantom: Some(PhantomSuite::default()),
            cases: Vec::new(),
            edges: EdgeParams::default(),
            sampling: SamplingParams::default(),
            net: NetSpec::default(),
            train: TrainConfig {
                learning_rate: 0.01,
                momentum: 0.9,
                batch_size: 32,
                epochs: 8,
                weight_decay: 1e-4,
                seed: 0,
            },
            eval: EvalParams::default(),
        }
    }
}

/// Set `key` (dot-separated, numeric parts index arrays) in a JSON document.
/// `raw` is parsed as JSON when possible, else taken as a string.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::ConfigInvalid(format!("--set key {key:?} is empty")));
    }
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if let Ok(idx) = part.parse::<usize>() {
            let arr = cur
                .as_array_mut()
                .ok_or_else(|| PipelineError::ConfigInvalid(format!("{key}: {part} indexes a non-array")))?;
            let len = arr.len();
            let slot = arr
                .get_mut(idx)
                .ok_or_else(|| PipelineError::ConfigInvalid(format!("{key}: index {idx} out of {len}")))?;
            if last {
                *slot = value;
                return Ok(());
            }
            cur = slot;
        } else {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            }
            let obj = cur
                .as_object_mut()
                .ok_or_else(|| PipelineError::ConfigInvalid(format!("{key}: {part} indexes a non-object")))?;
            if last {
                obj.insert((*part).to_owned(), value);
                return Ok(());
            }
            cur = obj.entry((*part).to_owned()).or_insert(Value::Null);
        }
    }
    unreachable!("loop returns on the last part")
}

impl PipelineConfig {
    /// Parse JSON text, apply `--set` overrides, then resolve relative paths against `base`.
    pub fn from_json(text: &str, overrides: &[(String, String)], base: &Path) -> Result<Self> {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| PipelineError::ConfigInvalid(format!("config JSON: {e}")))?;
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        let mut cfg: PipelineConfig =
            serde_json::from_value(doc).map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.output_dir);
        for c in &mut cfg.cases {
            for p in [&mut c.image, &mut c.mask, &mut c.annotations].into_iter().flatten() {
                fix(p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, overrides, base)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::ConfigInvalid(m));
        if self.phantom.is_none() && self.cases.is_empty() {
            return bad("either phantom or cases must be given".into());
        }
        for (i, c) in self.cases.iter().enumerate() {
            for (name, p) in [("image", &c.image), ("mask", &c.mask), ("annotations", &c.annotations)] {
                if let Some(p) = p {
                    if !p.exists() {
                        return bad(format!("cases[{i}].{name}: {} does not exist", p.display()));
                    }
                }
            }
        }
        let e = &self.edges;
        if !(e.threshold_percentile > 0.0 && e.threshold_percentile < 100.0) {
            return bad("edges.threshold_percentile must lie in (0, 100)".into());
        }
        let s = &self.sampling;
        if !(s.radius_mm > 0.0) {
            return bad("sampling.radius_mm must be > 0".into());
        }
        if s.target_count == 0 {
            return bad("sampling.target_count must be > 0".into());
        }
        if !(s.pos_fraction > 0.0 && s.pos_fraction < 1.0) {
            return bad("sampling.pos_fraction must lie in (0, 1)".into());
        }
        if s.window_radius == 0 {
            return bad("sampling.window_radius must be >= 1".into());
        }
        self.train
            .validate()
            .map_err(|e| PipelineError::ConfigInvalid(format!("train: {e}")))?;
        crate::convnet::shape_check(&self.net.layers(), [3, PATCH_SIZE, PATCH_SIZE])
            .map_err(|e| PipelineError::ConfigInvalid(format!("net: {e}")))?;
        let ev = &self.eval;
        if !(ev.match_radius_mm > 0.0) {
            return bad("eval.match_radius_mm must be > 0".into());
        }
        if !(ev.cluster_threshold > 0.0 && ev.cluster_threshold < 1.0) {
            return bad("eval.cluster_threshold must lie in (0, 1)".into());
        }
        if ev.batch_size == 0 {
            return bad("eval.batch_size must be >= 1".into());
        }
        Ok(())
    }

    /// Canonical JSON of the effective config, used for the manifest hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// A case with all paths resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub index: usize,
    pub id: String,
    pub split: Split,
    pub image: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
}

impl Case {
    fn require<'a>(&self, field: &'static str, p: &'a Option<PathBuf>) -> Result<&'a Path> {
        p.as_deref()
            .ok_or_else(|| PipelineError::ConfigInvalid(format!("cases[{}].{field} is required", self.index)))
    }
}

fn stage_dir(cfg: &PipelineConfig, stage: &str) -> PathBuf {
    cfg.output_dir.join(stage)
}

fn phantom_cases(cfg: &PipelineConfig, suite: &PhantomSuite) -> Vec<Case> {
    let dir = stage_dir(cfg, "phantom");
    let mk = |index, id: String, split| Case {
        index,
        image: Some(dir.join(format!("{id}.mhd"))),
        mask: Some(dir.join(format!("{id}_mask.mhd"))),
        annotations: Some(dir.join(format!("{id}_annotations.csv"))),
        id,
        split,
    };
    let train = (0..suite.n_train).map(|i| (format!("train{i:02}"), Split::Train));
    let test = (0..suite.n_test).map(|i| (format!("test{i:02}"), Split::Test));
    train
        .chain(test)
        .enumerate()
        .map(|(i, (id, split))| mk(i, id, split))
        .collect()
}

/// Explicit cases when given, otherwise the phantom suite's generated files.
pub fn resolve_cases(cfg: &PipelineConfig) -> Vec<Case> {
    if !cfg.cases.is_empty() {
        return cfg
            .cases
            .iter()
            .enumerate()
            .map(|(i, c)| Case {
                index: i,
                id: c.id.clone().unwrap_or_else(|| {
                    c.image
                        .as_ref()
                        .and_then(|p| p.file_stem())
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| format!("case{i:02}"))
                }),
                split: c.split,
                image: c.image.clone(),
                mask: c.mask.clone(),
                annotations: c.annotations.clone(),
            })
            .collect();
    }
    cfg.phantom
        .as_ref()
        .map(|s| phantom_cases(cfg, s))
        .unwrap_or_default()
}

/// Exclusive use of an output directory for the lifetime of the guard.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(output_dir: &Path) -> Result<Self> {
        fs::create_dir_all(output_dir)?;
        let path = output_dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Input path -> SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

/// Tracks files read and written by one stage.
struct StageIo<'a> {
    cfg: &'a PipelineConfig,
    command: &'static str,
    dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl<'a> StageIo<'a> {
    fn new(cfg: &'a PipelineConfig, command: &'static str) -> Result<Self> {
        let dir = stage_dir(cfg, command);
        fs::create_dir_all(&dir)?;
        Ok(Self {
            cfg,
            command,
            dir,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.cfg.output_dir)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    }

    fn upstream(&self, p: &Path) -> Result<()> {
        if p.exists() {
            Ok(())
        } else {
            Err(PipelineError::MissingUpstreamArtifact(p.to_owned()))
        }
    }

    fn read(&mut self, p: &Path) -> Result<Vec<u8>> {
        self.upstream(p)?;
        let bytes = fs::read(p)?;
        self.inputs.insert(self.rel(p), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn read_string(&mut self, p: &Path) -> Result<String> {
        String::from_utf8(self.read(p)?)
            .map_err(|_| PipelineError::ConfigInvalid(format!("{} is not UTF-8", p.display())))
    }

    /// Hash a volume's header and raw file, then load it.
    fn volume(&mut self, header: &Path) -> Result<Volume> {
        self.read(header)?;
        let raw = header.with_extension("raw");
        if raw.exists() {
            self.read(&raw)?;
        }
        Ok(load_volume(header)?)
    }

    fn annotations(&mut self, p: &Path, v: &Volume) -> Result<Vec<Annotation>> {
        self.read(p)?;
        Ok(load_annotations(p, v)?)
    }

    fn wrote(&mut self, p: &Path) {
        let r = self.rel(p);
        self.outputs.push(r);
    }

    fn write(&mut self, p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, bytes)?;
        self.wrote(p);
        Ok(())
    }

    fn finish(mut self) -> Result<Manifest> {
        self.outputs.sort();
        let m = Manifest {
            command: self.command.to_owned(),
            tool_version: TOOL_VERSION.to_owned(),
            seed: self.cfg.seed,
            config_sha256: sha256_hex(self.cfg.canonical_json().as_bytes()),
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        text.push('\n');
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(m)
    }
}

fn strategy_code(s: Strategy) -> u64 {
    Strategy::ALL.iter().position(|&x| x == s).unwrap() as u64
}

pub fn cmd_phantom(cfg: &PipelineConfig) -> Result<Manifest> {
    let suite = cfg
        .phantom
        .as_ref()
        .ok_or_else(|| PipelineError::ConfigInvalid("phantom section is required for the phantom command".into()))?;
    let mut io = StageIo::new(cfg, "phantom")?;
    for case in phantom_cases(cfg, suite) {
        let spec = PhantomSpec {
            seed: derive_seed(cfg.seed, &[0xA0, suite.spec.seed, case.index as u64]),
            patient_id: case.id.clone(),
            ..suite.spec.clone()
        };
        let ph = generate(&spec)?;
        let (img, mask, ann) = (
            case.image.as_ref().unwrap(),
            case.mask.as_ref().unwrap(),
            case.annotations.as_ref().unwrap(),
        );
        save_volume(&ph.image, img)?;
        save_volume(&ph.mask, mask)?;
        save_annotations(&ph.annotations, ann)?;
        for p in [img.clone(), img.with_extension("raw"), mask.clone(), mask.with_extension("raw"), ann.clone()] {
            io.wrote(&p);
        }
    }
    io.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EdgeSidecar {
    source_dims: [usize; 3],
    threshold_used: f64,
    count: usize,
}

fn edge_paths(cfg: &PipelineConfig, case: &Case) -> (PathBuf, PathBuf) {
    let d = stage_dir(cfg, "edges");
    (d.join(format!("{}_edges.csv", case.id)), d.join(format!("{}_edges.json", case.id)))
}

pub fn cmd_edges(cfg: &PipelineConfig) -> Result<Manifest> {
    let cases = resolve_cases(cfg);
    // validate every case before doing any work
    for c in &cases {
        c.require("image", &c.image)?;
        c.require("mask", &c.mask)?;
    }
    let mut io = StageIo::new(cfg, "edges")?;
    for c in &cases {
        let v = io.volume(c.require("image", &c.image)?)?;
        let m = io.volume(c.require("mask", &c.mask)?)?;
        let em = extract_edges(&v, &m, cfg.edges.threshold_percentile)?;
        let (csv_path, json_path) = edge_paths(cfg, c);
        io.write(&csv_path, em.to_csv())?;
        let side = EdgeSidecar {
            source_dims: em.source_dims,
            threshold_used: em.threshold_used,
            count: em.len(),
        };
        io.write(&json_path, serde_json::to_string_pretty(&side).expect("sidecar") + "\n")?;
    }
    io.finish()
}

fn load_edges(io: &mut StageIo<'_>, cfg: &PipelineConfig, c: &Case) -> Result<EdgeMap> {
    let (csv_path, json_path) = edge_paths(cfg, c);
    let side: EdgeSidecar = serde_json::from_str(&io.read_string(&json_path)?)
        .map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", json_path.display())))?;
    let text = io.read_string(&csv_path)?;
    Ok(EdgeMap::from_csv(&text, side.source_dims, side.threshold_used)?)
}

fn patchset_path(cfg: &PipelineConfig, s: Strategy) -> PathBuf {
    stage_dir(cfg, "sample").join(format!("{s}.p25d"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub strategy: Strategy,
    pub positives: usize,
    pub negatives: usize,
    pub pos_shortfall: usize,
    pub neg_shortfall: usize,
}

pub fn cmd_sample(cfg: &PipelineConfig, strategies: &[Strategy]) -> Result<Manifest> {
    let train_cases: Vec<Case> = resolve_cases(cfg).into_iter().filter(|c| c.split == Split::Train).collect();
    if train_cases.is_empty() {
        return Err(PipelineError::ConfigInvalid("no training cases".into()));
    }
    for c in &train_cases {
        c.require("image", &c.image)?;
        c.require("annotations", &c.annotations)?;
    }
    let mut io = StageIo::new(cfg, "sample")?;
    let mut loaded = Vec::new();
    for c in &train_cases {
        let v = io.volume(c.image.as_deref().unwrap())?;
        let a = io.annotations(c.annotations.as_deref().unwrap(), &v)?;
        let e = load_edges(&mut io, cfg, c)?;
        loaded.push((c, v, a, e));
    }
    let s = &cfg.sampling;
    let n = loaded.len();
    for &strategy in strategies {
        let mut parts = Vec::new();
        for (k, (c, v, a, e)) in loaded.iter().enumerate() {
            let count = s.target_count / n + usize::from(k < s.target_count % n);
            if count == 0 {
                continue;
            }
            let seed = derive_seed(cfg.seed, &[0xB0, c.index as u64]);
            parts.push(build_patchset(v, e, a, strategy, count, s.pos_fraction, seed, &s.sampler())?);
        }
        let set = PatchSet::concat(parts, cfg.seed);
        let report = SampleReport {
            strategy,
            positives: set.positives,
            negatives: set.negatives,
            pos_shortfall: set.pos_shortfall,
            neg_shortfall: set.neg_shortfall,
        };
        io.write(&patchset_path(cfg, strategy), set.to_bytes())?;
        let rp = stage_dir(cfg, "sample").join(format!("{strategy}.json"));
        io.write(&rp, serde_json::to_string_pretty(&report).expect("report") + "\n")?;
    }
    io.finish()
}

fn model_path(cfg: &PipelineConfig, s: Strategy) -> PathBuf {
    stage_dir(cfg, "train").join(format!("{s}.cnet"))
}

pub fn cmd_train(cfg: &PipelineConfig, strategies: &[Strategy]) -> Result<Manifest> {
    let mut io = StageIo::new(cfg, "train")?;
    for &s in strategies {
        let set = PatchSet::from_bytes(&io.read(&patchset_path(cfg, s))?)?;
        let model = ConvNetModel::<f32>::new(
            cfg.net.layers(),
            [3, PATCH_SIZE, PATCH_SIZE],
            derive_seed(cfg.seed, &[0xC0, strategy_code(s)]),
        )?;
        let tc = TrainConfig {
            seed: derive_seed(cfg.seed, &[0xC1, cfg.train.seed, strategy_code(s)]),
            ..cfg.train.clone()
        };
        let (model, history) = train(model, &set, &tc)?;
        let mp = model_path(cfg, s);
        save_model(&model, &mp)?;
        io.wrote(&mp);
        io.write(&stage_dir(cfg, "train").join(format!("{s}_log.csv")), history_csv(&history))?;
    }
    io.finish()
}

fn prob_path(cfg: &PipelineConfig, s: Strategy, c: &Case) -> PathBuf {
    stage_dir(cfg, "predict").join(s.as_str()).join(format!("{}_prob.csv", c.id))
}

fn test_cases(cfg: &PipelineConfig) -> Result<Vec<Case>> {
    let cases: Vec<Case> = resolve_cases(cfg).into_iter().filter(|c| c.split == Split::Test).collect();
    if cases.is_empty() {
        return Err(PipelineError::ConfigInvalid("no test cases".into()));
    }
    Ok(cases)
}

pub fn cmd_predict(cfg: &PipelineConfig, strategies: &[Strategy]) -> Result<Manifest> {
    let cases = test_cases(cfg)?;
    for c in &cases {
        c.require("image", &c.image)?;
    }
    let mut io = StageIo::new(cfg, "predict")?;
    let mut loaded = Vec::new();
    for c in &cases {
        let v = io.volume(c.image.as_deref().unwrap())?;
        let a = match &c.annotations {
            Some(p) => io.annotations(p, &v)?,
            None => Vec::new(),
        };
        let e = load_edges(&mut io, cfg, c)?;
        loaded.push((c, v, a, e));
    }
    for &s in strategies {
        let mp = model_path(cfg, s);
        io.read(&mp)?;
        let model = load_model(&mp)?;
        for (c, v, a, e) in &loaded {
            let pm = predict_map(&model, v, e, s, &cfg.sampling.sampler(), cfg.eval.batch_size)?;
            io.write(&prob_path(cfg, s, c), pm.to_csv())?;
            let mut dets = cluster_detections(&pm, v, cfg.eval.cluster_threshold);
            annotate_matches(&mut dets, a, cfg.eval.match_radius_mm, cfg.eval.match_mode);
            let dp = stage_dir(cfg, "predict").join(s.as_str()).join(format!("{}_detections.csv", c.id));
            io.write(&dp, detections_csv(&dets))?;
        }
    }
    io.finish()
}

/// Per-strategy evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    #[serde(flatten)]
    pub summary: EvalSummary,
    pub fp_targets: Vec<f64>,
    pub sens_at_targets: Vec<f64>,
}

pub fn cmd_eval(cfg: &PipelineConfig, strategies: &[Strategy]) -> Result<(Manifest, Vec<StrategySummary>)> {
    let cases = test_cases(cfg)?;
    for c in &cases {
        c.require("image", &c.image)?;
        c.require("annotations", &c.annotations)?;
    }
    let mut io = StageIo::new(cfg, "eval")?;
    let mut loaded = Vec::new();
    for c in &cases {
        let v = io.volume(c.image.as_deref().unwrap())?;
        let a = io.annotations(c.annotations.as_deref().unwrap(), &v)?;
        loaded.push((c, v, a));
    }
    let dir = stage_dir(cfg, "eval");
    let mut out = Vec::new();
    for &s in strategies {
        let mut maps = Vec::new();
        for (c, v, _) in &loaded {
            let text = io.read_string(&prob_path(cfg, s, c))?;
            maps.push(ProbabilityMap::from_csv(&text, v.dims())?);
        }
        let mut scored = Vec::new();
        let mut dets = BTreeMap::new();
        let mut anns = BTreeMap::new();
        for ((c, v, a), m) in loaded.iter().zip(&maps) {
            for &(index, p) in &m.entries {
                scored.push((p, label_index(index, a, v, cfg.sampling.radius_mm) == Label::Fracture));
            }
            dets.insert(c.id.clone(), cluster_detections(m, v, cfg.eval.cluster_threshold));
            anns.insert(c.id.clone(), a.clone());
        }
        let r = roc(&scored)?;
        let mut thresholds = score_thresholds(&dets);
        if thresholds.is_empty() {
            thresholds.push(cfg.eval.cluster_threshold);
        }
        let f = froc(&dets, &anns, cfg.eval.match_radius_mm, &thresholds, cfg.eval.match_mode)?;
        let summary = StrategySummary {
            strategy: s,
            summary: EvalSummary::new(&r, &f),
            fp_targets: cfg.eval.fp_targets.clone(),
            sens_at_targets: sensitivity_at_fp(&f, &cfg.eval.fp_targets),
        };
        io.write(&dir.join(format!("{s}_roc.csv")), roc_csv(&r))?;
        io.write(&dir.join(format!("{s}_froc.csv")), froc_csv(&f))?;
        io.write(&dir.join(format!("{s}_summary.json")), summary.summary.to_json())?;
        out.push(summary);
    }
    // summary.json belongs to the configured strategy, or the first one evaluated
    let main = out
        .iter()
        .find(|s| s.strategy == cfg.sampling.strategy)
        .unwrap_or(&out[0]);
    io.write(&dir.join("summary.json"), main.summary.to_json())?;
    if strategies.len() > 1 {
        io.write(&dir.join("compare.csv"), compare_table(&out))?;
    }
    Ok((io.finish()?, out))
}

/// Side-by-side table `strategy,auc,sens_at_5fp,sens_at_10fp,n_targets,n_patients`.
pub fn compare_table(rows: &[StrategySummary]) -> String {
    let mut s = String::from("strategy,auc,sens_at_5fp,sens_at_10fp,n_targets,n_patients\n");
    for r in rows {
        let m = &r.summary;
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{:.4},{},{}",
            r.strategy, m.auc, m.sens_at_5fp, m.sens_at_10fp, m.n_targets, m.n_patients
        );
    }
    s
}

/// Every stage in order; the phantom stage runs only when the config has a phantom section.
pub fn cmd_run_all(cfg: &PipelineConfig, strategies: &[Strategy]) -> Result<Vec<StrategySummary>> {
    if cfg.phantom.is_some() {
        cmd_phantom(cfg)?;
    }
    cmd_edges(cfg)?;
    cmd_sample(cfg, strategies)?;
    cmd_train(cfg, strategies)?;
    cmd_predict(cfg, strategies)?;
    Ok(cmd_eval(cfg, strategies)?.1)
}
