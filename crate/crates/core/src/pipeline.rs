//! End-to-end orchestration: decompose, segment, extract the object cloud,
//! build the heatmap, rank candidates.
//!
//! Stage failures never escape as errors. They are recorded in the report
//! under one failure class and the remaining stages are skipped. Only an
//! invalid configuration or request is returned as `Err`.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::decomposition::{self, url_like, Decomposer, DecompositionBackendConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry;
use crate::heatmap::{self, AffordanceHeatmap, HeatmapParams};
use crate::model::{CameraIntrinsics, GraspCandidate, PartDecomposition, RankedGrasp, RgbdFrame, TaskRequest};
use crate::ranking::{self, RankingConfig};
use crate::scene::{self, PartSelectionVerdict, SceneFixture};
use crate::segmentation::{self, SegmentationBackendConfig, SegmentationResult, Segmenter};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CandidateSourceConfig {
    /// JSON candidate list; defaults to the scene's `grasps.json`.
    File {
        #[serde(default)]
        path: Option<PathBuf>,
    },
    /// Grasp proposal service answering `POST /grasps`.
    Remote {
        endpoint_url: String,
        #[serde(default = "default_grasp_timeout")]
        request_timeout: f64,
    },
}

fn default_grasp_timeout() -> f64 {
    60.0
}

impl Default for CandidateSourceConfig {
    fn default() -> Self {
        CandidateSourceConfig::File { path: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub decomposition: DecompositionBackendConfig,
    pub segmentation: SegmentationBackendConfig,
    pub heatmap: HeatmapParams,
    pub ranking: RankingConfig,
    pub candidate_source: CandidateSourceConfig,
    pub execution: Execution,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("config {}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Usage(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.decomposition.validate()?;
        self.segmentation.validate()?;
        self.heatmap.validate()?;
        if let CandidateSourceConfig::Remote { endpoint_url, request_timeout } = &self.candidate_source {
            url_like(endpoint_url, "grasp endpoint_url")?;
            if !(*request_timeout > 0.0) {
                return Err(Error::invalid("candidate source", "request_timeout must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureClass {
    DecompositionFailure,
    SegmentationFailure,
    NoObjectSegment,
    EmptyCloud,
    NoCandidates,
}

impl FailureClass {
    pub const ALL: [FailureClass; 5] = [
        FailureClass::DecompositionFailure,
        FailureClass::SegmentationFailure,
        FailureClass::NoObjectSegment,
        FailureClass::EmptyCloud,
        FailureClass::NoCandidates,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureClass::DecompositionFailure => "decomposition-failure",
            FailureClass::SegmentationFailure => "segmentation-failure",
            FailureClass::NoObjectSegment => "no-object-segment",
            FailureClass::EmptyCloud => "empty-cloud",
            FailureClass::NoCandidates => "no-candidates",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub class: FailureClass,
    pub message: String,
    /// The failing stage could not reach its backend.
    #[serde(default)]
    pub backend_unavailable: bool,
}

impl Failure {
    fn new(class: FailureClass, e: &Error) -> Self {
        Self {
            class,
            message: e.to_string(),
            backend_unavailable: matches!(e, Error::BackendUnavailable(_)),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub decompose: f64,
    pub segment: f64,
    pub cloud: f64,
    pub heatmap: f64,
    pub rank: f64,
}

impl StageTimings {
    fn total(&self) -> f64 {
        self.decompose + self.segment + self.cloud + self.heatmap + self.rank
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub label: String,
    pub confidence: f64,
    pub pixels: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub task: String,
    pub decomposition: Option<PartDecomposition>,
    pub object_segment: Option<SegmentSummary>,
    pub part_segments: Vec<SegmentSummary>,
    pub missing_labels: Vec<String>,
    pub cloud_points: Option<usize>,
    pub heatmap_path: Option<String>,
    pub ranked: Vec<RankedGrasp>,
    /// First element of `ranked`.
    pub selected: Option<RankedGrasp>,
    pub warnings: Vec<String>,
    pub failure: Option<Failure>,
    pub timings_ms: StageTimings,
}

impl PipelineReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        scene::to_pretty_json(self)
    }

    /// Report JSON with the timing field removed, for run-to-run comparison.
    pub fn to_json_without_timings(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timings_ms");
        }
        scene::to_pretty_json(&v)
    }

    /// Process exit code for this report: 0, 3 when a backend was
    /// unreachable, 4 for any other failure.
    pub fn exit_code(&self) -> i32 {
        match &self.failure {
            None => 0,
            Some(f) if f.backend_unavailable => 3,
            Some(_) => 4,
        }
    }

    pub fn summary(&self) -> String {
        let mut s = format!("task: {}\n", self.task);
        if let Some(d) = &self.decomposition {
            s += &format!(
                "object: {}  grasp: [{}]  avoid: [{}]\n",
                d.object_name(),
                d.desirable_parts().join(", "),
                d.undesirable_parts().join(", ")
            );
        }
        for seg in self.object_segment.iter().chain(&self.part_segments) {
            s += &format!("segment {:<12} conf {:.3}  {} px\n", seg.label, seg.confidence, seg.pixels);
        }
        if !self.missing_labels.is_empty() {
            s += &format!("missing: {}\n", self.missing_labels.join(", "));
        }
        for (i, g) in self.ranked.iter().take(5).enumerate() {
            s += &format!(
                "#{:<2} id {:<4} S = {:7.3} (S_c {:7.3}, S_z {:7.3}) conf {:.3}\n",
                i + 1,
                g.id(),
                g.total_score(),
                g.contact_score(),
                g.zaxis_score(),
                g.candidate().generator_confidence()
            );
        }
        if let Some(g) = &self.selected {
            let t = g.candidate().pose.translation();
            s += &format!("selected: id {} at [{:.4}, {:.4}, {:.4}]\n", g.id(), t.x, t.y, t.z);
        }
        for w in &self.warnings {
            s += &format!("warning: {w}\n");
        }
        if let Some(f) = &self.failure {
            s += &format!("FAILED ({}): {}\n", f.class.as_str(), f.message);
        }
        s += &format!("time: {:.1} ms\n", self.timings_ms.total());
        s
    }
}

/// Full run output: the report plus the intermediate artifacts that
/// evaluation and export need.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub segmentation: Option<SegmentationResult>,
    pub heatmap: Option<AffordanceHeatmap>,
}

// ---------------------------------------------------------------------------
// Candidate sources
// ---------------------------------------------------------------------------

pub trait CandidateSource: Send + Sync {
    fn candidates(&self, frame: &RgbdFrame, object_mask: &BinaryMask) -> Result<Vec<GraspCandidate>>;
}

pub struct CandidateFile(pub PathBuf);

impl CandidateSource for CandidateFile {
    fn candidates(&self, _frame: &RgbdFrame, _mask: &BinaryMask) -> Result<Vec<GraspCandidate>> {
        scene::read_json(&self.0)
    }
}

impl CandidateSource for Vec<GraspCandidate> {
    fn candidates(&self, _frame: &RgbdFrame, _mask: &BinaryMask) -> Result<Vec<GraspCandidate>> {
        Ok(self.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspRequest {
    pub depth_png16_b64: String,
    pub intrinsics: CameraIntrinsics,
    pub width: u32,
    pub height: u32,
    pub object_mask_rle: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspResponse {
    pub candidates: Vec<GraspCandidate>,
}

/// 16-bit grayscale PNG of the depth channel in millimeters.
pub fn encode_depth_png16(frame: &RgbdFrame) -> Result<Vec<u8>> {
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(frame.width(), frame.height(), frame.depth_mm().to_vec())
        .ok_or_else(|| Error::Dimension("depth buffer size".into()))?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub struct RemoteCandidates {
    client: reqwest::blocking::Client,
    url: String,
}

impl RemoteCandidates {
    pub fn new(endpoint_url: &str, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::BackendUnavailable(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{}/grasps", endpoint_url.trim_end_matches('/')),
        })
    }
}

impl CandidateSource for RemoteCandidates {
    fn candidates(&self, frame: &RgbdFrame, object_mask: &BinaryMask) -> Result<Vec<GraspCandidate>> {
        let body = GraspRequest {
            depth_png16_b64: base64::engine::general_purpose::STANDARD.encode(encode_depth_png16(frame)?),
            intrinsics: *frame.intrinsics(),
            width: frame.width(),
            height: frame.height(),
            object_mask_rle: object_mask.runs().to_vec(),
        };
        let resp = self
            .client
            .post(&self.url)
            .json(&body)
            .send()
            .map_err(|e| Error::BackendUnavailable(format!("{}: {e}", self.url)))?;
        if !resp.status().is_success() {
            return Err(Error::BackendUnavailable(format!("{}: HTTP {}", self.url, resp.status())));
        }
        let text = resp.text().map_err(|e| Error::BackendUnavailable(e.to_string()))?;
        let parsed: GraspResponse = serde_json::from_str(&text)?;
        Ok(parsed.candidates)
    }
}

pub fn candidate_source(config: &CandidateSourceConfig, scene_dir: Option<&Path>) -> Result<Box<dyn CandidateSource>> {
    Ok(match config {
        CandidateSourceConfig::File { path } => {
            let path = path
                .clone()
                .or_else(|| scene_dir.map(|d| d.join(scene::GRASPS_FILE)))
                .ok_or_else(|| Error::Usage("file candidate source needs a path".into()))?;
            Box::new(CandidateFile(path))
        }
        CandidateSourceConfig::Remote { endpoint_url, request_timeout } => Box::new(RemoteCandidates::new(
            endpoint_url,
            Duration::from_secs_f64(*request_timeout),
        )?),
    })
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

/// Backends for one run. Construction errors are kept so they surface as
/// the failure of the stage that needed the backend.
pub struct Backends {
    pub decomposer: Result<Box<dyn Decomposer>>,
    pub segmenter: Result<Box<dyn Segmenter>>,
    pub candidates: Result<Box<dyn CandidateSource>>,
}

impl Backends {
    /// Backends from `config`; fixture backends default to files inside
    /// `scene_dir`.
    pub fn from_config(config: &PipelineConfig, scene_dir: Option<&Path>) -> Result<Self> {
        let table = scene_dir.map(|d| d.join(scene::DECOMPOSITION_FILE));
        let masks = scene_dir.map(|d| d.join(scene::MASKS_DIR));
        let b = Self {
            decomposer: decomposition::backend(&config.decomposition, table.as_deref()),
            segmenter: segmentation::backend(&config.segmentation, masks.as_deref()),
            candidates: candidate_source(&config.candidate_source, scene_dir),
        };
        for e in [b.decomposer.as_ref().err(), b.segmenter.as_ref().err(), b.candidates.as_ref().err()]
            .into_iter()
            .flatten()
        {
            if let Error::Usage(msg) = e {
                return Err(Error::Usage(msg.clone()));
            }
        }
        Ok(b)
    }
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1000.0
}

fn summarize(seg: &crate::model::PartSegment) -> SegmentSummary {
    SegmentSummary {
        label: seg.label.clone(),
        confidence: seg.confidence(),
        pixels: seg.mask.count_ones(),
    }
}

/// Runs the pipeline on a frame stored in `scene_dir` (a fixture directory
/// or a directory holding live captures).
pub fn run_scene(scene_dir: &Path, task: &str, config: &PipelineConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    let frame = scene::load_frame(scene_dir)?;
    run_pipeline(&frame, Some(scene_dir), task, config)
}

pub fn run_pipeline(frame: &RgbdFrame, scene_dir: Option<&Path>, task: &str, config: &PipelineConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    let backends = Backends::from_config(config, scene_dir)?;
    run_with(frame, task, config, backends)
}

pub fn run_with(frame: &RgbdFrame, task: &str, config: &PipelineConfig, backends: Backends) -> Result<PipelineOutcome> {
    config.validate()?;
    let request = TaskRequest::new(task).map_err(|e| Error::Usage(e.to_string()))?;
    let mut report = PipelineReport {
        task: request.task.clone(),
        ..Default::default()
    };
    let outcome = |report: PipelineReport, segmentation, heatmap| PipelineOutcome {
        report,
        segmentation,
        heatmap,
    };
    let exec = config.execution;

    let t = Instant::now();
    let decomposed = backends.decomposer.and_then(|d| d.decompose(&request));
    report.timings_ms.decompose = ms(t);
    let decomposition = match decomposed {
        Ok(d) => d,
        Err(e) => {
            report.failure = Some(Failure::new(FailureClass::DecompositionFailure, &e));
            return Ok(outcome(report, None, None));
        }
    };
    report.decomposition = Some(decomposition.clone());

    let t = Instant::now();
    let segmented = backends.segmenter.and_then(|s| {
        segmentation::segment_with(
            s.as_ref(),
            frame,
            decomposition.object_name(),
            &decomposition.all_parts(),
            config.segmentation.min_confidence,
        )
    });
    report.timings_ms.segment = ms(t);
    let seg = match segmented {
        Ok(s) => s,
        Err(e) => {
            let class = match e {
                Error::NoObjectSegment(_) => FailureClass::NoObjectSegment,
                _ => FailureClass::SegmentationFailure,
            };
            report.failure = Some(Failure::new(class, &e));
            return Ok(outcome(report, None, None));
        }
    };
    let object_segment = seg.object_segment.clone().expect("checked by segment_with");
    report.object_segment = Some(summarize(&object_segment));
    report.part_segments = seg.part_segments.iter().map(summarize).collect();
    report.missing_labels = seg.missing_labels.clone();
    for label in &seg.missing_labels {
        report.warnings.push(format!("no segment for part {label:?}"));
    }

    let t = Instant::now();
    let cloud = geometry::extract_object_cloud(frame, &object_segment.mask);
    report.timings_ms.cloud = ms(t);
    let cloud = match cloud {
        Ok(c) => c,
        Err(e) => {
            let class = match e {
                Error::EmptyCloud => FailureClass::EmptyCloud,
                _ => FailureClass::SegmentationFailure,
            };
            report.failure = Some(Failure::new(class, &e));
            return Ok(outcome(report, Some(seg), None));
        }
    };
    report.cloud_points = Some(cloud.len());

    let t = Instant::now();
    let pick = |labels: &[String]| {
        seg.part_segments
            .iter()
            .filter(|s| labels.contains(&s.label))
            .cloned()
            .collect::<Vec<_>>()
    };
    let desirable = pick(decomposition.desirable_parts());
    let undesirable = pick(decomposition.undesirable_parts());
    let built = heatmap::compose(frame.dims(), &object_segment, &desirable, &undesirable, &config.heatmap)
        .and_then(|raw| heatmap::finalize_with(&raw, &config.heatmap, exec));
    report.timings_ms.heatmap = ms(t);
    let heat = match built {
        Ok(h) => h,
        Err(e) => {
            report.failure = Some(Failure::new(FailureClass::SegmentationFailure, &e));
            return Ok(outcome(report, Some(seg), None));
        }
    };

    let t = Instant::now();
    let ranked = backends
        .candidates
        .and_then(|c| c.candidates(frame, &object_segment.mask))
        .and_then(|cands| {
            if cands.is_empty() {
                return Err(Error::NoCandidates);
            }
            ranking::rank_with(&cands, &heat, &cloud, frame.intrinsics(), &config.ranking, exec)
        });
    report.timings_ms.rank = ms(t);
    match ranked {
        Ok(ranked) => {
            report.warnings.extend(ranking::behind_camera_warnings(&ranked));
            report.selected = ranked.first().cloned();
            report.ranked = ranked;
        }
        Err(e) => report.failure = Some(Failure::new(FailureClass::NoCandidates, &e)),
    }
    Ok(outcome(report, Some(seg), Some(heat)))
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneVerdict {
    pub name: String,
    pub category: String,
    pub task: String,
    pub part_selection: Option<PartSelectionVerdict>,
    pub expected_winner_id: Option<u64>,
    pub selected_id: Option<u64>,
    pub winner_agrees: Option<bool>,
    pub expected_failure: Option<FailureClass>,
    pub failure: Option<FailureClass>,
    pub passed: bool,
    pub timings_ms: StageTimings,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub scenes: usize,
    /// Scenes counted for part selection (no expected failure).
    pub part_selection_scenes: usize,
    pub part_selection_rate: Option<f64>,
    /// Scenes with an expected winner.
    pub winner_scenes: usize,
    pub winner_agreement_rate: Option<f64>,
    pub mean_timings_ms: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub scenes: Vec<SceneVerdict>,
    pub categories: BTreeMap<String, CategoryMetrics>,
    pub overall: CategoryMetrics,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.scenes.iter().all(|s| s.passed)
    }

    pub fn summary(&self) -> String {
        let pct = |r: Option<f64>| r.map_or("n/a".to_string(), |r| format!("{:.1}%", r * 100.0));
        let mut s = String::new();
        for v in &self.scenes {
            s += &format!(
                "{} {:<24} {:<8} {}\n",
                if v.passed { "ok  " } else { "FAIL" },
                v.name,
                v.category,
                v.task
            );
        }
        for (name, m) in self.categories.iter().chain(std::iter::once((&"overall".to_string(), &self.overall))) {
            s += &format!(
                "{name}: {} scenes, part selection {}, winner agreement {}, mean {:.1} ms\n",
                m.scenes,
                pct(m.part_selection_rate),
                pct(m.winner_agreement_rate),
                m.mean_timings_ms.total()
            );
        }
        s
    }
}

pub fn aggregate(verdicts: &[SceneVerdict]) -> CategoryMetrics {
    let rate = |hits: usize, n: usize| (n > 0).then(|| hits as f64 / n as f64);
    let parts: Vec<bool> = verdicts
        .iter()
        .filter_map(|v| v.part_selection.as_ref().map(|p| p.success))
        .collect();
    let winners: Vec<bool> = verdicts.iter().filter_map(|v| v.winner_agrees).collect();
    let mut mean = StageTimings::default();
    if !verdicts.is_empty() {
        let n = verdicts.len() as f64;
        for v in verdicts {
            mean.decompose += v.timings_ms.decompose / n;
            mean.segment += v.timings_ms.segment / n;
            mean.cloud += v.timings_ms.cloud / n;
            mean.heatmap += v.timings_ms.heatmap / n;
            mean.rank += v.timings_ms.rank / n;
        }
    }
    CategoryMetrics {
        scenes: verdicts.len(),
        part_selection_scenes: parts.len(),
        part_selection_rate: rate(parts.iter().filter(|&&b| b).count(), parts.len()),
        winner_scenes: winners.len(),
        winner_agreement_rate: rate(winners.iter().filter(|&&b| b).count(), winners.len()),
        mean_timings_ms: mean,
    }
}

/// Scene directories under `suite_dir` (or `suite_dir` itself when it is a
/// scene), sorted by name.
pub fn suite_scenes(suite_dir: &Path) -> Result<Vec<PathBuf>> {
    if suite_dir.join(scene::EXPECTED_FILE).is_file() {
        return Ok(vec![suite_dir.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    let entries = std::fs::read_dir(suite_dir)
        .map_err(|e| Error::Usage(format!("suite {}: {e}", suite_dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if path.join(scene::EXPECTED_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Usage(format!("no scenes with {} under {}", scene::EXPECTED_FILE, suite_dir.display())));
    }
    Ok(dirs)
}

/// Runs and judges one fixture directory.
pub fn evaluate_scene(dir: &Path, config: &PipelineConfig) -> Result<(SceneVerdict, PipelineOutcome)> {
    let fixture = SceneFixture::load(dir)?;
    let expected = fixture
        .expected
        .clone()
        .ok_or_else(|| Error::Fixture(format!("{} has no {}", dir.display(), scene::EXPECTED_FILE)))?;
    let outcome = run_pipeline(&fixture.frame, Some(dir), &expected.task, config)?;
    let failure = outcome.report.failure.as_ref().map(|f| f.class);
    let selected_id = outcome.report.selected.as_ref().map(RankedGrasp::id);
    let (part_selection, winner_agrees, passed) = match expected.expected_failure {
        Some(class) => (None, None, failure == Some(class)),
        None => {
            let verdict = scene::evaluate_part_selection(&outcome, &fixture)?;
            let winner = expected.expected_winner_id.map(|id| selected_id == Some(id));
            let ok = verdict.success && winner != Some(false) && failure.is_none();
            (Some(verdict), winner, ok)
        }
    };
    let name = dir
        .file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    let verdict = SceneVerdict {
        name,
        category: expected.category.clone(),
        task: expected.task.clone(),
        part_selection,
        expected_winner_id: expected.expected_winner_id,
        selected_id,
        winner_agrees,
        expected_failure: expected.expected_failure,
        failure,
        passed,
        timings_ms: outcome.report.timings_ms,
    };
    Ok((verdict, outcome))
}

/// Evaluates every scene of a suite. With `out_dir`, each scene's report and
/// heatmap are written there as `<scene>.report.json` and `<scene>.heatmap.png`.
pub fn run_suite(suite_dir: &Path, config: &PipelineConfig, out_dir: Option<&Path>) -> Result<SuiteReport> {
    config.validate()?;
    let dirs = suite_scenes(suite_dir)?;
    if let Some(out) = out_dir {
        std::fs::create_dir_all(out)?;
    }
    let results = config.execution.map(&dirs, |dir| -> Result<SceneVerdict> {
        let (verdict, mut outcome) = evaluate_scene(dir, config)?;
        if let Some(out) = out_dir {
            write_outputs(&mut outcome, &out.join(format!("{}.report.json", verdict.name)))?;
        }
        Ok(verdict)
    });
    let scenes = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut by_category: BTreeMap<String, Vec<SceneVerdict>> = BTreeMap::new();
    for v in &scenes {
        by_category.entry(v.category.clone()).or_default().push(v.clone());
    }
    Ok(SuiteReport {
        overall: aggregate(&scenes),
        categories: by_category.iter().map(|(k, v)| (k.clone(), aggregate(v))).collect(),
        scenes,
    })
}

/// Heatmap path paired with a report path: `x.report.json` and `x.json`
/// both map to `x.heatmap.png`.
pub fn heatmap_path_for(report_path: &Path) -> PathBuf {
    let name = report_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name
        .strip_suffix(".report.json")
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(&name);
    report_path.with_file_name(format!("{stem}.heatmap.png"))
}

/// Writes the heatmap PNG (when one was built) and sidecar, then the report.
pub fn write_outputs(outcome: &mut PipelineOutcome, report_path: &Path) -> Result<()> {
    if let Some(dir) = report_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    if let (Some(heat), Some(d)) = (&outcome.heatmap, &outcome.report.decomposition) {
        let png = heatmap_path_for(report_path);
        write_heatmap(heat, d, &HeatmapParams::default(), &png)?;
        outcome.report.heatmap_path = png.file_name().map(|n| n.to_string_lossy().into_owned());
    }
    scene::write_atomic(report_path, &outcome.report.to_json()?)
}

/// PNG plus a `<png>.json` sidecar describing how it was built.
pub fn write_heatmap(heat: &AffordanceHeatmap, d: &PartDecomposition, params: &HeatmapParams, png: &Path) -> Result<()> {
    scene::write_atomic(png, &heat.to_png()?)?;
    let sidecar = heatmap::HeatmapExport {
        width: heat.width(),
        height: heat.height(),
        params: *params,
        object: d.object_name().to_string(),
        desirable: d.desirable_parts().to_vec(),
        undesirable: d.undesirable_parts().to_vec(),
    };
    let mut side = png.as_os_str().to_owned();
    side.push(".json");
    scene::write_atomic(Path::new(&side), &scene::to_pretty_json(&sidecar)?)
}
