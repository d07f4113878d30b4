//! Part segmentation backends.
//!
//! Both backends produce raw detections that go through the same assembly
//! step: unknown labels are dropped, each label keeps its most confident
//! detection, and detections under `min_confidence` count as missing. The
//! object name is always queried so the whole-object mask exists.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::decomposition::url_like;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::{normalize_part_names, PartSegment, RgbdFrame};

pub const CONFIDENCES_FILE: &str = "confidences.json";
pub const MASK_SUFFIX: &str = ".mask.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentationBackendKind {
    Remote {
        endpoint_url: String,
        #[serde(default = "default_timeout")]
        request_timeout: f64,
    },
    Fixture {
        /// Falls back to the scene's `masks/` directory when absent.
        #[serde(default)]
        fixture_dir: Option<PathBuf>,
    },
}

fn default_timeout() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationBackendConfig {
    #[serde(flatten)]
    pub kind: SegmentationBackendKind,
    #[serde(default)]
    pub min_confidence: f64,
}

impl Default for SegmentationBackendConfig {
    fn default() -> Self {
        Self {
            kind: SegmentationBackendKind::Fixture { fixture_dir: None },
            min_confidence: 0.0,
        }
    }
}

impl SegmentationBackendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::invalid("segmentation config", "min_confidence outside [0, 1]"));
        }
        if let SegmentationBackendKind::Remote { endpoint_url, request_timeout } = &self.kind {
            url_like(endpoint_url, "segmentation endpoint_url")?;
            if !(*request_timeout > 0.0) {
                return Err(Error::invalid("segmentation config", "request_timeout must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub object_segment: Option<PartSegment>,
    pub part_segments: Vec<PartSegment>,
    pub missing_labels: Vec<String>,
}

impl SegmentationResult {
    pub fn part(&self, label: &str) -> Option<&PartSegment> {
        self.part_segments.iter().find(|s| s.label == label)
    }
}

/// One detection as carried on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireSegment {
    pub label: String,
    pub confidence: f64,
    pub mask_rle: Vec<u32>,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image_png_b64: String,
    pub queries: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub segments: Vec<WireSegment>,
}

impl WireSegment {
    pub fn from_segment(seg: &PartSegment) -> Self {
        Self {
            label: seg.label.clone(),
            confidence: seg.confidence(),
            mask_rle: seg.mask.runs().to_vec(),
            width: seg.mask.width(),
            height: seg.mask.height(),
        }
    }

    fn into_segment(self, dims: (u32, u32)) -> Result<PartSegment> {
        let mask = BinaryMask::from_runs(self.width, self.height, self.mask_rle)
            .map_err(|e| Error::MalformedSegmentation(format!("{}: {e}", self.label)))?;
        mask.check_dims(dims.0, dims.1)
            .map_err(|e| Error::MalformedSegmentation(format!("{}: {e}", self.label)))?;
        PartSegment::new(self.label.clone(), mask, self.confidence)
            .map_err(|e| Error::MalformedSegmentation(format!("{}: {e}", self.label)))
    }
}

/// Queries sent for one request: the object name followed by the distinct
/// part labels.
pub fn build_queries(object_name: &str, part_labels: &[String]) -> Vec<String> {
    let object = object_name.trim().to_lowercase();
    let mut queries = vec![object.clone()];
    queries.extend(normalize_part_names(part_labels).into_iter().filter(|l| *l != object));
    queries
}

/// Turns raw detections into a [`SegmentationResult`].
pub fn assemble(
    dims: (u32, u32),
    object_name: &str,
    part_labels: &[String],
    detections: Vec<WireSegment>,
    min_confidence: f64,
) -> Result<SegmentationResult> {
    let object = object_name.trim().to_lowercase();
    let parts = normalize_part_names(part_labels);
    let mut best: BTreeMap<String, PartSegment> = BTreeMap::new();
    for det in detections {
        let label = det.label.trim().to_lowercase();
        if label != object && !parts.contains(&label) {
            log::warn!("dropping detection for unqueried label {label:?}");
            continue;
        }
        let seg = WireSegment { label: label.clone(), ..det }.into_segment(dims)?;
        match best.get(&label) {
            Some(prev) if prev.confidence() >= seg.confidence() => {}
            _ => {
                best.insert(label, seg);
            }
        }
    }
    let keep = |s: &PartSegment| s.confidence() >= min_confidence;
    let object_segment = best.get(&object).filter(|s| keep(s)).cloned();
    let mut part_segments = Vec::new();
    let mut missing_labels = Vec::new();
    for label in parts {
        match best.get(&label).filter(|s| keep(s)) {
            Some(s) => part_segments.push(s.clone()),
            None => missing_labels.push(label),
        }
    }
    Ok(SegmentationResult {
        object_segment,
        part_segments,
        missing_labels,
    })
}

pub trait Segmenter: Send + Sync {
    /// Raw detections for `queries`.
    fn detect(&self, frame: &RgbdFrame, queries: &[String]) -> Result<Vec<WireSegment>>;
}

/// Reads `<label>.mask.json` files and a `confidences.json` map.
pub struct FixtureSegmenter {
    dir: PathBuf,
    confidences: BTreeMap<String, f64>,
}

impl FixtureSegmenter {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIDENCES_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Fixture(format!("{}: {e}", path.display())))?;
        let confidences = serde_json::from_str(&text)
            .map_err(|e| Error::Fixture(format!("{}: {e}", path.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            confidences,
        })
    }
}

impl Segmenter for FixtureSegmenter {
    fn detect(&self, _frame: &RgbdFrame, queries: &[String]) -> Result<Vec<WireSegment>> {
        let mut out = Vec::new();
        for label in queries {
            let path = self.dir.join(format!("{label}{MASK_SUFFIX}"));
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path)?;
            let mask: BinaryMask = serde_json::from_str(&text)
                .map_err(|e| Error::Fixture(format!("{}: {e}", path.display())))?;
            let confidence = *self.confidences.get(label).ok_or_else(|| {
                Error::Fixture(format!("no confidence for {label:?} in {CONFIDENCES_FILE}"))
            })?;
            out.push(WireSegment {
                label: label.clone(),
                confidence,
                mask_rle: mask.runs().to_vec(),
                width: mask.width(),
                height: mask.height(),
            });
        }
        Ok(out)
    }
}

pub struct RemoteSegmenter {
    client: reqwest::blocking::Client,
    url: String,
}

impl RemoteSegmenter {
    pub fn new(endpoint_url: &str, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::BackendUnavailable(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{}/segment", endpoint_url.trim_end_matches('/')),
        })
    }
}

/// Lossless PNG of the color channels, base64 encoded.
pub fn encode_color_png(frame: &RgbdFrame) -> Result<String> {
    Ok(base64::engine::general_purpose::STANDARD.encode(crate::scene::encode_color_png(frame)?))
}

impl Segmenter for RemoteSegmenter {
    fn detect(&self, frame: &RgbdFrame, queries: &[String]) -> Result<Vec<WireSegment>> {
        let body = SegmentRequest {
            image_png_b64: encode_color_png(frame)?,
            queries: queries.to_vec(),
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
        let parsed: SegmentResponse = resp
            .json()
            .map_err(|e| Error::MalformedSegmentation(e.to_string()))?;
        Ok(parsed.segments)
    }
}

pub fn backend(config: &SegmentationBackendConfig, scene_default: Option<&Path>) -> Result<Box<dyn Segmenter>> {
    config.validate()?;
    Ok(match &config.kind {
        SegmentationBackendKind::Remote { endpoint_url, request_timeout } => Box::new(
            RemoteSegmenter::new(endpoint_url, Duration::from_secs_f64(*request_timeout))?,
        ),
        SegmentationBackendKind::Fixture { fixture_dir } => {
            let dir = fixture_dir
                .as_deref()
                .or(scene_default)
                .ok_or_else(|| Error::Usage("fixture segmentation backend needs a fixture_dir".into()))?;
            Box::new(FixtureSegmenter::open(dir)?)
        }
    })
}

/// Queries `segmenter` for the object and its parts. Fails when the object
/// itself is not segmented.
pub fn segment_with(
    segmenter: &dyn Segmenter,
    frame: &RgbdFrame,
    object_name: &str,
    part_labels: &[String],
    min_confidence: f64,
) -> Result<SegmentationResult> {
    if normalize_part_names(part_labels).is_empty() {
        return Err(Error::invalid("segmentation query", "no part labels"));
    }
    let queries = build_queries(object_name, part_labels);
    let detections = segmenter.detect(frame, &queries)?;
    let result = assemble(frame.dims(), object_name, part_labels, detections, min_confidence)?;
    if result.object_segment.is_none() {
        return Err(Error::NoObjectSegment(object_name.to_string()));
    }
    for label in &result.missing_labels {
        log::warn!("no segment for part {label:?}");
    }
    Ok(result)
}

pub fn segment(
    frame: &RgbdFrame,
    object_name: &str,
    part_labels: &[String],
    config: &SegmentationBackendConfig,
) -> Result<SegmentationResult> {
    let backend = backend(config, None)?;
    segment_with(backend.as_ref(), frame, object_name, part_labels, config.min_confidence)
}
