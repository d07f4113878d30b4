//! Affordance heatmap composition and finalization.
//!
//! The raw map starts at zero, gets a positive base weight on every object
//! pixel, plus each desirable part's confidence and minus each undesirable
//! part's confidence. Finalizing rescales min..max onto 0..255 and applies a
//! 3x3 Gaussian with replicated borders.

use std::cmp::Ordering;
use std::io::Cursor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::PartSegment;

/// Sigma at which the sampled 3x3 Gaussian equals `[1,2,1] x [1,2,1] / 16`.
pub fn binomial_sigma() -> f64 {
    1.0 / (2.0 * std::f64::consts::LN_2).sqrt()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BorderMode {
    #[default]
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapParams {
    pub object_base_weight: f64,
    pub blur_sigma: f64,
    pub border_mode: BorderMode,
}

impl Default for HeatmapParams {
    fn default() -> Self {
        Self {
            object_base_weight: 0.5,
            blur_sigma: binomial_sigma(),
            border_mode: BorderMode::Replicate,
        }
    }
}

impl HeatmapParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.object_base_weight > 0.0) || !self.object_base_weight.is_finite() {
            return Err(Error::invalid("heatmap params", "object_base_weight must be > 0"));
        }
        if !(self.blur_sigma > 0.0) || !self.blur_sigma.is_finite() {
            return Err(Error::invalid("heatmap params", "blur_sigma must be > 0"));
        }
        Ok(())
    }

    /// 1D taps `[side, 1, side]` before normalization. The side tap snaps to
    /// exactly 0.5 near the binomial sigma so that kernel is exact.
    pub fn kernel_side_tap(&self) -> f64 {
        let side = (-1.0 / (2.0 * self.blur_sigma * self.blur_sigma)).exp();
        if (side - 0.5).abs() < 1e-12 {
            0.5
        } else {
            side
        }
    }
}

/// Unscaled signed composition.
#[derive(Debug, Clone, PartialEq)]
pub struct RawHeatmap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

/// Per-pixel grasp affordance. Values produced by [`finalize`] are in
/// `[0, 255]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffordanceHeatmap {
    width: u32,
    height: u32,
    values: Vec<f64>,
}

impl AffordanceHeatmap {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Result<Self> {
        if values.len() != width as usize * height as usize || values.is_empty() {
            return Err(Error::Dimension(format!(
                "{} values for a {width}x{height} heatmap",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, u: u32, v: u32) -> f64 {
        self.values[v as usize * self.width as usize + u as usize]
    }

    /// Applies `f` to every value.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// 8-bit grayscale PNG, values rounded to the nearest integer.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        let img = image::GrayImage::from_raw(self.width, self.height, bytes)
            .ok_or_else(|| Error::Dimension("heatmap buffer size".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

/// JSON sidecar written next to an exported heatmap PNG.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapExport {
    pub width: u32,
    pub height: u32,
    pub params: HeatmapParams,
    pub object: String,
    pub desirable: Vec<String>,
    pub undesirable: Vec<String>,
}

/// Canonical order of segments so that list order never affects the sum.
fn canonical_order<'a>(segments: &'a [PartSegment]) -> Vec<&'a PartSegment> {
    let mut v: Vec<&PartSegment> = segments.iter().collect();
    v.sort_by(|a, b| {
        a.confidence()
            .total_cmp(&b.confidence())
            .then_with(|| a.label.cmp(&b.label))
            .then_with(|| a.mask.cmp(&b.mask))
    });
    v
}

pub fn compose(
    dims: (u32, u32),
    object_segment: &PartSegment,
    desirable: &[PartSegment],
    undesirable: &[PartSegment],
    params: &HeatmapParams,
) -> Result<RawHeatmap> {
    params.validate()?;
    let (width, height) = dims;
    for seg in std::iter::once(object_segment).chain(desirable).chain(undesirable) {
        seg.mask.check_dims(width, height)?;
    }
    let mut values = vec![0.0f64; width as usize * height as usize];
    for r in object_segment.mask.set_ranges() {
        values[r].iter_mut().for_each(|x| *x += params.object_base_weight);
    }
    for seg in canonical_order(desirable) {
        let c = seg.confidence();
        for r in seg.mask.set_ranges() {
            values[r].iter_mut().for_each(|x| *x += c);
        }
    }
    for seg in canonical_order(undesirable) {
        let c = seg.confidence();
        for r in seg.mask.set_ranges() {
            values[r].iter_mut().for_each(|x| *x -= c);
        }
    }
    Ok(RawHeatmap {
        width,
        height,
        values,
    })
}

/// Min-max scaling onto `[0, 255]`; a constant map becomes all zeros.
pub fn scale_to_byte_range(raw: &RawHeatmap) -> Vec<f64> {
    let (min, max) = raw
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if max.partial_cmp(&min) != Some(Ordering::Greater) {
        return vec![0.0; raw.values.len()];
    }
    let span = max - min;
    raw.values
        .iter()
        .map(|&v| (255.0 * ((v - min) / span)).clamp(0.0, 255.0))
        .collect()
}

/// 3x3 Gaussian with replicated borders.
pub fn blur3x3(
    values: &[f64],
    width: u32,
    height: u32,
    params: &HeatmapParams,
    exec: Execution,
) -> Vec<f64> {
    let (w, h) = (width as usize, height as usize);
    let side = params.kernel_side_tap();
    let taps = [side, 1.0, side];
    let norm = (1.0 + 2.0 * side) * (1.0 + 2.0 * side);
    let mut out = vec![0.0; w * h];
    exec.for_each_chunk_mut(&mut out, w, |v, row| {
        let rows = [v.saturating_sub(1), v, (v + 1).min(h - 1)];
        for (u, dst) in row.iter_mut().enumerate() {
            let cols = [u.saturating_sub(1), u, (u + 1).min(w - 1)];
            let mut acc = 0.0;
            for (ky, &ry) in rows.iter().enumerate() {
                for (kx, &cx) in cols.iter().enumerate() {
                    acc += taps[ky] * taps[kx] * values[ry * w + cx];
                }
            }
            *dst = acc / norm;
        }
    });
    out
}

pub fn finalize(raw: &RawHeatmap, params: &HeatmapParams) -> Result<AffordanceHeatmap> {
    finalize_with(raw, params, Execution::default())
}

pub fn finalize_with(raw: &RawHeatmap, params: &HeatmapParams, exec: Execution) -> Result<AffordanceHeatmap> {
    params.validate()?;
    if raw.values.is_empty() || raw.values.len() != raw.width as usize * raw.height as usize {
        return Err(Error::Dimension("raw heatmap has no pixels".into()));
    }
    let scaled = scale_to_byte_range(raw);
    let blurred = blur3x3(&scaled, raw.width, raw.height, params, exec)
        .into_iter()
        .map(|v| v.clamp(0.0, 255.0))
        .collect();
    AffordanceHeatmap::new(raw.width, raw.height, blurred)
}

/// Value at the nearest integer pixel, 0 outside the raster.
pub fn sample(heatmap: &AffordanceHeatmap, pixel: (f64, f64)) -> f64 {
    let (u, v) = (pixel.0.round(), pixel.1.round());
    if !(u >= 0.0 && v >= 0.0 && u < heatmap.width as f64 && v < heatmap.height as f64) {
        return 0.0;
    }
    heatmap.get(u as u32, v as u32)
}
