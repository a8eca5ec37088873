//! Siamese tracking with a rotated template bank.
//!
//! At initialization the exemplar is cropped at every group angle and
//! encoded once. Each frame, search crops at a few scales are encoded and
//! correlated with every bank entry; the entry holding the global maximum
//! gives both the localization heatmap and the relative orientation.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::FrameSource;
use crate::error::{invalid, shape_mismatch, Result};
use crate::geometry::{exemplar_extent, BBox};
use crate::net::Encoder;
use crate::tensor::{conv2d, upsample_bicubic, ImagePatch, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub exemplar_size: usize,
    pub search_size: usize,
    /// Context margin as a fraction of `w + h`.
    pub context: f64,
    pub scale_step: f64,
    pub scale_count: usize,
    pub scale_penalty: f64,
    /// Damping of the size update.
    pub scale_lr: f64,
    pub window_influence: f64,
    pub upsample: usize,
    /// Maximum orientation change between frames, in group steps.
    pub motion_gamma: Option<usize>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            exemplar_size: 31,
            search_size: 63,
            context: 0.5,
            scale_step: 1.0375,
            scale_count: 3,
            scale_penalty: 0.9745,
            scale_lr: 0.59,
            window_influence: 0.176,
            upsample: 16,
            motion_gamma: None,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self, group_order: usize) -> Result<()> {
        if self.exemplar_size == 0 || self.search_size < self.exemplar_size {
            return invalid("search crop must be at least as large as the exemplar crop");
        }
        if self.scale_count == 0 || self.upsample == 0 {
            return invalid("scale count and upsample factor must be positive");
        }
        if let Some(g) = self.motion_gamma {
            if g < 1 || g > (group_order / 2).max(1) {
                return invalid(format!(
                    "motion window {g} outside [1, {}]",
                    (group_order / 2).max(1)
                ));
            }
        }
        Ok(())
    }

    /// Scale factors `step^{-(n-1)/2} … step^{(n-1)/2}`.
    pub fn scales(&self) -> Vec<f64> {
        let mid = (self.scale_count as f64 - 1.0) / 2.0;
        (0..self.scale_count)
            .map(|i| self.scale_step.powf(i as f64 - mid))
            .collect()
    }
}

/// Encoded exemplars: entry `λ` matches a target rotated counter-clockwise
/// by `2πλ/Λ` relative to the first frame.
#[derive(Clone, Debug)]
pub struct TemplateBank {
    pub features: Vec<Tensor>,
    pub bbox: BBox,
    /// Side of the exemplar region in frame pixels.
    pub extent: f64,
}

impl TemplateBank {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Crops the exemplar region around `bbox` at every group angle and
/// encodes each crop.
pub fn make_template_bank(
    frame: &ImagePatch,
    bbox: BBox,
    encoder: &dyn Encoder,
    cfg: &TrackerConfig,
) -> Result<TemplateBank> {
    let bbox = bbox.clipped(frame.width() as f64, frame.height() as f64);
    if bbox.is_degenerate() {
        return invalid(format!("degenerate initial box {bbox:?}"));
    }
    let order = encoder.group_order();
    let extent = exemplar_extent(bbox.size(), cfg.context);
    let n = cfg.exemplar_size;
    let features = (0..order)
        .map(|l| {
            let theta = 2.0 * std::f64::consts::PI * l as f64 / order as f64;
            let crop = frame.crop_resampled(bbox.center(), (extent, extent), (n, n), theta)?;
            encoder.encode(&crop)
        })
        .collect::<Result<_>>()?;
    Ok(TemplateBank {
        features,
        bbox,
        extent,
    })
}

/// Cross-correlation of `[C, H, W]` search features with one `[C, h, w]`
/// template; `[H − h + 1, W − w + 1]`.
pub fn xcorr(search: &Tensor, template: &Tensor) -> Result<Tensor> {
    if search.rank() != 3 || template.rank() != 3 || search.dim(0) != template.dim(0) {
        return shape_mismatch("xcorr", search.shape(), template.shape());
    }
    if template.dim(1) > search.dim(1) || template.dim(2) > search.dim(2) {
        return shape_mismatch("xcorr", search.shape(), template.shape());
    }
    let (c, h, w) = (template.dim(0), template.dim(1), template.dim(2));
    let kernel = template.clone().reshape(&[1, c, h, w])?;
    let out = conv2d(search, &kernel, 1, 0)?;
    let (ho, wo) = (out.dim(1), out.dim(2));
    out.reshape(&[ho, wo])
}

/// One heatmap per bank entry.
pub fn correlate(bank: &TemplateBank, search: &Tensor) -> Result<Vec<Tensor>> {
    bank.features.iter().map(|z| xcorr(search, z)).collect()
}

/// Orientation steps between `a` and `b` on the cycle of length `order`.
pub fn cyclic_distance(a: usize, b: usize, order: usize) -> usize {
    let d = (a + order - b % order) % order;
    d.min(order - d)
}

/// Index of the map holding the largest value among `allowed` (all maps
/// when `None`). Ties go to the index cyclically nearest `prev`, then to
/// the lower index.
pub fn global_maxpool(maps: &[Tensor], allowed: Option<&[usize]>, prev: usize) -> Result<usize> {
    let peaks: Vec<f64> = maps.iter().map(|m| m.max()).collect();
    select_peak(&peaks, allowed, prev)
}

fn select_peak(peaks: &[f64], allowed: Option<&[usize]>, prev: usize) -> Result<usize> {
    let order = peaks.len();
    let all: Vec<usize> = (0..order).collect();
    let candidates = allowed.unwrap_or(&all);
    if candidates.is_empty() {
        return invalid("global max-pool over an empty index set");
    }
    if let Some(&bad) = candidates.iter().find(|&&i| i >= order) {
        return invalid(format!("orientation index {bad} out of range for {order} maps"));
    }
    let best = candidates
        .iter()
        .copied()
        .min_by(|&a, &b| {
            peaks[b]
                .partial_cmp(&peaks[a])
                .unwrap_or(Ordering::Equal)
                .then(cyclic_distance(a, prev, order).cmp(&cyclic_distance(b, prev, order)))
                .then(a.cmp(&b))
        })
        .expect("non-empty");
    Ok(best)
}

/// Relative orientation `i · 360/Λ` in degrees, wrapped to `(−180, 180]`.
pub fn estimate_orientation(index: usize, order: usize) -> f64 {
    let deg = (index % order) as f64 * 360.0 / order as f64;
    if deg > 180.0 {
        deg - 360.0
    } else {
        deg
    }
}

/// `{(prev + d) mod Λ : |d| ≤ γ}`, sorted.
pub fn allowed_window(prev: usize, gamma: usize, order: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..order)
        .filter(|&i| cyclic_distance(i, prev, order) <= gamma)
        .collect();
    out.sort_unstable();
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub frame: usize,
    pub center: (f64, f64),
    pub size: (f64, f64),
    /// Cumulative size change relative to the first frame.
    pub scale: f64,
    pub orientation_index: usize,
    pub orientation_deg: f64,
    pub score: f64,
}

impl TrackState {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.center, self.size)
    }
}

/// Normalized Hann window of side `n`, summing to one.
pub fn hann_window(n: usize) -> Tensor {
    let w: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                1.0
            } else {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()
            }
        })
        .collect();
    let mut t = Tensor::from_fn(&[n, n], |i| w[i / n] * w[i % n]);
    let s = t.sum();
    if s > 0.0 {
        t = t.scale(1.0 / s);
    }
    t
}

/// Peak displacement from the heatmap center in search-crop pixels,
/// after bicubic upsampling and blending with the cosine window.
pub fn localize_peak(
    map: &Tensor,
    window: &Tensor,
    cfg: &TrackerConfig,
    total_stride: usize,
) -> (f64, f64) {
    let up = upsample_bicubic(map, cfg.upsample);
    let min = up.min();
    let shifted = up.map(|v| v - min);
    let sum = shifted.sum();
    let normalized = if sum > 0.0 {
        shifted.scale(1.0 / sum)
    } else {
        shifted
    };
    let wi = cfg.window_influence;
    let mut blended = normalized.scale(1.0 - wi);
    blended.axpy(wi, window).expect("window sized from the map");
    let (h, w) = (up.dim(0), up.dim(1));
    let p = blended.argmax();
    let (row, col) = ((p / w) as f64, (p % w) as f64);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let k = total_stride as f64 / cfg.upsample as f64;
    ((col - cx) * k, (row - cy) * k)
}

/// Single-target tracker over any encoder.
pub struct Tracker<'a> {
    encoder: &'a dyn Encoder,
    cfg: TrackerConfig,
    bank: TemplateBank,
    window: Tensor,
    state: TrackState,
    search_extent: f64,
    frame_size: (f64, f64),
    init_size: (f64, f64),
}

impl<'a> Tracker<'a> {
    pub fn new(
        encoder: &'a dyn Encoder,
        cfg: TrackerConfig,
        frame: &ImagePatch,
        bbox: BBox,
    ) -> Result<Self> {
        let order = encoder.group_order();
        cfg.validate(order)?;
        let bank = make_template_bank(frame, bbox, encoder, &cfg)?;
        let map = encoder
            .output_size(cfg.search_size)
            .zip(encoder.output_size(cfg.exemplar_size))
            .and_then(|(x, z)| (z <= x).then(|| x - z + 1))
            .ok_or_else(|| {
                crate::Error::InvalidArgument("crop sizes too small for the encoder".into())
            })?;
        let search_extent = bank.extent * cfg.search_size as f64 / cfg.exemplar_size as f64;
        let state = TrackState {
            frame: 0,
            center: bank.bbox.center(),
            size: bank.bbox.size(),
            scale: 1.0,
            orientation_index: 0,
            orientation_deg: 0.0,
            score: 0.0,
        };
        Ok(Self {
            encoder,
            window: hann_window(map * cfg.upsample),
            init_size: state.size,
            cfg,
            bank,
            state,
            search_extent,
            frame_size: (frame.width() as f64, frame.height() as f64),
        })
    }

    pub fn state(&self) -> TrackState {
        self.state
    }

    pub fn bank(&self) -> &TemplateBank {
        &self.bank
    }

    /// Heatmaps for every scale (outer) and bank entry (inner), already
    /// multiplied by the encoder's response scale.
    pub fn heatmaps(&self, frame: &ImagePatch) -> Result<Vec<Vec<Tensor>>> {
        let n = self.cfg.search_size;
        self.cfg
            .scales()
            .iter()
            .map(|&s| {
                let side = self.search_extent * s;
                let crop = frame.crop_resampled(self.state.center, (side, side), (n, n), 0.0)?;
                let feat = self.encoder.encode(&crop)?;
                let scale = self.encoder.response_scale();
                Ok(correlate(&self.bank, &feat)?
                    .into_iter()
                    .map(|m| m.scale(scale))
                    .collect())
            })
            .collect()
    }

    pub fn step(&mut self, frame: &ImagePatch) -> Result<TrackState> {
        let order = self.encoder.group_order();
        let maps = self.heatmaps(frame)?;
        let scales = self.cfg.scales();
        let mid = scales.len() / 2;
        let penalty = |si: usize| {
            if si == mid {
                1.0
            } else {
                self.cfg.scale_penalty
            }
        };
        // best penalized peak and its scale, per orientation
        let mut peaks = vec![f64::NEG_INFINITY; order];
        let mut best_scale = vec![mid; order];
        for l in 0..order {
            for (si, per_scale) in maps.iter().enumerate() {
                let v = per_scale[l].max() * penalty(si);
                if v > peaks[l] {
                    peaks[l] = v;
                    best_scale[l] = si;
                }
            }
        }
        let prev = self.state.orientation_index;
        let allowed = self
            .cfg
            .motion_gamma
            .map(|g| allowed_window(prev, g, order));
        let i = select_peak(&peaks, allowed.as_deref(), prev)?;
        let si = best_scale[i];
        let (dx, dy) = localize_peak(
            &maps[si][i],
            &self.window,
            &self.cfg,
            self.encoder.total_stride(),
        );
        let to_frame = self.search_extent * scales[si] / self.cfg.search_size as f64;
        let (fw, fh) = self.frame_size;
        let cx = (self.state.center.0 + dx * to_frame).clamp(0.0, fw);
        let cy = (self.state.center.1 + dy * to_frame).clamp(0.0, fh);
        let factor = 1.0 - self.cfg.scale_lr + self.cfg.scale_lr * scales[si];
        self.search_extent *= factor;
        let size = (
            (self.state.size.0 * factor).clamp(0.1 * self.init_size.0, 10.0 * self.init_size.0),
            (self.state.size.1 * factor).clamp(0.1 * self.init_size.1, 10.0 * self.init_size.1),
        );
        self.state = TrackState {
            frame: self.state.frame + 1,
            center: (cx, cy),
            size,
            scale: size.0 / self.init_size.0,
            orientation_index: i,
            orientation_deg: estimate_orientation(i, order),
            score: peaks[i],
        };
        Ok(self.state)
    }
}

/// Runs the tracker over a whole sequence from the ground-truth first box.
pub fn track_sequence(
    source: &dyn FrameSource,
    init: BBox,
    encoder: &dyn Encoder,
    cfg: &TrackerConfig,
) -> Result<Vec<TrackState>> {
    if source.len() < 2 {
        return invalid("tracking needs at least two frames");
    }
    let mut tracker = Tracker::new(encoder, cfg.clone(), &source.frame(0)?, init)?;
    let mut states = Vec::with_capacity(source.len());
    states.push(tracker.state());
    for t in 1..source.len() {
        states.push(tracker.step(&source.frame(t)?)?);
    }
    Ok(states)
}

/// One row of a results file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub frame: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub orientation_deg: f64,
    pub score: f64,
}

impl ResultRow {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.w, self.h)
    }
}

impl From<&TrackState> for ResultRow {
    fn from(s: &TrackState) -> Self {
        let b = s.bbox();
        Self {
            frame: s.frame,
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
            orientation_deg: s.orientation_deg,
            score: s.score,
        }
    }
}

pub fn write_results(path: &Path, states: &[TrackState]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for s in states {
        w.serialize(ResultRow::from(s))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(crate::Error::from))
        .collect()
}
