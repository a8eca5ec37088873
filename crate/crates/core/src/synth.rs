//! Rotating-digit video sequences and the incremental-rotation transform.
//!
//! Digits are drawn from an embedded 5×7 bitmap font rendered to 28 px
//! glyphs. A sequence is first simulated (positions and angles for every
//! digit and frame) and frames are rendered on demand.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{read_png, write_sequence, Annotation, FrameSource, InMemorySequence};
use crate::error::{invalid, Result};
use crate::geometry::BBox;
use crate::tensor::{rotate, rotate_point, ImagePatch, Interpolation, Tensor};

const FONT: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

const INK_THRESHOLD: f64 = 0.05;

/// A rendered digit: square intensity raster plus its tight ink box in
/// raster coordinates.
#[derive(Clone, Debug)]
pub struct Glyph {
    size: usize,
    data: Vec<f64>,
    ink: BBox,
}

impl Glyph {
    /// Renders digit `class` into a `size × size` raster with 4×4
    /// supersampling and a [1 2 1] smoothing pass.
    pub fn render(class: u8, size: usize) -> Result<Self> {
        if class > 9 {
            return invalid(format!("digit class must be 0..=9, got {class}"));
        }
        if size < 7 {
            return invalid(format!("glyph size must be at least 7 px, got {size}"));
        }
        let bitmap = &FONT[class as usize];
        let cell = size as f64 * 0.9 / 7.0;
        let (gw, gh) = (5.0 * cell, 7.0 * cell);
        let (ox, oy) = ((size as f64 - gw) / 2.0, (size as f64 - gh) / 2.0);
        let on = |x: f64, y: f64| {
            let (cx, cy) = (((x - ox) / cell).floor(), ((y - oy) / cell).floor());
            if !(0.0..5.0).contains(&cx) || !(0.0..7.0).contains(&cy) {
                return false;
            }
            bitmap[cy as usize] >> (4 - cx as usize) & 1 == 1
        };
        let mut cover = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let mut n = 0;
                for sy in 0..4 {
                    for sx in 0..4 {
                        let px = x as f64 + (sx as f64 + 0.5) / 4.0;
                        let py = y as f64 + (sy as f64 + 0.5) / 4.0;
                        n += on(px, py) as u32;
                    }
                }
                cover[y * size + x] = n as f64 / 16.0;
            }
        }
        let smooth = |src: &[f64], horizontal: bool| {
            let mut out = vec![0.0; size * size];
            for y in 0..size {
                for x in 0..size {
                    let at = |d: isize| {
                        let (xx, yy) = if horizontal {
                            (x as isize + d, y as isize)
                        } else {
                            (x as isize, y as isize + d)
                        };
                        if xx < 0 || yy < 0 || xx >= size as isize || yy >= size as isize {
                            0.0
                        } else {
                            src[yy as usize * size + xx as usize]
                        }
                    };
                    out[y * size + x] = 0.25 * at(-1) + 0.5 * at(0) + 0.25 * at(1);
                }
            }
            out
        };
        let data = smooth(&smooth(&cover, true), false);
        let (mut x0, mut y0, mut x1, mut y1) = (size, size, 0, 0);
        for y in 0..size {
            for x in 0..size {
                if data[y * size + x] > INK_THRESHOLD {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        let ink = BBox::new(x0 as f64, y0 as f64, (x1 - x0) as f64, (y1 - y0) as f64);
        Ok(Self { size, data, ink })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Tight ink box in raster coordinates.
    pub fn ink_box(&self) -> BBox {
        self.ink
    }

    /// Bilinear sample at continuous raster coordinates; zero outside.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x - 0.5, y - 0.5);
        let (x0, y0) = (fx.floor(), fy.floor());
        let (ax, ay) = (fx - x0, fy - y0);
        let n = self.size as isize;
        let at = |xi: isize, yi: isize| {
            if xi < 0 || yi < 0 || xi >= n || yi >= n {
                0.0
            } else {
                self.data[(yi * n + xi) as usize]
            }
        };
        let (xi, yi) = (x0 as isize, y0 as isize);
        (1.0 - ay) * ((1.0 - ax) * at(xi, yi) + ax * at(xi + 1, yi))
            + ay * ((1.0 - ax) * at(xi, yi + 1) + ax * at(xi + 1, yi + 1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum Background {
    /// Uniform gray level in `[0, 1]`.
    Flat(f64),
    /// Random crops from the images in a directory.
    Directory(PathBuf),
}

impl Default for Background {
    fn default() -> Self {
        Background::Flat(0.5)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    pub min_digits: usize,
    pub max_digits: usize,
    pub canvas: usize,
    pub digit_size: usize,
    /// Per-axis translation increment standard deviation, px/frame.
    pub sigma_t: f64,
    /// Target rotation increment standard deviation, degrees/frame.
    pub sigma_r: f64,
    /// Every digit starts at an orientation drawn uniformly from
    /// `[-initial_angle_range, initial_angle_range]` degrees.
    pub initial_angle_range: f64,
    pub background: Background,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 100,
            min_digits: 3,
            max_digits: 5,
            canvas: 160,
            digit_size: 28,
            sigma_t: 1.5,
            sigma_r: 3.0,
            initial_angle_range: 180.0,
            background: Background::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return invalid("a sequence needs at least one frame");
        }
        if self.min_digits == 0 || self.min_digits > self.max_digits {
            return invalid(format!(
                "digit count range {}..={} is empty or starts at zero",
                self.min_digits, self.max_digits
            ));
        }
        if !(self.sigma_t >= 0.0 && self.sigma_r >= 0.0 && self.initial_angle_range >= 0.0) {
            return invalid("diffusion coefficients must be non-negative");
        }
        if self.canvas < 2 * self.margin().ceil() as usize + 1 {
            return invalid(format!(
                "canvas of {} px is too small for {} px digits",
                self.canvas, self.digit_size
            ));
        }
        if let Background::Flat(v) = self.background {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("background level {v} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Distance a digit center keeps from the canvas border.
    pub fn margin(&self) -> f64 {
        self.digit_size as f64 * std::f64::consts::FRAC_1_SQRT_2
    }
}

/// Position and angle of one digit in one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DigitPose {
    pub cx: f64,
    pub cy: f64,
    /// Counter-clockwise, degrees.
    pub angle_deg: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DigitTrack {
    pub class: u8,
    pub intensity: f64,
    /// Orientation at frame 0; pose angles are relative to it.
    pub initial_angle_deg: f64,
    pub poses: Vec<DigitPose>,
}

/// The simulated motion of every digit, plus the target's sampled rotation
/// increments (`angle[t] = angle[t-1] + increments[t-1]`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequencePlan {
    pub config: SynthConfig,
    pub digits: Vec<DigitTrack>,
    pub rotation_increments: Vec<f64>,
}

fn reflect(mut v: f64, lo: f64, hi: f64) -> f64 {
    for _ in 0..8 {
        if v < lo {
            v = 2.0 * lo - v;
        } else if v > hi {
            v = 2.0 * hi - v;
        } else {
            return v;
        }
    }
    v.clamp(lo, hi)
}

/// Simulates Brownian translation for every digit and Brownian rotation for
/// the target (digit 0).
pub fn simulate(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<SequencePlan> {
    cfg.validate()?;
    let lo = cfg.margin();
    let hi = cfg.canvas as f64 - lo;
    let count = rng.random_range(cfg.min_digits..=cfg.max_digits);
    let step_t = Normal::new(0.0, cfg.sigma_t).expect("validated");
    let step_r = Normal::new(0.0, cfg.sigma_r).expect("validated");
    let mut digits = Vec::with_capacity(count);
    let mut increments = Vec::new();
    for d in 0..count {
        let class = rng.random_range(0..10u8);
        let intensity = rng.random_range(0.85..=1.0);
        let r = cfg.initial_angle_range;
        let initial_angle_deg = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let mut pose = DigitPose {
            cx: rng.random_range(lo..=hi),
            cy: rng.random_range(lo..=hi),
            angle_deg: 0.0,
        };
        let mut poses = vec![pose];
        for _ in 1..cfg.frames {
            pose.cx = reflect(pose.cx + step_t.sample(rng), lo, hi);
            pose.cy = reflect(pose.cy + step_t.sample(rng), lo, hi);
            if d == 0 {
                let inc = step_r.sample(rng);
                increments.push(inc);
                pose.angle_deg += inc;
            }
            poses.push(pose);
        }
        digits.push(DigitTrack {
            class,
            intensity,
            initial_angle_deg,
            poses,
        });
    }
    Ok(SequencePlan {
        config: cfg.clone(),
        digits,
        rotation_increments: increments,
    })
}

/// A simulated sequence whose frames are rendered on demand.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    plan: SequencePlan,
    glyphs: Vec<Glyph>,
    background: Arc<Tensor>,
}

impl SyntheticSequence {
    pub fn new(plan: SequencePlan, rng: &mut impl Rng) -> Result<Self> {
        let cfg = &plan.config;
        let glyphs = plan
            .digits
            .iter()
            .map(|d| Glyph::render(d.class, cfg.digit_size))
            .collect::<Result<_>>()?;
        let background = Arc::new(make_background(cfg, rng)?);
        Ok(Self {
            plan,
            glyphs,
            background,
        })
    }

    pub fn plan(&self) -> &SequencePlan {
        &self.plan
    }

    fn render(&self, t: usize) -> ImagePatch {
        let cfg = &self.plan.config;
        let n = cfg.canvas;
        let channels = self.background.dim(0);
        let mut data = self.background.data().to_vec();
        let half = cfg.digit_size as f64 / 2.0;
        let reach = cfg.margin().ceil() as isize + 1;
        for (track, glyph) in self.plan.digits.iter().zip(&self.glyphs) {
            let pose = track.poses[t];
            let theta = (track.initial_angle_deg + pose.angle_deg).to_radians();
            let (px, py) = (pose.cx.floor() as isize, pose.cy.floor() as isize);
            for y in (py - reach).max(0)..(py + reach + 1).min(n as isize) {
                for x in (px - reach).max(0)..(px + reach + 1).min(n as isize) {
                    let q = (x as f64 + 0.5, y as f64 + 0.5);
                    let src = rotate_point(q, (pose.cx, pose.cy), -theta);
                    let v = glyph.sample(src.0 - pose.cx + half, src.1 - pose.cy + half);
                    if v <= 0.0 {
                        continue;
                    }
                    let v = v * track.intensity;
                    for c in 0..channels {
                        let i = (c * n + y as usize) * n + x as usize;
                        data[i] = data[i].max(v);
                    }
                }
            }
        }
        ImagePatch::new(Tensor::from_raw(vec![channels, n, n], data)).expect("values in [0, 1]")
    }

    /// Tight box around the target's upright ink box rotated to its pose at
    /// frame `t`.
    pub fn target_box(&self, t: usize) -> BBox {
        let cfg = &self.plan.config;
        let target = &self.plan.digits[0];
        let pose = target.poses[t];
        let half = cfg.digit_size as f64 / 2.0;
        let ink = self.glyphs[0].ink_box();
        let upright = BBox::new(
            pose.cx - half + ink.x,
            pose.cy - half + ink.y,
            ink.w,
            ink.h,
        );
        upright
            .rotated_enclosing(
                (pose.cx, pose.cy),
                (target.initial_angle_deg + pose.angle_deg).to_radians(),
            )
            .clipped(cfg.canvas as f64, cfg.canvas as f64)
    }
}

impl FrameSource for SyntheticSequence {
    fn len(&self) -> usize {
        self.plan.config.frames
    }

    fn frame(&self, t: usize) -> Result<ImagePatch> {
        Ok(self.render(t))
    }

    fn annotation(&self, t: usize) -> Annotation {
        Annotation::new(t, self.target_box(t), self.plan.digits[0].poses[t].angle_deg)
    }
}

fn make_background(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Tensor> {
    let n = cfg.canvas;
    match &cfg.background {
        Background::Flat(v) => Ok(Tensor::filled(&[1, n, n], *v)),
        Background::Directory(dir) => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
                })
                .collect();
            files.sort();
            if files.is_empty() {
                return invalid(format!("no PNG backgrounds in {}", dir.display()));
            }
            let img = read_png(&files[rng.random_range(0..files.len())])?;
            let side = img.height().min(img.width()) as f64;
            let cx = rng.random_range(side / 2.0..=img.width() as f64 - side / 2.0);
            let cy = rng.random_range(side / 2.0..=img.height() as f64 - side / 2.0);
            let crop = img.crop_resampled((cx, cy), (side, side), (n, n), 0.0)?;
            Ok(gray(crop.tensor()))
        }
    }
}

fn gray(t: &Tensor) -> Tensor {
    if t.dim(0) == 1 {
        return t.clone();
    }
    let plane = t.plane_len();
    let data = (0..plane)
        .map(|i| {
            0.299 * t.data()[i] + 0.587 * t.data()[plane + i] + 0.114 * t.data()[2 * plane + i]
        })
        .collect();
    Tensor::from_raw(vec![1, t.dim(1), t.dim(2)], data)
}

/// RNG for sequence `index` of a dataset with master seed `seed`.
pub fn sequence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Simulates and wraps one sequence using `cfg.seed` directly.
pub fn generate_sequence(cfg: &SynthConfig) -> Result<SyntheticSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plan = simulate(cfg, &mut rng)?;
    SyntheticSequence::new(plan, &mut rng)
}

/// Rotates frame `t` by `t · Δθ` about the image center and the boxes
/// with it.
pub fn rotate_sequence(source: &dyn FrameSource, delta_deg: f64) -> Result<InMemorySequence> {
    let mut frames = Vec::with_capacity(source.len());
    let mut annotations = Vec::with_capacity(source.len());
    for t in 0..source.len() {
        let frame = source.frame(t)?;
        let theta = (t as f64 * delta_deg).to_radians();
        let pivot = (frame.width() as f64 / 2.0, frame.height() as f64 / 2.0);
        let a = source.annotation(t);
        if t == 0 || delta_deg == 0.0 {
            frames.push(frame);
            annotations.push(a);
            continue;
        }
        let rotated = ImagePatch::new(rotate(frame.tensor(), theta, Interpolation::Bilinear))?;
        frames.push(rotated);
        annotations.push(Annotation::new(
            t,
            a.bbox().rotated_enclosing(pivot, theta),
            a.angle_deg + t as f64 * delta_deg,
        ));
    }
    InMemorySequence::new(frames, annotations)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_sequences: usize,
    pub test_sequences: usize,
    /// Both counts are divided by this factor.
    pub scale_divisor: usize,
    pub sequence: SynthConfig,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_sequences: 2500,
            test_sequences: 100,
            scale_divisor: 10,
            sequence: SynthConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl DatasetConfig {
    pub fn count(&self, split: Split) -> usize {
        let n = match split {
            Split::Train => self.train_sequences,
            Split::Test => self.test_sequences,
        };
        n.div_ceil(self.scale_divisor.max(1))
    }

    /// Sequence `index` of a split. Training sequences translate only; test
    /// sequences also rotate the target.
    pub fn sequence(&self, split: Split, index: usize) -> Result<SyntheticSequence> {
        let mut cfg = self.sequence.clone();
        let stream = match split {
            Split::Train => index as u64,
            Split::Test => (1 << 32) | index as u64,
        };
        if split == Split::Train {
            cfg.sigma_r = 0.0;
        }
        cfg.seed = self.seed;
        let mut rng = sequence_rng(self.seed, stream);
        let plan = simulate(&cfg, &mut rng)?;
        SyntheticSequence::new(plan, &mut rng)
    }

    pub fn split(&self, split: Split) -> Result<Vec<SyntheticSequence>> {
        (0..self.count(split))
            .map(|i| self.sequence(split, i))
            .collect()
    }

    /// Writes `root/train/seq_NNNNNN` and `root/test/seq_NNNNNN`.
    pub fn write(&self, root: &Path) -> Result<()> {
        for split in [Split::Train, Split::Test] {
            for i in 0..self.count(split) {
                let seq = self.sequence(split, i)?;
                let meta = serde_json::json!({
                    "split": split.name(),
                    "index": i,
                    "seed": self.seed,
                    "config": seq.plan().config,
                    "digits": seq.plan().digits.iter().map(|d| d.class).collect::<Vec<_>>(),
                });
                let dir = root.join(split.name()).join(format!("seq_{i:06}"));
                write_sequence(&dir, &seq, &meta)?;
            }
        }
        Ok(())
    }
}
