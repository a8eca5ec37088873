//! Sequence directories: `frames/%06d.png`, `groundtruth.csv`, `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::BBox;
use crate::tensor::{ImagePatch, Tensor};

pub const FRAMES_DIR: &str = "frames";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.csv";
pub const META_FILE: &str = "meta.json";

/// Ground truth for one frame. The angle is the target's in-plane rotation
/// relative to frame 0, counter-clockwise positive, in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub frame: usize,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub angle_deg: f64,
}

impl Annotation {
    pub fn new(frame: usize, bbox: BBox, angle_deg: f64) -> Self {
        Self {
            frame,
            x: bbox.x,
            y: bbox.y,
            w: bbox.w,
            h: bbox.h,
            angle_deg,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.w, self.h)
    }
}

/// Random access to the frames and annotations of one sequence.
pub trait FrameSource: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn frame(&self, t: usize) -> Result<ImagePatch>;

    fn annotation(&self, t: usize) -> Annotation;

    fn annotations(&self) -> Vec<Annotation> {
        (0..self.len()).map(|t| self.annotation(t)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct InMemorySequence {
    pub frames: Vec<ImagePatch>,
    pub annotations: Vec<Annotation>,
}

impl InMemorySequence {
    pub fn new(frames: Vec<ImagePatch>, annotations: Vec<Annotation>) -> Result<Self> {
        if frames.len() != annotations.len() {
            return invalid(format!(
                "{} frames but {} annotations",
                frames.len(),
                annotations.len()
            ));
        }
        Ok(Self {
            frames,
            annotations,
        })
    }

    pub fn collect(source: &dyn FrameSource) -> Result<Self> {
        let frames = (0..source.len())
            .map(|t| source.frame(t))
            .collect::<Result<_>>()?;
        Self::new(frames, source.annotations())
    }
}

impl FrameSource for InMemorySequence {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn frame(&self, t: usize) -> Result<ImagePatch> {
        Ok(self.frames[t].clone())
    }

    fn annotation(&self, t: usize) -> Annotation {
        self.annotations[t]
    }
}

/// A sequence directory read lazily from disk.
#[derive(Clone, Debug)]
pub struct DiskSequence {
    dir: PathBuf,
    annotations: Vec<Annotation>,
}

impl DiskSequence {
    pub fn open(dir: &Path) -> Result<Self> {
        let annotations = read_annotations(&dir.join(GROUNDTRUTH_FILE))?;
        for (i, a) in annotations.iter().enumerate() {
            if a.frame != i {
                return Err(Error::Format {
                    path: dir.join(GROUNDTRUTH_FILE).display().to_string(),
                    reason: format!("row {i} has frame index {}", a.frame),
                });
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            annotations,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn frame_path(&self, t: usize) -> PathBuf {
        frame_path(&self.dir, t)
    }

    pub fn name(&self) -> String {
        self.dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

impl FrameSource for DiskSequence {
    fn len(&self) -> usize {
        self.annotations.len()
    }

    fn frame(&self, t: usize) -> Result<ImagePatch> {
        read_png(&self.frame_path(t))
    }

    fn annotation(&self, t: usize) -> Annotation {
        self.annotations[t]
    }
}

pub fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(FRAMES_DIR).join(format!("{t:06}.png"))
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn write_annotations(path: &Path, rows: &[Annotation]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for r in rows {
        writer.serialize(r)?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes a whole sequence directory.
pub fn write_sequence(dir: &Path, source: &dyn FrameSource, meta: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir.join(FRAMES_DIR))?;
    for t in 0..source.len() {
        write_png(&frame_path(dir, t), &source.frame(t)?)?;
    }
    write_annotations(&dir.join(GROUNDTRUTH_FILE), &source.annotations())?;
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Sequence directories directly below `root`, sorted by name.
pub fn list_sequences(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        if path.join(GROUNDTRUTH_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(path: &Path, img: &ImagePatch) -> Result<()> {
    let (h, w) = (img.height() as u32, img.width() as u32);
    let t = img.tensor();
    match img.channels() {
        1 => {
            let buf: Vec<u8> = t.data().iter().map(|&v| to_u8(v)).collect();
            image::GrayImage::from_raw(w, h, buf)
                .expect("buffer sized from the patch")
                .save(path)?;
        }
        _ => {
            let plane = (h * w) as usize;
            let mut buf = Vec::with_capacity(plane * 3);
            for i in 0..plane {
                for c in 0..3 {
                    buf.push(to_u8(t.data()[c * plane + i]));
                }
            }
            image::RgbImage::from_raw(w, h, buf)
                .expect("buffer sized from the patch")
                .save(path)?;
        }
    }
    Ok(())
}

/// Reads an 8-bit PNG as a grayscale or RGB patch in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<ImagePatch> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let plane = w * h;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px.0[c] as f64 / 255.0;
            }
        }
        ImagePatch::new(Tensor::new(vec![3, h, w], data)?)
    } else {
        let gray = img.to_luma8();
        let data = gray.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        ImagePatch::from_gray(h, w, data)
    }
}
