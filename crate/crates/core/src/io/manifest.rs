//! Sequence manifests and the on-disk frame layout.
//!
//! A sequence directory holds `manifest.json` plus per-frame color PNGs
//! (8-bit RGB), depth PNGs (16-bit grayscale, scaled by `depth_scale` to
//! meters on load), and camera-to-world pose text files (4x4 row-major).

use std::fs;
use std::path::Path;

use image::ImageReader;
use nalgebra::Matrix4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{io_err, IoError};
use crate::geometry::{CameraFrame, ColorImage, DepthMap, Intrinsics, RigidPose};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub index: u32,
    pub color: String,
    pub depth: String,
    pub pose: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub version: u32,
    pub sequence_id: String,
    pub intrinsics: Intrinsics,
    /// Factor converting stored depth units to meters (0.001 for
    /// millimeter PNGs).
    pub depth_scale: f64,
    pub frames: Vec<ManifestFrame>,
}

impl SequenceManifest {
    fn validate(&self) -> Result<(), IoError> {
        if self.version != MANIFEST_VERSION {
            return Err(IoError::UnsupportedVersion(self.version));
        }
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return Err(IoError::MalformedManifest(format!(
                "depth_scale {} must be finite and positive",
                self.depth_scale
            )));
        }
        self.intrinsics
            .validate()
            .map_err(|e| IoError::MalformedManifest(e.to_string()))?;
        for w in self.frames.windows(2) {
            if w[1].index <= w[0].index {
                return Err(IoError::MalformedManifest(format!(
                    "frame indices must be strictly increasing ({} then {})",
                    w[0].index, w[1].index
                )));
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<SequenceManifest, IoError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let manifest: SequenceManifest =
        serde_json::from_str(&text).map_err(|e| IoError::MalformedManifest(e.to_string()))?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads a sequence directory (containing `manifest.json`) into frames,
/// resampling depth to color resolution when the sizes differ.
pub fn load_sequence(dir: &Path) -> Result<Vec<CameraFrame>, IoError> {
    let manifest = load_manifest(&dir.join("manifest.json"))?;
    load_sequence_from_manifest(dir, &manifest, true)
}

pub fn load_sequence_from_manifest(
    dir: &Path,
    manifest: &SequenceManifest,
    resample_depth: bool,
) -> Result<Vec<CameraFrame>, IoError> {
    manifest.validate()?;
    manifest
        .frames
        .par_iter()
        .map(|fr| load_frame(dir, manifest, fr, resample_depth))
        .collect()
}

fn load_frame(
    dir: &Path,
    manifest: &SequenceManifest,
    fr: &ManifestFrame,
    resample_depth: bool,
) -> Result<CameraFrame, IoError> {
    let color = load_color_png(&dir.join(&fr.color))?;
    if (color.width, color.height) != (manifest.intrinsics.width, manifest.intrinsics.height) {
        return Err(IoError::Corrupt(format!(
            "color image {} is {}x{}, manifest intrinsics say {}x{}",
            fr.color, color.width, color.height, manifest.intrinsics.width,
            manifest.intrinsics.height
        )));
    }
    let depth = load_depth_png(
        &dir.join(&fr.depth),
        manifest.depth_scale,
        color.width,
        color.height,
        resample_depth,
    )?;
    let pose = load_pose(&dir.join(&fr.pose))?;
    Ok(CameraFrame::new(fr.index, color, depth, manifest.intrinsics, pose))
}

fn load_color_png(path: &Path) -> Result<ColorImage, IoError> {
    let reader = ImageReader::open(path).map_err(|e| io_err(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| IoError::Png { path: path.to_path_buf(), source: e })?
        .to_rgb8();
    Ok(ColorImage::new(img.width(), img.height(), img.into_raw()))
}

fn load_depth_png(
    path: &Path,
    scale: f64,
    color_w: u32,
    color_h: u32,
    resample: bool,
) -> Result<DepthMap, IoError> {
    let reader = ImageReader::open(path).map_err(|e| io_err(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| IoError::Png { path: path.to_path_buf(), source: e })?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(buf) => buf,
        other => {
            return Err(IoError::DepthFormat(format!(
                "{} decodes as {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (dw, dh) = (gray.width(), gray.height());
    let meters: Vec<f64> = gray.as_raw().iter().map(|&v| v as f64 * scale).collect();
    if (dw, dh) == (color_w, color_h) {
        return Ok(DepthMap::new(dw, dh, meters));
    }
    if !resample {
        return Err(IoError::DepthSizeMismatch { dw, dh, cw: color_w, ch: color_h });
    }
    // nearest-neighbor resample via pixel centers; interpolation would
    // invent surface points across depth discontinuities
    let mut out = vec![0.0f64; color_w as usize * color_h as usize];
    for y in 0..color_h {
        let sy = (((y as f64 + 0.5) * dh as f64 / color_h as f64).floor() as u32).min(dh - 1);
        for x in 0..color_w {
            let sx = (((x as f64 + 0.5) * dw as f64 / color_w as f64).floor() as u32).min(dw - 1);
            out[(y * color_w + x) as usize] = meters[(sy * dw + sx) as usize];
        }
    }
    Ok(DepthMap::new(color_w, color_h, out))
}

const POSE_REORTHO_LIMIT: f64 = 1e-4;

fn load_pose(path: &Path) -> Result<RigidPose, IoError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let malformed = |reason: String| IoError::MalformedPose { path: path.to_path_buf(), reason };

    let values: Vec<f64> = text
        .split_whitespace()
        .map(|tok| tok.parse::<f64>().map_err(|e| malformed(format!("bad number {tok:?}: {e}"))))
        .collect::<Result<_, _>>()?;
    if values.len() != 16 {
        return Err(malformed(format!("expected 16 values, found {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(malformed("non-finite entries".into()));
    }
    let mut m = Matrix4::from_row_slice(&values);

    let last = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
    if last
        .iter()
        .zip(&[0.0, 0.0, 0.0, 1.0])
        .any(|(got, want)| (got - want).abs() > 1e-9)
    {
        return Err(malformed(format!("last row {last:?} is not (0, 0, 0, 1)")));
    }
    m.set_row(3, &nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0));

    match RigidPose::from_matrix(m) {
        Ok(pose) => Ok(pose),
        Err(_) => {
            let r = m.fixed_view::<3, 3>(0, 0).into_owned();
            let gram_err = (r.transpose() * r - nalgebra::Matrix3::identity()).abs().max();
            let det = r.determinant();
            if gram_err > POSE_REORTHO_LIMIT || det <= 0.0 {
                return Err(malformed(format!(
                    "rotation orthonormality error {gram_err:.3e}, det {det:.6}"
                )));
            }
            // nearest rotation via SVD; tolerable drift gets repaired
            let svd = r.svd(true, true);
            let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
            let mut fixed = u * vt;
            if fixed.determinant() < 0.0 {
                let mut flip = nalgebra::Matrix3::identity();
                flip[(2, 2)] = -1.0;
                fixed = u * flip * vt;
            }
            eprintln!(
                "warning: re-orthonormalized drifting rotation in {} (error {gram_err:.3e})",
                path.display()
            );
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&fixed);
            RigidPose::from_matrix(m)
                .map_err(|e| malformed(format!("unrepairable rotation: {e}")))
        }
    }
}

/// Materializes frames into `dir` in the standard layout and writes the
/// manifest. Depth quantizes to `depth_scale` units (u16); synthetic and
/// real data become interchangeable downstream.
pub fn write_sequence(
    dir: &Path,
    sequence_id: &str,
    frames: &[CameraFrame],
    depth_scale: f64,
) -> Result<SequenceManifest, IoError> {
    assert!(!frames.is_empty(), "cannot write an empty sequence");
    assert!(depth_scale > 0.0);
    let intrinsics = frames[0].intrinsics;
    for sub in ["color", "depth", "pose"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| io_err(&dir.join(sub), e))?;
    }

    let mut entries = Vec::with_capacity(frames.len());
    for frame in frames {
        let color_rel = format!("color/{:06}.png", frame.frame_index);
        let depth_rel = format!("depth/{:06}.png", frame.frame_index);
        let pose_rel = format!("pose/{:06}.txt", frame.frame_index);

        let (w, h) = (frame.width(), frame.height());
        let color_buf: image::RgbImage =
            image::ImageBuffer::from_raw(w, h, frame.color.data().to_vec())
                .expect("color buffer size");
        color_buf
            .save(dir.join(&color_rel))
            .map_err(|e| IoError::Png { path: dir.join(&color_rel), source: e })?;

        let depth_units: Vec<u16> = frame
            .depth
            .data()
            .iter()
            .map(|d| (d / depth_scale).round().clamp(0.0, u16::MAX as f64) as u16)
            .collect();
        let depth_buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
            image::ImageBuffer::from_raw(w, h, depth_units).expect("depth buffer size");
        depth_buf
            .save(dir.join(&depth_rel))
            .map_err(|e| IoError::Png { path: dir.join(&depth_rel), source: e })?;

        let m = frame.pose.matrix();
        let mut pose_text = String::new();
        for r in 0..4 {
            for c in 0..4 {
                if c > 0 {
                    pose_text.push(' ');
                }
                pose_text.push_str(&format!("{}", m[(r, c)]));
            }
            pose_text.push('\n');
        }
        fs::write(dir.join(&pose_rel), pose_text).map_err(|e| io_err(&dir.join(&pose_rel), e))?;

        entries.push(ManifestFrame {
            index: frame.frame_index,
            color: color_rel,
            depth: depth_rel,
            pose: pose_rel,
        });
    }

    let manifest = SequenceManifest {
        version: MANIFEST_VERSION,
        sequence_id: sequence_id.to_string(),
        intrinsics,
        depth_scale,
        frames: entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}
