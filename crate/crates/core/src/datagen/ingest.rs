//! Triplets from a directory of frames named in temporal order.

use std::fs;
use std::path::{Path, PathBuf};

use super::pgm::read_image;
use super::FrameTriplet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EXTENSIONS: &[&str] = &["pgm", "pnm", "png"];

fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

/// Center crop of a `[1, H, W]` frame to `[1, s, s]`.
fn center_crop(t: &Tensor, s: usize) -> Result<Tensor> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    if s > h || s > w {
        return Err(Error::config("window", format!("{s} exceeds frame size {h}x{w}")));
    }
    let (oy, ox) = ((h - s) / 2, (w - s) / 2);
    Ok(Tensor::from_fn(&[1, s, s], |i| t.data()[(oy + i / s) * w + ox + i % s]))
}

/// Sliding-window triplets over the frames in `dir` (sorted by file name).
/// `window` center-crops each frame to a square; `stride` is the step
/// between the first frames of consecutive triplets. Every unreadable or
/// mismatched file is reported in one error.
pub fn ingest_frames(dir: &Path, window: Option<usize>, stride: usize) -> Result<Vec<FrameTriplet>> {
    if stride == 0 {
        return Err(Error::config("stride", "must be positive"));
    }
    let paths = frame_paths(dir)?;
    let mut frames = Vec::with_capacity(paths.len());
    let mut problems = Vec::new();
    for p in &paths {
        match read_image(p) {
            Ok(t) => {
                if let Some(first) = frames.first().map(|f: &(PathBuf, Tensor)| f.1.shape().to_vec()) {
                    if t.shape() != first.as_slice() {
                        problems.push(format!("{}: size {:?} differs from {:?}", p.display(), t.shape(), first));
                        continue;
                    }
                }
                frames.push((p.clone(), t));
            }
            Err(e) => problems.push(e.to_string()),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Image(problems.join("; ")));
    }
    if frames.len() < 3 {
        return Err(Error::config(
            "path",
            format!("{} holds {} frames, need at least 3", dir.display(), frames.len()),
        ));
    }
    let frames: Vec<Tensor> = frames
        .into_iter()
        .map(|(_, t)| match window {
            Some(s) => center_crop(&t, s),
            None => Ok(t),
        })
        .collect::<Result<_>>()?;
    (0..=frames.len() - 3)
        .step_by(stride)
        .map(|i| FrameTriplet::new([frames[i].clone(), frames[i + 1].clone(), frames[i + 2].clone()]))
        .collect()
}
