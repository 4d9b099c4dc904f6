//! Synthetic video-triplet generators and frame-directory ingestion.
//!
//! Every generator is a pure function of its spec and seed. Triplet `i`
//! draws from its own ChaCha stream `(seed, i)`, so output does not depend on
//! generation order.

pub mod bump;
pub mod ingest;
pub mod pgm;
pub mod rigid;
pub mod skip;
pub mod sprites;

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ltz;
use crate::tensor::Tensor;

pub use bump::{gen_bump_line, BumpDatasetSpec, BumpLine};
pub use ingest::ingest_frames;
pub use rigid::{gen_rigid_triplets, procedural_stills, RigidDatasetSpec, RigidTransform, TransformSpec};
pub use skip::apply_skip;
pub use sprites::{gen_rotating_sprites, SpriteSceneSpec};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Three consecutive grayscale frames `(x^{t-1}, x^t, x^{t+1})`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTriplet {
    pub frames: [Tensor; 3],
    /// Whether the target frame skipped one step; only set by the skip
    /// generator.
    pub skip: Option<bool>,
    /// Generator parameters per frame (τ and transform, or angles).
    pub latent: Option<[Vec<f64>; 3]>,
}

impl FrameTriplet {
    pub fn new(frames: [Tensor; 3]) -> Result<Self> {
        if frames[0].shape() != frames[1].shape() || frames[1].shape() != frames[2].shape() {
            return Err(Error::shape("triplet", "frames differ in shape"));
        }
        Ok(FrameTriplet {
            frames,
            skip: None,
            latent: None,
        })
    }

    pub fn with_latent(mut self, latent: [Vec<f64>; 3]) -> Self {
        self.latent = Some(latent);
        self
    }

    pub fn frame_shape(&self) -> &[usize] {
        self.frames[0].shape()
    }
}

/// Stream `index` of the generator seeded by `seed`.
pub fn triplet_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Clips intensities to [0, 1].
pub(crate) fn clip_unit(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// What to generate (or load).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum DatasetSpec {
    Bump(BumpDatasetSpec),
    Rigid(RigidDatasetSpec),
    Sprites {
        #[serde(flatten)]
        scene: SpriteSceneSpec,
        count: usize,
    },
    SkipSprites {
        #[serde(flatten)]
        scene: SpriteSceneSpec,
        count: usize,
        p_skip: f64,
    },
    Directory {
        path: PathBuf,
        #[serde(default)]
        window: Option<usize>,
        #[serde(default = "one")]
        stride: usize,
    },
    /// A dataset previously written by [`save_dataset`].
    Cache { path: PathBuf },
}

fn one() -> usize {
    1
}

impl DatasetSpec {
    pub fn id(&self) -> &'static str {
        match self {
            DatasetSpec::Bump(_) => "bump",
            DatasetSpec::Rigid(_) => "rigid",
            DatasetSpec::Sprites { .. } => "sprites",
            DatasetSpec::SkipSprites { .. } => "skip_sprites",
            DatasetSpec::Directory { .. } => "directory",
            DatasetSpec::Cache { .. } => "cache",
        }
    }

    pub fn with_count(&self, n: usize) -> DatasetSpec {
        let mut out = self.clone();
        match &mut out {
            DatasetSpec::Bump(s) => s.count = n,
            DatasetSpec::Rigid(s) => s.count = n,
            DatasetSpec::Sprites { count, .. } | DatasetSpec::SkipSprites { count, .. } => *count = n,
            DatasetSpec::Directory { .. } | DatasetSpec::Cache { .. } => {}
        }
        out
    }
}

pub fn generate(spec: &DatasetSpec, seed: u64) -> Result<Vec<FrameTriplet>> {
    match spec {
        DatasetSpec::Bump(s) => s.generate(seed),
        DatasetSpec::Rigid(s) => {
            let stills = procedural_stills(s.stills, s.still_size, seed ^ 0x5717_1150)?;
            gen_rigid_triplets(&stills, &s.transform, s.window, s.count, seed)
        }
        DatasetSpec::Sprites { scene, count } => gen_rotating_sprites(scene, *count, seed),
        DatasetSpec::SkipSprites { scene, count, p_skip } => sprites::gen_skip_sprites(scene, *count, *p_skip, seed),
        DatasetSpec::Directory { path, window, stride } => ingest_frames(path, *window, *stride),
        DatasetSpec::Cache { path } => Ok(load_dataset(path)?.1),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub generator: String,
    pub spec: DatasetSpec,
    pub seed: u64,
    pub count: usize,
    pub frame_shape: Vec<usize>,
    pub has_skip: bool,
    pub has_latent: bool,
}

pub const FRAMES_FILE: &str = "frames.ltz";
pub const SKIP_FILE: &str = "skip.ltz";
pub const LATENT_FILE: &str = "latent.ltz";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `frames.ltz` (`[N, 3, C, H, W]`), optional `skip.ltz` and
/// `latent.ltz`, and `manifest.json`.
pub fn save_dataset(dir: &Path, spec: &DatasetSpec, seed: u64, triplets: &[FrameTriplet]) -> Result<DatasetManifest> {
    let first = triplets
        .first()
        .ok_or_else(|| Error::config("dataset", "no triplets to save"))?;
    fs::create_dir_all(dir)?;
    let frame_shape = first.frame_shape().to_vec();
    let mut shape = vec![triplets.len(), 3];
    shape.extend_from_slice(&frame_shape);
    let mut data = Vec::with_capacity(shape.iter().product());
    for t in triplets {
        if t.frame_shape() != frame_shape.as_slice() {
            return Err(Error::shape("save_dataset", "triplets differ in frame shape"));
        }
        for f in &t.frames {
            data.extend_from_slice(f.data());
        }
    }
    ltz::write(dir.join(FRAMES_FILE), &Tensor::new(shape, data)?)?;

    let has_skip = triplets.iter().all(|t| t.skip.is_some());
    if has_skip {
        let s = triplets.iter().map(|t| t.skip.map_or(0.0, f64::from)).collect();
        ltz::write(dir.join(SKIP_FILE), &Tensor::from_vec(s))?;
    }
    let latent_len = first.latent.as_ref().map(|l| l[0].len());
    let has_latent = matches!(latent_len, Some(n) if n > 0)
        && triplets
            .iter()
            .all(|t| t.latent.as_ref().is_some_and(|l| l.iter().all(|v| Some(v.len()) == latent_len)));
    if has_latent {
        let n = latent_len.unwrap_or(0);
        let mut data = Vec::with_capacity(triplets.len() * 3 * n);
        for t in triplets {
            for v in t.latent.as_ref().into_iter().flatten() {
                data.extend_from_slice(v);
            }
        }
        ltz::write(dir.join(LATENT_FILE), &Tensor::new(vec![triplets.len(), 3, n], data)?)?;
    }
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        generator: spec.id().to_string(),
        spec: spec.clone(),
        seed,
        count: triplets.len(),
        frame_shape,
        has_skip,
        has_latent,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<FrameTriplet>)> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "dataset schema version {} is not supported",
            manifest.schema_version
        )));
    }
    let frames = ltz::read(dir.join(FRAMES_FILE))?;
    let mut expect = vec![manifest.count, 3];
    expect.extend_from_slice(&manifest.frame_shape);
    if frames.shape() != expect.as_slice() {
        return Err(Error::Format(format!(
            "{FRAMES_FILE} has shape {:?}, manifest says {expect:?}",
            frames.shape()
        )));
    }
    let skip = manifest
        .has_skip
        .then(|| ltz::read(dir.join(SKIP_FILE)))
        .transpose()?;
    let latent = manifest
        .has_latent
        .then(|| ltz::read(dir.join(LATENT_FILE)))
        .transpose()?;
    let fsize: usize = manifest.frame_shape.iter().product();
    let mut triplets = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let frame = |j: usize| {
            let start = (i * 3 + j) * fsize;
            Tensor::new(manifest.frame_shape.clone(), frames.data()[start..start + fsize].to_vec())
        };
        let mut t = FrameTriplet::new([frame(0)?, frame(1)?, frame(2)?])?;
        t.skip = skip.as_ref().map(|s| s.data()[i] != 0.0);
        if let Some(l) = &latent {
            let n = l.shape()[2];
            let row = |j: usize| l.data()[(i * 3 + j) * n..(i * 3 + j + 1) * n].to_vec();
            t.latent = Some([row(0), row(1), row(2)]);
        }
        triplets.push(t);
    }
    Ok((manifest, triplets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_keeps_labels() {
        let scene = SpriteSceneSpec::default();
        let spec = DatasetSpec::SkipSprites {
            scene,
            count: 6,
            p_skip: 0.5,
        };
        let triplets = generate(&spec, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(dir.path(), &spec, 3, &triplets).unwrap();
        assert!(manifest.has_skip && manifest.has_latent);
        let (m2, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(m2, manifest);
        for (a, b) in back.iter().zip(&triplets) {
            assert_eq!(a.skip, b.skip);
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                for (x, y) in fa.data().iter().zip(fb.data()) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn spec_json_is_tagged() {
        let spec = DatasetSpec::Sprites {
            scene: SpriteSceneSpec::default(),
            count: 4,
        };
        let json = serde_json::to_value(&spec).unwrap();
        assert_eq!(json["generator"], "sprites");
        assert_eq!(serde_json::from_value::<DatasetSpec>(json).unwrap(), spec);
    }
}
