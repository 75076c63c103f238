//! Multi-view training data in memory and on disk.
//!
//! Directory layout:
//!
//! ```text
//! cameras.toml            manifest: background, extent and one [[view]] per camera
//! images/train_NNN.png    training inputs
//! images/holdout_NNN.png  clean evaluation views
//! clean/train_NNN.png     distractor-free training views (optional)
//! masks/train_NNN.png     ground-truth distractor masks, 255 = distractor (optional)
//! sfm.bin                 seed points
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_sfm, read_mask_png, read_png, save_sfm, write_mask_png, write_png};
use crate::types::{BinaryMask, Camera, ImageBuffer, SfmPoints};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainView {
    pub camera: Camera,
    /// Training input, possibly containing distractors.
    pub image: ImageBuffer,
    pub clean: Option<ImageBuffer>,
    /// `true` marks distractor pixels.
    pub distractor_mask: Option<BinaryMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HoldoutView {
    pub camera: Camera,
    pub image: ImageBuffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub train: Vec<TrainView>,
    pub holdout: Vec<HoldoutView>,
    pub sfm: SfmPoints,
    pub background: [f64; 3],
    /// Characteristic scene radius in world units.
    pub extent: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    name: String,
    background: [f64; 3],
    extent: f64,
    view: Vec<ViewEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewEntry {
    split: String,
    index: usize,
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    near: f64,
    far: f64,
    world_to_camera: [[f64; 4]; 4],
}

impl ViewEntry {
    fn new(split: &str, index: usize, c: &Camera) -> Self {
        Self {
            split: split.into(),
            index,
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            near: c.near,
            far: c.far,
            world_to_camera: c.world_to_camera,
        }
    }

    fn camera(&self) -> Camera {
        Camera {
            world_to_camera: self.world_to_camera,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            near: self.near,
            far: self.far,
        }
    }
}

fn train_name(i: usize) -> String {
    format!("train_{i:03}.png")
}

fn holdout_name(i: usize) -> String {
    format!("holdout_{i:03}.png")
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.train.len() < 2 {
            return Err(Error::Invariant("need at least two training views".into()));
        }
        for v in &self.train {
            v.camera.validate()?;
            if (v.image.width, v.image.height) != (v.camera.width, v.camera.height) {
                return Err(Error::ShapeMismatch {
                    expected: (v.camera.width, v.camera.height),
                    found: (v.image.width, v.image.height),
                });
            }
        }
        for v in &self.holdout {
            v.camera.validate()?;
        }
        self.sfm.validate()
    }

    pub fn has_ground_truth(&self) -> bool {
        self.train.iter().all(|v| v.distractor_mask.is_some())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "clean", "masks"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        let mut views = Vec::new();
        for (i, v) in self.train.iter().enumerate() {
            views.push(ViewEntry::new("train", i, &v.camera));
            write_png(&v.image, &dir.join("images").join(train_name(i)))?;
            if let Some(c) = &v.clean {
                write_png(c, &dir.join("clean").join(train_name(i)))?;
            }
            if let Some(m) = &v.distractor_mask {
                write_mask_png(m, &dir.join("masks").join(train_name(i)))?;
            }
        }
        for (i, v) in self.holdout.iter().enumerate() {
            views.push(ViewEntry::new("holdout", i, &v.camera));
            write_png(&v.image, &dir.join("images").join(holdout_name(i)))?;
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            name: self.name.clone(),
            background: self.background,
            extent: self.extent,
            view: views,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("cameras.toml"), text)?;
        save_sfm(&self.sfm, &dir.join("sfm.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("cameras.toml"))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        let optional = |p: std::path::PathBuf| p.exists().then_some(p);
        let mut train = Vec::new();
        let mut holdout = Vec::new();
        for v in &manifest.view {
            match v.split.as_str() {
                "train" => {
                    let name = train_name(v.index);
                    let clean = optional(dir.join("clean").join(&name))
                        .map(|p| read_png(&p))
                        .transpose()?;
                    let mask = optional(dir.join("masks").join(&name))
                        .map(|p| read_mask_png(&p))
                        .transpose()?;
                    train.push(TrainView {
                        camera: v.camera(),
                        image: read_png(&dir.join("images").join(&name))?,
                        clean,
                        distractor_mask: mask,
                    });
                }
                "holdout" => holdout.push(HoldoutView {
                    camera: v.camera(),
                    image: read_png(&dir.join("images").join(holdout_name(v.index)))?,
                }),
                other => return Err(Error::Format(format!("unknown split {other:?}"))),
            }
        }
        let ds = Dataset {
            name: manifest.name,
            train,
            holdout,
            sfm: load_sfm(&dir.join("sfm.bin"))?,
            background: manifest.background,
            extent: manifest.extent,
        };
        ds.validate()?;
        Ok(ds)
    }
}
