//! On-disk scene layout:
//!
//! ```text
//! <dir>/scene.toml                     generator settings (informational)
//! <dir>/rigs.txt                       one camera block per frame
//! <dir>/gt.txt                         ground-truth box records
//! <dir>/features/f0000_front.bin       one feature map per frame and view
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mvdet::scene::{RenderedFrame, SceneSpec};
use mvdet::{Box3D, CameraRig, ImageFeature, ViewLabel};

use crate::format::{flatten_frames, group_by_frame, parse_boxes, parse_rigs, read_feature, write_boxes, write_feature, write_rigs};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub rigs: Vec<CameraRig>,
    pub gts: Vec<Vec<Box3D>>,
    /// Per frame, in rig camera order.
    pub features: Vec<Vec<ImageFeature>>,
}

impl SceneData {
    pub fn from_rendered(frames: &[RenderedFrame]) -> Self {
        SceneData {
            rigs: frames.iter().map(|f| f.rig.clone()).collect(),
            gts: frames.iter().map(|f| f.gts.clone()).collect(),
            features: frames.iter().map(|f| f.features.clone()).collect(),
        }
    }

    pub fn frames(&self) -> usize {
        self.rigs.len()
    }
}

pub fn feature_path(dir: &Path, frame: usize, view: ViewLabel) -> PathBuf {
    dir.join("features").join(format!("f{frame:04}_{view}.bin"))
}

pub fn write_scene(dir: &Path, spec: &SceneSpec, scene: &SceneData) -> Result<()> {
    fs::create_dir_all(dir.join("features")).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("scene.toml"), toml::to_string(spec)?)?;
    fs::write(dir.join("rigs.txt"), write_rigs(&scene.rigs))?;
    fs::write(dir.join("gt.txt"), write_boxes(&flatten_frames(&scene.gts)))?;
    for (f, feats) in scene.features.iter().enumerate() {
        for feat in feats {
            let path = feature_path(dir, f, feat.view);
            let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
            write_feature(feat, &mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

pub fn read_rigs(path: &Path) -> Result<Vec<CameraRig>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_rigs(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Reads box records grouped into `frames` frames.
pub fn read_boxes(path: &Path, frames: usize) -> Result<Vec<Vec<Box3D>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let boxes = parse_boxes(&text).with_context(|| format!("parsing {}", path.display()))?;
    group_by_frame(&boxes, frames).with_context(|| format!("in {}", path.display()))
}

pub fn read_scene(dir: &Path) -> Result<SceneData> {
    if !dir.is_dir() {
        bail!("scene directory {} does not exist", dir.display());
    }
    let rigs = read_rigs(&dir.join("rigs.txt"))?;
    let gts = read_boxes(&dir.join("gt.txt"), rigs.len())?;
    let mut features = Vec::with_capacity(rigs.len());
    for (f, rig) in rigs.iter().enumerate() {
        let mut frame = Vec::new();
        for rc in rig.cameras() {
            let path = feature_path(dir, f, rc.view);
            let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            let feat = read_feature(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
            if feat.view != rc.view {
                bail!("{} holds view `{}`", path.display(), feat.view);
            }
            frame.push(feat);
        }
        features.push(frame);
    }
    Ok(SceneData { rigs, gts, features })
}
