//! On-disk multi-frame datasets.
//!
//! ```text
//! <dir>/frames/000000.png   RGB frame
//! <dir>/masks/000000.png    foreground mask
//! <dir>/params.jsonl        one {psi, theta, head_pose, camera} record per frame
//! <dir>/rig.txt             rig in the text format of `rigfile`
//! <dir>/meta.txt            `background r g b` and `resolution w h`
//! ```

use crate::error::{Error, Result};
use crate::imageio::{load_mask, load_png, save_mask, save_png};
use crate::math::RigidTransform;
use crate::rig::{rigid_serde, Camera, ParamRig, RigParams};
use crate::rigfile::{load_rig, save_rig};
use crate::Image;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsRecord {
    pub psi: Vec<f64>,
    pub theta: Vec<f64>,
    #[serde(with = "rigid_serde")]
    pub head_pose: RigidTransform,
    pub camera: Camera,
}

impl ParamsRecord {
    pub fn new(params: &RigParams, camera: &Camera) -> Self {
        Self {
            psi: params.psi.clone(),
            theta: params.theta.clone(),
            head_pose: params.head_pose,
            camera: *camera,
        }
    }

    pub fn params(&self) -> RigParams {
        RigParams {
            psi: self.psi.clone(),
            theta: self.theta.clone(),
            head_pose: self.head_pose,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Ground truth with the background composited into masked-out pixels.
    pub image: Image,
    pub mask: Vec<bool>,
    pub params: RigParams,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub rig: ParamRig,
    pub background: [f64; 3],
    pub frames: Vec<Frame>,
}

/// Replaces every masked-out pixel by `background`.
pub fn composite_background(image: &mut Image, mask: &[bool], background: [f64; 3]) {
    for (px, &fg) in image.data.chunks_exact_mut(3).zip(mask) {
        if !fg {
            px.copy_from_slice(&background);
        }
    }
}

fn frame_name(i: usize) -> String {
    format!("{i:06}.png")
}

impl Dataset {
    /// Checks stream counts, image/mask/camera dimensions and parameter sizes.
    pub fn validate(&self) -> Result<()> {
        let (k, j) = (self.rig.expression_dim(), 3 * self.rig.joint_count());
        for (i, f) in self.frames.iter().enumerate() {
            let bad = |what: &str| Error::Dataset(format!("frame {}: {what}", frame_name(i)));
            if f.image.width != f.camera.width || f.image.height != f.camera.height {
                return Err(bad("image size differs from the camera resolution"));
            }
            if f.mask.len() != f.image.width * f.image.height {
                return Err(bad("mask size differs from the image"));
            }
            if f.params.psi.len() != k || f.params.theta.len() != j {
                return Err(bad("driving parameters do not match the rig"));
            }
            f.camera.validate().map_err(|e| bad(&e.to_string()))?;
        }
        Ok(())
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.image.width, f.image.height))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir.join("frames"))?;
        std::fs::create_dir_all(dir.join("masks"))?;
        save_rig(&self.rig, &dir.join("rig.txt"))?;
        let records: Vec<ParamsRecord> = self.frames.iter().map(|f| ParamsRecord::new(&f.params, &f.camera)).collect();
        save_params(&records, &dir.join("params.jsonl"))?;
        let (w, h) = self.resolution().unwrap_or((0, 0));
        let [r, g, b] = self.background;
        std::fs::write(dir.join("meta.txt"), format!("background {r} {g} {b}\nresolution {w} {h}\n"))?;
        self.frames.par_iter().enumerate().try_for_each(|(i, f)| {
            save_png(&f.image, &dir.join("frames").join(frame_name(i)))?;
            save_mask(&f.mask, f.image.width, f.image.height, &dir.join("masks").join(frame_name(i)))
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let rig = load_rig(&dir.join("rig.txt"))?;
        let (background, resolution) = load_meta(&dir.join("meta.txt"))?;
        let records = load_params(&dir.join("params.jsonl"))?;
        let on_disk = count_pngs(&dir.join("frames"))?;
        if on_disk != records.len() {
            return Err(Error::Dataset(format!(
                "{} frames on disk but {} parameter records",
                on_disk,
                records.len()
            )));
        }
        let frames = records
            .par_iter()
            .enumerate()
            .map(|(i, rec)| load_frame(dir, i, rec, background, resolution))
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset {
            rig,
            background,
            frames,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn load_frame(dir: &Path, i: usize, rec: &ParamsRecord, background: [f64; 3], resolution: (usize, usize)) -> Result<Frame> {
    let name = frame_name(i);
    let image_path = dir.join("frames").join(&name);
    let mask_path = dir.join("masks").join(&name);
    let require = |p: &PathBuf, what: &str| {
        if p.is_file() {
            Ok(())
        } else {
            Err(Error::Dataset(format!("frame {name}: missing {what} {}", p.display())))
        }
    };
    require(&image_path, "image")?;
    require(&mask_path, "mask")?;
    let mut image = load_png(&image_path)?;
    let (mask, mw, mh) = load_mask(&mask_path)?;
    if (image.width, image.height) != resolution || (mw, mh) != resolution {
        return Err(Error::Dataset(format!(
            "frame {name}: expected {}x{} image and mask",
            resolution.0, resolution.1
        )));
    }
    composite_background(&mut image, &mask, background);
    Ok(Frame {
        image,
        mask,
        params: rec.params(),
        camera: rec.camera,
    })
}

fn count_pngs(dir: &Path) -> Result<usize> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("missing directory {}", dir.display())));
    }
    let mut n = 0;
    for entry in std::fs::read_dir(dir)? {
        if entry?.path().extension().is_some_and(|e| e == "png") {
            n += 1;
        }
    }
    Ok(n)
}

fn load_meta(path: &Path) -> Result<([f64; 3], (usize, usize))> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let mut background = None;
    let mut resolution = None;
    for (n, line) in text.lines().enumerate() {
        let t: Vec<&str> = line.split_whitespace().collect();
        let err = || Error::Parse {
            line: n + 1,
            message: format!("malformed meta entry '{line}'"),
        };
        match t.as_slice() {
            [] => {}
            ["background", r, g, b] => {
                let p = |s: &str| s.parse::<f64>().map_err(|_| err());
                background = Some([p(r)?, p(g)?, p(b)?]);
            }
            ["resolution", w, h] => {
                let p = |s: &str| s.parse::<usize>().map_err(|_| err());
                resolution = Some((p(w)?, p(h)?));
            }
            _ => return Err(err()),
        }
    }
    match (background, resolution) {
        (Some(b), Some(r)) => Ok((b, r)),
        _ => Err(Error::Dataset("meta.txt needs background and resolution entries".into())),
    }
}

pub fn save_params(records: &[ParamsRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        writeln!(out, "{}", serde_json::to_string(r)?).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a `params.jsonl` file; blank lines are skipped.
pub fn load_params(path: &Path) -> Result<Vec<ParamsRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
