//! On-disk capture datasets: camera and motion metadata as JSON, images and
//! masks as PNG, the skinned template and ground-truth meshes as OBJ.
//!
//! Layout under the dataset root:
//!
//! ```text
//! cameras.json              calibrated cameras (intrinsics + extrinsics)
//! motion.json               per-frame skeletal poses
//! template.json             skeleton, skinning weights, canonical pose
//! template.obj              template surface in canonical space
//! frames/0000/images/*.png  per-camera RGB frames
//! frames/0000/masks/*.png   per-camera foreground masks
//! gt_meshes/0000.obj        optional ground-truth surfaces
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::linalg::V3;
use crate::mesh::TriMesh;
use crate::renderer::{Camera, Image, Mask};
use crate::template::{Pose, SkeletalMotion, Skeleton, SkinWeights, TemplateMesh};
use crate::{Error, Result};

/// One calibrated camera as stored in `cameras.json`. `k` and `r` are
/// row-major; `r`, `t` map world points into the camera frame.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub k: [[f64; 3]; 3],
    pub r: [[f64; 3]; 3],
    pub t: V3,
}

impl CameraRecord {
    pub fn from_camera(id: &str, cam: &Camera) -> CameraRecord {
        CameraRecord {
            id: id.to_string(),
            width: cam.width,
            height: cam.height,
            k: [
                [cam.fx, 0.0, cam.cx],
                [0.0, cam.fy, cam.cy],
                [0.0, 0.0, 1.0],
            ],
            r: cam.rotation,
            t: cam.translation,
        }
    }

    /// Converts to a [`Camera`], rejecting skewed or non-normalized
    /// intrinsics and non-rigid rotations.
    pub fn to_camera(&self) -> Result<Camera> {
        let k = &self.k;
        if k[0][1] != 0.0 || k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
            return Err(Error::data(format!(
                "camera {}: intrinsics must be zero-skew with unit bottom row",
                self.id
            )));
        }
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(Error::data(format!(
                "camera {}: non-positive focal length",
                self.id
            )));
        }
        let cam = Camera {
            fx: k[0][0],
            fy: k[1][1],
            cx: k[0][2],
            cy: k[1][2],
            rotation: self.r,
            translation: self.t,
            width: self.width,
            height: self.height,
        };
        cam.validate()
            .map_err(|e| Error::data(format!("camera {}: {e}", self.id)))?;
        Ok(cam)
    }
}

/// Contents of `template.json`; the surface itself lives in `template.obj`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateRecord {
    pub skeleton: Skeleton,
    pub weights: SkinWeights,
    pub canonical_pose: Pose,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut writer = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, value)?;
    use std::io::Write;
    writer.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = fs::File::open(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// A capture dataset opened from disk. Metadata is loaded and validated
/// eagerly; images, masks, and ground-truth meshes are loaded on demand.
pub struct CaptureDataset {
    root: PathBuf,
    pub camera_ids: Vec<String>,
    pub cameras: Vec<Camera>,
    pub motion: SkeletalMotion,
    pub template: TemplateMesh,
}

impl CaptureDataset {
    pub fn open(root: &Path) -> Result<CaptureDataset> {
        if !root.is_dir() {
            return Err(Error::data(format!(
                "dataset root {} is not a directory",
                root.display()
            )));
        }
        let records: Vec<CameraRecord> = read_json(&root.join("cameras.json"))?;
        if records.is_empty() {
            return Err(Error::data("cameras.json lists no cameras"));
        }
        let mut camera_ids = Vec::with_capacity(records.len());
        let mut cameras = Vec::with_capacity(records.len());
        for rec in &records {
            if camera_ids.contains(&rec.id) {
                return Err(Error::data(format!("duplicate camera id {}", rec.id)));
            }
            cameras.push(rec.to_camera()?);
            camera_ids.push(rec.id.clone());
        }
        let motion: SkeletalMotion = read_json(&root.join("motion.json"))?;
        let template_rec: TemplateRecord = read_json(&root.join("template.json"))?;
        let template_mesh = TriMesh::read_obj(&root.join("template.obj"))?;
        let template = TemplateMesh::new(
            template_mesh,
            template_rec.skeleton,
            template_rec.weights,
            template_rec.canonical_pose,
        )?;
        if motion.frames.is_empty() {
            return Err(Error::data("motion.json lists no frames"));
        }
        for (f, pose) in motion.frames.iter().enumerate() {
            pose.validate(&template.skeleton)
                .map_err(|e| Error::data(format!("frame {f}: {e}")))?;
        }
        Ok(CaptureDataset {
            root: root.to_path_buf(),
            camera_ids,
            cameras,
            motion,
            template,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn n_cameras(&self) -> usize {
        self.cameras.len()
    }

    pub fn n_frames(&self) -> usize {
        self.motion.frames.len()
    }

    pub fn camera_index(&self, id: &str) -> Option<usize> {
        self.camera_ids.iter().position(|c| c == id)
    }

    pub fn pose(&self, frame: usize) -> Result<&Pose> {
        self.motion
            .frames
            .get(frame)
            .ok_or_else(|| Error::usage(format!("frame {frame} out of range")))
    }

    pub fn image_path(&self, frame: usize, camera: usize) -> PathBuf {
        image_path(&self.root, frame, &self.camera_ids[camera])
    }

    pub fn mask_path(&self, frame: usize, camera: usize) -> PathBuf {
        mask_path(&self.root, frame, &self.camera_ids[camera])
    }

    pub fn gt_mesh_path(&self, frame: usize) -> PathBuf {
        gt_mesh_path(&self.root, frame)
    }

    /// Loads a frame image, checking the dimensions against the camera.
    pub fn load_image(&self, frame: usize, camera: usize) -> Result<Image> {
        let img = Image::load_png(&self.image_path(frame, camera))?;
        let cam = &self.cameras[camera];
        if img.width != cam.width || img.height != cam.height {
            return Err(Error::data(format!(
                "frame {frame} camera {}: image is {}x{}, camera is {}x{}",
                self.camera_ids[camera], img.width, img.height, cam.width, cam.height
            )));
        }
        Ok(img)
    }

    /// Loads a frame mask, checking the dimensions against the camera.
    pub fn load_mask(&self, frame: usize, camera: usize) -> Result<Mask> {
        let mask = Mask::load_png(&self.mask_path(frame, camera))?;
        let cam = &self.cameras[camera];
        if mask.width != cam.width || mask.height != cam.height {
            return Err(Error::data(format!(
                "frame {frame} camera {}: mask is {}x{}, camera is {}x{}",
                self.camera_ids[camera], mask.width, mask.height, cam.width, cam.height
            )));
        }
        Ok(mask)
    }

    pub fn has_gt_mesh(&self, frame: usize) -> bool {
        self.gt_mesh_path(frame).is_file()
    }

    pub fn load_gt_mesh(&self, frame: usize) -> Result<TriMesh> {
        let path = self.gt_mesh_path(frame);
        if !path.is_file() {
            return Err(Error::data(format!(
                "no ground-truth mesh for frame {frame} at {}",
                path.display()
            )));
        }
        TriMesh::read_obj(&path)
    }
}

pub fn frame_dir(root: &Path, frame: usize) -> PathBuf {
    root.join("frames").join(format!("{frame:04}"))
}

pub fn image_path(root: &Path, frame: usize, camera_id: &str) -> PathBuf {
    frame_dir(root, frame).join("images").join(format!("{camera_id}.png"))
}

pub fn mask_path(root: &Path, frame: usize, camera_id: &str) -> PathBuf {
    frame_dir(root, frame).join("masks").join(format!("{camera_id}.png"))
}

pub fn gt_mesh_path(root: &Path, frame: usize) -> PathBuf {
    root.join("gt_meshes").join(format!("{frame:04}.obj"))
}

/// Checks every dataset invariant and returns the list of violations; an
/// empty list means the dataset is clean. Unreadable metadata short-circuits
/// the checks that depend on it but is itself reported, not raised.
pub fn validate_dataset(root: &Path) -> Result<Vec<String>> {
    if !root.is_dir() {
        return Err(Error::data(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut violations = Vec::new();

    let cameras: Option<Vec<(String, Camera)>> =
        match read_json::<Vec<CameraRecord>>(&root.join("cameras.json")) {
            Err(e) => {
                violations.push(format!("cameras.json: {e}"));
                None
            }
            Ok(records) => {
                let mut out = Vec::new();
                let mut ids: Vec<&str> = Vec::new();
                for rec in &records {
                    if ids.contains(&rec.id.as_str()) {
                        violations.push(format!("cameras.json: duplicate camera id {}", rec.id));
                    }
                    ids.push(&rec.id);
                    match rec.to_camera() {
                        Ok(cam) => out.push((rec.id.clone(), cam)),
                        Err(e) => violations.push(format!("cameras.json: {e}")),
                    }
                }
                if records.is_empty() {
                    violations.push("cameras.json: no cameras".to_string());
                }
                Some(out)
            }
        };

    let template: Option<TemplateMesh> =
        match read_json::<TemplateRecord>(&root.join("template.json")) {
            Err(e) => {
                violations.push(format!("template.json: {e}"));
                None
            }
            Ok(rec) => match TriMesh::read_obj(&root.join("template.obj")) {
                Err(e) => {
                    violations.push(format!("template.obj: {e}"));
                    None
                }
                Ok(mesh) => {
                    match TemplateMesh::new(mesh, rec.skeleton, rec.weights, rec.canonical_pose) {
                        Ok(t) => Some(t),
                        Err(e) => {
                            violations.push(format!("template: {e}"));
                            None
                        }
                    }
                }
            },
        };

    let motion: Option<SkeletalMotion> = match read_json(&root.join("motion.json")) {
        Err(e) => {
            violations.push(format!("motion.json: {e}"));
            None
        }
        Ok(m) => Some(m),
    };

    if let (Some(motion), Some(template)) = (&motion, &template) {
        if motion.frames.is_empty() {
            violations.push("motion.json: no frames".to_string());
        }
        for (f, pose) in motion.frames.iter().enumerate() {
            if let Err(e) = pose.validate(&template.skeleton) {
                violations.push(format!("motion.json frame {f}: {e}"));
            }
        }
    }

    if let (Some(motion), Some(cameras)) = (&motion, &cameras) {
        for f in 0..motion.frames.len() {
            for (id, cam) in cameras {
                let ipath = image_path(root, f, id);
                match Image::load_png(&ipath) {
                    Err(e) => violations.push(format!("{}: {e}", ipath.display())),
                    Ok(img) => {
                        if img.width != cam.width || img.height != cam.height {
                            violations.push(format!(
                                "{}: image is {}x{}, camera is {}x{}",
                                ipath.display(),
                                img.width,
                                img.height,
                                cam.width,
                                cam.height
                            ));
                        }
                    }
                }
                let mpath = mask_path(root, f, id);
                match Mask::load_png(&mpath) {
                    Err(e) => violations.push(format!("{}: {e}", mpath.display())),
                    Ok(mask) => {
                        if mask.width != cam.width || mask.height != cam.height {
                            violations.push(format!(
                                "{}: mask is {}x{}, camera is {}x{}",
                                mpath.display(),
                                mask.width,
                                mask.height,
                                cam.width,
                                cam.height
                            ));
                        }
                    }
                }
            }
            // Ground-truth meshes are optional, but present ones must parse.
            let gpath = gt_mesh_path(root, f);
            if gpath.is_file() {
                match TriMesh::read_obj(&gpath) {
                    Err(e) => violations.push(format!("{}: {e}", gpath.display())),
                    Ok(mesh) => {
                        if let Err(e) = mesh.validate() {
                            violations.push(format!("{}: {e}", gpath.display()));
                        }
                    }
                }
            }
        }
    }

    Ok(violations)
}
