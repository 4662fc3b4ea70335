//! Synthetic scenes (textured Gaussian clusters over a ground plane), their
//! on-disk layout, and loading them back as training views.

use std::fs;
use std::path::{Path, PathBuf};

use diffcore::Tensor;
use featsplat::gscene::{Camera, GaussianPrimitive, GaussianScene};
use featsplat::rasterizer::{naive_rasterize, RasterConfig};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, SynthConfig};
use crate::error::{Error, Result};

/// Fraction of Gaussians every camera must see.
pub const MIN_VISIBLE: f64 = 0.5;
const PLACEMENT_ATTEMPTS: usize = 64;

pub struct SyntheticScene {
    pub scene: GaussianScene,
    pub cameras: Vec<Camera>,
    /// `[3, H, W]` per camera, values in [0,1].
    pub images: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CameraEntry {
    pub image: String,
    #[serde(rename = "K")]
    pub k: [[f64; 3]; 3],
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl CameraEntry {
    pub fn from_camera(cam: &Camera, image: String) -> Self {
        CameraEntry {
            image,
            k: [[cam.fx, 0.0, cam.cx], [0.0, cam.fy, cam.cy], [0.0, 0.0, 1.0]],
            rotation: cam.rotation,
            translation: cam.translation,
            width: cam.width,
            height: cam.height,
        }
    }

    pub fn camera(&self) -> Result<Camera> {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        let t = Vector3::from(self.translation);
        Ok(Camera::new(
            self.k[0][0],
            self.k[1][1],
            self.k[0][2],
            self.k[1][2],
            r,
            t,
            self.width,
            self.height,
        )?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CamerasFile {
    pub background: [f64; 3],
    pub views: Vec<CameraEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetInfo {
    pub seed: u64,
    pub num_scenes: usize,
    pub gaussians_per_scene: usize,
    pub views_per_scene: usize,
    pub resolution: usize,
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let q: [f64; 4] = [
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    ];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
    q.map(|v| v / n)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Ground plane at y = 1 (y points down) and `clusters` blobs around the
/// origin, all with smooth per-cluster colour plus texture noise.
fn build_gaussians(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<GaussianPrimitive> {
    let n = cfg.gaussians_per_scene;
    let ground = ((n as f64 * cfg.ground_fraction) as usize).min(n);
    let side = (ground as f64).sqrt().floor() as usize;
    let mut out = Vec::with_capacity(n);
    let extent = 3.0;
    let c0: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let c1: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    if side > 0 {
        let spacing = 2.0 * extent / side as f64;
        for i in 0..side {
            for j in 0..side {
                let checker = ((i * 4 / side) + (j * 4 / side)) % 2 == 0;
                let base = if checker { c0 } else { c1 };
                out.push(GaussianPrimitive {
                    mean: [
                        -extent + (i as f64 + 0.5) * spacing,
                        1.0,
                        -extent + (j as f64 + 0.5) * spacing,
                    ],
                    log_scale: [(0.7 * spacing).ln(), (0.01f64).ln(), (0.7 * spacing).ln()],
                    rotation: [1.0, 0.0, 0.0, 0.0],
                    opacity_logit: logit(0.95),
                    color: base.map(|c| (c + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0)),
                    feature: Vec::new(),
                });
            }
        }
    }
    let rest = n - out.len();
    let k = cfg.clusters.max(1);
    let centres: Vec<([f64; 3], [f64; 3], f64)> = (0..k)
        .map(|_| {
            (
                [rng.gen_range(-1.0..1.0), rng.gen_range(-0.4..0.7), rng.gen_range(-1.0..1.0)],
                [rng.gen(), rng.gen(), rng.gen()],
                rng.gen_range(0.2..0.4),
            )
        })
        .collect();
    for i in 0..rest {
        let (c, col, spread) = centres[i % k];
        out.push(GaussianPrimitive {
            mean: [
                c[0] + rng.gen_range(-1.0..1.0) * spread,
                (c[1] + rng.gen_range(-1.0..1.0) * spread).min(0.95),
                c[2] + rng.gen_range(-1.0..1.0) * spread,
            ],
            log_scale: [
                rng.gen_range(0.03f64..0.1).ln(),
                rng.gen_range(0.03f64..0.1).ln(),
                rng.gen_range(0.03f64..0.1).ln(),
            ],
            rotation: random_rotation(rng),
            opacity_logit: logit(rng.gen_range(0.6..0.95)),
            color: col.map(|v| (v + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0)),
            feature: Vec::new(),
        });
    }
    out
}

/// Cameras on an arc of azimuths facing the origin from −z, slightly
/// above the scene, each with jittered azimuth and elevation.
fn arc_cameras(cfg: &SynthConfig, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Camera>> {
    let v = cfg.views_per_scene;
    let focal = (size as f64 / 2.0) / (cfg.fov_degrees.to_radians() / 2.0).tan();
    (0..v)
        .map(|j| {
            let t = if v == 1 { 0.5 } else { j as f64 / (v - 1) as f64 };
            let jit = cfg.jitter_degrees;
            let az = (cfg.arc_degrees * (t - 0.5) + rng.gen_range(-jit..=jit)).to_radians();
            let el = (20.0 + rng.gen_range(-jit..=jit)).to_radians();
            let eye = Vector3::new(
                cfg.radius * el.cos() * az.sin(),
                -cfg.radius * el.sin(),
                -cfg.radius * el.cos() * az.cos(),
            );
            Ok(Camera::look_at(
                eye,
                Vector3::new(0.0, 0.3, 0.0),
                Vector3::new(0.0, -1.0, 0.0),
                focal,
                size,
                size,
            )?)
        })
        .collect()
}

/// Fraction of Gaussian centres that land inside the image in front of the camera.
pub fn visible_fraction(scene: &GaussianScene, cam: &Camera) -> f64 {
    let seen = scene
        .gaussians
        .iter()
        .filter(|g| {
            let (u, v, z) = cam.project_point(Vector3::from(g.mean));
            z > 0.1 && u >= -0.5 && v >= -0.5 && u < cam.width as f64 - 0.5 && v < cam.height as f64 - 0.5
        })
        .count();
    seen as f64 / scene.len().max(1) as f64
}

/// One scene with cameras that each see at least half of the Gaussians,
/// rendered with the reference rasterizer.
pub fn synth_scene(cfg: &SynthConfig, size: usize, background: [f64; 3], rng: &mut ChaCha8Rng) -> Result<SyntheticScene> {
    if cfg.gaussians_per_scene == 0 || cfg.views_per_scene == 0 {
        return Err(Error::Contract("scenes need at least one Gaussian and one view".into()));
    }
    for _ in 0..PLACEMENT_ATTEMPTS {
        let scene = GaussianScene::new(build_gaussians(cfg, rng), 0, background)?;
        let cameras = arc_cameras(cfg, size, rng)?;
        if cameras.iter().all(|c| visible_fraction(&scene, c) >= MIN_VISIBLE) {
            let rc = RasterConfig::default();
            let images = cameras
                .iter()
                .map(|c| Ok(naive_rasterize(&scene, c, &rc)?.color))
                .collect::<Result<Vec<_>>>()?;
            return Ok(SyntheticScene { scene, cameras, images });
        }
    }
    Err(Error::Config(format!(
        "no camera arc saw {MIN_VISIBLE} of the Gaussians in {PLACEMENT_ATTEMPTS} attempts"
    )))
}

pub fn scene_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("scene_{i:03}"))
}

pub fn write_png(path: &Path, rgb: &[f64], w: usize, h: usize) -> Result<()> {
    let hw = w * h;
    let mut buf = vec![0u8; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            buf[3 * p + c] = (rgb[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Contract("image buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Channel-major `[3, H, W]` values in [0,1] from a PNG.
pub fn read_png(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = w * h;
    let mut out = vec![0.0; 3 * hw];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * hw + p] = px[c] as f64 / 255.0;
        }
    }
    Ok((out, w, h))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `synth.num_scenes` scenes under `root`. Images are rendered at
/// the detail resolution. Identical inputs give byte-identical output.
pub fn synth_dataset(root: &Path, cfg: &PipelineConfig, seed: u64) -> Result<DatasetInfo> {
    let s = &cfg.synth;
    if s.num_scenes == 0 {
        return Err(Error::Contract("num_scenes must be positive".into()));
    }
    let size = cfg.resolution.detail;
    mkdir(root)?;
    for i in 0..s.num_scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let sc = synth_scene(s, size, cfg.background, &mut rng)?;
        let dir = scene_dir(root, i);
        mkdir(&dir.join("images"))?;
        let mut views = Vec::with_capacity(sc.cameras.len());
        for (j, (cam, img)) in sc.cameras.iter().zip(&sc.images).enumerate() {
            let name = format!("view_{j:02}.png");
            write_png(&dir.join("images").join(&name), img, size, size)?;
            views.push(CameraEntry::from_camera(cam, format!("images/{name}")));
        }
        write_json(
            &dir.join("cameras.json"),
            &CamerasFile {
                background: cfg.background,
                views,
            },
        )?;
        let path = dir.join("scene.splf");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        sc.scene.write_splf(std::io::BufWriter::new(file))?;
    }
    let info = DatasetInfo {
        seed,
        num_scenes: s.num_scenes,
        gaussians_per_scene: s.gaussians_per_scene,
        views_per_scene: s.views_per_scene,
        resolution: size,
    };
    write_json(&root.join("dataset.json"), &info)?;
    Ok(info)
}

/// One camera view at both resolutions.
#[derive(Clone, Debug)]
pub struct View {
    /// `[3, Hd, Wd]` at the detail resolution.
    pub image_hi: Tensor,
    pub cam_hi: Camera,
    /// `[3, H, W]` at the backbone resolution.
    pub image: Tensor,
    pub cam: Camera,
}

#[derive(Clone, Debug)]
pub struct SceneData {
    pub name: String,
    pub background: [f64; 3],
    pub views: Vec<View>,
}

impl SceneData {
    /// Loads a scene directory; images are box-filtered down to `backbone_res`.
    pub fn load(dir: &Path, backbone_res: usize) -> Result<SceneData> {
        let cams_path = dir.join("cameras.json");
        let text = fs::read_to_string(&cams_path).map_err(|e| Error::io(&cams_path, e))?;
        let file: CamerasFile = serde_json::from_str(&text)?;
        let mut views = Vec::with_capacity(file.views.len());
        for entry in &file.views {
            let (data, w, h) = read_png(&dir.join(&entry.image))?;
            if (w, h) != (entry.width, entry.height) {
                return Err(Error::Contract(format!(
                    "{} is {w}x{h}, cameras.json says {}x{}",
                    entry.image, entry.width, entry.height
                )));
            }
            if w % backbone_res != 0 || h != w {
                return Err(Error::Contract(format!(
                    "{w}x{h} images cannot be reduced to {backbone_res}x{backbone_res}"
                )));
            }
            let factor = w / backbone_res;
            let cam_hi = entry.camera()?;
            let image_hi = Tensor::new(data, &[3, h, w])?;
            let image = image_hi.unsqueeze(0)?.avg_pool2d(factor)?.reshape(&[3, backbone_res, backbone_res])?;
            views.push(View {
                cam: cam_hi.downscaled(factor),
                image_hi,
                cam_hi,
                image,
            });
        }
        Ok(SceneData {
            name: dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            background: file.background,
            views,
        })
    }

    pub fn ground_truth(dir: &Path, background: [f64; 3]) -> Result<GaussianScene> {
        let path = dir.join("scene.splf");
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(GaussianScene::read_splf(std::io::BufReader::new(file), background)?)
    }
}

/// Scene directories of a dataset, split into training and held-out scenes.
pub struct Dataset {
    pub root: PathBuf,
    pub info: DatasetInfo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            _ => Err(Error::Config(format!("unknown split {s}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::All => "all",
        }
    }
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let path = root.join("dataset.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            info: serde_json::from_str(&text)?,
        })
    }

    /// Scene indices of `split`; the last `test_scenes` scenes are held out.
    pub fn indices(&self, split: Split, test_scenes: usize) -> Result<Vec<usize>> {
        let n = self.info.num_scenes;
        if split == Split::Train && test_scenes >= n {
            return Err(Error::Config(format!("{test_scenes} held-out scenes leave none of {n} for training")));
        }
        let cut = n.saturating_sub(test_scenes);
        Ok(match split {
            Split::Train => (0..cut).collect(),
            Split::Test => (cut..n).collect(),
            Split::All => (0..n).collect(),
        })
    }

    pub fn load(&self, split: Split, cfg: &PipelineConfig) -> Result<Vec<SceneData>> {
        self.indices(split, cfg.test_scenes)?
            .into_iter()
            .map(|i| SceneData::load(&scene_dir(&self.root, i), cfg.resolution.backbone))
            .collect()
    }
}
