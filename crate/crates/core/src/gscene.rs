//! Cameras, feature-augmented Gaussians and the projective math behind them.
//!
//! Camera space follows the usual vision convention: x right, y down, z
//! forward. Pixel `(x, y)` has its centre at the integer coordinate `(x, y)`.

use std::io::{Read, Write};

use diffcore::Tensor;
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_Z_NEAR: f64 = 0.01;
/// Screen-space low-pass added to every projected covariance, in px².
pub const DEFAULT_BLUR: f64 = 0.3;

const SPLF_MAGIC: &[u8; 4] = b"SPLF";
const SPLF_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Camera> {
        let mut rot = [[0.0; 3]; 3];
        for (i, row) in rot.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = rotation[(i, j)];
            }
        }
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            rotation: rot,
            translation: [translation.x, translation.y, translation.z],
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Camera> {
        let z = (target - eye).normalize();
        let y = -(up - z * up.dot(&z));
        if y.norm() < 1e-9 {
            return Err(Error::Contract(
                "look_at: up vector parallel to view direction".into(),
            ));
        }
        let y = y.normalize();
        let x = y.cross(&z);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        Camera::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            r,
            t,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.fx, self.fy, self.cx, self.cy];
        if vals.iter().any(|v| !v.is_finite()) || !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Contract(format!(
                "camera focal lengths must be positive and finite, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::Contract(format!(
                "principal point ({}, {}) outside a {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        let r = self.r();
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(orth <= 1e-6) || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(
                "camera rotation is not a proper rotation".into(),
            ));
        }
        Ok(())
    }

    pub fn r(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn t(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// `[fx, fy, cx, cy]`.
    pub fn intrinsics(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r().transpose() * self.t())
    }

    pub fn to_camera(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.r() * p + self.t()
    }

    /// Pixel coordinates and camera-space depth of a world point.
    pub fn project_point(&self, p: Vector3<f64>) -> (f64, f64, f64) {
        let c = self.to_camera(p);
        (
            self.fx * c.x / c.z + self.cx,
            self.fy * c.y / c.z + self.cy,
            c.z,
        )
    }

    /// Same pose on a grid `factor` times coarser. A coarse pixel covers a
    /// `factor × factor` block and its centre sits at the block centre.
    pub fn downscaled(&self, factor: usize) -> Camera {
        let f = factor as f64;
        let shift = (f - 1.0) / 2.0;
        Camera {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: (self.cx - shift) / f,
            cy: (self.cy - shift) / f,
            width: self.width / factor,
            height: self.height / factor,
            ..self.clone()
        }
    }

    /// Re-expresses this camera's pose in the frame of `reference`, whose
    /// own pose becomes the identity.
    pub fn relative_to(&self, reference: &Camera) -> Camera {
        let r0 = reference.r();
        let r = self.r() * r0.transpose();
        let t = self.t() - r * reference.t();
        let mut out = self.clone();
        for i in 0..3 {
            for j in 0..3 {
                out.rotation[i][j] = r[(i, j)];
            }
        }
        out.translation = [t.x, t.y, t.z];
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: [f64; 3],
    /// Log of the per-axis standard deviation.
    pub log_scale: [f64; 3],
    /// Unnormalized quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: [f64; 3],
    pub feature: Vec<f64>,
}

impl GaussianPrimitive {
    pub fn opacity(&self) -> f64 {
        1.0 / (1.0 + (-self.opacity_logit).exp())
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        build_covariance(self.log_scale, self.rotation)
    }

    fn is_finite(&self) -> bool {
        self.mean
            .iter()
            .chain(&self.log_scale)
            .chain(&self.rotation)
            .chain(std::iter::once(&self.opacity_logit))
            .chain(&self.color)
            .chain(&self.feature)
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<GaussianPrimitive>,
    pub feature_dim: usize,
    pub background: [f64; 3],
}

impl GaussianScene {
    pub fn new(
        gaussians: Vec<GaussianPrimitive>,
        feature_dim: usize,
        background: [f64; 3],
    ) -> Result<Self> {
        let scene = GaussianScene {
            gaussians,
            feature_dim,
            background,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn empty(feature_dim: usize, background: [f64; 3]) -> Self {
        GaussianScene {
            gaussians: Vec::new(),
            feature_dim,
            background,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.feature.len() != self.feature_dim {
                return Err(Error::Contract(format!(
                    "gaussian {i} has {} features, scene expects {}",
                    g.feature.len(),
                    self.feature_dim
                )));
            }
            if !g.is_finite() {
                return Err(Error::Contract(format!(
                    "gaussian {i} has a non-finite parameter"
                )));
            }
        }
        if self.background.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite background color".into()));
        }
        Ok(())
    }

    /// Writes the binary scene format. Values are stored as `f32`.
    pub fn write_splf<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        w.write_all(SPLF_MAGIC)?;
        w.write_all(&SPLF_VERSION.to_le_bytes())?;
        let count =
            u32::try_from(self.len()).map_err(|_| Error::Contract("too many gaussians".into()))?;
        w.write_all(&count.to_le_bytes())?;
        w.write_all(&(self.feature_dim as u32).to_le_bytes())?;
        for g in &self.gaussians {
            let vals = g
                .mean
                .iter()
                .chain(&g.log_scale)
                .chain(&g.rotation)
                .chain(std::iter::once(&g.opacity_logit))
                .chain(&g.color)
                .chain(&g.feature);
            for v in vals {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads the binary scene format. The format carries no background, so
    /// the caller supplies it.
    pub fn read_splf<R: Read>(mut r: R, background: [f64; 3]) -> Result<Self> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head)?;
        if &head[0..4] != SPLF_MAGIC {
            return Err(Error::Contract("not a scene file (bad magic)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != SPLF_VERSION {
            return Err(Error::Contract(format!(
                "unsupported scene file version {version}"
            )));
        }
        let count = word(8) as usize;
        let dim = word(12) as usize;
        let stride = 14 + dim;
        let mut buf = vec![0u8; 4 * stride];
        let mut gaussians = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            let v: Vec<f64> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            gaussians.push(GaussianPrimitive {
                mean: [v[0], v[1], v[2]],
                log_scale: [v[3], v[4], v[5]],
                rotation: [v[6], v[7], v[8], v[9]],
                opacity_logit: v[10],
                color: [v[11], v[12], v[13]],
                feature: v[14..].to_vec(),
            });
        }
        GaussianScene::new(gaussians, dim, background)
    }
}

fn unit_quat(q: [f64; 4]) -> Result<([f64; 4], f64)> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 1e-8) {
        return Err(Error::Numeric(format!(
            "quaternion norm {n:e} too small to normalize"
        )));
    }
    Ok(([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n))
}

fn rotmat_unit(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_rotmat(q: [f64; 4]) -> Result<Matrix3<f64>> {
    Ok(rotmat_unit(unit_quat(q)?.0))
}

/// Gradient w.r.t. the raw quaternion given the gradient `g` w.r.t. its
/// rotation matrix.
pub fn quat_to_rotmat_vjp(q: [f64; 4], g: &Matrix3<f64>) -> Result<[f64; 4]> {
    let ([w, x, y, z], n) = unit_quat(q)?;
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0);
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x);
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y);
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0);
    let gu = [
        2.0 * g.component_mul(&dw).sum(),
        2.0 * g.component_mul(&dx).sum(),
        2.0 * g.component_mul(&dy).sum(),
        2.0 * g.component_mul(&dz).sum(),
    ];
    let u = [w, x, y, z];
    let dot: f64 = gu.iter().zip(&u).map(|(a, b)| a * b).sum();
    Ok([0, 1, 2, 3].map(|i| (gu[i] - u[i] * dot) / n))
}

/// `Σ = R·diag(exp(s)²)·Rᵀ`.
pub fn build_covariance(log_scale: [f64; 3], q: [f64; 4]) -> Result<Matrix3<f64>> {
    let m = quat_to_rotmat(q)? * Matrix3::from_diagonal(&Vector3::from(log_scale.map(f64::exp)));
    Ok(m * m.transpose())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub mean2d: [f64; 2],
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    /// Set when the centre lies at or in front of the near plane's wrong side.
    pub culled: bool,
}

/// Gradient of a loss w.r.t. one projection, with the covariance gradient
/// given per unique entry `(Σxx, Σxy, Σyy)`; `Σxy` counts both off-diagonal
/// slots.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProjectionGrad {
    pub mean2d: [f64; 2],
    pub cov2d: [f64; 3],
    pub depth: f64,
}

/// Gradient w.r.t. the Gaussian's own parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeometryGrad {
    pub mean: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
}

struct ProjCache {
    t: Vector3<f64>,
    proj: Matrix2x3<f64>,
    m: Matrix3<f64>,
    rot: Matrix3<f64>,
    scale: Vector3<f64>,
}

fn project_impl(
    mean: [f64; 3],
    log_scale: [f64; 3],
    q: [f64; 4],
    cam: &Camera,
    z_near: f64,
    blur: f64,
) -> Result<(Projection, Option<ProjCache>)> {
    let w = cam.r();
    let t = w * Vector3::from(mean) + cam.t();
    if t.z <= z_near {
        let p = Projection {
            mean2d: [f64::NAN; 2],
            cov2d: Matrix2::zeros(),
            depth: t.z,
            culled: true,
        };
        return Ok((p, None));
    }
    let rot = quat_to_rotmat(q)?;
    let scale = Vector3::from(log_scale.map(f64::exp));
    let m = rot * Matrix3::from_diagonal(&scale);
    let sigma = m * m.transpose();
    let iz = 1.0 / t.z;
    let j = Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz * iz,
    );
    let proj = j * w;
    let mut cov = proj * sigma * proj.transpose();
    cov[(0, 0)] += blur;
    cov[(1, 1)] += blur;
    let cov = (cov + cov.transpose()) * 0.5;
    let p = Projection {
        mean2d: [cam.fx * t.x * iz + cam.cx, cam.fy * t.y * iz + cam.cy],
        cov2d: cov,
        depth: t.z,
        culled: false,
    };
    Ok((
        p,
        Some(ProjCache {
            t,
            proj,
            m,
            rot,
            scale,
        }),
    ))
}

/// EWA projection of a single Gaussian: `Σ2d = J·W·Σ·Wᵀ·Jᵀ + blur·I`.
pub fn project_gaussian(
    g: &GaussianPrimitive,
    cam: &Camera,
    z_near: f64,
    blur: f64,
) -> Result<Projection> {
    Ok(project_impl(g.mean, g.log_scale, g.rotation, cam, z_near, blur)?.0)
}

pub(crate) fn project_raw(
    mean: [f64; 3],
    log_scale: [f64; 3],
    q: [f64; 4],
    cam: &Camera,
    z_near: f64,
    blur: f64,
) -> Result<Projection> {
    Ok(project_impl(mean, log_scale, q, cam, z_near, blur)?.0)
}

/// Vector-Jacobian product of [`project_gaussian`]. Culled Gaussians get a
/// zero gradient.
pub fn project_gaussian_vjp(
    mean: [f64; 3],
    log_scale: [f64; 3],
    q: [f64; 4],
    cam: &Camera,
    z_near: f64,
    grad: &ProjectionGrad,
) -> Result<GeometryGrad> {
    let (_, cache) = project_impl(mean, log_scale, q, cam, z_near, 0.0)?;
    let Some(c) = cache else {
        return Ok(GeometryGrad::default());
    };
    let [ga, gb, gc] = grad.cov2d;
    let g2 = Matrix2::new(ga, 0.5 * gb, 0.5 * gb, gc);
    let sigma = c.m * c.m.transpose();
    let d_proj = 2.0 * g2 * c.proj * sigma;
    let g3 = c.proj.transpose() * g2 * c.proj;
    let w = cam.r();
    let dj = d_proj * w.transpose();

    let (tx, ty, tz) = (c.t.x, c.t.y, c.t.z);
    let iz = 1.0 / tz;
    let iz2 = iz * iz;
    let (fx, fy) = (cam.fx, cam.fy);
    let mut dt = Vector3::zeros();
    dt.x += dj[(0, 2)] * (-fx * iz2);
    dt.y += dj[(1, 2)] * (-fy * iz2);
    dt.z += dj[(0, 0)] * (-fx * iz2)
        + dj[(0, 2)] * (2.0 * fx * tx * iz2 * iz)
        + dj[(1, 1)] * (-fy * iz2)
        + dj[(1, 2)] * (2.0 * fy * ty * iz2 * iz);
    let [du, dv] = grad.mean2d;
    dt.x += du * fx * iz;
    dt.y += dv * fy * iz;
    dt.z += -du * fx * tx * iz2 - dv * fy * ty * iz2;
    dt.z += grad.depth;
    let dmean = w.transpose() * dt;

    let dm = 2.0 * g3 * c.m;
    let drot = dm * Matrix3::from_diagonal(&c.scale);
    let mut dls = [0.0; 3];
    for (j, d) in dls.iter_mut().enumerate() {
        let ds: f64 = (0..3).map(|i| c.rot[(i, j)] * dm[(i, j)]).sum();
        *d = ds * c.scale[j];
    }
    Ok(GeometryGrad {
        mean: [dmean.x, dmean.y, dmean.z],
        log_scale: dls,
        rotation: quat_to_rotmat_vjp(q, &drot)?,
    })
}

fn pixel_rays(cam: &Camera) -> Vec<Vector3<f64>> {
    let rt = cam.r().transpose();
    let mut rays = Vec::with_capacity(cam.width * cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let d = Vector3::new(
                (x as f64 - cam.cx) / cam.fx,
                (y as f64 - cam.cy) / cam.fy,
                1.0,
            );
            rays.push(rt * d);
        }
    }
    rays
}

/// World-space point for every pixel of a row-major `H×W` depth map.
pub fn unproject_depth(depth: &[f64], cam: &Camera) -> Result<Vec<[f64; 3]>> {
    if depth.len() != cam.width * cam.height {
        return Err(Error::Contract(format!(
            "depth map has {} values, camera is {}x{}",
            depth.len(),
            cam.width,
            cam.height
        )));
    }
    if let Some(i) = depth.iter().position(|d| !(*d > 0.0)) {
        return Err(Error::Contract(format!(
            "non-positive depth {} at pixel ({}, {})",
            depth[i],
            i % cam.width,
            i / cam.width
        )));
    }
    let origin = cam.center();
    Ok(pixel_rays(cam)
        .iter()
        .zip(depth)
        .map(|(r, d)| {
            let p = origin + r * *d;
            [p.x, p.y, p.z]
        })
        .collect())
}

/// Differentiable [`unproject_depth`]: `depth` is `[H, W]` (or `[1, H, W]`),
/// the result is `[H·W, 3]`.
pub fn unproject_depth_tensor(depth: &Tensor, cam: &Camera) -> Result<Tensor> {
    let n = cam.width * cam.height;
    if depth.numel() != n {
        return Err(Error::Contract(format!(
            "depth map shape {:?} does not match a {}x{} camera",
            depth.shape(),
            cam.width,
            cam.height
        )));
    }
    if let Some(i) = depth.data().iter().position(|d| !(*d > 0.0)) {
        return Err(Error::Contract(format!(
            "non-positive depth at pixel ({}, {})",
            i % cam.width,
            i / cam.width
        )));
    }
    let rays: Vec<f64> = pixel_rays(cam)
        .iter()
        .flat_map(|r| [r.x, r.y, r.z])
        .collect();
    let rays = Tensor::new(rays, &[n, 3])?;
    let o = cam.center();
    let origin = Tensor::new(vec![o.x, o.y, o.z], &[3])?;
    Ok(depth.reshape(&[n, 1])?.mul(&rays)?.add(&origin)?)
}
