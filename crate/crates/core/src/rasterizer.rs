//! Tile-based differentiable splat rasterizer.
//!
//! Two passes share one compositing kernel: a full-resolution pass over
//! `(r, g, b, z)` and an independent feature pass on a grid `feature_downsample`
//! times coarser. A Gaussian touches a pixel only inside its 3σ screen
//! ellipse, which makes tiling invisible in the output. Between 2.83σ and 3σ
//! the falloff is faded out by a smoothstep so the image stays continuous in
//! the Gaussian parameters.

use diffcore::{tape, Tensor};
use nalgebra::Matrix2;

use crate::error::{Error, Result};
use crate::gscene::{
    project_gaussian_vjp, project_raw, Camera, GaussianPrimitive, GaussianScene, ProjectionGrad,
    DEFAULT_BLUR, DEFAULT_Z_NEAR,
};

/// Squared Mahalanobis radius of the support ellipse (3σ).
pub const SUPPORT_RADIUS_SQ: f64 = 9.0;
/// Squared radius where the support window starts to fade.
pub const SUPPORT_TAPER_START: f64 = 8.0;
const SINGULAR_DET: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct RasterConfig {
    pub tile_size: usize,
    /// Traversal stops once transmittance drops below this value.
    pub t_cutoff: f64,
    pub alpha_max: f64,
    pub z_near: f64,
    pub blur: f64,
    pub feature_downsample: usize,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            tile_size: 16,
            t_cutoff: 1e-4,
            alpha_max: 0.99,
            z_near: DEFAULT_Z_NEAR,
            blur: DEFAULT_BLUR,
            feature_downsample: 8,
        }
    }
}

/// Flat, structure-of-arrays Gaussian parameters (pre-activation).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatParams {
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub quats: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<f64>,
    pub features: Vec<f64>,
    pub feature_dim: usize,
}

impl SplatParams {
    pub fn from_scene(scene: &GaussianScene) -> Self {
        let mut p = SplatParams {
            feature_dim: scene.feature_dim,
            ..Default::default()
        };
        for g in &scene.gaussians {
            p.means.extend_from_slice(&g.mean);
            p.log_scales.extend_from_slice(&g.log_scale);
            p.quats.extend_from_slice(&g.rotation);
            p.opacity_logits.push(g.opacity_logit);
            p.colors.extend_from_slice(&g.color);
            p.features.extend_from_slice(&g.feature);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logits.is_empty()
    }

    pub fn gaussian(&self, i: usize) -> GaussianPrimitive {
        let d = self.feature_dim;
        GaussianPrimitive {
            mean: self.mean(i),
            log_scale: self.log_scale(i),
            rotation: self.quat(i),
            opacity_logit: self.opacity_logits[i],
            color: [
                self.colors[3 * i],
                self.colors[3 * i + 1],
                self.colors[3 * i + 2],
            ],
            feature: self.features[i * d..(i + 1) * d].to_vec(),
        }
    }

    fn mean(&self, i: usize) -> [f64; 3] {
        [
            self.means[3 * i],
            self.means[3 * i + 1],
            self.means[3 * i + 2],
        ]
    }

    fn log_scale(&self, i: usize) -> [f64; 3] {
        [
            self.log_scales[3 * i],
            self.log_scales[3 * i + 1],
            self.log_scales[3 * i + 2],
        ]
    }

    fn quat(&self, i: usize) -> [f64; 4] {
        [
            self.quats[4 * i],
            self.quats[4 * i + 1],
            self.quats[4 * i + 2],
            self.quats[4 * i + 3],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let d = self.feature_dim;
        let lens = [
            ("means", self.means.len(), 3 * n),
            ("log_scales", self.log_scales.len(), 3 * n),
            ("quats", self.quats.len(), 4 * n),
            ("colors", self.colors.len(), 3 * n),
            ("features", self.features.len(), d * n),
        ];
        for (name, got, want) in lens {
            if got != want {
                return Err(Error::Contract(format!(
                    "{name} holds {got} values, expected {want} for {n} gaussians"
                )));
            }
        }
        for i in 0..n {
            let finite = self.means[3 * i..3 * i + 3]
                .iter()
                .chain(&self.log_scales[3 * i..3 * i + 3])
                .chain(&self.quats[4 * i..4 * i + 4])
                .chain(std::iter::once(&self.opacity_logits[i]))
                .chain(&self.colors[3 * i..3 * i + 3])
                .chain(&self.features[d * i..d * (i + 1)])
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::Contract(format!(
                    "gaussian {i} has a NaN or infinite parameter"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub culled: usize,
    pub singular: usize,
}

/// Rendered images, channel-major: `color` is `[3, H, W]`, `alpha` and
/// `depth` are `[H, W]`, `feature` is `[D, h, w]` on the coarse grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
    pub feature_width: usize,
    pub feature_height: usize,
    pub feature_dim: usize,
    pub feature: Vec<f64>,
    pub feature_alpha: Vec<f64>,
    pub stats: RenderStats,
}

impl RenderOutput {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let hw = self.width * self.height;
        let i = y * self.width + x;
        [self.color[i], self.color[hw + i], self.color[2 * hw + i]]
    }
}

/// Pixel rectangle `[x0, x1) × [y0, y1)` with its depth-sorted Gaussians.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileWorkItem {
    pub tile: (usize, usize),
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub gaussians: Vec<u32>,
}

#[derive(Clone, Copy, Debug)]
struct Splat {
    u: f64,
    v: f64,
    conic: [f64; 3],
    cov_diag: [f64; 2],
    opacity: f64,
    depth: f64,
}

#[derive(Clone, Debug)]
struct Prepared {
    cam: Camera,
    splats: Vec<Option<Splat>>,
    order: Vec<u32>,
    stats: RenderStats,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn prepare(params: &SplatParams, cam: &Camera, cfg: &RasterConfig) -> Result<Prepared> {
    let mut stats = RenderStats::default();
    let mut splats = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let p = project_raw(
            params.mean(i),
            params.log_scale(i),
            params.quat(i),
            cam,
            cfg.z_near,
            cfg.blur,
        )?;
        if p.culled {
            stats.culled += 1;
            splats.push(None);
            continue;
        }
        let c = p.cov2d;
        let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(0, 1)];
        if !(det >= SINGULAR_DET) {
            stats.singular += 1;
            splats.push(None);
            continue;
        }
        splats.push(Some(Splat {
            u: p.mean2d[0],
            v: p.mean2d[1],
            conic: [c[(1, 1)] / det, -c[(0, 1)] / det, c[(0, 0)] / det],
            cov_diag: [c[(0, 0)], c[(1, 1)]],
            opacity: sigmoid(params.opacity_logits[i]),
            depth: p.depth,
        }));
    }
    let mut order: Vec<u32> = (0..params.len() as u32)
        .filter(|&i| splats[i as usize].is_some())
        .collect();
    order.sort_by(|&a, &b| {
        let da = splats[a as usize].expect("visible").depth;
        let db = splats[b as usize].expect("visible").depth;
        da.total_cmp(&db).then(a.cmp(&b))
    });
    Ok(Prepared {
        cam: cam.clone(),
        splats,
        order,
        stats,
    })
}

fn bin_tiles(prep: &Prepared, width: usize, height: usize, tile: usize) -> Vec<TileWorkItem> {
    let tx = width.div_ceil(tile);
    let ty = height.div_ceil(tile);
    let mut tiles: Vec<TileWorkItem> = (0..tx * ty)
        .map(|i| {
            let (cx, cy) = (i % tx, i / tx);
            TileWorkItem {
                tile: (cx, cy),
                x0: cx * tile,
                y0: cy * tile,
                x1: ((cx + 1) * tile).min(width),
                y1: ((cy + 1) * tile).min(height),
                gaussians: Vec::new(),
            }
        })
        .collect();
    if width == 0 || height == 0 {
        return tiles;
    }
    for &gi in &prep.order {
        let s = prep.splats[gi as usize].expect("visible");
        // half a pixel of slack so rounding never drops a boundary pixel
        let rx = 3.0 * s.cov_diag[0].sqrt() + 0.5;
        let ry = 3.0 * s.cov_diag[1].sqrt() + 0.5;
        let (xlo, xhi) = (s.u - rx, s.u + rx);
        let (ylo, yhi) = (s.v - ry, s.v + ry);
        if xhi < 0.0 || yhi < 0.0 || xlo > (width - 1) as f64 || ylo > (height - 1) as f64 {
            continue;
        }
        let px0 = xlo.max(0.0).ceil() as usize;
        let px1 = (xhi.floor() as usize).min(width - 1);
        let py0 = ylo.max(0.0).ceil() as usize;
        let py1 = (yhi.floor() as usize).min(height - 1);
        if px0 > px1 || py0 > py1 {
            continue;
        }
        for cy in py0 / tile..=py1 / tile {
            for cx in px0 / tile..=px1 / tile {
                tiles[cy * tx + cx].gaussians.push(gi);
            }
        }
    }
    tiles
}

/// Every pixel in one rectangle, all visible Gaussians in depth order.
fn single_tile(prep: &Prepared, width: usize, height: usize) -> Vec<TileWorkItem> {
    vec![TileWorkItem {
        tile: (0, 0),
        x0: 0,
        y0: 0,
        x1: width,
        y1: height,
        gaussians: prep.order.clone(),
    }]
}

/// Falloff `exp(-p/2)·window(p)` and its derivative in `p`.
#[inline]
pub fn falloff(power: f64) -> (f64, f64) {
    let e = (-0.5 * power).exp();
    if power <= SUPPORT_TAPER_START {
        return (e, -0.5 * e);
    }
    let width = SUPPORT_RADIUS_SQ - SUPPORT_TAPER_START;
    let t = ((power - SUPPORT_TAPER_START) / width).min(1.0);
    let w = 1.0 - t * t * (3.0 - 2.0 * t);
    let dw = -6.0 * t * (1.0 - t) / width;
    (e * w, e * (dw - 0.5 * w))
}

#[derive(Clone, Copy)]
struct Hit {
    gi: usize,
    alpha: f64,
    falloff: f64,
    dfalloff: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
    t: f64,
}

/// Walks one pixel's list front to back. Returns the final transmittance.
#[inline]
fn traverse(
    prep: &Prepared,
    list: &[u32],
    px: f64,
    py: f64,
    cfg_alpha_max: f64,
    t_cutoff: f64,
    mut visit: impl FnMut(Hit),
) -> f64 {
    let mut t = 1.0;
    for &gi in list {
        let s = prep.splats[gi as usize].as_ref().expect("visible");
        let dx = px - s.u;
        let dy = py - s.v;
        let [a, b, c] = s.conic;
        let power = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        if power > SUPPORT_RADIUS_SQ {
            continue;
        }
        let (falloff, dfalloff) = falloff(power);
        let raw = s.opacity * falloff;
        let clamped = raw > cfg_alpha_max;
        let alpha = if clamped { cfg_alpha_max } else { raw };
        visit(Hit {
            gi: gi as usize,
            alpha,
            falloff,
            dfalloff,
            clamped,
            dx,
            dy,
            t,
        });
        t *= 1.0 - alpha;
        if t < t_cutoff {
            break;
        }
    }
    t
}

struct PassResult {
    image: Vec<f64>,
    alpha: Vec<f64>,
}

fn forward_pass(
    prep: &Prepared,
    tiles: &[TileWorkItem],
    values: &[f64],
    k: usize,
    bg: &[f64],
    cfg: &RasterConfig,
    t_cutoff: f64,
) -> PassResult {
    let (w, h) = (prep.cam.width, prep.cam.height);
    let hw = w * h;
    let mut image = vec![0.0; k * hw];
    let mut alpha = vec![0.0; hw];
    let mut acc = vec![0.0; k];
    for tile in tiles {
        for y in tile.y0..tile.y1 {
            for x in tile.x0..tile.x1 {
                acc.iter_mut().for_each(|a| *a = 0.0);
                let t_final = traverse(
                    prep,
                    &tile.gaussians,
                    x as f64,
                    y as f64,
                    cfg.alpha_max,
                    t_cutoff,
                    |hit| {
                        let wgt = hit.alpha * hit.t;
                        let v = &values[hit.gi * k..(hit.gi + 1) * k];
                        for (a, vi) in acc.iter_mut().zip(v) {
                            *a += vi * wgt;
                        }
                    },
                );
                let i = y * w + x;
                for c in 0..k {
                    image[c * hw + i] = acc[c] + bg[c] * t_final;
                }
                alpha[i] = 1.0 - t_final;
            }
        }
    }
    PassResult { image, alpha }
}

/// Per-Gaussian gradients of one compositing pass.
struct PassGrads {
    values: Vec<f64>,
    mean2d: Vec<[f64; 2]>,
    conic: Vec<[f64; 3]>,
    opacity: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn backward_pass(
    prep: &Prepared,
    tiles: &[TileWorkItem],
    values: &[f64],
    k: usize,
    bg: &[f64],
    cfg: &RasterConfig,
    t_cutoff: f64,
    g_image: &[f64],
    g_alpha: &[f64],
) -> PassGrads {
    let n = prep.splats.len();
    let (w, h) = (prep.cam.width, prep.cam.height);
    let hw = w * h;
    let mut out = PassGrads {
        values: vec![0.0; n * k],
        mean2d: vec![[0.0; 2]; n],
        conic: vec![[0.0; 3]; n],
        opacity: vec![0.0; n],
    };
    let mut hits: Vec<Hit> = Vec::new();
    let mut suffix = vec![0.0; k];
    let mut gc = vec![0.0; k];
    for tile in tiles {
        for y in tile.y0..tile.y1 {
            for x in tile.x0..tile.x1 {
                let i = y * w + x;
                for c in 0..k {
                    gc[c] = g_image[c * hw + i];
                }
                let ga = g_alpha[i];
                if ga == 0.0 && gc.iter().all(|v| *v == 0.0) {
                    continue;
                }
                hits.clear();
                let t_final = traverse(
                    prep,
                    &tile.gaussians,
                    x as f64,
                    y as f64,
                    cfg.alpha_max,
                    t_cutoff,
                    |hit| hits.push(hit),
                );
                for c in 0..k {
                    suffix[c] = bg[c] * t_final;
                }
                for hit in hits.iter().rev() {
                    let v = &values[hit.gi * k..(hit.gi + 1) * k];
                    let wgt = hit.alpha * hit.t;
                    let inv = 1.0 / (1.0 - hit.alpha);
                    let mut d_alpha = ga * t_final * inv;
                    for c in 0..k {
                        out.values[hit.gi * k + c] += gc[c] * wgt;
                        d_alpha += gc[c] * (v[c] * hit.t - suffix[c] * inv);
                        suffix[c] += v[c] * wgt;
                    }
                    if hit.clamped {
                        continue;
                    }
                    let s = prep.splats[hit.gi].as_ref().expect("visible");
                    out.opacity[hit.gi] += d_alpha * hit.falloff;
                    let d_power = d_alpha * s.opacity * hit.dfalloff;
                    let [a, b, c] = s.conic;
                    let m = &mut out.mean2d[hit.gi];
                    m[0] += d_power * -2.0 * (a * hit.dx + b * hit.dy);
                    m[1] += d_power * -2.0 * (b * hit.dx + c * hit.dy);
                    let q = &mut out.conic[hit.gi];
                    q[0] += d_power * hit.dx * hit.dx;
                    q[1] += d_power * 2.0 * hit.dx * hit.dy;
                    q[2] += d_power * hit.dy * hit.dy;
                }
            }
        }
    }
    out
}

/// Saved forward state needed by [`RasterState::backward`].
pub struct RasterState {
    params: SplatParams,
    cfg: RasterConfig,
    background: [f64; 3],
    t_cutoff: f64,
    saved: Option<Saved>,
}

struct Saved {
    full: Prepared,
    full_tiles: Vec<TileWorkItem>,
    coarse: Prepared,
    coarse_tiles: Vec<TileWorkItem>,
    transmittance: Vec<f64>,
}

/// Upstream gradients, shaped like the matching [`RenderOutput`] fields.
/// Missing entries count as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct RenderGrads<'a> {
    pub color: Option<&'a [f64]>,
    pub alpha: Option<&'a [f64]>,
    pub depth: Option<&'a [f64]>,
    pub feature: Option<&'a [f64]>,
}

/// Gradients w.r.t. every pre-activation Gaussian parameter, laid out like
/// [`SplatParams`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatGrads {
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub quats: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<f64>,
    pub features: Vec<f64>,
}

fn color_depth_values(params: &SplatParams, prep: &Prepared) -> Vec<f64> {
    let mut v = vec![0.0; params.len() * 4];
    for i in 0..params.len() {
        v[4 * i..4 * i + 3].copy_from_slice(&params.colors[3 * i..3 * i + 3]);
        v[4 * i + 3] = prep.splats[i].map_or(0.0, |s| s.depth);
    }
    v
}

fn check_image_dims(cam: &Camera, cfg: &RasterConfig) -> Result<()> {
    cam.validate()?;
    if cfg.tile_size == 0 || cfg.feature_downsample == 0 {
        return Err(Error::Config(
            "tile size and feature downsample must be positive".into(),
        ));
    }
    if cam.width % cfg.feature_downsample != 0 || cam.height % cfg.feature_downsample != 0 {
        return Err(Error::Contract(format!(
            "{}x{} image is not divisible by the feature downsample {}",
            cam.width, cam.height, cfg.feature_downsample
        )));
    }
    Ok(())
}

fn run(
    params: SplatParams,
    cam: &Camera,
    background: [f64; 3],
    cfg: &RasterConfig,
    naive: bool,
) -> Result<(RenderOutput, RasterState)> {
    check_image_dims(cam, cfg)?;
    params.validate()?;
    let t_cutoff = if naive { 0.0 } else { cfg.t_cutoff };
    let (w, h) = (cam.width, cam.height);
    let full = prepare(&params, cam, cfg)?;
    let coarse_cam = cam.downscaled(cfg.feature_downsample);
    let coarse = prepare(&params, &coarse_cam, cfg)?;
    let (full_tiles, coarse_tiles) = if naive {
        (
            single_tile(&full, w, h),
            single_tile(&coarse, coarse_cam.width, coarse_cam.height),
        )
    } else {
        (
            bin_tiles(&full, w, h, cfg.tile_size),
            bin_tiles(&coarse, coarse_cam.width, coarse_cam.height, cfg.tile_size),
        )
    };

    let values = color_depth_values(&params, &full);
    let bg4 = [background[0], background[1], background[2], 0.0];
    let main = forward_pass(&full, &full_tiles, &values, 4, &bg4, cfg, t_cutoff);
    let d = params.feature_dim;
    let zeros = vec![0.0; d];
    let feat = forward_pass(
        &coarse,
        &coarse_tiles,
        &params.features,
        d,
        &zeros,
        cfg,
        t_cutoff,
    );

    let hw = w * h;
    let out = RenderOutput {
        width: w,
        height: h,
        color: main.image[..3 * hw].to_vec(),
        depth: main.image[3 * hw..].to_vec(),
        alpha: main.alpha.clone(),
        feature_width: coarse_cam.width,
        feature_height: coarse_cam.height,
        feature_dim: d,
        feature: feat.image,
        feature_alpha: feat.alpha,
        stats: full.stats,
    };
    let state = RasterState {
        params,
        cfg: cfg.clone(),
        background,
        t_cutoff,
        saved: Some(Saved {
            full,
            full_tiles,
            coarse,
            coarse_tiles,
            transmittance: main.alpha.iter().map(|a| 1.0 - a).collect(),
        }),
    };
    Ok((out, state))
}

/// Tiled forward render of a scene.
pub fn rasterize(scene: &GaussianScene, cam: &Camera, cfg: &RasterConfig) -> Result<RenderOutput> {
    Ok(run(
        SplatParams::from_scene(scene),
        cam,
        scene.background,
        cfg,
        false,
    )?
    .0)
}

/// Reference renderer: one global depth-sorted list per pixel, no tiles,
/// no early termination.
pub fn naive_rasterize(
    scene: &GaussianScene,
    cam: &Camera,
    cfg: &RasterConfig,
) -> Result<RenderOutput> {
    Ok(run(
        SplatParams::from_scene(scene),
        cam,
        scene.background,
        cfg,
        true,
    )?
    .0)
}

/// Tiled forward render that also returns the state for a backward pass.
pub fn rasterize_with_state(
    params: SplatParams,
    cam: &Camera,
    background: [f64; 3],
    cfg: &RasterConfig,
) -> Result<(RenderOutput, RasterState)> {
    run(params, cam, background, cfg, false)
}

/// Tile work items of the full-resolution pass, for inspection.
pub fn tile_work_items(
    scene: &GaussianScene,
    cam: &Camera,
    cfg: &RasterConfig,
) -> Result<Vec<TileWorkItem>> {
    check_image_dims(cam, cfg)?;
    let params = SplatParams::from_scene(scene);
    params.validate()?;
    let prep = prepare(&params, cam, cfg)?;
    Ok(bin_tiles(&prep, cam.width, cam.height, cfg.tile_size))
}

/// Composites arbitrary per-Gaussian values (`[N, k]`) with the same rule
/// as the color pass at the camera's own resolution. Returns the `[k, H, W]`
/// image and the alpha map.
pub fn composite_values(
    scene: &GaussianScene,
    cam: &Camera,
    values: &[f64],
    k: usize,
    background: &[f64],
    cfg: &RasterConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    cam.validate()?;
    if values.len() != scene.len() * k || background.len() != k {
        return Err(Error::Contract(format!(
            "{} values and {} background entries for {} gaussians with {k} channels",
            values.len(),
            background.len(),
            scene.len()
        )));
    }
    let params = SplatParams::from_scene(scene);
    params.validate()?;
    let prep = prepare(&params, cam, cfg)?;
    let tiles = bin_tiles(&prep, cam.width, cam.height, cfg.tile_size);
    let r = forward_pass(&prep, &tiles, values, k, background, cfg, cfg.t_cutoff);
    Ok((r.image, r.alpha))
}

fn conic_to_cov_grad(conic: [f64; 3], g: [f64; 3]) -> [f64; 3] {
    let c = Matrix2::new(conic[0], conic[1], conic[1], conic[2]);
    let gm = Matrix2::new(g[0], 0.5 * g[1], 0.5 * g[1], g[2]);
    let d = -(c * gm * c);
    [d[(0, 0)], d[(0, 1)] + d[(1, 0)], d[(1, 1)]]
}

impl RasterState {
    /// Per-pixel final transmittance of the full-resolution pass.
    pub fn transmittance(&self) -> Result<&[f64]> {
        Ok(&self.saved()?.transmittance)
    }

    /// Drops the saved per-tile lists.
    pub fn release(&mut self) {
        self.saved = None;
    }

    fn saved(&self) -> Result<&Saved> {
        self.saved.as_ref().ok_or_else(|| {
            Error::Contract("rasterizer backward called without saved forward state".into())
        })
    }

    pub fn backward(&self, grads: &RenderGrads<'_>) -> Result<SplatGrads> {
        let saved = self.saved()?;
        let p = &self.params;
        let n = p.len();
        let d = p.feature_dim;
        let (w, h) = (saved.full.cam.width, saved.full.cam.height);
        let hw = w * h;
        let check = |name: &str, g: Option<&[f64]>, want: usize| -> Result<()> {
            match g {
                Some(g) if g.len() != want => Err(Error::Contract(format!(
                    "{name} gradient has {} values, expected {want}",
                    g.len()
                ))),
                _ => Ok(()),
            }
        };
        let fhw = saved.coarse.cam.width * saved.coarse.cam.height;
        check("color", grads.color, 3 * hw)?;
        check("alpha", grads.alpha, hw)?;
        check("depth", grads.depth, hw)?;
        check("feature", grads.feature, d * fhw)?;

        let mut out = SplatGrads {
            means: vec![0.0; 3 * n],
            log_scales: vec![0.0; 3 * n],
            quats: vec![0.0; 4 * n],
            opacity_logits: vec![0.0; n],
            colors: vec![0.0; 3 * n],
            features: vec![0.0; d * n],
        };
        let mut d_opacity = vec![0.0; n];

        let mut g_main = vec![0.0; 4 * hw];
        if let Some(g) = grads.color {
            g_main[..3 * hw].copy_from_slice(g);
        }
        if let Some(g) = grads.depth {
            g_main[3 * hw..].copy_from_slice(g);
        }
        let g_alpha = grads.alpha.map_or_else(|| vec![0.0; hw], |g| g.to_vec());
        let values = color_depth_values(p, &saved.full);
        let bg4 = [
            self.background[0],
            self.background[1],
            self.background[2],
            0.0,
        ];
        let main = backward_pass(
            &saved.full,
            &saved.full_tiles,
            &values,
            4,
            &bg4,
            &self.cfg,
            self.t_cutoff,
            &g_main,
            &g_alpha,
        );
        for i in 0..n {
            out.colors[3 * i..3 * i + 3].copy_from_slice(&main.values[4 * i..4 * i + 3]);
            d_opacity[i] += main.opacity[i];
        }

        let feat = if d > 0 && grads.feature.is_some() {
            let g = grads.feature.expect("checked");
            let zeros = vec![0.0; d];
            let no_alpha = vec![0.0; fhw];
            Some(backward_pass(
                &saved.coarse,
                &saved.coarse_tiles,
                &p.features,
                d,
                &zeros,
                &self.cfg,
                self.t_cutoff,
                g,
                &no_alpha,
            ))
        } else {
            None
        };
        if let Some(f) = &feat {
            out.features.copy_from_slice(&f.values);
            for i in 0..n {
                d_opacity[i] += f.opacity[i];
            }
        }

        for i in 0..n {
            let mut geo = [0.0; 10];
            let mut add_pass =
                |prep: &Prepared, mean2d: [f64; 2], conic: [f64; 3], depth: f64| -> Result<()> {
                    let Some(s) = prep.splats[i] else {
                        return Ok(());
                    };
                    let pg = ProjectionGrad {
                        mean2d,
                        cov2d: conic_to_cov_grad(s.conic, conic),
                        depth,
                    };
                    let gg = project_gaussian_vjp(
                        p.mean(i),
                        p.log_scale(i),
                        p.quat(i),
                        &prep.cam,
                        self.cfg.z_near,
                        &pg,
                    )?;
                    for (j, v) in gg
                        .mean
                        .iter()
                        .chain(&gg.log_scale)
                        .chain(&gg.rotation)
                        .enumerate()
                    {
                        geo[j] += v;
                    }
                    Ok(())
                };
            add_pass(
                &saved.full,
                main.mean2d[i],
                main.conic[i],
                main.values[4 * i + 3],
            )?;
            if let Some(f) = &feat {
                add_pass(&saved.coarse, f.mean2d[i], f.conic[i], 0.0)?;
            }
            out.means[3 * i..3 * i + 3].copy_from_slice(&geo[0..3]);
            out.log_scales[3 * i..3 * i + 3].copy_from_slice(&geo[3..6]);
            out.quats[4 * i..4 * i + 4].copy_from_slice(&geo[6..10]);
            let o = sigmoid(p.opacity_logits[i]);
            out.opacity_logits[i] = d_opacity[i] * o * (1.0 - o);
        }
        Ok(out)
    }
}

/// Standalone backward entry point; `None` state is a contract error.
pub fn rasterize_backward(
    state: Option<&RasterState>,
    grads: &RenderGrads<'_>,
) -> Result<SplatGrads> {
    match state {
        Some(s) => s.backward(grads),
        None => Err(Error::Contract(
            "rasterizer backward called without saved forward state".into(),
        )),
    }
}

/// Differentiable Gaussian parameters: means `[N,3]`, log-scales `[N,3]`,
/// quaternions `[N,4]`, opacity logits `[N]`, colors `[N,3]`, features `[N,D]`.
#[derive(Clone, Debug)]
pub struct SplatTensors {
    pub means: Tensor,
    pub log_scales: Tensor,
    pub quats: Tensor,
    pub opacity_logits: Tensor,
    pub colors: Tensor,
    pub features: Tensor,
}

impl SplatTensors {
    pub fn len(&self) -> usize {
        self.opacity_logits.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape().get(1).copied().unwrap_or(0)
    }

    pub fn from_params(p: &SplatParams, trainable: bool) -> Result<Self> {
        let n = p.len();
        let mk = |v: &[f64], shape: &[usize]| -> Result<Tensor> {
            Ok(if trainable {
                Tensor::param(v.to_vec(), shape)?
            } else {
                Tensor::new(v.to_vec(), shape)?
            })
        };
        Ok(SplatTensors {
            means: mk(&p.means, &[n, 3])?,
            log_scales: mk(&p.log_scales, &[n, 3])?,
            quats: mk(&p.quats, &[n, 4])?,
            opacity_logits: mk(&p.opacity_logits, &[n])?,
            colors: mk(&p.colors, &[n, 3])?,
            features: mk(&p.features, &[n, p.feature_dim])?,
        })
    }

    pub fn to_params(&self) -> Result<SplatParams> {
        let n = self.len();
        let shapes = [
            ("means", self.means.shape(), vec![n, 3]),
            ("log_scales", self.log_scales.shape(), vec![n, 3]),
            ("quats", self.quats.shape(), vec![n, 4]),
            ("colors", self.colors.shape(), vec![n, 3]),
        ];
        for (name, got, want) in shapes {
            if got != want.as_slice() {
                return Err(Error::Contract(format!(
                    "{name} has shape {got:?}, expected {want:?}"
                )));
            }
        }
        if self.features.rank() != 2 || self.features.dim(0) != n {
            return Err(Error::Contract(format!(
                "features have shape {:?}, expected [{n}, D]",
                self.features.shape()
            )));
        }
        Ok(SplatParams {
            means: self.means.to_vec(),
            log_scales: self.log_scales.to_vec(),
            quats: self.quats.to_vec(),
            opacity_logits: self.opacity_logits.to_vec(),
            colors: self.colors.to_vec(),
            features: self.features.to_vec(),
            feature_dim: self.feature_dim(),
        })
    }

    /// Concatenates several Gaussian sets into one.
    pub fn concat(parts: &[&SplatTensors]) -> Result<SplatTensors> {
        let cat = |f: fn(&SplatTensors) -> &Tensor| -> Result<Tensor> {
            let ts: Vec<&Tensor> = parts.iter().map(|p| f(p)).collect();
            Ok(Tensor::concat(&ts, 0)?)
        };
        Ok(SplatTensors {
            means: cat(|s| &s.means)?,
            log_scales: cat(|s| &s.log_scales)?,
            quats: cat(|s| &s.quats)?,
            opacity_logits: cat(|s| &s.opacity_logits)?,
            colors: cat(|s| &s.colors)?,
            features: cat(|s| &s.features)?,
        })
    }
}

/// Differentiable render outputs: color `[3,H,W]`, alpha `[1,H,W]`, depth
/// `[1,H,W]`, feature `[D,h,w]`.
#[derive(Clone, Debug)]
pub struct RenderTensors {
    pub color: Tensor,
    pub alpha: Tensor,
    pub depth: Tensor,
    pub feature: Tensor,
    pub stats: RenderStats,
}

/// Renders Gaussians given as tensors and records a single tape op whose
/// backward is the analytic rasterizer gradient.
pub fn render(
    splats: &SplatTensors,
    cam: &Camera,
    background: [f64; 3],
    cfg: &RasterConfig,
) -> Result<RenderTensors> {
    let params = splats.to_params()?;
    let d = params.feature_dim;
    let (out, state) = run(params, cam, background, cfg, false)?;
    let (w, h) = (out.width, out.height);
    let (fw, fh) = (out.feature_width, out.feature_height);
    let stats = out.stats;
    let outputs = vec![
        (out.color, vec![3, h, w]),
        (out.alpha, vec![1, h, w]),
        (out.depth, vec![1, h, w]),
        (out.feature, vec![d, fh, fw]),
    ];
    let inputs = [
        &splats.means,
        &splats.log_scales,
        &splats.quats,
        &splats.opacity_logits,
        &splats.colors,
        &splats.features,
    ];
    let mut ts = tape::record("rasterize", &inputs, outputs, move |g| {
        let grads = RenderGrads {
            color: Some(g[0]),
            alpha: Some(g[1]),
            depth: Some(g[2]),
            feature: Some(g[3]),
        };
        let sg = state
            .backward(&grads)
            .expect("rasterizer state saved at forward time");
        vec![
            Some(sg.means),
            Some(sg.log_scales),
            Some(sg.quats),
            Some(sg.opacity_logits),
            Some(sg.colors),
            Some(sg.features),
        ]
    })?;
    let feature = ts.pop().expect("four outputs");
    let depth = ts.pop().expect("four outputs");
    let alpha = ts.pop().expect("four outputs");
    let color = ts.pop().expect("four outputs");
    Ok(RenderTensors {
        color,
        alpha,
        depth,
        feature,
        stats,
    })
}
