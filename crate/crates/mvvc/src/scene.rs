//! Deterministic synthetic scenes: terrain, water bodies, tree patches,
//! posed rendered views, and pure-class label polygons.
//!
//! The generator reproduces the one physical phenomenon the pipeline
//! depends on: land appearance is photoconsistent across views, water
//! appearance is not. Land pixels shade a view-independent procedural
//! albedo; water pixels add sinusoidal wave layers whose phases are drawn
//! per view, plus sparse specular glints, so the intensity of a fixed
//! water point decorrelates across views.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::PinholeCamera;
use crate::geom::{self, Vec3};
use crate::raster::{Grid2, GridSpec2, Image, NEIGHBORS_4};

// ---------------------------------------------------------------------------
// Deterministic lattice noise

/// SplitMix-style avalanche of a 64-bit value.
fn mix64(mut h: u64) -> u64 {
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    h
}

/// Hash of a lattice point and stream seed to `[0, 1)`.
fn lattice01(ix: i64, iy: i64, seed: u64) -> f64 {
    let h = mix64(
        seed ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Derive an independent stream seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix64(seed ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

fn fade(t: f64) -> f64 {
    // Quintic smoothstep: C2-continuous interpolation.
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Smooth value noise in roughly `[0, 1]` with unit lattice spacing.
fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let tx = fade(x - x0);
    let ty = fade(y - y0);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let v00 = lattice01(ix, iy, seed);
    let v10 = lattice01(ix + 1, iy, seed);
    let v01 = lattice01(ix, iy + 1, seed);
    let v11 = lattice01(ix + 1, iy + 1, seed);
    v00 * (1.0 - tx) * (1.0 - ty) + v10 * tx * (1.0 - ty) + v01 * (1.0 - tx) * ty + v11 * tx * ty
}

/// Fractal sum of value noise, centered on 0, amplitude roughly 1.
fn fbm(x: f64, y: f64, octaves: u32, seed: u64) -> f64 {
    let mut sum = 0.0;
    let mut amp = 1.0;
    let mut freq = 1.0;
    let mut norm = 0.0;
    for oct in 0..octaves {
        sum += amp * (value_noise(x * freq, y * freq, derive_seed(seed, oct as u64)) - 0.5);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    2.0 * sum / norm
}

/// Per-pixel, per-view uniform noise in `[-a, a]` keyed by pixel position.
fn pixel_noise(view_seed: u64, px: usize, py: usize, stream: u64, a: f64) -> f64 {
    let h = lattice01(px as i64, py as i64, derive_seed(view_seed, stream));
    a * (2.0 * h - 1.0)
}

// ---------------------------------------------------------------------------
// Scene data

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellClass {
    Land,
    Water,
    Tree,
}

impl CellClass {
    pub fn as_u8(self) -> u8 {
        match self {
            CellClass::Land => 0,
            CellClass::Water => 255,
            CellClass::Tree => 64,
        }
    }

    pub fn from_u8(v: u8) -> Option<CellClass> {
        match v {
            0 => Some(CellClass::Land),
            255 => Some(CellClass::Water),
            64 => Some(CellClass::Tree),
            _ => None,
        }
    }
}

/// Procedural albedo field in `[0, 1]`; fully determined by its seed and
/// band parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextureField {
    pub seed: u64,
    pub base: f64,
    /// (amplitude, wavelength in meters) per band.
    pub bands: Vec<(f64, f64)>,
}

impl TextureField {
    pub fn albedo(&self, x: f64, y: f64) -> f64 {
        let mut v = self.base;
        for (i, &(amp, wavelength)) in self.bands.iter().enumerate() {
            v += amp * fbm(x / wavelength, y / wavelength, 2, derive_seed(self.seed, i as u64));
        }
        v.clamp(0.03, 0.97)
    }
}

/// Ground-truth scene: surface altitude (water cells carry their body's
/// level), per-cell class, water body labels and levels, procedural albedo.
#[derive(Debug, Clone)]
pub struct Scene {
    pub grid: GridSpec2,
    pub heightfield: Grid2<f64>,
    pub classes: Grid2<CellClass>,
    /// Water body id per cell, -1 where not water.
    pub water_body: Grid2<i32>,
    /// Water level per body; for sloped rivers this is the mean level and
    /// the heightfield carries the per-cell surface.
    pub water_levels: Vec<f64>,
    pub texture: TextureField,
    pub rng_seed: u64,
}

impl Scene {
    pub fn water_fraction(&self) -> f64 {
        let water = self.classes.data().iter().filter(|&&c| c == CellClass::Water).count();
        water as f64 / self.classes.len() as f64
    }

    /// Surface altitude of the cell containing `(x, y)`, if inside.
    pub fn surface_altitude(&self, x: f64, y: f64) -> Option<f64> {
        let (ix, iy) = self.grid.cell_of(x, y)?;
        Some(*self.heightfield.get(ix, iy))
    }

    pub fn class_at(&self, x: f64, y: f64) -> Option<CellClass> {
        let (ix, iy) = self.grid.cell_of(x, y)?;
        Some(*self.classes.get(ix, iy))
    }

    /// Scene altitude range (min, max) over all surface cells.
    pub fn altitude_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &h in self.heightfield.data() {
            lo = lo.min(h);
            hi = hi.max(h);
        }
        (lo, hi)
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiverConfig {
    /// Strip half-width in meters (along y, flowing along x).
    pub half_width_m: f64,
    /// Water level drop per meter along x.
    pub slope: f64,
    /// Level at x = 0.
    pub level_at_origin_m: f64,
}

impl Default for RiverConfig {
    fn default() -> Self {
        RiverConfig { half_width_m: 40.0, slope: 0.001, level_at_origin_m: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub extent_m: f64,
    pub cell_size_m: f64,
    /// Mean surface altitude of the terrain.
    pub base_altitude_m: f64,
    /// Peak-to-valley amplitude of the terrain; 0 gives a flat plane.
    pub relief_m: f64,
    pub terrain_wavelength_m: f64,
    pub water_bodies: usize,
    /// Acceptable total water area as a fraction of the scene.
    pub water_fraction: [f64; 2],
    pub tree_patches: usize,
    pub tree_radius_m: f64,
    pub tree_height_m: f64,
    /// When set, water is a sloped river strip instead of lakes.
    pub river: Option<RiverConfig>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            extent_m: 128.0,
            cell_size_m: 0.25,
            base_altitude_m: 0.0,
            relief_m: 2.5,
            terrain_wavelength_m: 48.0,
            water_bodies: 1,
            water_fraction: [0.1, 0.4],
            tree_patches: 0,
            tree_radius_m: 10.0,
            tree_height_m: 6.0,
            river: None,
        }
    }
}

impl SceneConfig {
    /// Default single-lake scene.
    pub fn lake() -> Self {
        SceneConfig::default()
    }

    /// Two lakes with independent levels.
    pub fn two_lakes() -> Self {
        SceneConfig { water_bodies: 2, water_fraction: [0.06, 0.22], ..SceneConfig::default() }
    }

    /// Flat textured plane, no water; `z0` is the exact plane altitude.
    pub fn textured_plane(z0: f64) -> Self {
        SceneConfig {
            base_altitude_m: z0,
            relief_m: 0.0,
            water_bodies: 0,
            water_fraction: [0.0, 0.5],
            ..SceneConfig::default()
        }
    }

    pub fn cells_per_side(&self) -> usize {
        (self.extent_m / self.cell_size_m).round() as usize
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("water fraction band {0:?} invalid: must satisfy 0 <= lo <= hi < 1")]
    BadWaterFraction([f64; 2]),
    #[error("could not place water body {body} after {attempts} attempts (seed {seed})")]
    WaterPlacement { body: usize, attempts: usize, seed: u64 },
    #[error("scene config invalid: {0}")]
    BadConfig(String),
    #[error("camera {index} does not see the scene")]
    CameraNotViewing { index: usize },
    #[error("no {class:?} region large enough for a {side_m:.1} m polygon")]
    NoRegionForClass { class: CellClass, side_m: f64 },
    #[error("scene has no {0:?} cells")]
    MissingClass(CellClass),
}

// ---------------------------------------------------------------------------
// Scene generation

struct TerrainSampler {
    seed: u64,
    base: f64,
    relief: f64,
    wavelength: f64,
}

impl TerrainSampler {
    fn height(&self, x: f64, y: f64) -> f64 {
        if self.relief == 0.0 {
            return self.base;
        }
        self.base + 0.5 * self.relief * fbm(x / self.wavelength, y / self.wavelength, 5, self.seed)
    }
}

/// Flood fill of `{terrain <= level}` from a start cell, confined to a disk.
/// Returns the visited cells, or `None` if the region exceeds `max_cells`.
fn flood_region(
    terrain: &Grid2<f64>,
    start: (usize, usize),
    center: (f64, f64),
    radius_cells: f64,
    level: f64,
    max_cells: usize,
) -> Option<Vec<(usize, usize)>> {
    if *terrain.get(start.0, start.1) > level {
        return Some(Vec::new());
    }
    let mut visited = vec![false; terrain.len()];
    let mut stack = vec![start];
    let mut cells = Vec::new();
    visited[terrain.idx(start.0, start.1)] = true;
    while let Some((x, y)) = stack.pop() {
        cells.push((x, y));
        if cells.len() > max_cells {
            return None;
        }
        for (dx, dy) in NEIGHBORS_4 {
            let nx = x as isize + dx;
            let ny = y as isize + dy;
            if !terrain.in_bounds(nx, ny) {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            let idx = terrain.idx(nx, ny);
            if visited[idx] {
                continue;
            }
            let ddx = nx as f64 - center.0;
            let ddy = ny as f64 - center.1;
            if ddx * ddx + ddy * ddy > radius_cells * radius_cells {
                continue;
            }
            if *terrain.get(nx, ny) <= level {
                visited[idx] = true;
                stack.push((nx, ny));
            }
        }
    }
    Some(cells)
}

/// Deterministic procedural scene for a config and seed.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene, SceneError> {
    let [w_lo, w_hi] = config.water_fraction;
    if w_lo >= 1.0 || w_hi >= 1.0 || w_lo < 0.0 || w_lo > w_hi {
        return Err(SceneError::BadWaterFraction(config.water_fraction));
    }
    let n = config.cells_per_side();
    if n < 8 {
        return Err(SceneError::BadConfig(format!("{n} cells per side is too small")));
    }
    let grid = GridSpec2 { origin: [0.0, 0.0], cell_size: config.cell_size_m, nx: n, ny: n };
    let terrain = TerrainSampler {
        seed: derive_seed(seed, 1),
        base: config.base_altitude_m,
        relief: config.relief_m,
        wavelength: config.terrain_wavelength_m,
    };
    let mut heightfield = Grid2::filled(n, n, 0.0f64);
    for iy in 0..n {
        for ix in 0..n {
            let [x, y] = grid.cell_center(ix, iy);
            heightfield.set(ix, iy, terrain.height(x, y));
        }
    }
    let mut classes = Grid2::filled(n, n, CellClass::Land);
    let mut water_body = Grid2::filled(n, n, -1i32);
    let mut water_levels = Vec::new();

    if let Some(river) = config.river {
        carve_river(&grid, &mut heightfield, &mut classes, &mut water_body, &river);
        if !water_body.data().iter().any(|&b| b >= 0) {
            return Err(SceneError::BadConfig("river strip misses the scene".into()));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for (ix, iy, &b) in water_body.iter_cells() {
            if b == 0 {
                sum += *heightfield.get(ix, iy);
                count += 1;
            }
        }
        water_levels.push(sum / count.max(1) as f64);
    } else if config.water_bodies > 0 {
        carve_lakes(
            config,
            seed,
            &grid,
            &mut heightfield,
            &mut classes,
            &mut water_body,
            &mut water_levels,
        )?;
    }

    if config.tree_patches > 0 {
        plant_trees(config, seed, &grid, &mut heightfield, &mut classes);
    }

    let texture = TextureField {
        seed: derive_seed(seed, 2),
        base: 0.5,
        bands: vec![(0.18, 23.0), (0.14, 7.0), (0.10, 2.5)],
    };
    Ok(Scene { grid, heightfield, classes, water_body, water_levels, texture, rng_seed: seed })
}

fn carve_river(
    grid: &GridSpec2,
    heightfield: &mut Grid2<f64>,
    classes: &mut Grid2<CellClass>,
    water_body: &mut Grid2<i32>,
    river: &RiverConfig,
) {
    let mid_y = grid.extent()[1] * 0.5;
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let [x, y] = grid.cell_center(ix, iy);
            let level = river.level_at_origin_m - river.slope * x;
            if (y - mid_y).abs() <= river.half_width_m {
                heightfield.set(ix, iy, level);
                classes.set(ix, iy, CellClass::Water);
                water_body.set(ix, iy, 0);
            } else {
                // Banks rise away from the strip so shores slope upward.
                let rise = ((y - mid_y).abs() - river.half_width_m) * 0.05;
                let h = heightfield.get(ix, iy).max(level + 0.02) + rise.min(2.0);
                heightfield.set(ix, iy, h);
            }
        }
    }
}

fn carve_lakes(
    config: &SceneConfig,
    seed: u64,
    grid: &GridSpec2,
    heightfield: &mut Grid2<f64>,
    classes: &mut Grid2<CellClass>,
    water_body: &mut Grid2<i32>,
    water_levels: &mut Vec<f64>,
) -> Result<(), SceneError> {
    let n = grid.nx;
    let total_cells = n * n;
    let band_mid = 0.5 * (config.water_fraction[0] + config.water_fraction[1]);
    let target_per_body =
        ((band_mid * total_cells as f64 / config.water_bodies as f64) as usize).max(64);
    let radius_cells = 1.35 * (target_per_body as f64 / std::f64::consts::PI).sqrt();
    let margin = radius_cells as usize + 8;
    if 2 * margin + 8 > n {
        return Err(SceneError::BadConfig(format!(
            "lakes of ~{radius_cells:.0} cells do not fit a {n}-cell scene"
        )));
    }
    let mut placed_centers: Vec<(f64, f64)> = Vec::new();
    for body in 0..config.water_bodies {
        let body_seed = derive_seed(seed, 100 + body as u64);
        let attempts = 64usize;
        let mut placed = false;
        // Candidate centers sorted by terrain height: basins first.
        let mut candidates: Vec<(usize, usize)> = (0..attempts)
            .map(|a| {
                let h = mix64(derive_seed(body_seed, a as u64));
                let cx = margin + (h % (n - 2 * margin) as u64) as usize;
                let cy = margin + ((h >> 32) % (n - 2 * margin) as u64) as usize;
                (cx, cy)
            })
            .collect();
        candidates.sort_by(|&a, &b| {
            heightfield
                .get(a.0, a.1)
                .partial_cmp(heightfield.get(b.0, b.1))
                .expect("finite terrain")
                .then(a.cmp(&b))
        });
        let basin_depth = 1.2 + 0.8 * config.relief_m;
        'candidates: for &(cx, cy) in &candidates {
            // Keep lakes disjoint: confinement disks must not overlap.
            for &(px, py) in &placed_centers {
                let d2 = (cx as f64 - px).powi(2) + (cy as f64 - py).powi(2);
                if d2 < (2.2 * radius_cells).powi(2) {
                    continue 'candidates;
                }
            }
            // Sculpt a smooth basin: damp the noise and subtract a radial
            // depression, zero at the disk rim so the surroundings are
            // untouched. The residual noise keeps the shoreline organic.
            let base_alt = *heightfield.get(cx, cy);
            let mut touched: Vec<(usize, usize, f64)> = Vec::new();
            let r_int = radius_cells as usize + 2;
            for iy in cy.saturating_sub(r_int)..=(cy + r_int).min(n - 1) {
                for ix in cx.saturating_sub(r_int)..=(cx + r_int).min(n - 1) {
                    let d2 = (ix as f64 - cx as f64).powi(2) + (iy as f64 - cy as f64).powi(2);
                    let t = d2 / (radius_cells * radius_cells);
                    if t < 1.0 {
                        let profile = (1.0 - t) * (1.0 - t);
                        let old = *heightfield.get(ix, iy);
                        let damped = old + 0.6 * profile * (base_alt - old);
                        heightfield.set(ix, iy, damped - basin_depth * profile);
                        touched.push((ix, iy, old));
                    }
                }
            }
            // Highest level that cannot spill over the untouched rim.
            let mut rim_min = f64::INFINITY;
            let r_lo = (radius_cells - 1.5).max(1.0);
            for iy in cy.saturating_sub(r_int)..=(cy + r_int).min(n - 1) {
                for ix in cx.saturating_sub(r_int)..=(cx + r_int).min(n - 1) {
                    let d2 = (ix as f64 - cx as f64).powi(2) + (iy as f64 - cy as f64).powi(2);
                    if d2 >= r_lo * r_lo && d2 <= radius_cells * radius_cells {
                        rim_min = rim_min.min(*heightfield.get(ix, iy));
                    }
                }
            }
            let floor_alt = *heightfield.get(cx, cy);
            let level_cap = rim_min - 0.05;
            let revert = |hf: &mut Grid2<f64>, touched: &[(usize, usize, f64)]| {
                for &(ix, iy, old) in touched {
                    hf.set(ix, iy, old);
                }
            };
            if level_cap <= floor_alt + 0.05 {
                revert(heightfield, &touched);
                continue;
            }
            // Binary search the level whose flooded area hits the target.
            let mut lo = floor_alt;
            let mut hi = level_cap;
            let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
            for _ in 0..28 {
                let mid = 0.5 * (lo + hi);
                match flood_region(
                    heightfield,
                    (cx, cy),
                    (cx as f64, cy as f64),
                    radius_cells,
                    mid,
                    2 * target_per_body,
                ) {
                    Some(cells) if cells.len() < target_per_body => {
                        lo = mid;
                        match &best {
                            Some((_, b)) if cells.len() <= b.len() => {}
                            _ => best = Some((mid, cells)),
                        }
                    }
                    Some(cells) => {
                        best = Some((mid, cells));
                        hi = mid;
                    }
                    None => {
                        hi = mid;
                    }
                }
            }
            let (level, cells) = match best {
                Some(b) => b,
                None => {
                    revert(heightfield, &touched);
                    continue;
                }
            };
            // Enough area for a usable lake: at least 40% of target.
            if cells.len() < target_per_body * 2 / 5 {
                revert(heightfield, &touched);
                continue;
            }
            let body_id = water_levels.len() as i32;
            for &(ix, iy) in &cells {
                heightfield.set(ix, iy, level);
                classes.set(ix, iy, CellClass::Water);
                water_body.set(ix, iy, body_id);
            }
            water_levels.push(level);
            placed_centers.push((cx as f64, cy as f64));
            placed = true;
            break;
        }
        if !placed {
            return Err(SceneError::WaterPlacement { body, attempts, seed });
        }
    }
    Ok(())
}

fn plant_trees(
    config: &SceneConfig,
    seed: u64,
    grid: &GridSpec2,
    heightfield: &mut Grid2<f64>,
    classes: &mut Grid2<CellClass>,
) {
    let n = grid.nx;
    let r_cells = config.tree_radius_m / grid.cell_size;
    let margin = r_cells as usize + 4;
    if n <= 2 * margin {
        return;
    }
    for patch in 0..config.tree_patches {
        let h = mix64(derive_seed(seed, 500 + patch as u64));
        let cx = margin + (h % (n - 2 * margin) as u64) as usize;
        let cy = margin + ((h >> 32) % (n - 2 * margin) as u64) as usize;
        for iy in cy.saturating_sub(margin)..(cy + margin).min(n) {
            for ix in cx.saturating_sub(margin)..(cx + margin).min(n) {
                let d = ((ix as f64 - cx as f64).powi(2) + (iy as f64 - cy as f64).powi(2)).sqrt();
                if d <= r_cells && *classes.get(ix, iy) == CellClass::Land {
                    classes.set(ix, iy, CellClass::Tree);
                    let profile = (1.0 - d / r_cells).sqrt();
                    let canopy = heightfield.get(ix, iy) + config.tree_height_m * profile;
                    heightfield.set(ix, iy, canopy);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Rendering

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// View-independent land intensity noise amplitude (uniform, +-a).
    pub sigma_land: f64,
    /// (amplitude, wavelength m) of the per-view wave layers.
    pub wave_layers: [(f64, f64); 3],
    pub water_base: f64,
    /// Per-pixel specular glint probability on water.
    pub glint_prob: f64,
    pub glint_gain: f64,
    /// Per-view horizontal jitter of tree texture lookups, meters.
    pub tree_jitter_m: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            sigma_land: 0.01,
            wave_layers: [(0.08, 1.9), (0.06, 3.2), (0.05, 5.4)],
            water_base: 0.45,
            glint_prob: 0.02,
            glint_gain: 0.6,
            tree_jitter_m: 0.3,
        }
    }
}

/// One rendered view with ground truth.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub camera: PinholeCamera,
    pub image: Image,
    /// Optical-axis depth per pixel, NaN where the ray misses the scene.
    pub gt_depth: Grid2<f64>,
    pub gt_class: Grid2<Option<CellClass>>,
}

/// Per-view shading state: wave phases, texture jitter, noise streams.
struct ViewShading {
    view_seed: u64,
    wave_phase: [f64; 3],
    wave_dir: [(f64, f64); 3],
    tree_jitter: (f64, f64),
}

impl ViewShading {
    fn new(render_seed: u64, view: usize, cfg: &RenderConfig) -> Self {
        let view_seed = derive_seed(render_seed, view as u64);
        let mut wave_phase = [0.0f64; 3];
        let mut wave_dir = [(1.0, 0.0); 3];
        for layer in 0..3 {
            let s = derive_seed(view_seed, 10 + layer as u64);
            wave_phase[layer] =
                2.0 * std::f64::consts::PI * ((mix64(s) >> 11) as f64 / (1u64 << 53) as f64);
            // Directions are a scene property; only the phase decorrelates
            // views.
            let angle = 0.7 + 1.9 * layer as f64;
            wave_dir[layer] = (angle.cos(), angle.sin());
        }
        let jx = pixel_noise(view_seed, 1, 2, 77, cfg.tree_jitter_m);
        let jy = pixel_noise(view_seed, 3, 4, 78, cfg.tree_jitter_m);
        ViewShading { view_seed, wave_phase, wave_dir, tree_jitter: (jx, jy) }
    }

    /// Intensity of a surface point of a given class, before clamping.
    #[allow(clippy::too_many_arguments)]
    fn shade(
        &self,
        scene: &Scene,
        cfg: &RenderConfig,
        class: CellClass,
        x: f64,
        y: f64,
        shade_factor: f64,
        px: usize,
        py: usize,
    ) -> f64 {
        match class {
            CellClass::Land => {
                scene.texture.albedo(x, y) * shade_factor
                    + pixel_noise(self.view_seed, px, py, 1, cfg.sigma_land)
            }
            CellClass::Water => {
                let mut v = cfg.water_base;
                for layer in 0..3 {
                    let (amp, wavelength) = cfg.wave_layers[layer];
                    let (dx, dy) = self.wave_dir[layer];
                    let phase = 2.0 * std::f64::consts::PI * (x * dx + y * dy) / wavelength
                        + self.wave_phase[layer];
                    v += amp * phase.sin();
                }
                v += pixel_noise(self.view_seed, px, py, 1, cfg.sigma_land);
                let glint = lattice01(px as i64, py as i64, derive_seed(self.view_seed, 2));
                if glint < cfg.glint_prob {
                    v += cfg.glint_gain;
                }
                v
            }
            CellClass::Tree => {
                let (jx, jy) = self.tree_jitter;
                let t = 0.3
                    + 0.4
                        * fbm(
                            (x + jx) / 0.9,
                            (y + jy) / 0.9,
                            3,
                            derive_seed(scene.texture.seed, 9000),
                        );
                t * shade_factor + pixel_noise(self.view_seed, px, py, 1, cfg.sigma_land)
            }
        }
    }
}

/// Lambertian shading factor per cell from heightfield normals and a fixed
/// sun; view independent.
fn shading_grid(scene: &Scene) -> Grid2<f64> {
    let n = scene.grid.nx;
    let cell = scene.grid.cell_size;
    let sun = geom::normalize([0.35, 0.2, 0.91]);
    let mut out = Grid2::filled(n, scene.grid.ny, 1.0f64);
    for iy in 0..scene.grid.ny {
        for ix in 0..n {
            let xm = *scene.heightfield.get(ix.saturating_sub(1), iy);
            let xp = *scene.heightfield.get((ix + 1).min(n - 1), iy);
            let ym = *scene.heightfield.get(ix, iy.saturating_sub(1));
            let yp = *scene.heightfield.get(ix, (iy + 1).min(scene.grid.ny - 1));
            let normal =
                geom::normalize([-(xp - xm) / (2.0 * cell), -(yp - ym) / (2.0 * cell), 1.0]);
            let lambert = geom::dot(normal, sun).max(0.0);
            out.set(ix, iy, 0.25 + 0.75 * lambert);
        }
    }
    out
}

/// Cast a ray against the heightfield (piecewise-constant cells). Returns
/// `(t, cell)` of the first hit; `t` is the optical-axis depth when the
/// direction's camera-frame z is 1 (see `ray_direction`). `z_max` is the
/// precomputed scene maximum altitude.
fn raycast_heightfield(
    scene: &Scene,
    origin: Vec3,
    dir: Vec3,
    z_max: f64,
) -> Option<(f64, (usize, usize))> {
    let grid = &scene.grid;
    let [ex, ey] = grid.extent();
    if dir[2] >= 0.0 {
        return None;
    }
    // Clip the ray to the horizontal AABB.
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for axis in 0..2 {
        let o = origin[axis] - grid.origin[axis];
        let d = dir[axis];
        let e = if axis == 0 { ex } else { ey };
        if d.abs() < 1e-12 {
            if o < 0.0 || o > e {
                return None;
            }
        } else {
            let ta = -o / d;
            let tb = (e - o) / d;
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    // Cannot hit before the ray drops to the highest surface.
    let t_top = (z_max - origin[2]) / dir[2];
    t0 = t0.max(t_top).max(0.0);
    if t0 >= t1 {
        return None;
    }

    // 2D DDA over cells along the horizontal projection.
    let cell = grid.cell_size;
    let px = (origin[0] + t0 * dir[0] - grid.origin[0]) / cell;
    let py = (origin[1] + t0 * dir[1] - grid.origin[1]) / cell;
    let mut ix = (px.floor() as isize).clamp(0, grid.nx as isize - 1);
    let mut iy = (py.floor() as isize).clamp(0, grid.ny as isize - 1);
    let step_x: isize = if dir[0] > 0.0 { 1 } else { -1 };
    let step_y: isize = if dir[1] > 0.0 { 1 } else { -1 };
    let mut t = t0;
    loop {
        if ix < 0 || iy < 0 || ix >= grid.nx as isize || iy >= grid.ny as isize {
            return None;
        }
        // Parameter at which the ray leaves this cell horizontally.
        let next_tx = if dir[0].abs() < 1e-12 {
            f64::INFINITY
        } else {
            let edge = grid.origin[0] + (ix + if step_x > 0 { 1 } else { 0 }) as f64 * cell;
            (edge - origin[0]) / dir[0]
        };
        let next_ty = if dir[1].abs() < 1e-12 {
            f64::INFINITY
        } else {
            let edge = grid.origin[1] + (iy + if step_y > 0 { 1 } else { 0 }) as f64 * cell;
            (edge - origin[1]) / dir[1]
        };
        let t_exit = next_tx.min(next_ty).min(t1);
        let h = *scene.heightfield.get(ix as usize, iy as usize);
        let z_entry = origin[2] + t * dir[2];
        let z_exit = origin[2] + t_exit * dir[2];
        if z_entry <= h {
            // Entered below the surface: wall hit at the cell boundary.
            return Some((t, (ix as usize, iy as usize)));
        }
        if z_exit <= h {
            let t_hit = (h - origin[2]) / dir[2];
            return Some((t_hit.max(t), (ix as usize, iy as usize)));
        }
        if t_exit >= t1 {
            return None;
        }
        t = t_exit;
        if next_tx <= next_ty {
            ix += step_x;
        } else {
            iy += step_y;
        }
    }
}

/// Render every camera; deterministic for a fixed `(scene, cameras, seed)`
/// regardless of thread count.
pub fn render_views(
    scene: &Scene,
    cameras: &[PinholeCamera],
    cfg: &RenderConfig,
    seed: u64,
) -> Result<Vec<RenderedView>, SceneError> {
    let shading = shading_grid(scene);
    let render_seed = derive_seed(seed, 3);
    let (_, z_max) = scene.altitude_range();
    cameras
        .par_iter()
        .enumerate()
        .map(|(index, cam)| {
            let vs = ViewShading::new(render_seed, index, cfg);
            let (w, h) = (cam.width, cam.height);
            let mut image = Grid2::filled(w, h, 0.0f64);
            let mut gt_depth = Grid2::filled(w, h, f64::NAN);
            let mut gt_class: Grid2<Option<CellClass>> = Grid2::filled(w, h, None);
            let origin = cam.center();
            let mut hits = 0usize;
            for py in 0..h {
                for px in 0..w {
                    let dir = cam.ray_direction(px as f64, py as f64);
                    if let Some((t, (ix, iy))) = raycast_heightfield(scene, origin, dir, z_max) {
                        hits += 1;
                        let p = geom::add(origin, geom::scale(dir, t));
                        let class = *scene.classes.get(ix, iy);
                        let factor = *shading.get(ix, iy);
                        let v = vs.shade(scene, cfg, class, p[0], p[1], factor, px, py);
                        image.set(px, py, v.clamp(0.0, 1.0));
                        gt_depth.set(px, py, t);
                        gt_class.set(px, py, Some(class));
                    }
                }
            }
            if hits == 0 {
                return Err(SceneError::CameraNotViewing { index });
            }
            Ok(RenderedView { camera: cam.clone(), image, gt_depth, gt_class })
        })
        .collect()
}

/// Surface-point intensity for one view, bypassing image rasterization;
/// used to verify cross-view statistics directly.
pub fn shade_surface_point(
    scene: &Scene,
    cfg: &RenderConfig,
    seed: u64,
    view: usize,
    x: f64,
    y: f64,
) -> Option<f64> {
    let (ix, iy) = scene.grid.cell_of(x, y)?;
    let class = *scene.classes.get(ix, iy);
    let shading = shading_grid(scene);
    let vs = ViewShading::new(derive_seed(seed, 3), view, cfg);
    Some(vs.shade(scene, cfg, class, x, y, *shading.get(ix, iy), 0, 0).clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Camera rig

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub cameras: usize,
    pub image_px: usize,
    pub height_m: f64,
    /// Off-vertical tilt range in degrees across the ring.
    pub tilt_deg: [f64; 2],
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig { cameras: 8, image_px: 320, height_m: 170.0, tilt_deg: [10.0, 22.0] }
    }
}

/// Look-at rotation: camera z axis points from `pos` to `target`.
fn look_at(pos: Vec3, target: Vec3) -> [[f64; 3]; 3] {
    let z = geom::normalize(geom::sub(target, pos));
    let hint = if z[2].abs() > 0.999 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
    let x = geom::normalize(geom::cross(hint, z));
    let y = geom::cross(z, x);
    [x, y, z]
}

/// Nadir-biased ring of cameras around the scene center, every camera
/// framing the whole scene.
pub fn nadir_ring(scene: &Scene, rig: &RigConfig) -> Vec<PinholeCamera> {
    let [ex, ey] = scene.grid.extent();
    let (z_lo, z_hi) = scene.altitude_range();
    let center = [
        scene.grid.origin[0] + ex * 0.5,
        scene.grid.origin[1] + ey * 0.5,
        0.5 * (z_lo + z_hi),
    ];
    let n = rig.cameras.max(1);
    (0..n)
        .map(|i| {
            let azimuth = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let tilt_t = if n == 1 { 0.5 } else { (i % 4) as f64 / 3.0 };
            let tilt =
                (rig.tilt_deg[0] + (rig.tilt_deg[1] - rig.tilt_deg[0]) * tilt_t).to_radians();
            let radius = rig.height_m * tilt.tan();
            let pos = [
                center[0] + radius * azimuth.cos(),
                center[1] + radius * azimuth.sin(),
                center[2] + rig.height_m,
            ];
            let rotation = look_at(pos, center);
            // Focal length framing all scene corners with 5% margin.
            let mut max_tan = 0.0f64;
            for &cx in &[scene.grid.origin[0], scene.grid.origin[0] + ex] {
                for &cy in &[scene.grid.origin[1], scene.grid.origin[1] + ey] {
                    for &cz in &[z_lo, z_hi] {
                        let rel = geom::sub([cx, cy, cz], pos);
                        let pc = geom::mat_vec(&rotation, rel);
                        if pc[2] > 0.0 {
                            max_tan =
                                max_tan.max((pc[0] / pc[2]).abs()).max((pc[1] / pc[2]).abs());
                        }
                    }
                }
            }
            let half = (rig.image_px - 1) as f64 * 0.5;
            let f = half / (max_tan * 1.05);
            let t = geom::scale(geom::mat_vec(&rotation, pos), -1.0);
            PinholeCamera::new(f, f, half, half, rig.image_px, rig.image_px, rotation, t)
                .expect("rig camera is valid")
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Label polygons

/// A pure-class labeling polygon in world meters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelPolygon {
    pub points: Vec<[f64; 2]>,
    pub class: CellClass,
}

impl LabelPolygon {
    /// Even-odd rule point-in-polygon test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let pts = &self.points;
        let mut inside = false;
        let mut j = pts.len() - 1;
        for i in 0..pts.len() {
            let (xi, yi) = (pts[i][0], pts[i][1]);
            let (xj, yj) = (pts[j][0], pts[j][1]);
            if ((yi > y) != (yj > y)) && (x < (xj - xi) * (y - yi) / (yj - yi) + xi) {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    pub fn area(&self) -> f64 {
        let pts = &self.points;
        let mut s = 0.0;
        let mut j = pts.len() - 1;
        for i in 0..pts.len() {
            s += (pts[j][0] + pts[i][0]) * (pts[j][1] - pts[i][1]);
            j = i;
        }
        s.abs() * 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolygonConfig {
    pub side_m_max: f64,
    pub side_m_min: f64,
    /// Distance from class boundaries required of polygon interiors.
    pub margin_m: f64,
}

impl Default for PolygonConfig {
    fn default() -> Self {
        PolygonConfig { side_m_max: 18.0, side_m_min: 4.0, margin_m: 3.0 }
    }
}

/// Multi-source BFS grid distance (in cells, 4-connected) to the nearest
/// cell not of `class`.
fn distance_to_other(classes: &Grid2<CellClass>, class: CellClass) -> Grid2<u32> {
    let (w, h) = (classes.width(), classes.height());
    let mut dist = Grid2::filled(w, h, u32::MAX);
    let mut queue = std::collections::VecDeque::new();
    for (x, y, &c) in classes.iter_cells() {
        if c != class {
            dist.set(x, y, 0);
            queue.push_back((x, y));
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        let d = *dist.get(x, y);
        for (dx, dy) in NEIGHBORS_4 {
            let nx = x as isize + dx;
            let ny = y as isize + dy;
            if classes.in_bounds(nx, ny) {
                let (nx, ny) = (nx as usize, ny as usize);
                if *dist.get(nx, ny) == u32::MAX {
                    dist.set(nx, ny, d + 1);
                    queue.push_back((nx, ny));
                }
            }
        }
    }
    dist
}

/// Place `count_per_class` axis-aligned square polygons per class, each
/// entirely inside its class region with a metric margin from boundaries.
pub fn make_label_polygons(
    scene: &Scene,
    classes: [CellClass; 2],
    count_per_class: usize,
    cfg: &PolygonConfig,
    seed: u64,
) -> Result<Vec<LabelPolygon>, SceneError> {
    let mut polygons = Vec::new();
    for &class in &classes {
        if !scene.classes.data().iter().any(|&c| c == class) {
            return Err(SceneError::MissingClass(class));
        }
        let dist = distance_to_other(&scene.classes, class);
        let cell = scene.grid.cell_size;
        let margin_cells = (cfg.margin_m / cell).ceil() as u32;
        let class_seed = derive_seed(seed, 1 + class.as_u8() as u64);
        let mut placed = 0usize;
        let mut side_m = cfg.side_m_max;
        let mut attempt = 0u64;
        let mut centers: Vec<(usize, usize)> = Vec::new();
        while placed < count_per_class {
            attempt += 1;
            if attempt > 4000 {
                side_m *= 0.8;
                attempt = 1;
                if side_m < cfg.side_m_min {
                    return Err(SceneError::NoRegionForClass { class, side_m: cfg.side_m_min });
                }
            }
            let h = mix64(derive_seed(class_seed, attempt + ((placed as u64) << 20)));
            let cx = (h % scene.grid.nx as u64) as usize;
            let cy = ((h >> 32) % scene.grid.ny as u64) as usize;
            let half_cells = (0.5 * side_m / cell).ceil() as usize;
            let need = half_cells + margin_cells as usize + 1;
            if cx < need || cy < need || cx + need >= scene.grid.nx || cy + need >= scene.grid.ny
            {
                continue;
            }
            // Quick reject, then verify the rectangle plus margin is pure.
            if *dist.get(cx, cy) <= need as u32 {
                continue;
            }
            let mut pure = true;
            'check: for iy in cy - half_cells..=cy + half_cells {
                for ix in cx - half_cells..=cx + half_cells {
                    if *scene.classes.get(ix, iy) != class || *dist.get(ix, iy) <= margin_cells {
                        pure = false;
                        break 'check;
                    }
                }
            }
            if !pure {
                continue;
            }
            // Spread polygons out.
            let min_sep = half_cells as f64 * 1.2;
            if centers.iter().any(|&(px, py)| {
                ((px as f64 - cx as f64).powi(2) + (py as f64 - cy as f64).powi(2)).sqrt()
                    < min_sep
            }) {
                continue;
            }
            let [wx, wy] = scene.grid.cell_center(cx, cy);
            let half_m = half_cells as f64 * cell;
            polygons.push(LabelPolygon {
                points: vec![
                    [wx - half_m, wy - half_m],
                    [wx + half_m, wy - half_m],
                    [wx + half_m, wy + half_m],
                    [wx - half_m, wy + half_m],
                ],
                class,
            });
            centers.push((cx, cy));
            placed += 1;
        }
    }
    // Every ground cell a polygon covers must carry the polygon's class.
    for poly in &polygons {
        for (ix, iy, &class) in scene.classes.iter_cells() {
            let [x, y] = scene.grid.cell_center(ix, iy);
            if poly.contains(x, y) {
                assert_eq!(class, poly.class, "impure polygon cell at ({ix}, {iy})");
            }
        }
    }
    Ok(polygons)
}
