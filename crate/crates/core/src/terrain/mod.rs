//! Procedural terrains: heightfield plus per-cell friction and conveyor
//! velocity. A [`Terrain`] is immutable once generated and is shared between
//! simulator instances behind an `Arc`.

mod io;
mod noise;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use noise::{Fractal, Perlin};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainKind {
    Flat,
    Rough,
    DiscreteRough,
    Step,
    Cliff,
    Slippery,
    Conveyor,
}

impl TerrainKind {
    pub const ALL: [TerrainKind; 7] = [
        TerrainKind::Flat,
        TerrainKind::Rough,
        TerrainKind::DiscreteRough,
        TerrainKind::Step,
        TerrainKind::Cliff,
        TerrainKind::Slippery,
        TerrainKind::Conveyor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TerrainKind::Flat => "flat",
            TerrainKind::Rough => "rough",
            TerrainKind::DiscreteRough => "discrete",
            TerrainKind::Step => "step",
            TerrainKind::Cliff => "cliff",
            TerrainKind::Slippery => "slippery",
            TerrainKind::Conveyor => "conveyor",
        }
    }

    fn code(self) -> u8 {
        TerrainKind::ALL.iter().position(|k| *k == self).unwrap() as u8
    }

    fn from_code(code: u8) -> Result<Self> {
        TerrainKind::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown terrain kind code {code}")))
    }
}

impl fmt::Display for TerrainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TerrainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(TerrainKind::Flat),
            "rough" => Ok(TerrainKind::Rough),
            "discrete" | "discrete_rough" => Ok(TerrainKind::DiscreteRough),
            "step" => Ok(TerrainKind::Step),
            "cliff" => Ok(TerrainKind::Cliff),
            "slippery" => Ok(TerrainKind::Slippery),
            "conveyor" => Ok(TerrainKind::Conveyor),
            other => Err(Error::Config(format!("unknown terrain kind `{other}`"))),
        }
    }
}

/// Generation knobs. Heights of the rough kinds are `terrain_factor *
/// height_scale * n` with `n` in [0, 1], so the factor is the scaled maximum
/// height.
///
/// The rough-terrain fBm uses `octaves = 0.5` (base layer plus half a detail
/// layer, see [`Fractal`]), a per-seed lacunarity drawn from
/// `lacunarity_range`, and `gain = 0.45`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TerrainConfig {
    pub cell_size: f64,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub default_friction: f64,
    pub height_scale: f64,
    pub octaves: f64,
    pub lacunarity_range: [f64; 2],
    pub gain: f64,
    pub base_frequency: f64,
    /// Radius around the origin kept flat so episodes start on level ground.
    pub spawn_radius: f64,
    pub discrete_tile: f64,
    pub step_heights: [f64; 3],
    pub step_start: f64,
    pub step_spacing: f64,
    pub step_depth: f64,
    pub cliff_x: f64,
    pub cliff_depth_scale: f64,
    pub slippery_band: [f64; 2],
    pub slippery_friction: f64,
    pub conveyor_band: [f64; 2],
    pub conveyor_block: f64,
    pub conveyor_speed: f64,
    pub conveyor_speed_per_factor: f64,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        Self {
            cell_size: 0.05,
            x_range: [-8.0, 16.0],
            y_range: [-8.0, 8.0],
            default_friction: 1.0,
            height_scale: 0.12,
            octaves: 0.5,
            lacunarity_range: [1.0, 5.0],
            gain: 0.45,
            base_frequency: 1.5,
            spawn_radius: 0.5,
            discrete_tile: 0.3,
            step_heights: [0.025, 0.05, 0.075],
            step_start: 1.0,
            step_spacing: 1.5,
            step_depth: 0.6,
            cliff_x: 1.5,
            cliff_depth_scale: 0.2,
            slippery_band: [1.0, 3.0],
            slippery_friction: 0.22,
            conveyor_band: [0.75, 12.0],
            conveyor_block: 0.5,
            conveyor_speed: 0.2,
            conveyor_speed_per_factor: 0.3,
        }
    }
}

/// Heightfield with per-cell friction and conveyor velocity. Grids are
/// row-major (`index = iy * nx + ix`) and values live at cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Terrain {
    pub kind: TerrainKind,
    pub terrain_factor: f64,
    pub cell_size: f32,
    pub origin: [f32; 2],
    pub nx: usize,
    pub ny: usize,
    pub heights: Vec<f32>,
    pub friction: Vec<f32>,
    pub conveyor: Vec<[f32; 2]>,
}

/// Generate with default knobs.
pub fn generate(kind: TerrainKind, terrain_factor: f64, seed: u64) -> Result<Terrain> {
    TerrainConfig::default().generate(kind, terrain_factor, seed)
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl TerrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.cell_size > 0.0
            && self.x_range[1] > self.x_range[0]
            && self.y_range[1] > self.y_range[0]
            && self.default_friction > 0.0
            && self.default_friction <= 2.0
            && self.slippery_friction > 0.0
            && self.slippery_friction <= 2.0
            && self.height_scale >= 0.0
            && self.lacunarity_range[0] <= self.lacunarity_range[1];
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid terrain configuration".into()))
        }
    }

    pub fn generate(&self, kind: TerrainKind, terrain_factor: f64, seed: u64) -> Result<Terrain> {
        self.validate()?;
        if !(terrain_factor >= 0.0) || !terrain_factor.is_finite() {
            return Err(Error::Config(format!(
                "terrain_factor must be finite and >= 0, got {terrain_factor}"
            )));
        }
        let cs = self.cell_size as f32;
        let nx = ((self.x_range[1] - self.x_range[0]) / self.cell_size).round() as usize;
        let ny = ((self.y_range[1] - self.y_range[0]) / self.cell_size).round() as usize;
        let mut t = Terrain {
            kind,
            terrain_factor,
            cell_size: cs,
            origin: [self.x_range[0] as f32, self.y_range[0] as f32],
            nx,
            ny,
            heights: vec![0.0; nx * ny],
            friction: vec![self.default_friction as f32; nx * ny],
            conveyor: vec![[0.0; 2]; nx * ny],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e77_a1e0_0000_0000);
        let amplitude = terrain_factor * self.height_scale;

        match kind {
            TerrainKind::Flat => {}
            TerrainKind::Rough => {
                let fractal = Fractal {
                    octaves: self.octaves,
                    lacunarity: rng.random_range(self.lacunarity_range[0]..=self.lacunarity_range[1]),
                    gain: self.gain,
                    base_frequency: self.base_frequency,
                };
                let perlin = Perlin::new(rng.random());
                let raw: Vec<f64> = (0..nx * ny)
                    .map(|i| {
                        let (x, y) = t.cell_center(i % nx, i / nx);
                        fractal.sample(&perlin, x, y)
                    })
                    .collect();
                let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let span = (hi - lo).max(1e-12);
                for (i, r) in raw.iter().enumerate() {
                    let w = self.spawn_weight(&t, i);
                    t.heights[i] = (amplitude * w * (r - lo) / span) as f32;
                }
            }
            TerrainKind::DiscreteRough => {
                let tx = ((self.x_range[1] - self.x_range[0]) / self.discrete_tile).ceil() as usize;
                let ty = ((self.y_range[1] - self.y_range[0]) / self.discrete_tile).ceil() as usize;
                let tiles: Vec<f64> = (0..tx * ty).map(|_| rng.random::<f64>()).collect();
                for i in 0..nx * ny {
                    let (x, y) = t.cell_center(i % nx, i / nx);
                    let cx = (((x - self.x_range[0]) / self.discrete_tile) as usize).min(tx - 1);
                    let cy = (((y - self.y_range[0]) / self.discrete_tile) as usize).min(ty - 1);
                    let inside_pad = x.hypot(y) < self.spawn_radius;
                    let h = if inside_pad { 0.0 } else { amplitude * tiles[cy * tx + cx] };
                    t.heights[i] = h as f32;
                }
            }
            TerrainKind::Step => {
                for i in 0..nx * ny {
                    let (x, _) = t.cell_center(i % nx, i / nx);
                    let h = self
                        .step_regions()
                        .iter()
                        .zip(self.step_heights.iter())
                        .find(|([a, b], _)| x >= *a && x < *b)
                        .map_or(0.0, |(_, h)| h * terrain_factor);
                    t.heights[i] = h as f32;
                }
            }
            TerrainKind::Cliff => {
                let depth = terrain_factor * self.cliff_depth_scale;
                for i in 0..nx * ny {
                    let (x, _) = t.cell_center(i % nx, i / nx);
                    if x >= self.cliff_x {
                        t.heights[i] = (-depth) as f32;
                    }
                }
            }
            TerrainKind::Slippery => {
                for i in 0..nx * ny {
                    let (x, _) = t.cell_center(i % nx, i / nx);
                    if x >= self.slippery_band[0] && x < self.slippery_band[1] {
                        t.friction[i] = self.slippery_friction as f32;
                    }
                }
            }
            TerrainKind::Conveyor => {
                let speed = self.conveyor_speed + self.conveyor_speed_per_factor * terrain_factor;
                let blocks =
                    ((self.conveyor_band[1] - self.conveyor_band[0]) / self.conveyor_block).ceil()
                        as usize;
                let signs: Vec<f64> = (0..blocks)
                    .map(|b| if b % 2 == 0 { 1.0 } else { -1.0 })
                    .collect();
                for i in 0..nx * ny {
                    let (x, _) = t.cell_center(i % nx, i / nx);
                    if x >= self.conveyor_band[0] && x < self.conveyor_band[1] {
                        let b = (((x - self.conveyor_band[0]) / self.conveyor_block) as usize)
                            .min(blocks - 1);
                        t.conveyor[i] = [(signs[b] * speed) as f32, 0.0];
                    }
                }
            }
        }
        Ok(t)
    }

    /// `[start, end)` x-intervals of the raised step slabs.
    pub fn step_regions(&self) -> [[f64; 2]; 3] {
        let mut out = [[0.0; 2]; 3];
        for (k, r) in out.iter_mut().enumerate() {
            let a = self.step_start + k as f64 * self.step_spacing;
            *r = [a, a + self.step_depth];
        }
        out
    }

    fn spawn_weight(&self, t: &Terrain, i: usize) -> f64 {
        let (x, y) = t.cell_center(i % t.nx, i / t.nx);
        let r = x.hypot(y);
        smoothstep((r - 0.6 * self.spawn_radius) / (0.8 * self.spawn_radius))
    }
}

impl Terrain {
    pub fn flat(friction: f64) -> Terrain {
        let cfg = TerrainConfig {
            default_friction: friction,
            ..TerrainConfig::default()
        };
        cfg.generate(TerrainKind::Flat, 0.0, 0)
            .expect("default flat terrain is valid")
    }

    #[inline]
    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        let cs = self.cell_size as f64;
        (
            self.origin[0] as f64 + (ix as f64 + 0.5) * cs,
            self.origin[1] as f64 + (iy as f64 + 0.5) * cs,
        )
    }

    #[inline]
    fn grid_coord(&self, x: f64, y: f64) -> (f64, f64) {
        let cs = self.cell_size as f64;
        let gx = ((x - self.origin[0] as f64) / cs - 0.5).clamp(0.0, (self.nx - 1) as f64);
        let gy = ((y - self.origin[1] as f64) / cs - 0.5).clamp(0.0, (self.ny - 1) as f64);
        (gx, gy)
    }

    #[inline]
    fn nearest(&self, x: f64, y: f64) -> usize {
        let (gx, gy) = self.grid_coord(x, y);
        let ix = (gx.round() as usize).min(self.nx - 1);
        let iy = (gy.round() as usize).min(self.ny - 1);
        iy * self.nx + ix
    }

    /// Bilinear height between cell centers; clamps to the border outside.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = self.grid_coord(x, y);
        let ix0 = gx.floor() as usize;
        let iy0 = gy.floor() as usize;
        let ix1 = (ix0 + 1).min(self.nx - 1);
        let iy1 = (iy0 + 1).min(self.ny - 1);
        let tx = gx - ix0 as f64;
        let ty = gy - iy0 as f64;
        let h = |ix: usize, iy: usize| self.heights[iy * self.nx + ix] as f64;
        let a = h(ix0, iy0) + tx * (h(ix1, iy0) - h(ix0, iy0));
        let b = h(ix0, iy1) + tx * (h(ix1, iy1) - h(ix0, iy1));
        a + ty * (b - a)
    }

    /// Nearest-cell friction coefficient.
    pub fn friction(&self, x: f64, y: f64) -> f64 {
        self.friction[self.nearest(x, y)] as f64
    }

    /// Nearest-cell conveyor surface velocity.
    pub fn conveyor(&self, x: f64, y: f64) -> [f64; 2] {
        let [vx, vy] = self.conveyor[self.nearest(x, y)];
        [vx as f64, vy as f64]
    }

    /// Copy with every cell's friction replaced by `mu`, except cells already
    /// below it (the slippery band keeps its low value).
    pub fn with_friction_cap(&self, mu: f64) -> Terrain {
        let mut out = self.clone();
        for f in out.friction.iter_mut() {
            *f = f.min(mu as f32);
        }
        out
    }

    pub fn max_height(&self) -> f64 {
        self.heights.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64
    }

    pub fn min_height(&self) -> f64 {
        self.heights.iter().cloned().fold(f32::INFINITY, f32::min) as f64
    }
}

pub use io::{read_terrain, write_terrain};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_is_level_with_uniform_friction() {
        let t = generate(TerrainKind::Flat, 3.0, 5).unwrap();
        assert!(t.heights.iter().all(|h| *h == 0.0));
        assert!(t.friction.iter().all(|f| *f == t.friction[0]));
        assert!(t.conveyor.iter().all(|c| *c == [0.0, 0.0]));
    }

    #[test]
    fn rough_at_zero_factor_equals_flat() {
        let r = generate(TerrainKind::Rough, 0.0, 42).unwrap();
        let f = generate(TerrainKind::Flat, 0.0, 42).unwrap();
        assert_eq!(r.heights, f.heights);
        assert_eq!(r.friction, f.friction);
        assert_eq!(r.conveyor, f.conveyor);
    }

    #[test]
    fn rough_peak_to_peak_scales_linearly() {
        let a = generate(TerrainKind::Rough, 0.25, 8).unwrap();
        let b = generate(TerrainKind::Rough, 0.5, 8).unwrap();
        let ptp = |t: &Terrain| t.max_height() - t.min_height();
        assert!((ptp(&b) - 2.0 * ptp(&a)).abs() < 1e-9);
        assert!(ptp(&a) > 0.0);
    }

    #[test]
    fn discrete_peak_to_peak_scales_linearly() {
        let a = generate(TerrainKind::DiscreteRough, 0.25, 8).unwrap();
        let b = generate(TerrainKind::DiscreteRough, 0.5, 8).unwrap();
        let ptp = |t: &Terrain| t.max_height() - t.min_height();
        assert!((ptp(&b) - 2.0 * ptp(&a)).abs() < 1e-9);
    }

    #[test]
    fn same_seed_identical() {
        for kind in TerrainKind::ALL {
            let a = generate(kind, 0.7, 99).unwrap();
            let b = generate(kind, 0.7, 99).unwrap();
            assert_eq!(a, b, "{kind}");
        }
        let a = generate(TerrainKind::Rough, 0.7, 1).unwrap();
        let b = generate(TerrainKind::Rough, 0.7, 2).unwrap();
        assert_ne!(a.heights, b.heights);
    }

    #[test]
    fn kind_specific_features() {
        let cfg = TerrainConfig::default();
        let s = generate(TerrainKind::Slippery, 1.0, 0).unwrap();
        assert!((s.friction(2.0, 0.0) - 0.22).abs() < 1e-7);
        assert_eq!(s.friction(0.0, 0.0), 1.0);

        let c = generate(TerrainKind::Conveyor, 0.0, 0).unwrap();
        assert!(c.conveyor.iter().any(|v| v[0] != 0.0));
        assert_eq!(c.conveyor(0.0, 0.0), [0.0, 0.0]);

        let st = generate(TerrainKind::Step, 1.0, 0).unwrap();
        for (region, h) in cfg.step_regions().iter().zip(cfg.step_heights) {
            let mid = 0.5 * (region[0] + region[1]);
            assert!((st.height(mid, 0.0) - h).abs() < 1e-7);
        }

        let cl = generate(TerrainKind::Cliff, 0.5, 0).unwrap();
        assert!((cl.height(3.0, 0.0) + 0.1).abs() < 1e-7);
        assert_eq!(cl.height(0.0, 0.0), 0.0);
    }

    #[test]
    fn unknown_kind_is_config_error() {
        assert!(matches!("lava".parse::<TerrainKind>(), Err(Error::Config(_))));
        assert!(generate(TerrainKind::Rough, -1.0, 0).is_err());
    }

    #[test]
    fn sampling_contract() {
        let t = generate(TerrainKind::Rough, 1.0, 3).unwrap();
        // cell centers
        for &(ix, iy) in &[(10, 10), (200, 150), (0, 0), (t.nx - 1, t.ny - 1)] {
            let (x, y) = t.cell_center(ix, iy);
            assert_eq!(t.height(x, y), t.heights[iy * t.nx + ix] as f64);
        }
        // midpoint between two neighbours
        let (x0, y0) = t.cell_center(100, 80);
        let (x1, _) = t.cell_center(101, 80);
        let mid = t.height(0.5 * (x0 + x1), y0);
        let mean = 0.5 * (t.heights[80 * t.nx + 100] as f64 + t.heights[80 * t.nx + 101] as f64);
        assert!((mid - mean).abs() < 1e-12);
        // clamping outside
        let (bx, by) = t.cell_center(t.nx - 1, 5);
        assert_eq!(t.height(bx + 50.0, by), t.heights[5 * t.nx + t.nx - 1] as f64);
        let (cx, cy) = t.cell_center(0, 0);
        assert_eq!(t.height(cx - 3.0, cy - 7.0), t.heights[0] as f64);
        assert_eq!(t.friction(-1e3, -1e3), t.friction[0] as f64);
    }

    #[test]
    fn height_is_lipschitz() {
        let t = generate(TerrainKind::Rough, 1.0, 4).unwrap();
        let mut max_slope = 0.0f64;
        for iy in 0..t.ny {
            for ix in 0..t.nx - 1 {
                let d = (t.heights[iy * t.nx + ix + 1] - t.heights[iy * t.nx + ix]).abs();
                max_slope = max_slope.max(d as f64);
            }
        }
        for iy in 0..t.ny - 1 {
            for ix in 0..t.nx {
                let d = (t.heights[(iy + 1) * t.nx + ix] - t.heights[iy * t.nx + ix]).abs();
                max_slope = max_slope.max(d as f64);
            }
        }
        let bound = 2.0 * max_slope / t.cell_size as f64 + 1e-9;
        let h = 1e-4;
        for k in 0..2000 {
            let x = -2.0 + k as f64 * 0.0031;
            let y = 0.7 + k as f64 * 0.0017;
            let g = ((t.height(x + h, y) - t.height(x, y)).abs()
                + (t.height(x, y + h) - t.height(x, y)).abs())
                / h;
            assert!(g <= bound, "{g} > {bound}");
        }
    }
}
