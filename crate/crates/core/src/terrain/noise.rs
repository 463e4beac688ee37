//! Seeded 2-D gradient (Perlin) noise with fractional-octave fBm.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Classic improved-Perlin noise over a seeded permutation table.
#[derive(Debug, Clone)]
pub struct Perlin {
    perm: [u8; 512],
}

const GRADIENTS: [(f64, f64); 8] = [
    (1.0, 0.0),
    (-1.0, 0.0),
    (0.0, 1.0),
    (0.0, -1.0),
    (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
    (-std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
    (std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2),
    (-std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2),
];

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

impl Perlin {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut base: Vec<u8> = (0..=255).collect();
        base.shuffle(&mut rng);
        let mut perm = [0u8; 512];
        for i in 0..512 {
            perm[i] = base[i & 255];
        }
        Self { perm }
    }

    #[inline]
    fn grad(&self, ix: i64, iy: i64, dx: f64, dy: f64) -> f64 {
        let h = self.perm[(self.perm[(ix & 255) as usize] as usize + (iy & 255) as usize) & 511];
        let (gx, gy) = GRADIENTS[(h & 7) as usize];
        gx * dx + gy * dy
    }

    /// Noise value in roughly [-1, 1]; zero on integer lattice points.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let (ix, iy) = (x0 as i64, y0 as i64);
        let (fx, fy) = (x - x0, y - y0);
        let u = fade(fx);
        let v = fade(fy);
        let n00 = self.grad(ix, iy, fx, fy);
        let n10 = self.grad(ix + 1, iy, fx - 1.0, fy);
        let n01 = self.grad(ix, iy + 1, fx, fy - 1.0);
        let n11 = self.grad(ix + 1, iy + 1, fx - 1.0, fy - 1.0);
        lerp(lerp(n00, n10, u), lerp(n01, n11, u), v)
    }
}

/// Fractal sum parameters.
///
/// `octaves` counts detail layers on top of the base layer and may be
/// fractional: octave `i >= 1` is blended in with weight
/// `clamp(octaves - (i - 1), 0, 1)`. So `0.5` means the base layer plus half
/// of one detail layer. Each detail layer scales frequency by `lacunarity`
/// and amplitude by `gain`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fractal {
    pub octaves: f64,
    pub lacunarity: f64,
    pub gain: f64,
    pub base_frequency: f64,
}

impl Fractal {
    pub fn sample(&self, noise: &Perlin, x: f64, y: f64) -> f64 {
        let mut total = noise.sample(x * self.base_frequency, y * self.base_frequency);
        let mut freq = self.base_frequency;
        let mut amp = 1.0;
        let layers = self.octaves.ceil().max(0.0) as usize;
        for i in 1..=layers {
            freq *= self.lacunarity;
            amp *= self.gain;
            let blend = (self.octaves - (i as f64 - 1.0)).clamp(0.0, 1.0);
            // Offset each layer so lattice zeros do not line up.
            let off = 17.31 * i as f64;
            total += blend * amp * noise.sample(x * freq + off, y * freq - off);
        }
        total
    }
}
