//! Seeded 2D lattice-gradient noise and its fractal sum.

use crate::voxelizer::derive_seed;

#[derive(Debug, Clone, Copy)]
pub struct GradientNoise {
    seed: u64,
}

impl GradientNoise {
    pub fn new(seed: u64) -> Self {
        GradientNoise { seed }
    }

    fn gradient(&self, ix: i64, iy: i64) -> [f64; 2] {
        let h = derive_seed(self.seed, (ix as u64).wrapping_mul(0x9E37_79B1) ^ (iy as u64).rotate_left(32));
        let angle = (h >> 11) as f64 / (1u64 << 53) as f64 * std::f64::consts::TAU;
        [angle.cos(), angle.sin()]
    }

    /// Smooth noise in roughly [-1, 1], zero at every lattice node.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (ix, iy) = (x0 as i64, y0 as i64);
        let dot = |cx: i64, cy: i64| {
            let g = self.gradient(ix + cx, iy + cy);
            g[0] * (fx - cx as f64) + g[1] * (fy - cy as f64)
        };
        let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
        let (u, v) = (fade(fx), fade(fy));
        let a = dot(0, 0) + u * (dot(1, 0) - dot(0, 0));
        let b = dot(0, 1) + u * (dot(1, 1) - dot(0, 1));
        // Unit gradients bound the raw value by √2/2.
        (a + v * (b - a)) * std::f64::consts::SQRT_2
    }

    /// Sum of `octaves` layers, each at twice the frequency and `gain`
    /// times the amplitude of the previous one, normalized so the total
    /// amplitude is at most 1.
    pub fn fbm(&self, x: f64, y: f64, octaves: u32, gain: f64) -> f64 {
        let mut total = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        let mut freq = 1.0;
        for o in 0..octaves {
            let layer = GradientNoise::new(derive_seed(self.seed, o as u64 + 1));
            total += amp * layer.sample(x * freq, y * freq);
            norm += amp;
            amp *= gain;
            freq *= 2.0;
        }
        if norm > 0.0 {
            total / norm
        } else {
            0.0
        }
    }
}
