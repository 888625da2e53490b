//! Seeded 2-D gradient noise for the retina background.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct GradientNoise {
    perm: [u8; 512],
}

impl GradientNoise {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut base: Vec<u8> = (0..=255).collect();
        base.shuffle(&mut rng);
        let mut perm = [0u8; 512];
        for (i, p) in perm.iter_mut().enumerate() {
            *p = base[i & 255];
        }
        Self { perm }
    }

    fn grad(hash: u8, x: f64, y: f64) -> f64 {
        match hash & 7 {
            0 => x + y,
            1 => -x + y,
            2 => x - y,
            3 => -x - y,
            4 => x,
            5 => -x,
            6 => y,
            _ => -y,
        }
    }

    /// Noise in roughly [-1, 1].
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let xf = x.floor();
        let yf = y.floor();
        let xi = (xf as i64 & 255) as usize;
        let yi = (yf as i64 & 255) as usize;
        let (dx, dy) = (x - xf, y - yf);
        let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
        let (u, v) = (fade(dx), fade(dy));
        let p = &self.perm;
        let aa = p[p[xi] as usize + yi];
        let ab = p[p[xi] as usize + yi + 1];
        let ba = p[p[xi + 1] as usize + yi];
        let bb = p[p[xi + 1] as usize + yi + 1];
        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
        let x1 = lerp(Self::grad(aa, dx, dy), Self::grad(ba, dx - 1.0, dy), u);
        let x2 = lerp(Self::grad(ab, dx, dy - 1.0), Self::grad(bb, dx - 1.0, dy - 1.0), u);
        lerp(x1, x2, v)
    }

    /// Fractal sum of `octaves` noise layers, normalized to roughly [-1, 1].
    pub fn fbm(&self, x: f64, y: f64, octaves: usize) -> f64 {
        let (mut amp, mut freq, mut sum, mut norm) = (1.0, 1.0, 0.0, 0.0);
        for _ in 0..octaves {
            sum += amp * self.sample(x * freq, y * freq);
            norm += amp;
            amp *= 0.5;
            freq *= 2.0;
        }
        sum / norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_bounded() {
        let a = GradientNoise::new(3);
        let b = GradientNoise::new(3);
        let mut spread = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..500 {
            let (x, y) = (i as f64 * 0.173, i as f64 * 0.091);
            let v = a.fbm(x, y, 4);
            assert_eq!(v, b.fbm(x, y, 4));
            assert!(v.abs() <= 1.5);
            spread = (spread.0.min(v), spread.1.max(v));
        }
        assert!(spread.1 - spread.0 > 0.3, "noise should not be flat");
    }
}
