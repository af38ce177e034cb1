use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over raw `f64` bit patterns; equal digests mean bitwise-equal parameters.
pub struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_f64s<'a>(&mut self, values: impl Iterator<Item = &'a f64>) {
        for v in values {
            self.write_bytes(&v.to_bits().to_le_bytes());
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

/// Independent stream for a named purpose under one run seed.
pub fn stream_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h = Fnv::default();
    h.write_bytes(&seed.to_le_bytes());
    h.write_bytes(tag.as_bytes());
    ChaCha8Rng::seed_from_u64(h.finish())
}

/// Linear-interpolation quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert!((quantile_sorted(&v, 0.5) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn stream_rngs_differ_by_tag() {
        use rand::Rng;
        let a: u64 = stream_rng(1, "a").random();
        let b: u64 = stream_rng(1, "b").random();
        let a2: u64 = stream_rng(1, "a").random();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }
}
