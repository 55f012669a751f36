/// Deterministic, platform-independent random number generator.
///
/// Algorithm: xoshiro256** (Blackman & Vigna) with the four state words
/// seeded from a SplitMix64 stream, exactly as the reference implementation
/// recommends. Both generators are pure 64-bit integer arithmetic, so a given
/// seed produces the same draw sequence on every platform. The state is four
/// words, cheap to snapshot into checkpoints and restore bit-exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: [u64; 4],
}

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut x = seed;
        let state = [
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
        ];
        Rng { state }
    }

    /// Raw state snapshot for checkpointing.
    pub fn state(&self) -> [u64; 4] {
        self.state
    }

    pub fn from_state(state: [u64; 4]) -> Self {
        Rng { state }
    }

    /// Derives an independent generator; advances this one by one draw.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Computed as `next_u64() % n`; the modulo
    /// bias is below 2^-50 for every n used here and keeping the plain form
    /// lets independent reimplementations reproduce shuffles exactly.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below: n must be positive");
        self.next_u64() % n
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller. Uses libm transcendentals so the
    /// result is bit-identical across platforms. No spare-value caching, so
    /// the state stays a pure function of the draw count.
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        r * libm::cos(2.0 * std::f64::consts::PI * u2)
    }

    /// Normal(0, std^2) truncated to [-2 std, 2 std] by redraw.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.standard_normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_reference_stream() {
        // First draws for seed 42, frozen from an independent implementation
        // of the published xoshiro256** + SplitMix64 algorithm.
        let mut rng = Rng::new(42);
        let expect = [
            0x15780B2E0C2EC716u64,
            0x6104D9866D113A7E,
            0xAE17533239E499A1,
            0xECB8AD4703B360A1,
            0xFDE6DC7FE2EC5E64,
        ];
        for (i, &e) in expect.iter().enumerate() {
            assert_eq!(rng.next_u64(), e, "draw {i}");
        }
        assert_eq!(
            rng.state(),
            [
                0x7E3FEDBEA92A13A5,
                0xC9A25BA0F11C828C,
                0xC38346747039F414,
                0xCF55C271F2386FA5
            ]
        );
        // Seed 0 first draw from the reference test vector.
        assert_eq!(Rng::new(0).next_u64(), 0x99EC5F36CB75F2B4);
    }

    #[test]
    fn f64_conversion_matches_reference() {
        let mut rng = Rng::new(42);
        let expect = [
            0.08386297105988216,
            0.3789802506626686,
            0.6800434110281394,
        ];
        for &e in &expect {
            assert_eq!(rng.next_f64(), e);
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn state_round_trip_resumes_stream() {
        let mut a = Rng::new(99);
        for _ in 0..17 {
            a.next_u64();
        }
        let mut b = Rng::from_state(a.state());
        for _ in 0..50 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn uniform_range_and_mean() {
        let mut rng = Rng::new(1);
        let n = 20_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = rng.next_f64();
            assert!((0.0..1.0).contains(&x));
            sum += x;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn next_below_covers_range() {
        let mut rng = Rng::new(3);
        let mut seen = [false; 10];
        for _ in 0..1000 {
            let v = rng.next_below(10) as usize;
            assert!(v < 10);
            seen[v] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn truncated_normal_bounds_and_spread() {
        let mut rng = Rng::new(5);
        let std = 0.02;
        let n = 20_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let z = rng.truncated_normal(std);
            assert!(z.abs() <= 2.0 * std + 1e-12);
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 2e-3, "mean {mean}");
        // Truncation at 2 sigma shrinks the variance to about 0.774 sigma^2.
        let expected_var = 0.7737 * std * std;
        assert!(
            (var - expected_var).abs() < 0.1 * expected_var,
            "var {var} vs {expected_var}"
        );
    }

    #[test]
    fn fork_streams_are_uncorrelated_prefixes() {
        let mut root = Rng::new(11);
        let mut a = root.fork();
        let mut b = root.fork();
        let first_a: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let first_b: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        assert_ne!(first_a, first_b);
    }
}
