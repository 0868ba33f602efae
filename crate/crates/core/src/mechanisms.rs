//! Randomized primitives: discrete Laplace noise, randomized rounding and
//! value clipping, plus the seeded stream hierarchy every random draw in the
//! crate comes from.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::error::{param_err, Result};
use crate::scalar::Scalar;

/// Deterministic random stream addressed by `(seed, path)`.
///
/// Streams derived from the same seed with different paths are independent,
/// and a stream's draws depend only on its address, never on which thread or
/// in what order other streams were consumed.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    path: Vec<u64>,
    rng: ChaCha8Rng,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_key(seed: u64, path: &[u64]) -> [u8; 32] {
    let mut state = splitmix(seed);
    for (depth, &p) in path.iter().enumerate() {
        state = splitmix(state ^ splitmix(p ^ splitmix(depth as u64 + 1)));
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    key
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, Vec::new())
    }

    fn at(seed: u64, path: Vec<u64>) -> Self {
        let rng = ChaCha8Rng::from_seed(derive_key(seed, &path));
        Self { seed, path, rng }
    }

    /// Fresh stream one level below this one. Independent of how many draws
    /// were already taken from `self`.
    pub fn substream(&self, index: u64) -> Self {
        let mut path = self.path.clone();
        path.push(index);
        Self::at(self.seed, path)
    }

    pub fn substream_path(&self, indices: &[u64]) -> Self {
        let mut path = self.path.clone();
        path.extend_from_slice(indices);
        Self::at(self.seed, path)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Parameter `a` of the discrete Laplace distribution, pmf ∝ exp(-a|k|).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DLapParam<T>(T);

impl<T: Scalar> DLapParam<T> {
    pub fn new(a: T) -> Result<Self> {
        if !(a.is_finite() && a > T::zero()) {
            return param_err(format!("discrete Laplace parameter must be positive, got {a}"));
        }
        Ok(Self(a))
    }

    /// Noise parameter for privacy budget `epsilon` spread over `gamma`.
    pub fn for_budget(epsilon: T, gamma: u64) -> Result<Self> {
        Self::new(epsilon / T::from_count(gamma))
    }

    pub fn get(self) -> T {
        self.0
    }

    pub fn pmf(self, k: i64) -> T {
        let a = self.0;
        // (e^a - 1)/(e^a + 1) == tanh(a/2)
        (a / T::lit(2.0)).tanh() * (-a * T::from_int(k.abs())).exp()
    }
}

/// Draws from DLap(a) as the difference of two i.i.d. geometric variates
/// with success probability 1 - e^{-a}. No truncation.
pub fn dlap_sample<T: Scalar, R: Rng + ?Sized>(p: DLapParam<T>, rng: &mut R) -> i64 {
    let a = p.0.as_f64();
    geometric(a, rng) - geometric(a, rng)
}

/// Failures before the first success, P(G >= k) = e^{-a k}.
fn geometric<R: Rng + ?Sized>(a: f64, rng: &mut R) -> i64 {
    let e: f64 = rng.sample(Exp1);
    (e / a).floor() as i64
}

/// Var(DLap(a)) = 2 e^a / (e^a - 1)^2, evaluated without overflow.
pub fn dlap_variance<T: Scalar>(p: DLapParam<T>) -> T {
    let a = p.0;
    let q = (-a).exp();
    let denom = (-a).exp_m1();
    T::lit(2.0) * q / (denom * denom)
}

/// Unbiased randomized rounding of a nonnegative real: `ceil(w)` with
/// probability `w - floor(w)`, else `floor(w)`.
pub fn randomized_round<T: Scalar, R: Rng + ?Sized>(w: T, rng: &mut R) -> u64 {
    debug_assert!(w >= T::zero() && w.is_finite(), "randomized_round({w})");
    let base = w.floor();
    let frac = (w - base).as_f64();
    let lo = base.to_u64().unwrap_or(0);
    if frac > 0.0 && rng.random::<f64>() < frac {
        lo + 1
    } else {
        lo
    }
}

/// Variance of [`randomized_round`] at `w`.
pub fn randomized_round_variance<T: Scalar>(w: T) -> T {
    let frac = w - w.floor();
    frac * (T::one() - frac)
}

#[inline]
pub fn clip<T: Scalar>(v: T, threshold: T) -> T {
    v.min(threshold)
}

/// Part of `v` removed by clipping at `threshold`.
#[inline]
pub fn rem<T: Scalar>(v: T, threshold: T) -> T {
    (v - threshold).max(T::zero())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;

    #[test]
    fn substreams_are_addressed_not_sequenced() {
        let root = RngStream::new(7);
        let mut a = root.substream(3);
        let mut noisy = root.clone();
        for _ in 0..10 {
            noisy.next_u64();
        }
        let mut b = noisy.substream(3);
        assert_eq!(a.next_u64(), b.next_u64());
        let mut c = root.substream(4);
        let mut a2 = root.substream(3);
        assert_ne!(a2.next_u64(), c.next_u64());
        assert_eq!(root.substream(1).substream(2).path(), &[1, 2]);
        let mut x = root.substream(1).substream(2);
        let mut y = root.substream_path(&[1, 2]);
        assert_eq!(x.next_u64(), y.next_u64());
    }

    #[test]
    fn dlap_parameter_validation() {
        assert!(DLapParam::new(0.0).is_err());
        assert!(DLapParam::new(-1.0).is_err());
        assert!(DLapParam::new(f64::NAN).is_err());
        assert!(DLapParam::new(f64::INFINITY).is_err());
        assert!(DLapParam::new(1e-9).is_ok());
    }

    #[test]
    fn dlap_variance_closed_form() {
        let e = std::f64::consts::E;
        let v = dlap_variance(DLapParam::new(1.0).unwrap());
        assert!((v - 2.0 * e / (e - 1.0).powi(2)).abs() < 1e-14);
        assert!((v - 1.841_347).abs() < 1e-5);
        let big = dlap_variance(DLapParam::new(50.0).unwrap());
        assert!(big < 1e-19 && big > 0.0);
        let mut prev = f64::INFINITY;
        for i in 1..200 {
            let v = dlap_variance(DLapParam::new(i as f64 * 0.25).unwrap());
            assert!(v < prev);
            prev = v;
        }
        // no overflow far out
        assert!(dlap_variance(DLapParam::new(800.0_f64).unwrap()) >= 0.0);
        let f32v = dlap_variance(DLapParam::new(1.0_f32).unwrap());
        assert!((f32v - 1.841_347).abs() < 1e-4);
    }

    #[test]
    fn dlap_pmf_sums_to_one() {
        let p = DLapParam::new(0.5).unwrap();
        let total: f64 = (-200..=200).map(|k| p.pmf(k)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let e20 = 20f64.exp();
        let p20 = DLapParam::new(20.0).unwrap();
        assert!((p20.pmf(0) - (e20 - 1.0) / (e20 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn dlap_large_parameter_is_almost_surely_zero() {
        let mut rng = RngStream::new(1);
        let p = DLapParam::new(20.0).unwrap();
        assert!((0..10_000).all(|_| dlap_sample(p, &mut rng) == 0));
    }

    #[test]
    fn dlap_small_parameter_matches_variance() {
        let mut rng = RngStream::new(2);
        let p = DLapParam::new(0.1).unwrap();
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| dlap_sample(p, &mut rng) as f64).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected = dlap_variance(p);
        assert!((var / expected - 1.0).abs() < 0.02, "{var} vs {expected}");
        assert!(mean.abs() < 5.0 * expected.sqrt() / 1e3);
    }

    #[test]
    fn dlap_is_symmetric() {
        let mut rng = RngStream::new(3);
        let p = DLapParam::new(1.0).unwrap();
        let n = 1_000_000i64;
        let mut balance = 0i64;
        for _ in 0..n {
            balance += dlap_sample(p, &mut rng).signum();
        }
        assert!((balance.abs() as f64) < 4.0 * (n as f64).sqrt());
    }

    #[test]
    fn randomized_round_integer_is_exact() {
        let mut rng = RngStream::new(4);
        assert!((0..1000).all(|_| randomized_round(7.0, &mut rng) == 7));
        assert!((0..1000).all(|_| randomized_round(0.0, &mut rng) == 0));
    }

    #[test]
    fn randomized_round_worked_value() {
        let mut rng = RngStream::new(5);
        let n = 100_000;
        let mut ups = 0;
        for _ in 0..n {
            match randomized_round(11468.8, &mut rng) {
                11469 => ups += 1,
                11468 => {}
                other => panic!("out of range: {other}"),
            }
        }
        let freq = ups as f64 / n as f64;
        assert!((freq - 0.8).abs() < 0.01, "{freq}");
    }

    #[test]
    fn randomized_round_is_unbiased() {
        let mut rng = RngStream::new(6);
        let n = 100_000;
        let mean = (0..n).map(|_| randomized_round(2.5, &mut rng) as f64).sum::<f64>() / n as f64;
        assert!((mean - 2.5).abs() < 0.01);
        assert_eq!(randomized_round_variance(2.5), 0.25);
        assert_eq!(randomized_round_variance(3.0), 0.0);
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip(21.0, 30.0), 21.0);
        assert_eq!(rem(21.0, 30.0), 0.0);
        assert_eq!(clip(3.0, 2.0), 2.0);
        assert_eq!(rem(3.0, 2.0), 1.0);
        assert_eq!(clip(0.0, 0.5), 0.0);
    }

    proptest! {
        #[test]
        fn clip_plus_rem_is_identity(v in 0.0f64..1e9, c in 1e-6f64..1e9) {
            // exact up to one rounding of the final sum
            prop_assert!((clip(v, c) + rem(v, c) - v).abs() <= v * f64::EPSILON);
        }

        #[test]
        fn randomized_round_stays_in_bracket(w in 0.0f64..1e6, seed in any::<u64>()) {
            let mut rng = RngStream::new(seed);
            let r = randomized_round(w, &mut rng) as f64;
            prop_assert!(r == w.floor() || r == w.ceil());
            prop_assert!(randomized_round_variance(w) <= 0.25);
        }
    }
}
