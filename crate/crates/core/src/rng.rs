//! Counter-based random streams.
//!
//! Every draw is a pure function of `(key, counter)`, so noise for a given
//! frame and position is the same no matter in which order it is requested.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// The splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A keyed stream. Sub-streams are derived with [`Stream::child`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stream {
    key: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self {
            key: mix64(seed ^ 0x6D73_635F_7365_6564),
        }
    }

    pub fn child(self, tag: u64) -> Self {
        Self {
            key: mix64(self.key.wrapping_add(GOLDEN.wrapping_mul(tag.wrapping_add(1)))),
        }
    }

    #[inline]
    pub fn bits(self, counter: u64) -> u64 {
        mix64(self.key ^ mix64(counter.wrapping_mul(GOLDEN).wrapping_add(GOLDEN)))
    }

    /// Uniform in the open interval (0, 1).
    #[inline]
    pub fn uniform(self, counter: u64) -> f64 {
        ((self.bits(counter) >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller on two derived uniforms.
    #[inline]
    pub fn normal(self, counter: u64) -> f64 {
        let u1 = self.uniform(counter.wrapping_mul(2));
        let u2 = self.uniform(counter.wrapping_mul(2).wrapping_add(1));
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(self, counter: u64, n: u64) -> u64 {
        assert!(n > 0);
        ((self.bits(counter) as u128 * n as u128) >> 64) as u64
    }

    /// Normal truncated to `[-2, 2]` standard deviations, by resampling.
    pub fn truncated_normal(self, counter: u64) -> f64 {
        let sub = self.child(counter);
        (0u64..)
            .map(|attempt| sub.normal(attempt))
            .find(|z| z.abs() <= 2.0)
            .unwrap()
    }
}

/// Sequential cursor over a [`Stream`], for code that just wants "the next draw".
#[derive(Debug, Clone)]
pub struct Cursor {
    stream: Stream,
    next: u64,
}

impl Cursor {
    pub fn new(stream: Stream) -> Self {
        Self { stream, next: 0 }
    }

    fn advance(&mut self) -> u64 {
        let c = self.next;
        self.next += 1;
        c
    }

    pub fn uniform(&mut self) -> f64 {
        let c = self.advance();
        self.stream.uniform(c)
    }

    pub fn normal(&mut self) -> f64 {
        let c = self.advance();
        self.stream.normal(c)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        let c = self.advance();
        self.stream.below(c, n)
    }

    pub fn truncated_normal(&mut self) -> f64 {
        let c = self.advance();
        self.stream.truncated_normal(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_pure_functions_of_counter() {
        let s = Stream::new(7).child(3);
        let forward: Vec<f64> = (0..100).map(|i| s.normal(i)).collect();
        let backward: Vec<f64> = (0..100).rev().map(|i| s.normal(i)).collect();
        assert!(forward.iter().eq(backward.iter().rev()));
    }

    #[test]
    fn children_are_distinct() {
        let s = Stream::new(1);
        assert_ne!(s.child(0).bits(0), s.child(1).bits(0));
        assert_ne!(Stream::new(1).bits(0), Stream::new(2).bits(0));
    }

    #[test]
    fn normal_moments() {
        let s = Stream::new(42);
        let n = 200_000u64;
        let (mut m1, mut m2) = (0.0, 0.0);
        for i in 0..n {
            let z = s.normal(i);
            m1 += z;
            m2 += z * z;
        }
        m1 /= n as f64;
        m2 /= n as f64;
        assert!(m1.abs() < 0.01, "mean {m1}");
        assert!((m2 - 1.0).abs() < 0.02, "second moment {m2}");
    }

    #[test]
    fn below_stays_in_range() {
        let s = Stream::new(5);
        for i in 0..1000 {
            assert!(s.below(i, 7) < 7);
        }
    }
}
