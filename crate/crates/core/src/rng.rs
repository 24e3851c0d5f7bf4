//! Counter-based random numbers.
//!
//! Thresholds for stochastic opacity masking are a pure function of
//! `(seed, iteration, view, pixel, slot)`, so a training run is reproducible
//! regardless of how pixels are scheduled across threads.

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key identifying one pixel of one view at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelKey {
    pub seed: u64,
    pub iteration: u64,
    pub view: u64,
    pub pixel: u64,
}

impl PixelKey {
    pub fn new(seed: u64, iteration: u64, view: u64, pixel: u64) -> Self {
        Self { seed, iteration, view, pixel }
    }

    /// Stream of uniforms in `[0, 1)` for the fragments of this pixel.
    pub fn stream(&self) -> CounterRng {
        let mut h = splitmix64(self.seed);
        h = splitmix64(h ^ self.iteration);
        h = splitmix64(h ^ self.view.rotate_left(21));
        h = splitmix64(h ^ self.pixel.rotate_left(42));
        CounterRng { base: h, counter: 0 }
    }
}

/// Stateless-per-draw generator: draw `k` is `hash(base, k)`.
#[derive(Debug, Clone)]
pub struct CounterRng {
    base: u64,
    counter: u64,
}

impl CounterRng {
    pub fn from_seed(seed: u64) -> Self {
        Self { base: splitmix64(seed), counter: 0 }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = splitmix64(self.base ^ splitmix64(self.counter));
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// The `slot`-th uniform of this stream, independent of draw order.
    #[inline]
    pub fn uniform_at(&self, slot: u64) -> f64 {
        let v = splitmix64(self.base ^ splitmix64(slot));
        (v >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}
