//! splitmix64 generator and Poisson sampling.

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Largest rate accepted by [`poisson_sample`].
pub const MAX_LAMBDA: f64 = 1e4;

// exp(-CHUNK) stays far above the smallest positive f64.
const CHUNK: f64 = 500.0;

/// One splitmix64 step: returns the advanced state and the output.
pub fn rng_next(state: u64) -> (u64, u64) {
    let state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (state, z ^ (z >> 31))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        let (state, out) = rng_next(self.state);
        self.state = state;
        out
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        (self.next_f64() * n as f64) as u64 % n
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RngError {
    #[error("lambda {0} exceeds {MAX_LAMBDA}")]
    LambdaTooLarge(f64),
    #[error("lambda {0} is not a non-negative number")]
    BadLambda(f64),
}

/// Knuth's multiplication method. Rates above 500 are split into chunks
/// whose Poisson draws are summed, which keeps e^-λ representable.
pub fn poisson_sample(rng: &mut SplitMix64, lambda: f64) -> Result<u64, RngError> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(RngError::BadLambda(lambda));
    }
    if lambda > MAX_LAMBDA {
        return Err(RngError::LambdaTooLarge(lambda));
    }
    let mut remaining = lambda;
    let mut total = 0;
    while remaining > 0.0 {
        let part = remaining.min(CHUNK);
        remaining -= part;
        total += knuth(rng, part);
    }
    Ok(total)
}

fn knuth(rng: &mut SplitMix64, lambda: f64) -> u64 {
    let limit = (-lambda).exp();
    let mut k = 0;
    let mut p = 1.0;
    loop {
        k += 1;
        p *= rng.next_f64();
        if p < limit {
            return k - 1;
        }
    }
}
