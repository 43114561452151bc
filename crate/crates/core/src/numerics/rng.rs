//! Counter-based random streams.
//!
//! Each draw is a pure function of `(key, stream, counter)`, so independent
//! streams can be advanced on different threads without coordination and a
//! generator is fully described by four words.

/// Named stream families. The low 32 bits of a stream id carry a
/// sub-index (e.g. the trajectory number).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Noise = 3,
    Shuffle = 4,
    Probe = 5,
    Check = 6,
}

impl Stream {
    pub fn id(self, sub: u32) -> u64 {
        ((self as u64) << 32) | sub as u64
    }
}

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    stream: u64,
    counter: u128,
}

impl CounterRng {
    pub fn new(key: u64, stream: u64) -> Self {
        Self { key, stream, counter: 0 }
    }

    pub fn for_stream(key: u64, stream: Stream, sub: u32) -> Self {
        Self::new(key, stream.id(sub))
    }

    /// `[key, stream, counter_lo, counter_hi]`
    pub fn state(&self) -> [u64; 4] {
        [self.key, self.stream, self.counter as u64, (self.counter >> 64) as u64]
    }

    pub fn from_state(s: [u64; 4]) -> Self {
        Self {
            key: s[0],
            stream: s[1],
            counter: (s[2] as u128) | ((s[3] as u128) << 64),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let base = mix64(self.key ^ mix64(self.stream.wrapping_add(GAMMA)));
        let hi = (self.counter >> 64) as u64;
        let lo = self.counter as u64;
        let seed = base ^ mix64(hi.wrapping_mul(GAMMA) ^ 0xD1B5_4A32_D192_ED03);
        self.counter = self.counter.wrapping_add(1);
        mix64(seed.wrapping_add(lo.wrapping_add(1).wrapping_mul(GAMMA)))
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Standard normal via Box–Muller (one value per two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
