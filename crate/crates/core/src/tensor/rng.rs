use super::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based random stream: draw `i` is a pure function of `(seed, i)`.
///
/// Each call advances `counter`; cloning a stream forks an identical copy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn at(seed: u64, counter: u64) -> Self {
        Self { seed, counter }
    }

    /// Independent child stream keyed by `tag`, leaving `self` untouched.
    pub fn derive(&self, tag: u64) -> Self {
        Self::new(mix(mix(self.seed ^ 0x5851_F42D_4C95_7F2D).wrapping_add(tag.wrapping_mul(GOLDEN))))
    }

    pub fn next_u64(&mut self) -> u64 {
        let key = mix(self.seed).wrapping_add(self.counter.wrapping_mul(GOLDEN));
        self.counter = self.counter.wrapping_add(1);
        mix(key)
    }

    /// Uniform in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Uniform integer in `lo..=hi`.
    pub fn uniform_int(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as u64;
        lo + (self.next_u64() % span) as usize
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f32, hi: f32) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| lo + (hi - lo) * self.uniform() as f32)
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Standard normal draws via Box-Muller.
    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n + 1);
        while data.len() < n {
            let u1 = self.uniform();
            let u2 = self.uniform();
            let r = (-2.0 * u1.ln()).sqrt();
            let th = std::f64::consts::TAU * u2;
            data.push((r * th.cos()) as f32);
            data.push((r * th.sin()) as f32);
        }
        data.truncate(n);
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.uniform_int(0, i);
            p.swap(i, j);
        }
        p
    }
}
