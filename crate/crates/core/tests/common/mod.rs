//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use qsd_core::stochastics::beta_pdf;

/// Cumulative beta distribution by quadrature of `beta_pdf`.
///
/// Each half of (0, 1) is integrated in a substituted coordinate that
/// removes the endpoint singularity: `p = u^(1/k)` with `k = min(shape, 1)`,
/// tabulated with composite Simpson and interpolated by one further Simpson
/// panel per query.
pub struct BetaCdf {
    left: HalfTable,
    right: HalfTable,
}

struct HalfTable {
    /// density shape at this end and the opposite one
    near: f64,
    far: f64,
    k: f64,
    step: f64,
    cumulative: Vec<f64>,
}

impl HalfTable {
    fn new(near: f64, far: f64, panels: usize) -> Self {
        let k = near.min(1.0);
        let u_max = 0.5f64.powf(k);
        let step = u_max / panels as f64;
        let mut t = HalfTable {
            near,
            far,
            k,
            step,
            cumulative: Vec::with_capacity(panels + 1),
        };
        t.cumulative.push(0.0);
        let mut acc = 0.0;
        for i in 0..panels {
            let a = i as f64 * step;
            acc += t.simpson(a, a + step);
            t.cumulative.push(acc);
        }
        t
    }

    /// Integrand in `u`; `t = u^(1/k)` is the distance from this end.
    fn integrand(&self, u: f64) -> f64 {
        if u <= 0.0 {
            // limit of pdf(t) dt/du at t -> 0
            return if self.near < 1.0 {
                (-qsd_core::stochastics::ln_beta(self.near, self.far).unwrap()).exp() / self.k
            } else if self.near == 1.0 {
                (-qsd_core::stochastics::ln_beta(1.0, self.far).unwrap()).exp()
            } else {
                0.0
            };
        }
        let t = u.powf(1.0 / self.k);
        // pdf(p; a, b) = pdf(1 - p; b, a), so each half is written near 0
        let density = beta_pdf(t, self.near, self.far).unwrap();
        density * u.powf(1.0 / self.k - 1.0) / self.k
    }

    fn simpson(&self, a: f64, b: f64) -> f64 {
        let m = 0.5 * (a + b);
        (b - a) / 6.0 * (self.integrand(a) + 4.0 * self.integrand(m) + self.integrand(b))
    }

    /// Mass between this end and distance `t <= 0.5`.
    fn mass(&self, t: f64) -> f64 {
        let u = t.powf(self.k);
        let i = ((u / self.step) as usize).min(self.cumulative.len() - 1);
        let a = i as f64 * self.step;
        self.cumulative[i] + if u > a { self.simpson(a, u) } else { 0.0 }
    }

    fn total(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }
}

impl BetaCdf {
    pub fn new(alpha: f64, beta: f64) -> Self {
        const PANELS: usize = 20_000;
        BetaCdf {
            left: HalfTable::new(alpha, beta, PANELS),
            right: HalfTable::new(beta, alpha, PANELS),
        }
    }

    /// Quadrature estimate of the total mass; 1 up to integration error.
    pub fn total(&self) -> f64 {
        self.left.total() + self.right.total()
    }

    /// `P(X <= x)` for a variate rounded to the nearest `f64` and kept below
    /// 1: the exact CDF half a unit in the last place above `x`, and 1 at
    /// the largest double below 1. Only matters very close to 1, where a
    /// shape below 1 can put a sizeable mass within 2^-53 of the endpoint.
    pub fn cdf_rounded(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let next = f64::from_bits(x.to_bits() + 1);
        if next >= 1.0 {
            // draws that round up to 1 are clamped back onto x
            return 1.0;
        }
        let half_ulp = (next - x) / 2.0;
        if x < 0.5 {
            return self.left.mass((x + half_ulp).min(0.5));
        }
        // 1 - x is exact here
        1.0 - self.right.mass((1.0 - x) - half_ulp)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else if x >= 1.0 {
            1.0
        } else if x <= 0.5 {
            self.left.mass(x)
        } else {
            1.0 - self.right.mass(1.0 - x)
        }
    }
}

/// Kolmogorov survival function `Q(λ) = 2 Σ (-1)^(k-1) exp(-2 k² λ²)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS statistic and asymptotic p-value (Stephens' small-sample
/// adjustment of λ). The lower deviation uses the left limit `P(X < v)`,
/// taken as `cdf` at the preceding double, so atoms of a rounded law are
/// handled.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &v) in x.iter().enumerate() {
        let below = if v > 0.0 {
            f64::from_bits(v.to_bits() - 1)
        } else {
            v
        };
        d = d
            .max((i + 1) as f64 / n - cdf(v))
            .max(cdf(below) - i as f64 / n);
    }
    let en = n.sqrt();
    (d, kolmogorov_q((en + 0.12 + 0.11 / en) * d))
}

/// Two-sample KS statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    (d, kolmogorov_q((en + 0.12 + 0.11 / en) * d))
}

/// Exact two-sided rank-sum p-value for tie-free data, from the dynamic
/// programming count of `na`-subsets of `{1..n}` by their sum.
pub fn exact_rank_sum_p_no_ties(a: &[f64], b: &[f64]) -> f64 {
    let na = a.len();
    let n = na + b.len();
    let mut pooled: Vec<(f64, bool)> = a
        .iter()
        .map(|&v| (v, true))
        .chain(b.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    assert!(
        pooled.windows(2).all(|w| w[0].0 != w[1].0),
        "oracle needs distinct values"
    );
    let w: usize = pooled
        .iter()
        .enumerate()
        .filter(|(_, (_, in_a))| *in_a)
        .map(|(i, _)| i + 1)
        .sum();

    let max_sum = n * (n + 1) / 2;
    // counts[k][s]: k-subsets of the ranks seen so far with sum s
    let mut counts = vec![vec![0u64; max_sum + 1]; na + 1];
    counts[0][0] = 1;
    for r in 1..=n {
        for k in (1..=na.min(r)).rev() {
            for s in (r..=max_sum).rev() {
                counts[k][s] += counts[k - 1][s - r];
            }
        }
    }
    let total: u64 = counts[na].iter().sum();
    // compare doubled deviations to stay in integers
    let centre = na * (n + 1);
    let dev = |s: usize| (2 * s).abs_diff(centre);
    let observed = dev(w);
    let extreme: u64 = (0..=max_sum)
        .filter(|&s| dev(s) >= observed)
        .map(|s| counts[na][s])
        .sum();
    extreme as f64 / total as f64
}

/// Directory holding the four MNIST IDX files, if present.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("QSD_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    let complete = MNIST_FILES.iter().all(|f| dir.join(f).is_file());
    complete.then_some(dir)
}

pub const MNIST_FILES: [&str; 4] = [
    "train-images.idx3-ubyte",
    "train-labels.idx1-ubyte",
    "t10k-images.idx3-ubyte",
    "t10k-labels.idx1-ubyte",
];

pub fn idx_images(images: &[[u8; 784]]) -> Vec<u8> {
    let mut v = vec![0, 0, 8, 3];
    for x in [images.len() as u32, 28, 28] {
        v.extend_from_slice(&x.to_be_bytes());
    }
    for img in images {
        v.extend_from_slice(img);
    }
    v
}

pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut v = vec![0, 0, 8, 1];
    v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    v.extend_from_slice(labels);
    v
}

/// A learnable stand-in for MNIST: class `k` lights a 4-row band starting at
/// row `2k + 4`, over a deterministic texture.
pub fn synthetic_images(count: usize, offset: usize) -> (Vec<[u8; 784]>, Vec<u8>) {
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let n = i + offset;
        let label = ((n * 7 + n / 10) % 10) as u8;
        let mut img = [0u8; 784];
        for (p, px) in img.iter_mut().enumerate() {
            let (r, c) = (p / 28, p % 28);
            let texture = ((p * 31 + n * 17) % 97) as u8;
            let band =
                r >= 2 * label as usize + 4 && r < 2 * label as usize + 8 && (4..24).contains(&c);
            *px = if band {
                200u8.saturating_add(texture % 50)
            } else {
                texture
            };
        }
        images.push(img);
        labels.push(label);
    }
    (images, labels)
}

/// Writes synthetic train/test IDX files under `dir` with MNIST file names.
pub fn write_synthetic_mnist(dir: &Path, train: usize, test: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let (ti, tl) = synthetic_images(train, 0);
    let (ei, el) = synthetic_images(test, 1_000_003);
    std::fs::write(dir.join(MNIST_FILES[0]), idx_images(&ti)).unwrap();
    std::fs::write(dir.join(MNIST_FILES[1]), idx_labels(&tl)).unwrap();
    std::fs::write(dir.join(MNIST_FILES[2]), idx_images(&ei)).unwrap();
    std::fs::write(dir.join(MNIST_FILES[3]), idx_labels(&el)).unwrap();
}

/// Config text pointing at the MNIST-named files in `data`.
pub fn config_text(data: &Path, extra: &str) -> String {
    format!(
        "train_images = {:?}\ntrain_labels = {:?}\ntest_images = {:?}\ntest_labels = {:?}\n{extra}\n",
        data.join(MNIST_FILES[0]),
        data.join(MNIST_FILES[1]),
        data.join(MNIST_FILES[2]),
        data.join(MNIST_FILES[3]),
    )
}
