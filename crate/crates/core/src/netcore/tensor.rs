//! Dense row-major `f64` tensors and the matrix product used by the network.
//!
//! The product accumulates every output element as a single running sum over
//! the inner dimension in ascending order, exactly like the textbook triple
//! loop. Vectorisation only ever spans independent output columns, so results
//! are bit-identical regardless of SIMD width.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{} values for shape {shape:?} ({expected} expected)",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Row length of a matrix (1 for a vector).
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transposed(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }
}

/// How a matrix operand is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    AsIs,
    Transposed,
}

#[derive(Clone, Copy)]
struct MatRef<'a> {
    data: &'a [f64],
    stride: usize,
    layout: Layout,
}

impl MatRef<'_> {
    #[inline(always)]
    fn at(&self, i: usize, j: usize) -> f64 {
        match self.layout {
            Layout::AsIs => self.data[i * self.stride + j],
            Layout::Transposed => self.data[j * self.stride + i],
        }
    }
}

const MR: usize = 4;
const NR: usize = 8;

/// `op(a) · op(b)` for 2-D tensors, where `op` is identity or transpose.
pub fn matmul(a: &Tensor, la: Layout, b: &Tensor, lb: Layout) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::Shape("matmul expects matrices".into()));
    }
    let (m, k) = match la {
        Layout::AsIs => (a.rows(), a.cols()),
        Layout::Transposed => (a.cols(), a.rows()),
    };
    let (k2, n) = match lb {
        Layout::AsIs => (b.rows(), b.cols()),
        Layout::Transposed => (b.cols(), b.rows()),
    };
    if k != k2 {
        return Err(Error::Shape(format!(
            "inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        MatRef {
            data: a.data(),
            stride: a.cols(),
            layout: la,
        },
        MatRef {
            data: b.data(),
            stride: b.cols(),
            layout: lb,
        },
        &mut out,
    );
    Tensor::from_vec(&[m, n], out)
}

fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64]) {
    // A packed into MR-row panels: panel p holds a[p*MR + r][kk] at kk*MR + r.
    let a_panels = m.div_ceil(MR);
    let mut packed_a = vec![0.0; a_panels * k * MR];
    for p in 0..a_panels {
        let panel = &mut packed_a[p * k * MR..(p + 1) * k * MR];
        for r in 0..MR.min(m - p * MR) {
            let i = p * MR + r;
            for kk in 0..k {
                panel[kk * MR + r] = a.at(i, kk);
            }
        }
    }

    let mut packed_b = vec![0.0; k * NR];
    for jb in (0..n).step_by(NR) {
        let width = NR.min(n - jb);
        for kk in 0..k {
            let dst = &mut packed_b[kk * NR..(kk + 1) * NR];
            for (jj, slot) in dst.iter_mut().enumerate() {
                *slot = if jj < width { b.at(kk, jb + jj) } else { 0.0 };
            }
        }
        for p in 0..a_panels {
            let acc = micro_kernel(k, &packed_a[p * k * MR..(p + 1) * k * MR], &packed_b);
            for (r, acc_row) in acc.iter().enumerate().take(MR.min(m - p * MR)) {
                let i = p * MR + r;
                c[i * n + jb..i * n + jb + width].copy_from_slice(&acc_row[..width]);
            }
        }
    }
}

#[inline(always)]
fn micro_kernel(k: usize, a_panel: &[f64], b_panel: &[f64]) -> [[f64; NR]; MR] {
    let mut acc = [[0.0f64; NR]; MR];
    for (a_col, b_row) in a_panel
        .chunks_exact(MR)
        .zip(b_panel.chunks_exact(NR))
        .take(k)
    {
        for r in 0..MR {
            let x = a_col[r];
            for j in 0..NR {
                acc[r][j] += x * b_row[j];
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastics::RngStream;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut s = RngStream::new(seed, 0);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| s.standard_normal()).collect()).unwrap()
    }

    fn naive(a: &Tensor, la: Layout, b: &Tensor, lb: Layout) -> Tensor {
        let at = if la == Layout::Transposed {
            a.transposed()
        } else {
            a.clone()
        };
        let bt = if lb == Layout::Transposed {
            b.transposed()
        } else {
            b.clone()
        };
        let (m, k, n) = (at.rows(), at.cols(), bt.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += at.data()[i * k + kk] * bt.data()[kk * n + j];
                }
                out[i * n + j] = s;
            }
        }
        Tensor::from_vec(&[m, n], out).unwrap()
    }

    #[test]
    fn matches_triple_loop_bit_for_bit() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (4, 8, 8), (9, 13, 17), (64, 31, 10)] {
            let a = random(&[m, k], 1);
            let at = random(&[k, m], 2);
            let b = random(&[k, n], 3);
            let bt = random(&[n, k], 4);
            assert_eq!(
                matmul(&a, Layout::AsIs, &b, Layout::AsIs).unwrap(),
                naive(&a, Layout::AsIs, &b, Layout::AsIs)
            );
            assert_eq!(
                matmul(&at, Layout::Transposed, &b, Layout::AsIs).unwrap(),
                naive(&at, Layout::Transposed, &b, Layout::AsIs)
            );
            assert_eq!(
                matmul(&a, Layout::AsIs, &bt, Layout::Transposed).unwrap(),
                naive(&a, Layout::AsIs, &bt, Layout::Transposed)
            );
        }
    }

    #[test]
    fn shape_errors() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matmul(&a, Layout::AsIs, &a, Layout::AsIs).is_err());
        assert!(Tensor::from_vec(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::from_vec(&[0, 2], vec![]).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let a = random(&[3, 5], 9);
        assert_eq!(a.transposed().transposed(), a);
        assert_eq!(a.transposed().shape(), &[5, 3]);
    }
}
