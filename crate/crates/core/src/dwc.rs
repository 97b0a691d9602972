//! Depthwise 2-D convolution over the token grid and its dense N×N form.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::linalg::Matrix;
use crate::rng::{self, Role, Streams};

/// Spatial arrangement of the tokens. Token `row·width + col` sits at
/// `(row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    /// Square-ish grid used for benchmarks: `H = ⌊√n⌋`, which must divide `n`.
    pub fn square_ish(n: usize) -> Option<Self> {
        if n == 0 {
            return None;
        }
        let h = isqrt(n);
        n.is_multiple_of(h).then(|| Self::new(h, n / h))
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn check(&self, tokens: usize) -> Result<()> {
        if self.tokens() != tokens {
            return Err(Error::Grid {
                height: self.height,
                width: self.width,
                tokens,
            });
        }
        Ok(())
    }

    /// Chebyshev distance between two token indices.
    pub fn chebyshev(&self, a: usize, b: usize) -> usize {
        let (ar, ac) = (a / self.width, a % self.width);
        let (br, bc) = (b / self.width, b % self.width);
        ar.abs_diff(br).max(ac.abs_diff(bc))
    }
}

pub(crate) fn isqrt(n: usize) -> usize {
    let mut h = num_traits::Float::sqrt(n as f64) as usize;
    while h * h > n {
        h -= 1;
    }
    while (h + 1) * (h + 1) <= n {
        h += 1;
    }
    h
}

/// One `size×size` kernel per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DwcKernel {
    channels: usize,
    size: usize,
    weights: Vec<f64>,
}

impl DwcKernel {
    pub fn new(channels: usize, size: usize, weights: Vec<f64>) -> Result<Self> {
        check_size(size)?;
        if weights.len() != channels * size * size {
            return Err(Error::BufferLength {
                expected: channels * size * size,
                actual: weights.len(),
            });
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::Domain {
                op: "DwcKernel::new",
                detail: format!("weight {i} is not finite"),
            });
        }
        Ok(Self {
            channels,
            size,
            weights,
        })
    }

    pub fn zeros(channels: usize, size: usize) -> Result<Self> {
        Self::new(channels, size, alloc::vec![0.0; channels * size * size])
    }

    /// Center tap 1, all others 0: the identity convolution.
    pub fn delta(channels: usize, size: usize) -> Result<Self> {
        let mut k = Self::zeros(channels, size)?;
        let center = (size / 2) * size + size / 2;
        for c in 0..channels {
            k.weights[c * size * size + center] = 1.0;
        }
        Ok(k)
    }

    /// Every channel uses `weights` (a single `size×size` kernel).
    pub fn shared(channels: usize, size: usize, weights: &[f64]) -> Result<Self> {
        let mut all = Vec::with_capacity(channels * weights.len());
        for _ in 0..channels {
            all.extend_from_slice(weights);
        }
        Self::new(channels, size, all)
    }

    /// Default experiment initializer: i.i.d. uniform in `[-1, 1)` with the
    /// center tap shifted by `+1`.
    pub fn seeded(streams: &Streams, instance: u64, channels: usize, size: usize) -> Result<Self> {
        check_size(size)?;
        let mut rng = streams.rng(instance, Role::Kernel);
        let mut weights = rng::collect_uniform(&mut rng, channels * size * size, -1.0, 1.0);
        let center = (size / 2) * size + size / 2;
        for c in 0..channels {
            weights[c * size * size + center] += 1.0;
        }
        Self::new(channels, size, weights)
    }

    /// Off-center taps uniform in `[-1, 1)`; the center tap is
    /// `Σ|off-center| + 1 + u` with `u` uniform in `[0, 1)`. The resulting
    /// convolution matrix is strictly diagonally dominant.
    pub fn center_dominant(streams: &Streams, instance: u64, channels: usize, size: usize) -> Result<Self> {
        check_size(size)?;
        let mut rng = streams.rng(instance, Role::Kernel);
        let taps = size * size;
        let center = (size / 2) * size + size / 2;
        let mut weights = Vec::with_capacity(channels * taps);
        for _ in 0..channels {
            let mut ch = rng::collect_uniform(&mut rng, taps, -1.0, 1.0);
            let off: f64 = ch
                .iter()
                .enumerate()
                .filter(|(t, _)| *t != center)
                .map(|(_, w)| w.abs())
                .sum();
            ch[center] = off + 1.0 + rng::uniform(&mut rng, 0.0, 1.0);
            weights.extend_from_slice(&ch);
        }
        Self::new(channels, size, weights)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let taps = self.size * self.size;
        &self.weights[c * taps..(c + 1) * taps]
    }
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::Config(format!("kernel size must be odd and >= 1, got {size}")));
    }
    Ok(())
}

/// Depthwise convolution of `v` (`N×d`) over `grid`, zero padding, stride 1.
pub fn dwc_apply(v: &Matrix, grid: Grid, kernel: &DwcKernel) -> Result<Matrix> {
    grid.check(v.rows())?;
    if kernel.channels != v.cols() {
        return Err(Error::ChannelMismatch {
            kernel: kernel.channels,
            values: v.cols(),
        });
    }
    let mut out = Matrix::zeros(v.rows(), v.cols());
    kernels::dwc_accumulate(
        v.as_slice(),
        v.cols(),
        grid.height,
        grid.width,
        &kernel.weights,
        kernel.size,
        out.as_mut_slice(),
    );
    Ok(out)
}

/// The `N×N` matrix `M` with `M·x == dwc(x)` for one channel's kernel.
///
/// Row `i` holds the taps that reach token `i`; taps landing in the padding
/// are dropped, so each row has at most `size²` nonzeros.
pub fn dwc_as_matrix(weights: &[f64], size: usize, grid: Grid) -> Result<Matrix> {
    check_size(size)?;
    if weights.len() != size * size {
        return Err(Error::BufferLength {
            expected: size * size,
            actual: weights.len(),
        });
    }
    let n = grid.tokens();
    let half = (size / 2) as isize;
    let mut m = Matrix::zeros(n, n);
    for r in 0..grid.height as isize {
        for c in 0..grid.width as isize {
            let dst = r as usize * grid.width + c as usize;
            for di in 0..size as isize {
                for dj in 0..size as isize {
                    let (sr, sc) = (r + di - half, c + dj - half);
                    if sr < 0 || sc < 0 || sr >= grid.height as isize || sc >= grid.width as isize {
                        continue;
                    }
                    let src = sr as usize * grid.width + sc as usize;
                    m[(dst, src)] += weights[di as usize * size + dj as usize];
                }
            }
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matmul;

    fn sample_v(n: usize, d: usize) -> Matrix {
        Matrix::from_fn(n, d, |r, c| ((r * 7 + c * 3) % 11) as f64 - 5.0)
    }

    #[test]
    fn unit_kernel_is_identity() {
        let v = sample_v(6, 2);
        let k = DwcKernel::new(2, 1, alloc::vec![1.0, 1.0]).unwrap();
        assert_eq!(dwc_apply(&v, Grid::new(2, 3), &k).unwrap(), v);
        let k = DwcKernel::delta(2, 3).unwrap();
        assert_eq!(dwc_apply(&v, Grid::new(2, 3), &k).unwrap(), v);
    }

    #[test]
    fn all_ones_kernel_spreads_center_one_hot() {
        let mut v = Matrix::zeros(9, 1);
        v[(4, 0)] = 1.0;
        let k = DwcKernel::new(1, 3, alloc::vec![1.0; 9]).unwrap();
        let out = dwc_apply(&v, Grid::new(3, 3), &k).unwrap();
        assert_eq!(out.as_slice(), &[1.0; 9]);
    }

    #[test]
    fn delta_matrix_is_identity() {
        let k = DwcKernel::delta(1, 3).unwrap();
        let m = dwc_as_matrix(k.channel(0), 3, Grid::new(4, 5)).unwrap();
        assert_eq!(m, Matrix::identity(20));
    }

    #[test]
    fn matrix_form_matches_convolution() {
        let grid = Grid::new(5, 5);
        let k = DwcKernel::seeded(&Streams::new(3), 0, 1, 3).unwrap();
        let v = Streams::new(3).normal_matrix(0, Role::Value, 25, 1);
        let m = dwc_as_matrix(k.channel(0), 3, grid).unwrap();
        let direct = dwc_apply(&v, grid, &k).unwrap();
        assert!(matmul(&m, &v).unwrap().max_abs_diff(&direct).unwrap() <= 1e-14);
    }

    #[test]
    fn rejects_bad_shapes() {
        let v = sample_v(6, 2);
        let k = DwcKernel::delta(2, 3).unwrap();
        assert!(matches!(dwc_apply(&v, Grid::new(2, 2), &k), Err(Error::Grid { .. })));
        let k3 = DwcKernel::delta(3, 3).unwrap();
        assert!(matches!(
            dwc_apply(&v, Grid::new(2, 3), &k3),
            Err(Error::ChannelMismatch { .. })
        ));
        assert!(DwcKernel::zeros(1, 2).is_err());
    }

    #[test]
    fn square_ish_grids() {
        assert_eq!(Grid::square_ish(196), Some(Grid::new(14, 14)));
        assert_eq!(Grid::square_ish(12), Some(Grid::new(3, 4)));
        assert_eq!(Grid::square_ish(10), None);
        assert_eq!(Grid::square_ish(1), Some(Grid::new(1, 1)));
    }
}
