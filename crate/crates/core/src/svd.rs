//! Singular values by Householder bidiagonalization followed by implicit-shift
//! Golub–Kahan QR on the bidiagonal. Only values are computed; no singular
//! vectors are accumulated.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Default relative threshold for [`numerical_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Iteration cap per singular value.
pub const MAX_QR_ITERATIONS: usize = 200;

#[inline]
fn with_sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Singular values of `m`, sorted in descending order.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    // work on the tall orientation
    let a = if m.rows() >= m.cols() { m.clone() } else { m.transpose() };
    let (rows, cols) = a.shape();
    if cols == 0 {
        return Ok(Vec::new());
    }
    let mut a = a.into_vec();
    let mut w = vec![0.0f64; cols];
    let mut rv1 = vec![0.0f64; cols];
    let mut col_acc = vec![0.0f64; cols];

    let mut g = 0.0f64;
    let mut scale = 0.0f64;
    let mut anorm = 0.0f64;
    for i in 0..cols {
        let l = i + 1;
        rv1[i] = scale * g;
        g = 0.0;
        scale = 0.0;
        // left reflection on column i, rows i..
        for k in i..rows {
            scale += a[k * cols + i].abs();
        }
        if scale != 0.0 {
            let mut s = 0.0;
            for k in i..rows {
                let x = a[k * cols + i] / scale;
                a[k * cols + i] = x;
                s += x * x;
            }
            let f = a[i * cols + i];
            g = -with_sign(Float::sqrt(s), f);
            let h = f * g - s;
            a[i * cols + i] = f - g;
            // col_acc[j] = Σ_k a[k,i] a[k,j] for j in l..cols, row-contiguous
            col_acc[l..].iter_mut().for_each(|x| *x = 0.0);
            for k in i..rows {
                let aki = a[k * cols + i];
                if aki == 0.0 {
                    continue;
                }
                let row = &a[k * cols + l..(k + 1) * cols];
                for (acc, &x) in col_acc[l..].iter_mut().zip(row) {
                    *acc += aki * x;
                }
            }
            for acc in col_acc[l..].iter_mut() {
                *acc /= h;
            }
            for k in i..rows {
                let aki = a[k * cols + i];
                if aki == 0.0 {
                    continue;
                }
                let row = &mut a[k * cols + l..(k + 1) * cols];
                for (x, &f) in row.iter_mut().zip(&col_acc[l..]) {
                    *x += f * aki;
                }
            }
            for k in i..rows {
                a[k * cols + i] *= scale;
            }
        }
        w[i] = scale * g;

        g = 0.0;
        scale = 0.0;
        // right reflection on row i, columns l..
        if i + 1 != cols {
            for k in l..cols {
                scale += a[i * cols + k].abs();
            }
            if scale != 0.0 {
                let mut s = 0.0;
                for k in l..cols {
                    let x = a[i * cols + k] / scale;
                    a[i * cols + k] = x;
                    s += x * x;
                }
                let f = a[i * cols + l];
                g = -with_sign(Float::sqrt(s), f);
                let h = f * g - s;
                a[i * cols + l] = f - g;
                for k in l..cols {
                    rv1[k] = a[i * cols + k] / h;
                }
                for j in l..rows {
                    let (head, tail) = a.split_at_mut(j * cols);
                    let ri = &head[i * cols + l..(i + 1) * cols];
                    let rj = &mut tail[l..cols];
                    let s: f64 = rj.iter().zip(ri).map(|(x, y)| x * y).sum();
                    for (x, &r) in rj.iter_mut().zip(&rv1[l..]) {
                        *x += s * r;
                    }
                }
                for k in l..cols {
                    a[i * cols + k] *= scale;
                }
            }
        }
        anorm = anorm.max(w[i].abs() + rv1[i].abs());
    }

    // diagonalize the bidiagonal (w on the diagonal, rv1 above it)
    for k in (0..cols).rev() {
        let mut its = 0;
        loop {
            its += 1;
            let mut flag = true;
            let mut l = k;
            loop {
                if l == 0 || rv1[l].abs() + anorm == anorm {
                    flag = false;
                    break;
                }
                if w[l - 1].abs() + anorm == anorm {
                    break;
                }
                l -= 1;
            }
            if flag {
                // w[l-1] is negligible: chase rv1[l] out with Givens rotations
                let mut c = 0.0;
                let mut s = 1.0;
                for i in l..=k {
                    let f = s * rv1[i];
                    rv1[i] *= c;
                    if f.abs() + anorm == anorm {
                        break;
                    }
                    let g = w[i];
                    let h = Float::hypot(f, g);
                    w[i] = h;
                    c = g / h;
                    s = -f / h;
                }
            }
            let z = w[k];
            if l == k {
                if z < 0.0 {
                    w[k] = -z;
                }
                break;
            }
            if its >= MAX_QR_ITERATIONS {
                return Err(Error::NoConvergence { iterations: its });
            }
            // Wilkinson-style shift from the trailing 2x2 block
            let mut x = w[l];
            let nm = k - 1;
            let mut y = w[nm];
            let mut g = rv1[nm];
            let mut h = rv1[k];
            let mut f = ((y - z) * (y + z) + (g - h) * (g + h)) / (2.0 * h * y);
            g = Float::hypot(f, 1.0);
            f = ((x - z) * (x + z) + h * ((y / (f + with_sign(g, f))) - h)) / x;
            let mut c = 1.0;
            let mut s = 1.0;
            for j in l..=nm {
                let i = j + 1;
                g = rv1[i];
                y = w[i];
                h = s * g;
                g *= c;
                let mut z = Float::hypot(f, h);
                rv1[j] = z;
                c = f / z;
                s = h / z;
                f = x * c + g * s;
                g = g * c - x * s;
                h = y * s;
                y *= c;
                z = Float::hypot(f, h);
                w[j] = z;
                if z != 0.0 {
                    c = f / z;
                    s = h / z;
                }
                f = c * g + s * y;
                x = c * y - s * g;
            }
            rv1[l] = 0.0;
            rv1[k] = f;
            w[k] = x;
        }
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain {
            op: "singular_values",
            detail: format!("non-finite singular value from a {rows}x{cols} input"),
        });
    }
    w.sort_by(|a, b| b.total_cmp(a));
    Ok(w)
}

/// Number of singular values above `rel_tol · σ_max`. The zero matrix has
/// rank 0.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> Result<usize> {
    if !(rel_tol > 0.0) {
        return Err(Error::Domain {
            op: "numerical_rank",
            detail: format!("relative tolerance must be positive, got {rel_tol}"),
        });
    }
    let sv = singular_values(m)?;
    let Some(&max) = sv.first() else {
        return Ok(0);
    };
    if max == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > rel_tol * max).count())
}
