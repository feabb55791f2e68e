//! Small dense linear-algebra kernels.
//!
//! Everything here operates on modest matrices (at most a few hundred
//! rows/columns), so plain O(n^3) algorithms with partial pivoting are
//! the right tool. All routines are deterministic.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Cholesky factorization of a symmetric positive-definite matrix.
/// Returns the lower-triangular factor L with A = L L^T.
pub fn cholesky(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Numeric(format!(
                        "cholesky pivot {sum:.3e} at index {i}: matrix not positive definite"
                    )));
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solves A x = b given the lower Cholesky factor of A.
pub fn cholesky_solve(l: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    // Forward substitution: L y = b.
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    // Back substitution: L^T x = y.
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    x
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky
/// factor. Used to cache GP posterior covariances.
pub fn spd_inverse(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let l = cholesky(a)?;
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::<f64>::zeros(n);
        e[j] = 1.0;
        let col = cholesky_solve(&l.view(), &e.view());
        inv.column_mut(j).assign(&col);
    }
    // Symmetrize to remove round-off drift.
    let inv_t = inv.t().to_owned();
    Ok((&inv + &inv_t) * 0.5)
}

/// Solves A x = b by Gaussian elimination with partial pivoting.
pub fn solve(a: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "solve needs square A and matching b, got {}x{} and {}",
            n,
            a.ncols(),
            b.len()
        )));
    }
    let mut m = a.to_owned();
    let mut rhs = b.to_owned();
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = m[[col, col]].abs();
        for row in col + 1..n {
            let v = m[[row, col]].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = row;
            }
        }
        if pivot_val < 1e-300 {
            return Err(Error::Numeric(format!(
                "singular system: pivot {pivot_val:.3e} in column {col}"
            )));
        }
        if pivot_row != col {
            for k in 0..n {
                m.swap([col, k], [pivot_row, k]);
            }
            rhs.swap(col, pivot_row);
        }
        for row in col + 1..n {
            let factor = m[[row, col]] / m[[col, col]];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[[row, k]] -= factor * m[[col, k]];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = rhs[i];
        for k in i + 1..n {
            sum -= m[[i, k]] * x[k];
        }
        x[i] = sum / m[[i, i]];
    }
    Ok(x)
}

/// Unconstrained least squares min ||A x - b|| via the normal equations
/// with rank-revealing column dropping: columns whose pivot falls below
/// `rank_tol` times the largest diagonal are fixed at zero. Returns one
/// minimizer (collinear columns make the solution non-unique).
pub fn least_squares(a: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Result<Array1<f64>> {
    let (rows, cols) = (a.nrows(), a.ncols());
    if b.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "least_squares: {} rows vs {} rhs entries",
            rows,
            b.len()
        )));
    }
    let at = a.t();
    let gram = at.dot(a);
    let rhs = at.dot(b);
    let max_diag = (0..cols).map(|i| gram[[i, i]]).fold(0.0_f64, f64::max);
    if max_diag <= 0.0 {
        return Err(Error::DegenerateFit(
            "least_squares: all columns are zero".into(),
        ));
    }
    let rank_tol = 1e-12 * max_diag;

    // Greedy pivoted elimination on the Gram matrix; dropped columns get
    // coefficient zero.
    let mut g = gram.clone();
    let mut r = rhs.clone();
    let mut kept: Vec<usize> = Vec::new();
    let mut remaining: Vec<usize> = (0..cols).collect();
    while !remaining.is_empty() {
        // Pick the remaining column with the largest residual diagonal.
        let (pos, &col) = remaining
            .iter()
            .enumerate()
            .max_by(|x, y| g[[*x.1, *x.1]].total_cmp(&g[[*y.1, *y.1]]))
            .unwrap();
        if g[[col, col]] <= rank_tol {
            break;
        }
        remaining.remove(pos);
        for &other in &remaining {
            let factor = g[[other, col]] / g[[col, col]];
            for k in 0..cols {
                let sub = factor * g[[col, k]];
                g[[other, k]] -= sub;
            }
            r[other] -= factor * r[col];
        }
        kept.push(col);
    }
    if kept.is_empty() {
        return Err(Error::DegenerateFit(
            "least_squares: matrix has numerical rank zero".into(),
        ));
    }
    // Solve the kept subsystem against the original normal equations.
    let k = kept.len();
    let mut sub = Array2::<f64>::zeros((k, k));
    let mut sub_rhs = Array1::<f64>::zeros(k);
    for (i, &ci) in kept.iter().enumerate() {
        sub_rhs[i] = rhs[ci];
        for (j, &cj) in kept.iter().enumerate() {
            sub[[i, j]] = gram[[ci, cj]];
        }
    }
    let sol = solve(&sub.view(), &sub_rhs.view())?;
    let mut x = Array1::<f64>::zeros(cols);
    for (i, &ci) in kept.iter().enumerate() {
        x[ci] = sol[i];
    }
    Ok(x)
}

/// Nonnegative least squares min ||A x - b|| s.t. x >= 0, by the
/// Lawson-Hanson active-set method. Handles collinear columns by
/// construction (the passive set stays linearly independent).
pub fn nnls(a: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Result<Array1<f64>> {
    let (rows, cols) = (a.nrows(), a.ncols());
    if b.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "nnls: {} rows vs {} rhs entries",
            rows,
            b.len()
        )));
    }
    let mut x = Array1::<f64>::zeros(cols);
    let mut passive = vec![false; cols];
    let scale = b.iter().map(|v| v.abs()).fold(0.0_f64, f64::max).max(1.0);
    let tol = 1e-12 * scale;

    // Least-squares coefficients restricted to the passive set.
    let solve_passive = |passive: &[bool]| -> Result<Array1<f64>> {
        let idx: Vec<usize> = (0..cols).filter(|&j| passive[j]).collect();
        let k = idx.len();
        let mut gram = Array2::<f64>::zeros((k, k));
        let mut rhs = Array1::<f64>::zeros(k);
        for (i, &ci) in idx.iter().enumerate() {
            rhs[i] = a.column(ci).dot(b);
            for (j, &cj) in idx.iter().enumerate() {
                gram[[i, j]] = a.column(ci).dot(&a.column(cj));
            }
        }
        let sol = solve(&gram.view(), &rhs.view())?;
        let mut z = Array1::<f64>::zeros(cols);
        for (i, &ci) in idx.iter().enumerate() {
            z[ci] = sol[i];
        }
        Ok(z)
    };

    for _outer in 0..10 * cols.max(1) {
        let residual = b - &a.dot(&x);
        let gradient = a.t().dot(&residual);
        let candidate = (0..cols)
            .filter(|&j| !passive[j])
            .max_by(|&i, &j| gradient[i].total_cmp(&gradient[j]));
        let j = match candidate {
            Some(j) if gradient[j] > tol => j,
            _ => break,
        };
        passive[j] = true;

        loop {
            let z = match solve_passive(&passive) {
                Ok(z) => z,
                Err(_) => {
                    // Newly added column is numerically dependent on the
                    // passive set; back it out and stop considering it.
                    passive[j] = false;
                    break;
                }
            };
            let all_positive = (0..cols).filter(|&i| passive[i]).all(|i| z[i] > 0.0);
            if all_positive {
                x = z;
                break;
            }
            let mut alpha = f64::INFINITY;
            for i in (0..cols).filter(|&i| passive[i] && z[i] <= 0.0) {
                let denom = x[i] - z[i];
                if denom > 0.0 {
                    alpha = alpha.min(x[i] / denom);
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for i in 0..cols {
                if passive[i] {
                    x[i] += alpha * (z[i] - x[i]);
                    if x[i] <= tol {
                        x[i] = 0.0;
                        passive[i] = false;
                    }
                } else {
                    x[i] = 0.0;
                }
            }
        }
    }
    Ok(x)
}
