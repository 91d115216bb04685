//! Decompositions: one-sided Jacobi SVD, cyclic Jacobi symmetric
//! eigensolver, Cholesky solve. All deterministic for identical input bytes.

use crate::error::{Result, UcaError};
use crate::matrix::Matrix;

const JACOBI_TOL: f64 = 1e-12;

/// Thin SVD: a = U * diag(s) * V^T with s sorted descending.
///
/// Sign convention: each right singular vector's largest-magnitude entry is
/// made positive (the corresponding left vector flips with it). The consensus
/// selection step depends on this being stable.
pub fn thin_svd(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(UcaError::Precondition("thin_svd of empty matrix".into()));
    }
    if a.rows() >= a.cols() {
        let (u, s, v) = one_sided_jacobi(a)?;
        Ok(fix_signs(u, s, v))
    } else {
        let (u, s, v) = one_sided_jacobi(&a.transpose())?;
        Ok(fix_signs(v, s, u))
    }
}

/// One-sided Jacobi on a tall matrix (rows >= cols): returns (U, s, V).
fn one_sided_jacobi(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    // work on columns as contiguous vectors
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let max_sweeps = 10 * m.max(n);
    let mut sweeps = 0;
    loop {
        let mut rotated = false;
        // sweep residual: off-diagonal norm of the implicit Gram W^T W,
        // measured against its trace
        let mut off2 = 0.0;
        let mut trace = 0.0;
        for (i, col) in w.iter().enumerate() {
            let aa: f64 = col.iter().map(|x| x * x).sum();
            trace += aa;
            let _ = i;
        }
        for i in 0..n.saturating_sub(1) {
            for j in i + 1..n {
                // contiguous column slices; the split makes the disjoint
                // &mut pair explicit
                let (head, tail) = w.split_at_mut(j);
                let wi = &mut head[i][..];
                let wj = &mut tail[0][..];
                let (mut aa, mut bb, mut dd) = (0.0, 0.0, 0.0);
                for (&x, &y) in wi.iter().zip(wj.iter()) {
                    aa += x * x;
                    bb += y * y;
                    dd += x * y;
                }
                off2 += dd * dd;
                if dd.abs() <= JACOBI_TOL * (aa * bb).sqrt() || dd == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (bb - aa) / (2.0 * dd);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in wi.iter_mut().zip(wj.iter_mut()) {
                    let (a, b) = (*x, *y);
                    *x = c * a - s * b;
                    *y = s * a + c * b;
                }
                let (vhead, vtail) = v.split_at_mut(j);
                for (x, y) in vhead[i].iter_mut().zip(vtail[0].iter_mut()) {
                    let (a, b) = (*x, *y);
                    *x = c * a - s * b;
                    *y = s * a + c * b;
                }
            }
        }
        sweeps += 1;
        if !rotated || off2.sqrt() <= JACOBI_TOL * trace.max(f64::MIN_POSITIVE) {
            break;
        }
        if sweeps >= max_sweeps {
            return Err(UcaError::Numeric(format!(
                "svd failed to converge after {sweeps} sweeps"
            )));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = w
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap());

    let mut u = Matrix::zeros(m, n);
    let mut vm = Matrix::zeros(n, n);
    let mut s = vec![0.0; n];
    for (dst, &src) in order.iter().enumerate() {
        s[dst] = norms[src];
        if norms[src] > 0.0 {
            for p in 0..m {
                u.set(p, dst, w[src][p] / norms[src]);
            }
        }
        for p in 0..n {
            vm.set(p, dst, v[src][p]);
        }
    }
    Ok((u, s, vm))
}

fn fix_signs(mut u: Matrix, s: Vec<f64>, mut v: Matrix) -> (Matrix, Vec<f64>, Matrix) {
    for c in 0..v.cols() {
        let mut best = 0usize;
        let mut mag = -1.0;
        for r in 0..v.rows() {
            let a = v.get(r, c).abs();
            if a > mag {
                mag = a;
                best = r;
            }
        }
        if v.get(best, c) < 0.0 {
            for r in 0..v.rows() {
                let x = -v.get(r, c);
                v.set(r, c, x);
            }
            if c < u.cols() {
                for r in 0..u.rows() {
                    let x = -u.get(r, c);
                    u.set(r, c, x);
                }
            }
        }
    }
    (u, s, v)
}

/// Symmetric eigendecomposition, eigenvalues descending, eigenvectors as
/// orthonormal columns with the largest-magnitude entry positive.
pub fn sym_eig(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    if m != n {
        return Err(UcaError::Precondition(format!(
            "sym_eig requires a square matrix, got {m}x{n}"
        )));
    }
    let scale = a.frob_norm().max(1.0);
    for i in 0..n {
        for j in i + 1..n {
            if (a.get(i, j) - a.get(j, i)).abs() > 1e-10 * scale.max(1.0) {
                return Err(UcaError::Precondition(format!(
                    "sym_eig input asymmetric at ({i},{j}): {} vs {}",
                    a.get(i, j),
                    a.get(j, i)
                )));
            }
        }
    }

    // Householder reduction to tridiagonal form, then implicit-shift QL.
    let mut z = a.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut z, &mut d, &mut e);
    tql2(&mut z, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| d[y].partial_cmp(&d[x]).unwrap());
    let eigvals: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let mut eigvecs = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            eigvecs.set(r, dst, z.get(r, src));
        }
    }
    // sign convention
    for c in 0..n {
        let mut best = 0usize;
        let mut mag = -1.0;
        for r in 0..n {
            let a = eigvecs.get(r, c).abs();
            if a > mag {
                mag = a;
                best = r;
            }
        }
        if eigvecs.get(best, c) < 0.0 {
            for r in 0..n {
                let x = -eigvecs.get(r, c);
                eigvecs.set(r, c, x);
            }
        }
    }
    Ok((eigvals, eigvecs))
}

/// Householder reduction of a symmetric matrix to tridiagonal form with
/// accumulated transformations (EISPACK tred2): on exit `d` holds the
/// diagonal, `e` the subdiagonal, and `z` the orthogonal reduction matrix.
fn tred2(z: &mut Matrix, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for i in 0..n {
        d[i] = z.get(n - 1, i);
    }
    for i in (1..n).rev() {
        let l = i;
        let mut h = 0.0;
        let mut scale = 0.0;
        if l > 1 {
            for item in d.iter().take(l) {
                scale += item.abs();
            }
        }
        if scale == 0.0 {
            e[i] = if l > 0 { d[l - 1] } else { 0.0 };
            for j in 0..l {
                d[j] = z.get(l - 1, j);
                z.set(i, j, 0.0);
                z.set(j, i, 0.0);
            }
        } else {
            for item in d.iter_mut().take(l) {
                *item /= scale;
                h += *item * *item;
            }
            let f = d[l - 1];
            let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
            e[i] = scale * g;
            h -= f * g;
            d[l - 1] = f - g;
            for item in e.iter_mut().take(l) {
                *item = 0.0;
            }
            // apply the similarity transformation to the remaining rows
            for j in 0..l {
                let f = d[j];
                z.set(j, i, f);
                let mut g = e[j] + z.get(j, j) * f;
                for k in j + 1..l {
                    g += z.get(k, j) * d[k];
                    e[k] += z.get(k, j) * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..l {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..l {
                e[j] -= hh * d[j];
            }
            for j in 0..l {
                let f = d[j];
                let g = e[j];
                for k in j..l {
                    let v = z.get(k, j) - (f * e[k] + g * d[k]);
                    z.set(k, j, v);
                }
                d[j] = z.get(l - 1, j);
                z.set(i, j, 0.0);
            }
        }
        d[i] = h;
    }
    // accumulate the transformations
    for i in 1..n {
        let l = i;
        let v = z.get(l - 1, l - 1);
        z.set(n - 1, l - 1, v);
        z.set(l - 1, l - 1, 1.0);
        let h = d[i];
        if h != 0.0 {
            for k in 0..l {
                d[k] = z.get(k, i) / h;
            }
            for j in 0..l {
                let mut g = 0.0;
                for k in 0..l {
                    g += z.get(k, i) * z.get(k, j);
                }
                for k in 0..l {
                    let v = z.get(k, j) - g * d[k];
                    z.set(k, j, v);
                }
            }
        }
        for k in 0..l {
            z.set(k, i, 0.0);
        }
    }
    for i in 0..n {
        d[i] = z.get(n - 1, i);
        z.set(n - 1, i, 0.0);
    }
    z.set(n - 1, n - 1, 1.0);
    e[0] = 0.0;
}

/// Implicit-shift QL on the tridiagonal (d, e) with eigenvector
/// accumulation into z (EISPACK tql2). Eigenvectors land in z's columns.
fn tql2(z: &mut Matrix, d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    if n == 1 {
        return Ok(());
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= eps * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 50 {
                return Err(UcaError::Numeric(format!(
                    "sym_eig QL failed to converge after {iter} iterations at index {l}"
                )));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            let sign_r = if g >= 0.0 { r } else { -r };
            g = d[m] - d[l] + e[l] / (g + sign_r);
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            let mut underflow = false;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for k in 0..n {
                    f = z.get(k, i + 1);
                    let zki = z.get(k, i);
                    z.set(k, i + 1, s * zki + c * f);
                    z.set(k, i, c * zki - s * f);
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// Solve a * x = b for symmetric positive definite a via Cholesky.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(UcaError::Precondition(format!(
            "solve_spd requires square a, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if b.rows() != n {
        return Err(UcaError::dim(
            "solve_spd",
            format!("b with {n} rows"),
            format!("{}", b.rows()),
        ));
    }
    let l = cholesky(a)?;
    let nrhs = b.cols();
    let mut x = Matrix::zeros(n, nrhs);
    let mut y = vec![0.0; n];
    let mut col = vec![0.0; n];
    for c in 0..nrhs {
        b.col_into(c, &mut col);
        // L y = b
        for i in 0..n {
            let mut sum = col[i];
            for k in 0..i {
                sum -= l.get(i, k) * y[k];
            }
            y[i] = sum / l.get(i, i);
        }
        // L^T x = y
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in i + 1..n {
                sum -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, sum / l.get(i, i));
        }
    }
    Ok(x)
}

fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(UcaError::Numeric(format!(
                        "cholesky pivot {sum:.3e} <= 0 at row {i}; matrix is not positive definite"
                    )));
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{matmul, matmul_nt, matmul_tn};
    use crate::rng::RngStream;

    fn random(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform() - 0.5)
    }

    fn diag(vals: &[f64]) -> Matrix {
        let n = vals.len();
        Matrix::from_fn(n, n, |i, j| if i == j { vals[i] } else { 0.0 })
    }

    #[test]
    fn svd_of_diagonal() {
        let (_, s, _) = thin_svd(&diag(&[3.0, 2.0, 1.0])).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-12);
        assert!((s[1] - 2.0).abs() < 1e-12);
        assert!((s[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn svd_of_rank_one() {
        let u = [1.0, -2.0, 2.0];
        let v = [3.0, 4.0];
        let a = Matrix::from_fn(3, 2, |i, j| u[i] * v[j]);
        let (_, s, _) = thin_svd(&a).unwrap();
        let expected = (u.iter().map(|x| x * x).sum::<f64>()
            * v.iter().map(|x| x * x).sum::<f64>())
        .sqrt();
        assert!((s[0] - expected).abs() < 1e-10);
        assert!(s[1].abs() < 1e-10);
    }

    #[test]
    fn svd_reconstructs_random_matrix() {
        let mut rng = RngStream::new(21);
        for &(m, n) in &[(6, 4), (4, 6), (7, 7)] {
            let a = random(m, n, &mut rng);
            let (u, s, v) = thin_svd(&a).unwrap();
            let r = s.len();
            let us = Matrix::from_fn(m, r, |i, j| u.get(i, j) * s[j]);
            let rec = matmul_nt(&us, &v).unwrap();
            assert!(rec.sub(&a).frob_norm() < 1e-10, "{m}x{n}");
            // orthonormal factors
            let utu = matmul_tn(&u, &u).unwrap();
            let vtv = matmul_tn(&v, &v).unwrap();
            assert!(utu.sub(&Matrix::identity(r)).frob_norm() < 1e-10);
            assert!(vtv.sub(&Matrix::identity(r)).frob_norm() < 1e-10);
        }
    }

    #[test]
    fn svd_sign_convention_on_right_vectors() {
        let mut rng = RngStream::new(22);
        let a = random(5, 3, &mut rng);
        let (_, _, v) = thin_svd(&a).unwrap();
        for c in 0..v.cols() {
            let col: Vec<f64> = (0..v.rows()).map(|r| v.get(r, c)).collect();
            let mut best = 0;
            for (i, x) in col.iter().enumerate() {
                if x.abs() > col[best].abs() {
                    best = i;
                }
            }
            assert!(col[best] > 0.0, "column {c} largest entry not positive");
        }
    }

    #[test]
    fn svd_singular_values_match_gram_eigenvalues() {
        let mut rng = RngStream::new(23);
        let a = random(6, 4, &mut rng);
        let (_, s, _) = thin_svd(&a).unwrap();
        let gram = matmul_tn(&a, &a).unwrap();
        let (eigs, _) = sym_eig(&gram).unwrap();
        for (sv, ev) in s.iter().zip(&eigs) {
            assert!((sv * sv - ev).abs() < 1e-8, "{sv} vs sqrt({ev})");
        }
    }

    #[test]
    fn svd_deterministic() {
        let mut rng = RngStream::new(24);
        let a = random(8, 5, &mut rng);
        let r1 = thin_svd(&a).unwrap();
        let r2 = thin_svd(&a).unwrap();
        assert_eq!(r1.0, r2.0);
        assert_eq!(r1.1, r2.1);
        assert_eq!(r1.2, r2.2);
    }

    #[test]
    fn eig_of_diagonal() {
        let (vals, _) = sym_eig(&diag(&[2.0, 1.0])).unwrap();
        assert!((vals[0] - 2.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eig_of_exchange_matrix() {
        let a = Matrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let (vals, _) = sym_eig(&a).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn eig_residual_on_random_spd() {
        let mut rng = RngStream::new(25);
        let b = random(5, 5, &mut rng);
        let a = matmul_tn(&b, &b).unwrap();
        let (vals, vecs) = sym_eig(&a).unwrap();
        for j in 0..5 {
            let v: Vec<f64> = (0..5).map(|i| vecs.get(i, j)).collect();
            for i in 0..5 {
                let av: f64 = (0..5).map(|k| a.get(i, k) * v[k]).sum();
                assert!((av - vals[j] * v[i]).abs() < 1e-8);
            }
        }
        // eigvecs orthonormal
        let vtv = matmul_tn(&vecs, &vecs).unwrap();
        assert!(vtv.sub(&Matrix::identity(5)).frob_norm() < 1e-10);
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let a = Matrix::new(2, 2, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        assert!(matches!(sym_eig(&a), Err(UcaError::Precondition(_))));
    }

    #[test]
    fn solve_identity() {
        let b = Matrix::new(3, 1, vec![4.0, 5.0, 6.0]).unwrap();
        let x = solve_spd(&Matrix::identity(3), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn solve_diagonal() {
        let a = diag(&[2.0, 4.0]);
        let b = Matrix::new(2, 1, vec![2.0, 8.0]).unwrap();
        let x = solve_spd(&a, &b).unwrap();
        assert!((x.get(0, 0) - 1.0).abs() < 1e-14);
        assert!((x.get(1, 0) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn solve_residual_on_random_spd() {
        let mut rng = RngStream::new(26);
        let b = random(6, 6, &mut rng);
        let mut a = matmul_tn(&b, &b).unwrap();
        for i in 0..6 {
            let v = a.get(i, i) + 0.5;
            a.set(i, i, v);
        }
        let rhs = random(6, 2, &mut rng);
        let x = solve_spd(&a, &rhs).unwrap();
        let res = matmul(&a, &x).unwrap().sub(&rhs).frob_norm();
        assert!(res < 1e-8, "residual {res}");
    }

    #[test]
    fn solve_rejects_non_pd() {
        let a = diag(&[1.0, -1.0]);
        let b = Matrix::zeros(2, 1);
        assert!(matches!(solve_spd(&a, &b), Err(UcaError::Numeric(_))));
    }
}
