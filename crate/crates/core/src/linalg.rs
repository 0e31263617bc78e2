//! Small dense linear-algebra kernels: symmetric eigenvalues by cyclic Jacobi
//! rotations, LU inversion with partial pivoting, and kernel / canonical
//! orthonormal bases.

use nalgebra::DMatrix;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi sweeps, ascending.
pub fn symmetric_eigenvalues(s: &DMatrix<f64>, tol: f64) -> Vec<f64> {
    let n = s.nrows();
    let mut a = s.clone();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= tol * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(|x, y| x.total_cmp(y));
    eig
}

/// Inverse by LU with partial pivoting. `None` if a pivot falls below
/// `pivot_tol` (relative to the largest entry).
pub fn lu_inverse(m: &DMatrix<f64>, pivot_tol: f64) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return None;
    }
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    let mut a = m.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let (piv, pval) = (k..n)
            .map(|i| (i, a[(i, k)].abs()))
            .fold((k, -1.0), |best, c| if c.1 > best.1 { c } else { best });
        if pval < pivot_tol * scale {
            return None;
        }
        if piv != k {
            a.swap_rows(piv, k);
            perm.swap(piv, k);
        }
        for i in (k + 1)..n {
            let f = a[(i, k)] / a[(k, k)];
            a[(i, k)] = f;
            for j in (k + 1)..n {
                a[(i, j)] -= f * a[(k, j)];
            }
        }
    }
    let mut inv = DMatrix::zeros(n, n);
    for col in 0..n {
        // solve L U x = P e_col
        let mut y: Vec<f64> = (0..n).map(|i| if perm[i] == col { 1.0 } else { 0.0 }).collect();
        for i in 0..n {
            for j in 0..i {
                y[i] -= a[(i, j)] * y[j];
            }
        }
        for i in (0..n).rev() {
            for j in (i + 1)..n {
                y[i] -= a[(i, j)] * y[j];
            }
            y[i] /= a[(i, i)];
        }
        for i in 0..n {
            inv[(i, col)] = y[i];
        }
    }
    Some(inv)
}

/// Orthonormal basis (as rows) of the kernel of `a`, singular values below
/// `rel_tol * sigma_max` counted as zero.
pub fn kernel_rows(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = a.ncols();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    // pad to at least n rows so the SVD returns a full right basis
    let m = a.nrows().max(n);
    let mut padded = DMatrix::zeros(m, n);
    padded.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("requested right singular vectors");
    let smax = svd.singular_values.iter().fold(0.0f64, |acc, v| acc.max(*v));
    let rows: Vec<usize> = (0..n)
        .filter(|&i| smax == 0.0 || svd.singular_values[i] < rel_tol * smax)
        .collect();
    let mut k = DMatrix::zeros(rows.len(), n);
    for (r, &i) in rows.iter().enumerate() {
        k.row_mut(r).copy_from(&vt.row(i));
    }
    k
}

/// Deterministic orthonormal basis (rows) for the range of the orthogonal
/// projector `p`: Gram-Schmidt over the projector columns in index order,
/// with each row's last significant entry made positive.
pub fn canonical_basis_of_projector(p: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let n = p.nrows();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for j in 0..n {
        if rows.len() == dim {
            break;
        }
        let mut v: Vec<f64> = p.column(j).iter().copied().collect();
        let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm0 < 1e-10 {
            continue;
        }
        for _ in 0..2 {
            for r in &rows {
                let dot: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(vi, ri)| *vi -= dot * ri);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 * norm0.max(1e-300) || norm < 1e-10 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        for x in v.iter_mut() {
            if x.abs() < 1e-15 {
                *x = 0.0;
            }
        }
        if let Some(last) = v.iter().rev().find(|x| x.abs() > 1e-12) {
            if *last < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        rows.push(v);
    }
    let mut out = DMatrix::zeros(rows.len(), n);
    for (i, r) in rows.iter().enumerate() {
        for (j, x) in r.iter().enumerate() {
            out[(i, j)] = *x;
        }
    }
    out
}

/// Max-abs entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}
