//! Small dense kernels: Lawson-Hanson NNLS, least-distance programming and
//! projection onto polyhedral cones `{w : C w >= 0}`.
//!
//! Problem sizes here are tiny (a handful of rows, at most a few dozen
//! columns), so everything is plain column-major `Vec<f64>` storage.

/// Column-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix whose columns are the given slices (all of equal length).
    pub fn from_columns<'a, I>(rows: usize, columns: I) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut data = Vec::new();
        let mut cols = 0;
        for c in columns {
            assert_eq!(c.len(), rows, "column length mismatch");
            data.extend_from_slice(c);
            cols += 1;
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.rows + i] = v;
    }

    /// `A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                for (o, a) in out.iter_mut().zip(self.col(j)) {
                    *o += a * xj;
                }
            }
        }
        out
    }

    /// `A^T x`
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.cols).map(|j| dot(self.col(j), x)).collect()
    }

    fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Least squares `min ||A[:, cols] z - b||` by Householder QR. Columns whose
/// reduced norm collapses below `tiny` get a zero coefficient.
fn lstsq_subset(a: &Dense, cols: &[usize], b: &[f64]) -> Vec<f64> {
    let m = a.rows();
    let k = cols.len();
    let mut q: Vec<f64> = Vec::with_capacity(m * k);
    for &c in cols {
        q.extend_from_slice(a.col(c));
    }
    let mut rhs = b.to_vec();
    let scale = q.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-300);
    let tiny = 1e-13 * scale;
    let mut usable = vec![true; k];
    let mut diag = vec![0.0; k];
    let steps = k.min(m);
    for p in 0..steps {
        let colp = &mut q[p * m..(p + 1) * m];
        let sigma = colp[p..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if sigma <= tiny {
            usable[p] = false;
            continue;
        }
        let alpha = if colp[p] > 0.0 { -sigma } else { sigma };
        let mut v: Vec<f64> = colp[p..].to_vec();
        v[0] -= alpha;
        let vnorm2 = v.iter().map(|x| x * x).sum::<f64>();
        if vnorm2 == 0.0 {
            diag[p] = colp[p];
            continue;
        }
        // apply H = I - 2 v v^T / (v^T v) to remaining columns and rhs
        for c in p..k {
            let col = &mut q[c * m..(c + 1) * m];
            let s = 2.0 * dot(&v, &col[p..]) / vnorm2;
            for (x, vi) in col[p..].iter_mut().zip(&v) {
                *x -= s * vi;
            }
        }
        let s = 2.0 * dot(&v, &rhs[p..]) / vnorm2;
        for (x, vi) in rhs[p..].iter_mut().zip(&v) {
            *x -= s * vi;
        }
        diag[p] = q[p * m + p];
    }
    for p in steps..k {
        usable[p] = false;
    }
    // back substitution on the upper-triangular factor
    let mut z = vec![0.0; k];
    for p in (0..steps).rev() {
        if !usable[p] || diag[p].abs() <= tiny {
            z[p] = 0.0;
            continue;
        }
        let mut acc = rhs[p];
        for c in (p + 1)..k {
            acc -= q[c * m + p] * z[c];
        }
        z[p] = acc / diag[p];
    }
    z
}

/// Lawson-Hanson active-set solver for `min ||A x - b||_2` subject to `x >= 0`.
pub fn nnls(a: &Dense, b: &[f64]) -> Vec<f64> {
    let (m, n) = (a.rows(), a.cols());
    assert_eq!(b.len(), m);
    let mut x = vec![0.0; n];
    if n == 0 {
        return x;
    }
    let tol = 10.0 * f64::EPSILON * a.frobenius().max(1e-300) * (m.max(n) as f64);
    let mut passive = vec![false; n];
    let max_outer = 3 * n + 10;

    let residual = |x: &[f64]| -> Vec<f64> {
        let ax = a.mul_vec(x);
        b.iter().zip(ax).map(|(bi, ai)| bi - ai).collect()
    };

    for _ in 0..max_outer {
        let r = residual(&x);
        let w = a.tr_mul_vec(&r);
        let candidate = (0..n)
            .filter(|&j| !passive[j])
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(t) = candidate else { break };
        if w[t] <= tol {
            break;
        }
        passive[t] = true;

        let mut inner = 0;
        loop {
            inner += 1;
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let zp = lstsq_subset(a, &idx, b);
            if zp.iter().all(|&v| v > 0.0) {
                for (&j, &v) in idx.iter().zip(&zp) {
                    x[j] = v;
                }
                break;
            }
            if inner > 3 * n + 10 {
                // numerical cycling; keep the current feasible iterate
                for (&j, &v) in idx.iter().zip(&zp) {
                    if v > 0.0 {
                        x[j] = v;
                    }
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (&j, &v) in idx.iter().zip(&zp) {
                if v <= 0.0 {
                    let denom = x[j] - v;
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (&j, &v) in idx.iter().zip(&zp) {
                x[j] += alpha * (v - x[j]);
                if x[j] <= tol {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
            // the entering variable may have been dropped immediately
            if !(0..n).any(|j| passive[j]) {
                break;
            }
        }
    }
    x
}

/// Least-distance programming: `min ||x||` subject to `G x >= h`, with `G`
/// given by its rows. Returns `None` when the system is infeasible.
pub fn ldp(g_rows: &[Vec<f64>], h: &[f64], dim: usize) -> Option<Vec<f64>> {
    assert_eq!(g_rows.len(), h.len());
    if g_rows.is_empty() {
        return Some(vec![0.0; dim]);
    }
    // E = [G^T; h^T], f = e_{dim+1}
    let mut e = Dense::zeros(dim + 1, g_rows.len());
    for (k, (row, hk)) in g_rows.iter().zip(h).enumerate() {
        for (i, v) in row.iter().enumerate() {
            e.set(i, k, *v);
        }
        e.set(dim, k, *hk);
    }
    let mut f = vec![0.0; dim + 1];
    f[dim] = 1.0;
    let u = nnls(&e, &f);
    let eu = e.mul_vec(&u);
    let r: Vec<f64> = eu.iter().zip(&f).map(|(a, b)| a - b).collect();
    let rn = norm2(&r);
    if rn <= 1e-12 || r[dim].abs() <= 1e-14 {
        return None;
    }
    Some(r[..dim].iter().map(|v| -v / r[dim]).collect())
}

/// Euclidean projection of `u` onto the cone `{w : c_k^T w >= 0 for all rows k}`,
/// via Moreau's decomposition: `P_K(u) = u + C^T lambda*` where
/// `lambda* = argmin_{lambda >= 0} ||u + C^T lambda||`.
///
/// `ct` holds the constraint rows `c_k` as its columns (it is `C^T`, `d x m`).
pub fn project_cone(ct: &Dense, u: &[f64]) -> Vec<f64> {
    if ct.cols() == 0 {
        return u.to_vec();
    }
    let cu = ct.tr_mul_vec(u);
    if cu.iter().all(|&v| v >= 0.0) {
        return u.to_vec();
    }
    let neg_u: Vec<f64> = u.iter().map(|v| -v).collect();
    let lambda = nnls(ct, &neg_u);
    let shift = ct.mul_vec(&lambda);
    u.iter().zip(shift).map(|(a, b)| a + b).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_from_rows(rows: &[&[f64]]) -> Dense {
        let m = rows.len();
        let n = rows[0].len();
        let mut a = Dense::zeros(m, n);
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                a.set(i, j, *v);
            }
        }
        a
    }

    #[test]
    fn nnls_unconstrained_optimum_is_returned() {
        let a = dense_from_rows(&[&[1.0, 0.0], &[0.0, 2.0], &[0.0, 0.0]]);
        let x = nnls(&a, &[3.0, 4.0, 1.0]);
        assert!((x[0] - 3.0).abs() < 1e-12);
        assert!((x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn nnls_clamps_negative_coordinates() {
        let a = dense_from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let x = nnls(&a, &[-1.0, 2.0]);
        assert_eq!(x[0], 0.0);
        assert!((x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn nnls_kkt_on_random_problem() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (m, n) = (4, 9);
            let mut a = Dense::zeros(m, n);
            for i in 0..m {
                for j in 0..n {
                    a.set(i, j, rng.random_range(-1.0..1.0));
                }
            }
            let b: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = nnls(&a, &b);
            let ax = a.mul_vec(&x);
            let r: Vec<f64> = b.iter().zip(ax).map(|(p, q)| p - q).collect();
            let w = a.tr_mul_vec(&r);
            for j in 0..n {
                assert!(x[j] >= 0.0);
                assert!(w[j] <= 1e-10, "dual infeasible {}", w[j]);
                if x[j] > 0.0 {
                    assert!(w[j].abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn ldp_finds_min_norm_point_of_halfspace() {
        // x1 + x2 >= 2 -> closest point (1, 1)
        let x = ldp(&[vec![1.0, 1.0]], &[2.0], 2).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ldp_detects_infeasibility() {
        // x >= 1 and -x >= 1
        assert!(ldp(&[vec![1.0], vec![-1.0]], &[1.0, 1.0], 1).is_none());
    }

    #[test]
    fn cone_projection_onto_orthant() {
        let ct = Dense::from_columns(2, [[1.0, 0.0].as_slice(), [0.0, 1.0].as_slice()]);
        let p = project_cone(&ct, &[-2.0, 3.0]);
        assert_eq!(p, vec![0.0, 3.0]);
        let p = project_cone(&ct, &[-2.0, -3.0]);
        assert!(norm2(&p) < 1e-15);
    }

    #[test]
    fn cone_projection_is_feasible_and_orthogonal() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let d = 3;
            let m = 6;
            let cols: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let ct = Dense::from_columns(d, cols.iter().map(|c| c.as_slice()));
            let u: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = project_cone(&ct, &u);
            for c in &cols {
                assert!(dot(c, &p) >= -1e-12);
            }
            // Moreau: (u - p) is orthogonal to p
            let diff: Vec<f64> = u.iter().zip(&p).map(|(a, b)| a - b).collect();
            assert!(dot(&diff, &p).abs() < 1e-10);
        }
    }
}
