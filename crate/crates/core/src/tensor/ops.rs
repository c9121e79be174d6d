//! Forward and backward kernels. Every function treats tensors as
//! `rows × cols` matrices; backward functions take the upstream gradient and
//! return gradients for each differentiable input.

use crate::error::{Error, Result};

use super::Tensor;

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Shape(what()))
    }
}

/// `a · b` for `m×k` and `k×n` matrices.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    check(b.rows() == k, || {
        format!("matmul {:?} x {:?}", a.shape(), b.shape())
    })?;
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// Gradients of `a · b` with respect to both factors.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (ad, bd, gd) = (a.data(), b.data(), dy.data());
    let mut da = vec![0.0; m * k];
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let g = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            da[i * k + p] = g.iter().zip(brow).map(|(x, y)| x * y).sum();
            let av = ad[i * k + p];
            if av != 0.0 {
                for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(g) {
                    *d += av * gv;
                }
            }
        }
    }
    (
        Tensor::matrix(m, k, da).unwrap(),
        Tensor::matrix(k, n, db).unwrap(),
    )
}

/// Shared per-row affine map `y[i] = x[i] · w + b`.
pub fn shared_mlp_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut y = matmul(x, w)?;
    if let Some(b) = b {
        check(b.len() == y.cols(), || {
            format!("bias of {} for width {}", b.len(), y.cols())
        })?;
        for r in 0..y.rows() {
            for (v, bv) in y.row_mut(r).iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(y)
}

/// Fully connected layer on a single row; identical arithmetic to the shared MLP.
pub fn fc_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    check(x.rows() == 1, || format!("fc expects one row, got {:?}", x.shape()))?;
    shared_mlp_forward(x, w, b)
}

/// Returns `(dx, dw, db)`.
pub fn shared_mlp_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (dx, dw) = matmul_backward(x, w, dy);
    let mut db = Tensor::zeros(&[1, dy.cols()]);
    for r in 0..dy.rows() {
        for (d, g) in db.data_mut().iter_mut().zip(dy.row(r)) {
            *d += g;
        }
    }
    (dx, dw, db)
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    y
}

/// Backward of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dot: f64 = yr.iter().zip(dy.row(r)).map(|(a, b)| a * b).sum();
        for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
            *d = yv * (*d - dot);
        }
    }
    dx
}

/// `v / |v|`; the zero vector maps to itself and sets the returned flag.
pub fn l2_normalize(v: &[f64]) -> (Vec<f64>, bool) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        log::warn!("l2-normalizing a zero vector");
        (v.to_vec(), true)
    } else {
        (v.iter().map(|x| x / norm).collect(), false)
    }
}

/// Normalizes every row; returns the output and the row norms.
pub fn l2_normalize_rows(x: &Tensor) -> (Tensor, Vec<f64>) {
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let (row, _) = l2_normalize(x.row(r));
        norms.push(x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt());
        y.row_mut(r).copy_from_slice(&row);
    }
    (y, norms)
}

pub fn l2_normalize_rows_backward(y: &Tensor, norms: &[f64], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(y.shape());
    for (r, &n) in norms.iter().enumerate() {
        if n == 0.0 {
            continue;
        }
        let yr = y.row(r);
        let g = dy.row(r);
        let dot: f64 = yr.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(g) {
            *d = (gv - yv * dot) / n;
        }
    }
    dx
}

/// Column-wise maximum over all rows; ties go to the lowest row.
pub fn maxpool_points(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("max-pooling an empty point set".into()));
    }
    let (y, arg) = group_max(x, x.rows())?;
    Ok((y, arg))
}

pub fn maxpool_points_backward(argmax: &[usize], rows: usize, dy: &Tensor) -> Tensor {
    let c = dy.cols();
    let mut dx = Tensor::zeros(&[rows, c]);
    for (j, &r) in argmax.iter().enumerate() {
        dx.data_mut()[r * c + j] += dy.data()[j];
    }
    dx
}

/// Max over consecutive blocks of `group` rows: `(n·group) × c → n × c`.
/// Argmax indices are absolute row numbers, lowest on ties.
pub fn group_max(x: &Tensor, group: usize) -> Result<(Tensor, Vec<usize>)> {
    check(group >= 1 && x.rows() % group == 0 && x.rows() > 0, || {
        format!("cannot group {} rows by {group}", x.rows())
    })?;
    let (n, c) = (x.rows() / group, x.cols());
    let mut out = vec![f64::NEG_INFINITY; n * c];
    let mut arg = vec![0usize; n * c];
    for g in 0..n {
        for r in g * group..(g + 1) * group {
            for (j, &v) in x.row(r).iter().enumerate() {
                if v > out[g * c + j] {
                    out[g * c + j] = v;
                    arg[g * c + j] = r;
                }
            }
        }
    }
    Ok((Tensor::matrix(n, c, out)?, arg))
}

pub fn group_max_backward(argmax: &[usize], in_rows: usize, dy: &Tensor) -> Tensor {
    let c = dy.cols();
    let mut dx = Tensor::zeros(&[in_rows, c]);
    for (k, &r) in argmax.iter().enumerate() {
        dx.data_mut()[r * c + k % c] += dy.data()[k];
    }
    dx
}

/// Elementwise maximum; ties take the first operand.
pub fn maximum(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check(a.same_shape(b), || {
        format!("maximum {:?} vs {:?}", a.shape(), b.shape())
    })?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| if x >= y { x } else { y })
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn maximum_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    for (k, &g) in dy.data().iter().enumerate() {
        if a.data()[k] >= b.data()[k] {
            da.data_mut()[k] = g;
        } else {
            db.data_mut()[k] = g;
        }
    }
    (da, db)
}

/// Horizontal concatenation of matrices with equal row counts.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts.first().map_or(0, |t| t.rows());
    check(parts.iter().all(|t| t.rows() == rows), || {
        "concat of tensors with different row counts".into()
    })?;
    let width: usize = parts.iter().map(|t| t.cols()).sum();
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for t in parts {
            data.extend_from_slice(t.row(r));
        }
    }
    Tensor::matrix(rows, width, data)
}

pub fn concat_cols_backward(widths: &[usize], dy: &Tensor) -> Vec<Tensor> {
    let rows = dy.rows();
    let mut out: Vec<Tensor> = widths.iter().map(|&w| Tensor::zeros(&[rows, w])).collect();
    for r in 0..rows {
        let mut off = 0;
        let src = dy.row(r);
        for (t, &w) in out.iter_mut().zip(widths) {
            t.row_mut(r).copy_from_slice(&src[off..off + w]);
            off += w;
        }
    }
    out
}

/// Rows of `x` picked by `index` (repeats allowed).
pub fn gather_rows(x: &Tensor, index: &[usize]) -> Result<Tensor> {
    check(index.iter().all(|&i| i < x.rows()), || {
        "gather index out of range".into()
    })?;
    let c = x.cols();
    let mut data = Vec::with_capacity(index.len() * c);
    for &i in index {
        data.extend_from_slice(x.row(i));
    }
    Tensor::matrix(index.len(), c, data)
}

pub fn gather_rows_backward(index: &[usize], in_rows: usize, dy: &Tensor) -> Tensor {
    let c = dy.cols();
    let mut dx = Tensor::zeros(&[in_rows, c]);
    for (k, &i) in index.iter().enumerate() {
        for (d, g) in dx.row_mut(i).iter_mut().zip(dy.row(k)) {
            *d += g;
        }
    }
    dx
}

/// VLAD residual sums `V[k] = Σ_i a[i][k] (x[i] − c[k])` for soft
/// assignments `a` (`N×K`), features `x` (`N×F`) and centers `c` (`K×F`).
pub fn vlad_residual(a: &Tensor, x: &Tensor, c: &Tensor) -> Result<Tensor> {
    let (n, k, f) = (x.rows(), a.cols(), x.cols());
    check(a.rows() == n && c.rows() == k && c.cols() == f, || {
        format!(
            "vlad assign {:?}, features {:?}, centers {:?}",
            a.shape(),
            x.shape(),
            c.shape()
        )
    })?;
    let mut v = vec![0.0; k * f];
    let mut mass = vec![0.0; k];
    for i in 0..n {
        let xi = x.row(i);
        for (kk, &w) in a.row(i).iter().enumerate() {
            mass[kk] += w;
            for (o, &xv) in v[kk * f..(kk + 1) * f].iter_mut().zip(xi) {
                *o += w * xv;
            }
        }
    }
    for kk in 0..k {
        for (o, &cv) in v[kk * f..(kk + 1) * f].iter_mut().zip(c.row(kk)) {
            *o -= mass[kk] * cv;
        }
    }
    Tensor::matrix(k, f, v)
}

/// Returns `(da, dx, dc)`.
pub fn vlad_residual_backward(
    a: &Tensor,
    x: &Tensor,
    c: &Tensor,
    dv: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, k, f) = (x.rows(), a.cols(), x.cols());
    let mut da = Tensor::zeros(&[n, k]);
    let mut dx = Tensor::zeros(&[n, f]);
    let mut dc = Tensor::zeros(&[k, f]);
    // c_k · dV_k appears in every da[i][k].
    let cdot: Vec<f64> = (0..k)
        .map(|kk| c.row(kk).iter().zip(dv.row(kk)).map(|(p, q)| p * q).sum())
        .collect();
    let mut mass = vec![0.0; k];
    for i in 0..n {
        let xi = x.row(i);
        let ai = a.row(i);
        for kk in 0..k {
            let g = dv.row(kk);
            let xdot: f64 = xi.iter().zip(g).map(|(p, q)| p * q).sum();
            da.data_mut()[i * k + kk] = xdot - cdot[kk];
            mass[kk] += ai[kk];
            let w = ai[kk];
            for (d, &gv) in dx.row_mut(i).iter_mut().zip(g) {
                *d += w * gv;
            }
        }
    }
    for kk in 0..k {
        let m = mass[kk];
        for (d, &gv) in dc.row_mut(kk).iter_mut().zip(dv.row(kk)) {
            *d = -m * gv;
        }
    }
    (da, dx, dc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `Σ w ⊙ f(x)` with respect to `x`.
    fn numeric_grad(x: &Tensor, weights: &Tensor, f: &dyn Fn(&Tensor) -> Tensor) -> Tensor {
        let eps = 1e-6;
        let mut g = Tensor::zeros(x.shape());
        for k in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[k] += eps;
            let mut m = x.clone();
            m.data_mut()[k] -= eps;
            let fp: f64 = f(&p).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
            let fm: f64 = f(&m).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
            g.data_mut()[k] = (fp - fm) / (2.0 * eps);
        }
        g
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    #[test]
    fn shared_mlp_examples() {
        let x = t(2, 3, &[1.0, 2.0, 3.0, -4.0, 5.0, 6.5]);
        let y = shared_mlp_forward(&x, &Tensor::identity(3), Some(&Tensor::zeros(&[1, 3]))).unwrap();
        assert_eq!(y, x);
        let y = shared_mlp_forward(&t(1, 2, &[4.0, 5.0]), &t(2, 1, &[1.0, 2.0]), Some(&t(1, 1, &[3.0])))
            .unwrap();
        assert_eq!(y.data(), &[17.0]);
        assert!(shared_mlp_forward(&x, &Tensor::identity(2), None).is_err());
        assert!(fc_forward(&x, &Tensor::identity(3), None).is_err());
    }

    #[test]
    fn shared_mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let (n, ci, co) = (rng.gen_range(1..=8), rng.gen_range(1..=16), rng.gen_range(1..=16));
            let x = random(&mut rng, n, ci);
            let w = random(&mut rng, ci, co);
            let b = random(&mut rng, 1, co);
            let up = random(&mut rng, n, co);
            let (dx, dw, db) = shared_mlp_backward(&x, &w, &up);
            let fx = numeric_grad(&x, &up, &|x| shared_mlp_forward(x, &w, Some(&b)).unwrap());
            let fw = numeric_grad(&w, &up, &|w| shared_mlp_forward(&x, w, Some(&b)).unwrap());
            let fb = numeric_grad(&b, &up, &|b| shared_mlp_forward(&x, &w, Some(b)).unwrap());
            assert!(rel_err(&dx, &fx) < 1e-6);
            assert!(rel_err(&dw, &fw) < 1e-6);
            assert!(rel_err(&db, &fb) < 1e-6);
        }
    }

    #[test]
    fn softmax_properties_and_gradient() {
        let y = softmax_rows(&t(1, 4, &[2.5; 4]));
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let big = softmax_rows(&t(1, 2, &[1000.0, 1000.0]));
        assert_eq!(big.data(), &[0.5, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 5, 6);
        let y = softmax_rows(&x);
        for r in 0..5 {
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let up = random(&mut rng, 5, 6);
        let num = numeric_grad(&x, &up, &softmax_rows);
        assert!(rel_err(&softmax_rows_backward(&y, &up), &num) < 1e-6);
    }

    #[test]
    fn l2_normalize_cases() {
        let (v, zero) = l2_normalize(&[3.0, 4.0]);
        assert_eq!(v, vec![0.6, 0.8]);
        assert!(!zero);
        let (v, zero) = l2_normalize(&[0.0, 0.0]);
        assert_eq!(v, vec![0.0, 0.0]);
        assert!(zero);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 4, 5);
        let (y, norms) = l2_normalize_rows(&x);
        let up = random(&mut rng, 4, 5);
        let num = numeric_grad(&x, &up, &|x| l2_normalize_rows(x).0);
        assert!(rel_err(&l2_normalize_rows_backward(&y, &norms, &up), &num) < 1e-6);
    }

    #[test]
    fn relu_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 6, 7);
        let up = random(&mut rng, 6, 7);
        let num = numeric_grad(&x, &up, &relu);
        assert!(rel_err(&relu_backward(&x, &up), &num) < 1e-6);
    }

    #[test]
    fn maxpool_cases() {
        let x = t(1, 3, &[1.0, -2.0, 0.5]);
        let (y, _) = maxpool_points(&x).unwrap();
        assert_eq!(y, x);

        let x = t(3, 2, &[1.0, 5.0, 3.0, 5.0, 3.0, 0.0]);
        let (y, arg) = maxpool_points(&x).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);
        assert_eq!(arg, vec![1, 0]);
        let dx = maxpool_points_backward(&arg, 3, &t(1, 2, &[1.0, 1.0]));
        assert_eq!(dx.data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 9, 4);
        let perm = [4, 2, 8, 0, 1, 7, 3, 6, 5];
        let shuffled = gather_rows(&x, &perm).unwrap();
        assert_eq!(maxpool_points(&x).unwrap().0, maxpool_points(&shuffled).unwrap().0);
        assert!(maxpool_points(&Tensor::zeros(&[0, 3])).is_err());
    }

    #[test]
    fn group_max_and_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 12, 3);
        let (y, arg) = group_max(&x, 4).unwrap();
        assert_eq!(y.shape(), &[3, 3]);
        let up = random(&mut rng, 3, 3);
        let num = numeric_grad(&x, &up, &|x| group_max(x, 4).unwrap().0);
        assert!(rel_err(&group_max_backward(&arg, 12, &up), &num) < 1e-6);

        let idx = [0, 3, 3, 1, 2, 0];
        let x = random(&mut rng, 4, 2);
        let up = random(&mut rng, 6, 2);
        let num = numeric_grad(&x, &up, &|x| gather_rows(x, &idx).unwrap());
        assert!(rel_err(&gather_rows_backward(&idx, 4, &up), &num) < 1e-6);
    }

    #[test]
    fn concat_and_maximum() {
        let a = t(2, 1, &[1.0, 2.0]);
        let b = t(2, 2, &[3.0, 4.0, 5.0, 6.0]);
        let c = concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let parts = concat_cols_backward(&[1, 2], &c);
        assert_eq!(parts, vec![a.clone(), b.clone()]);
        assert!(concat_cols(&[&a, &t(1, 1, &[0.0])]).is_err());

        let m = maximum(&t(1, 3, &[1.0, 5.0, 2.0]), &t(1, 3, &[1.0, 4.0, 3.0])).unwrap();
        assert_eq!(m.data(), &[1.0, 5.0, 3.0]);
    }

    #[test]
    fn vlad_residual_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = softmax_rows(&random(&mut rng, 5, 3));
        let x = random(&mut rng, 5, 4);
        let c = random(&mut rng, 3, 4);
        let up = random(&mut rng, 3, 4);
        let (da, dx, dc) = vlad_residual_backward(&a, &x, &c, &up);
        let na = numeric_grad(&a, &up, &|a| vlad_residual(a, &x, &c).unwrap());
        let nx = numeric_grad(&x, &up, &|x| vlad_residual(&a, x, &c).unwrap());
        let nc = numeric_grad(&c, &up, &|c| vlad_residual(&a, &x, c).unwrap());
        assert!(rel_err(&da, &na) < 1e-6);
        assert!(rel_err(&dx, &nx) < 1e-6);
        assert!(rel_err(&dc, &nc) < 1e-6);
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(&mut rng, 4, 3);
        let b = random(&mut rng, 3, 3);
        let up = random(&mut rng, 4, 3);
        let (da, db) = matmul_backward(&a, &b, &up);
        assert!(rel_err(&da, &numeric_grad(&a, &up, &|a| matmul(a, &b).unwrap())) < 1e-6);
        assert!(rel_err(&db, &numeric_grad(&b, &up, &|b| matmul(&a, b).unwrap())) < 1e-6);
    }
}
