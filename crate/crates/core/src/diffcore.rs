//! Small dense numerics with hand-derived backward rules.
//!
//! Every differentiable op here comes as a forward function plus an explicit
//! backward function that maps an upstream gradient to input gradients. The
//! model in [`crate::model`] is a fixed composition of these ops, so no tape
//! is needed. [`grad_check`] compares any analytic gradient against central
//! finite differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "grid {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a grid from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Grid {
        let mut out = Grid::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Grid, scale: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dimension("add_scaled", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

/// A value together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct DualGrid {
    pub value: Grid,
    pub grad: Grid,
}

impl DualGrid {
    pub fn new(value: Grid) -> Self {
        let grad = Grid::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate(&mut self, grad: &Grid) -> Result<()> {
        self.grad.add_scaled(grad, 1.0)
    }
}

/// `a · b` for `a: n×k`, `b: k×m`.
pub fn matmul(a: &Grid, b: &Grid) -> Result<Grid> {
    if a.cols != b.rows {
        return Err(Error::dimension("matmul", a.shape(), b.shape()));
    }
    let mut out = Grid::zeros(a.rows, b.cols);
    matmul_into(a, b, &mut out);
    Ok(out)
}

fn matmul_into(a: &Grid, b: &Grid, out: &mut Grid) {
    let m = b.cols;
    for i in 0..a.rows {
        let orow = &mut out.data[i * m..(i + 1) * m];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
}

/// `aᵀ · b` for `a: k×n`, `b: k×m`, without materializing the transpose.
pub fn matmul_tn(a: &Grid, b: &Grid) -> Result<Grid> {
    if a.rows != b.rows {
        return Err(Error::dimension("matmul_tn", a.shape(), b.shape()));
    }
    let (n, m) = (a.cols, b.cols);
    let mut out = Grid::zeros(n, m);
    for k in 0..a.rows {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            for (o, &bkj) in out.data[i * m..(i + 1) * m].iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` for `a: n×k`, `b: m×k`.
pub fn matmul_nt(a: &Grid, b: &Grid) -> Result<Grid> {
    if a.cols != b.cols {
        return Err(Error::dimension("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = Grid::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(arow, b.row(j));
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[i,j] = Σ_k x[i,k]·w[k,j] + b[j]`.
pub fn affine(x: &Grid, w: &Grid, b: &[f64]) -> Result<Grid> {
    if x.cols != w.rows {
        return Err(Error::dimension("affine input/weight", x.shape(), w.shape()));
    }
    if b.len() != w.cols {
        return Err(Error::dimension("affine weight/bias", w.shape(), (1, b.len())));
    }
    let mut out = Grid::zeros(x.rows, w.cols);
    for r in 0..x.rows {
        out.row_mut(r).copy_from_slice(b);
    }
    matmul_into(x, w, &mut out);
    Ok(out)
}

/// Gradients of [`affine`] with respect to its three inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineGrads {
    pub dx: Grid,
    pub dw: Grid,
    pub db: Vec<f64>,
}

pub fn affine_backward(x: &Grid, w: &Grid, upstream: &Grid) -> Result<AffineGrads> {
    if upstream.shape() != (x.rows, w.cols) {
        return Err(Error::dimension(
            "affine upstream",
            upstream.shape(),
            (x.rows, w.cols),
        ));
    }
    let dx = matmul_nt(upstream, w)?;
    let dw = matmul_tn(x, upstream)?;
    let mut db = vec![0.0; w.cols];
    for r in 0..upstream.rows {
        for (d, u) in db.iter_mut().zip(upstream.row(r)) {
            *d += u;
        }
    }
    Ok(AffineGrads { dx, dw, db })
}

/// Max-subtracted softmax over one row.
pub fn softmax_row(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("softmax of a non-finite entry".into()));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Vector-Jacobian product of softmax given its output `y`:
/// `dx_j = y_j (g_j − Σ_k y_k g_k)`.
pub fn softmax_row_backward(y: &[f64], upstream: &[f64]) -> Vec<f64> {
    let inner = dot(y, upstream);
    y.iter().zip(upstream).map(|(&yj, &gj)| yj * (gj - inner)).collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of the sigmoid expressed through its output.
#[inline]
pub fn sigmoid_grad_from_output(s: f64) -> f64 {
    s * (1.0 - s)
}

/// Maximum relative discrepancy between `analytic` and a central-difference
/// estimate of the gradient of `f` at `theta`.
///
/// Per coordinate the error is `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, analytic: &[f64], theta: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if analytic.len() != theta.len() {
        return Err(Error::dimension(
            "grad_check",
            (1, analytic.len()),
            (1, theta.len()),
        ));
    }
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {h}")));
    }
    let base = f(theta);
    if !base.is_finite() {
        return Err(Error::Evaluation("objective is not finite at theta".into()));
    }
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let plus = f(&probe);
        probe[i] = theta[i] - h;
        let minus = f(&probe);
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "objective is not finite when probing coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g(rows: &[&[f64]]) -> Grid {
        Grid::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn affine_examples() {
        let id = g(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let out = affine(&g(&[&[1.0, 2.0]]), &id, &[0.0, 0.0]).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 2.0]);

        let out = affine(&g(&[&[1.0, 2.0]]), &g(&[&[3.0], &[4.0]]), &[1.0]).unwrap();
        assert_eq!(out.as_slice(), &[12.0]);

        let w = g(&[&[0.3, -2.0], &[7.0, 1.5]]);
        let out = affine(&g(&[&[0.0, 0.0]]), &w, &[5.0, 5.0]).unwrap();
        assert_eq!(out.as_slice(), &[5.0, 5.0]);
    }

    #[test]
    fn affine_shape_errors_name_both_shapes() {
        let err = affine(&Grid::zeros(1, 3), &Grid::zeros(2, 2), &[0.0, 0.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1x3") && msg.contains("2x2"), "{msg}");
        assert!(affine(&Grid::zeros(1, 2), &Grid::zeros(2, 2), &[0.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_row(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let y = softmax_row(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in y.iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(softmax_row(&[-123.4]).unwrap(), vec![1.0]);
        assert!(matches!(softmax_row(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(1..20);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
            let shift = rng.random_range(-50.0..50.0);
            let y = softmax_row(&x).unwrap();
            let ys = softmax_row(&x.iter().map(|v| v + shift).collect::<Vec<_>>()).unwrap();
            assert!((y.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (a, b) in y.iter().zip(&ys) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        let s = sigmoid(-60.0);
        assert!(s > 0.0 && s <= 1e-20);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!(sigmoid(-800.0).is_finite());
    }

    #[test]
    fn grad_check_examples() {
        let err = grad_check(|t| t[0] * t[0], &[6.0], &[3.0], 1e-5).unwrap();
        assert!(err <= 1e-7, "{err}");
        let err = grad_check(|t| t[0] * t[0], &[12.0], &[3.0], 1e-5).unwrap();
        assert!(err >= 0.3, "{err}");
        let bad = grad_check(|t| if t[0] > 3.0 { f64::NAN } else { t[0] }, &[1.0], &[3.0], 1e-5);
        assert!(matches!(bad, Err(Error::Evaluation(_))));
    }

    /// Affine and softmax backward rules against central differences over
    /// random shapes.
    #[test]
    fn backward_rules_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (n, k, m) = (
                rng.random_range(1..5),
                rng.random_range(1..5),
                rng.random_range(1..5),
            );
            let rand_vec = |rng: &mut ChaCha8Rng, len| -> Vec<f64> {
                (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
            };
            let x = rand_vec(&mut rng, n * k);
            let w = rand_vec(&mut rng, k * m);
            let b = rand_vec(&mut rng, m);
            let up = Grid::from_vec(n, m, rand_vec(&mut rng, n * m)).unwrap();

            // Scalar objective: Σ upstream ⊙ affine(x, w, b).
            let objective = |theta: &[f64]| {
                let x = Grid::from_vec(n, k, theta[..n * k].to_vec()).unwrap();
                let w = Grid::from_vec(k, m, theta[n * k..n * k + k * m].to_vec()).unwrap();
                let out = affine(&x, &w, &theta[n * k + k * m..]).unwrap();
                dot(out.as_slice(), up.as_slice())
            };
            let xg = Grid::from_vec(n, k, x.clone()).unwrap();
            let wg = Grid::from_vec(k, m, w.clone()).unwrap();
            let grads = affine_backward(&xg, &wg, &up).unwrap();
            let analytic: Vec<f64> = grads
                .dx
                .as_slice()
                .iter()
                .chain(grads.dw.as_slice())
                .chain(&grads.db)
                .copied()
                .collect();
            let theta: Vec<f64> = x.iter().chain(&w).chain(&b).copied().collect();
            assert!(grad_check(objective, &analytic, &theta, 1e-5).unwrap() <= 1e-4);

            let len = rng.random_range(1..10);
            let s = rand_vec(&mut rng, len);
            let gup = rand_vec(&mut rng, len);
            let y = softmax_row(&s).unwrap();
            let analytic = softmax_row_backward(&y, &gup);
            let objective = |t: &[f64]| dot(&softmax_row(t).unwrap(), &gup);
            assert!(grad_check(objective, &analytic, &s, 1e-5).unwrap() <= 1e-4);
        }
    }

    #[test]
    fn ops_are_deterministic() {
        let x = Grid::from_vec(2, 3, vec![0.1, -0.4, 2.5, 1e-3, 7.0, -3.3]).unwrap();
        let w = Grid::from_vec(3, 2, vec![0.7, 0.2, -1.1, 0.05, 0.3, 0.9]).unwrap();
        let a = affine(&x, &w, &[0.1, 0.2]).unwrap();
        let b = affine(&x, &w, &[0.1, 0.2]).unwrap();
        assert_eq!(
            a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn dual_grid_accumulates() {
        let mut d = DualGrid::new(Grid::filled(2, 2, 1.0));
        d.accumulate(&Grid::filled(2, 2, 0.5)).unwrap();
        d.accumulate(&Grid::filled(2, 2, 0.5)).unwrap();
        assert_eq!(d.grad.sum(), 4.0);
        d.zero_grad();
        assert_eq!(d.grad.sum(), 0.0);
        assert!(d.accumulate(&Grid::zeros(1, 2)).is_err());
    }
}
