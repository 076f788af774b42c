//! Dense-matrix arithmetic, stable softmax / cross-entropy, and the
//! finite-difference gradient checker used to audit every analytic
//! gradient in the crate.
//!
//! All values are 64-bit floats: the gradient audits run at a 1e-4
//! relative tolerance, which single precision cannot reliably meet.
//! Summation orders are fixed so repeated runs are bit-identical.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Row-major dense matrix of finite `f64` values.
///
/// Construction and every arithmetic operation validate finiteness, so a
/// `Matrix` held by any module is guaranteed NaN/Inf-free. Zero-sized
/// dimensions are rejected.
///
/// Serializes as nested row arrays (`[[...], [...]]`), the layout all the
/// JSON interchange formats in this crate use for feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_seq((0..self.rows).map(|r| self.row(r)))
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(deserializer)?;
        Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds from nested rows, validating that they are rectangular.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Shape("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has length {} but row 0 has length {cols}",
                    r.len()
                )));
            }
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized matrix");
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.rows && col < self.cols, "index out of bounds");
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        assert!(row < self.rows && col < self.cols, "index out of bounds");
        assert!(value.is_finite(), "non-finite value");
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        assert!(row < self.rows, "row out of bounds");
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// Matrix product with a fixed accumulation order (ascending inner
    /// index per output entry) so results are reproducible bit-for-bit.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul dimension mismatch: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix::from_vec(self.rows, other.cols, out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix { rows: self.cols, cols: self.rows, data: out }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Result<Matrix> {
        let data = self.data.iter().map(|v| v * factor).collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    /// Adds `bias` to every row.
    pub fn add_row_vec(&self, bias: &[f64]) -> Result<Matrix> {
        if bias.len() != self.cols {
            return Err(Error::Shape(format!(
                "bias length {} does not match column count {}",
                bias.len(),
                self.cols
            )));
        }
        let mut data = self.data.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[r * self.cols + c] += bias[c];
            }
        }
        Matrix::from_vec(self.rows, self.cols, data)
    }

    /// Column means: pools the row (token) dimension down to one vector.
    pub fn mean_over_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c] += self.data[r * self.cols + c];
            }
        }
        let inv = 1.0 / self.rows as f64;
        for v in &mut out {
            *v *= inv;
        }
        out
    }

    /// Sum of the elementwise product; the scalar loss used when checking
    /// matrix-valued gradients against a fixed upstream.
    pub fn frob_dot(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "frob_dot shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op} shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }
}

/// Outer product `u vᵀ` as a `u.len() x v.len()` matrix.
pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
    let mut data = Vec::with_capacity(u.len() * v.len());
    for &a in u {
        for &b in v {
            data.push(a * b);
        }
    }
    Matrix { rows: u.len(), cols: v.len(), data }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sum(exp(v)))` with max subtraction. `v` must be nonempty.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    debug_assert!(!v.is_empty());
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Temperature softmax with max subtraction:
/// `p_i = exp((v_i - max v) / t) / sum_j exp((v_j - max v) / t)`.
pub fn softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax input contains a non-finite value".into()));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| ((x - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

/// Floor applied to `q` entries before taking logs in [`cross_entropy`].
pub const CROSS_ENTROPY_FLOOR: f64 = 1e-12;

const DISTRIBUTION_SUM_TOL: f64 = 1e-9;

/// `-sum_i p_i log q_i` for two probability vectors of equal length.
///
/// `q` entries are clamped below at [`CROSS_ENTROPY_FLOOR`] before the
/// log; terms with `p_i = 0` contribute zero regardless of `q_i`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "cross_entropy length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::Domain("cross_entropy of empty vectors".into()));
    }
    for (name, v) in [("p", p), ("q", q)] {
        // NaN fails every comparison, so finiteness must be checked
        // explicitly or a poisoned vector would slip through
        if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Domain(format!(
                "{name} has a negative or non-finite entry"
            )));
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_SUM_TOL {
            return Err(Error::Domain(format!("{name} sums to {sum}, not 1")));
        }
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            total -= pi * qi.max(CROSS_ENTROPY_FLOOR).ln();
        }
    }
    Ok(total)
}

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / (2h)`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step must be positive, got {h}")));
    }
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        point[i] = x[i] + h;
        let plus = f(&point);
        point[i] = x[i] - h;
        let minus = f(&point);
        point[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "function value is not finite at coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub parameter_name: String,
    pub max_relative_error: f64,
    pub num_entries_checked: usize,
    pub pass: bool,
}

/// Compares coordinate-wise with relative error
/// `|a_i - n_i| / max(1e-8, |a_i| + |n_i|)`; passes iff the max is within
/// `tol`.
pub fn check_gradients(
    parameter_name: &str,
    analytic: &[f64],
    numeric: &[f64],
    tol: f64,
) -> Result<GradReport> {
    if analytic.len() != numeric.len() {
        return Err(Error::Shape(format!(
            "gradient length mismatch for {parameter_name}: {} vs {}",
            analytic.len(),
            numeric.len()
        )));
    }
    if analytic.is_empty() {
        return Err(Error::Domain(format!(
            "no gradient entries to check for {parameter_name}"
        )));
    }
    let mut max_err = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let err = (a - n).abs() / 1e-8f64.max(a.abs() + n.abs());
        max_err = max_err.max(err);
    }
    Ok(GradReport {
        parameter_name: parameter_name.to_string(),
        max_relative_error: max_err,
        num_entries_checked: analytic.len(),
        pass: max_err <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let prod = Matrix::identity(2).matmul(&a).unwrap();
        assert_eq!(prod, a);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let a = Matrix::from_vec(2, 2, vec![5.0, -1.0, 2.5, 8.0]).unwrap();
        let prod = Matrix::zeros(2, 2).matmul(&a).unwrap();
        assert_eq!(prod, Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err();
        match err {
            Error::Shape(msg) => {
                assert!(msg.contains("2x3") && msg.contains("4x2"), "{msg}");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_associative_on_random_triples() {
        let mut rng = crate::seeding::rng(11, "assoc", 0);
        use rand::Rng;
        for _ in 0..50 {
            let draw = |rng: &mut rand_chacha::ChaCha20Rng| {
                let data: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
                Matrix::from_vec(4, 4, data).unwrap()
            };
            let (a, b, c) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                let rel = (l - r).abs() / 1e-8f64.max(l.abs() + r.abs());
                assert!(rel < 1e-9, "associativity violated: {l} vs {r}");
            }
        }
    }

    #[test]
    fn constructors_reject_bad_input() {
        assert!(matches!(Matrix::from_vec(0, 2, vec![]), Err(Error::Shape(_))));
        assert!(matches!(Matrix::from_vec(2, 2, vec![1.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn softmax_constant_input_is_uniform() {
        for c in [-3.0, 0.0, 17.5] {
            let p = softmax(&[c, c, c], 1.0).unwrap();
            for v in &p {
                assert!(close(*v, 1.0 / 3.0, 1e-15));
            }
        }
    }

    #[test]
    fn softmax_analytic_case() {
        let p = softmax(&[0.0, 2.0f64.ln()], 1.0).unwrap();
        assert!(close(p[0], 1.0 / 3.0, 1e-15));
        assert!(close(p[1], 2.0 / 3.0, 1e-15));
    }

    #[test]
    fn softmax_shift_invariance() {
        // Grid-valued inputs keep the +5 shift exact in f64, so the two
        // results must agree bit-for-bit.
        let grid = |x: i64| x as f64 / (1u64 << 20) as f64;
        let v: Vec<f64> = vec![grid(123_456), grid(-654_321), grid(42), grid(999_999)];
        let shifted: Vec<f64> = v.iter().map(|x| x + 5.0).collect();
        let a = softmax(&v, 1.0).unwrap();
        let b = softmax(&shifted, 1.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax(&[], 1.0), Err(Error::Domain(_))));
        assert!(matches!(softmax(&[1.0], 0.0), Err(Error::Domain(_))));
        assert!(matches!(softmax(&[1.0], -2.0), Err(Error::Domain(_))));
        assert!(matches!(softmax(&[1.0, f64::NAN], 1.0), Err(Error::Numeric(_))));
        assert!(matches!(softmax(&[1.0, f64::INFINITY], 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_sums_to_one_and_entries_in_unit_interval() {
        use rand::Rng;
        let mut rng = crate::seeding::rng(3, "softmax", 0);
        for _ in 0..200 {
            let n = rng.random_range(1..12);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
            for t in [0.1, 1.0, 10.0] {
                let p = softmax(&v, t).unwrap();
                let sum: f64 = p.iter().sum();
                assert!(close(sum, 1.0, 1e-12));
                assert!(p.iter().all(|x| *x > 0.0 && *x <= 1.0));
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_matched() {
        let half = vec![0.5, 0.5];
        let ce = cross_entropy(&half, &half).unwrap();
        assert!(close(ce, 2.0f64.ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_point_mass_cases() {
        assert!(close(cross_entropy(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0, 1e-15));
        let ce = cross_entropy(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!(close(ce, 2.0f64.ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_validates() {
        assert!(matches!(cross_entropy(&[1.0], &[0.5, 0.5]), Err(Error::Shape(_))));
        assert!(matches!(cross_entropy(&[0.7, 0.7], &[0.5, 0.5]), Err(Error::Domain(_))));
        // NaN fails every comparison; the explicit finiteness check must
        // reject it rather than let it pass the sum tolerance
        assert!(cross_entropy(&[f64::NAN, f64::NAN], &[0.5, 0.5]).is_err());
        assert!(cross_entropy(&[0.5, 0.5], &[f64::NAN, f64::NAN]).is_err());
    }

    #[test]
    fn gibbs_inequality_on_random_distributions() {
        use rand::Rng;
        let mut rng = crate::seeding::rng(5, "gibbs", 0);
        for _ in 0..200 {
            let n = rng.random_range(2..10);
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
            let raw2: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
            let p = softmax(&raw, 1.0).unwrap();
            let q = softmax(&raw2, 1.0).unwrap();
            let cross = cross_entropy(&p, &q).unwrap();
            let entropy = cross_entropy(&p, &p).unwrap();
            assert!(cross + 1e-12 >= entropy, "Gibbs violated: {cross} < {entropy}");
        }
    }

    #[test]
    fn finite_diff_square() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!(close(g[0], 6.0, 1e-6));
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let g = finite_diff_grad(|_| 4.25, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        for v in g {
            assert!(close(v, 0.0, 1e-9));
        }
    }

    #[test]
    fn finite_diff_sum_of_squares() {
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!(close(g[0], 2.0, 1e-6));
        assert!(close(g[1], 4.0, 1e-6));
    }

    #[test]
    fn finite_diff_rejects_bad_input() {
        assert!(matches!(
            finite_diff_grad(|x| x[0], &[1.0], 0.0),
            Err(Error::Domain(_))
        ));
        let err = finite_diff_grad(|x| (x[0] - 1.0).ln(), &[0.5], 1e-3).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("coordinate 0"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn check_gradients_identical_vectors() {
        let r = check_gradients("p", &[1.0, -2.0], &[1.0, -2.0], 1e-4).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
        assert!(r.pass);
        assert_eq!(r.num_entries_checked, 2);
    }

    #[test]
    fn check_gradients_formula_case() {
        // |0 - 1e-3| / max(1e-8, 1e-3) = 1.0, well past tol.
        let r = check_gradients("p", &[1.0, 0.0], &[1.0, 1e-3], 1e-4).unwrap();
        assert!(!r.pass);
        assert!(close(r.max_relative_error, 1.0, 1e-12));
    }

    #[test]
    fn check_gradients_rejects_degenerate() {
        assert!(check_gradients("p", &[], &[], 1e-4).is_err());
        assert!(matches!(
            check_gradients("p", &[1.0], &[1.0, 2.0], 1e-4),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sigmoid_symmetry_and_range() {
        assert!(close(sigmoid(0.0), 0.5, 1e-15));
        assert!(close(sigmoid(3.0) + sigmoid(-3.0), 1.0, 1e-15));
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let v = [0.1, -0.7, 2.3];
        let direct = (v.iter().map(|x: &f64| x.exp()).sum::<f64>()).ln();
        assert!(close(log_sum_exp(&v), direct, 1e-12));
        assert!(close(log_sum_exp(&[0.0; 4]), 4.0f64.ln(), 1e-15));
    }

    #[test]
    fn mean_over_rows_pools_tokens() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.mean_over_rows(), vec![2.0, 3.0]);
    }
}
