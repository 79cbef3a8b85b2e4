//! Dense matrix exponential by scaling and squaring.
//!
//! The scaled matrix is approximated with the diagonal [6/6] Padé
//! approximant. Scaling brings the 1-norm below 1/2, where the truncation
//! error of that approximant is below 1e-16 relative to the norm.

use nalgebra::DMatrix;

const PADE_ORDER: usize = 6;
const SCALED_NORM: f64 = 0.5;

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn pade_coefficients() -> [f64; PADE_ORDER + 1] {
    let q = PADE_ORDER as f64;
    let mut c = [0.0; PADE_ORDER + 1];
    c[0] = 1.0;
    for k in 1..=PADE_ORDER {
        let kf = k as f64;
        c[k] = c[k - 1] * (q - kf + 1.0) / (kf * (2.0 * q - kf + 1.0));
    }
    c
}

/// `exp(a)` for a square matrix.
///
/// Panics if `a` is not square or the Padé denominator is singular, which
/// cannot happen once the norm has been scaled below 1/2.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm needs a square matrix");
    let n = a.nrows();
    if n == 0 {
        return a.clone();
    }
    let norm = one_norm(a);
    if norm == 0.0 {
        return DMatrix::identity(n, n);
    }
    let squarings = if norm > SCALED_NORM {
        (norm / SCALED_NORM).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = a * 2f64.powi(-squarings);

    let c = pade_coefficients();
    let mut power = DMatrix::identity(n, n);
    let mut numer = DMatrix::identity(n, n) * c[0];
    let mut denom = DMatrix::identity(n, n) * c[0];
    for (k, ck) in c.iter().enumerate().skip(1) {
        power = &power * &scaled;
        numer += &power * *ck;
        if k % 2 == 0 {
            denom += &power * *ck;
        } else {
            denom -= &power * *ck;
        }
    }
    let mut result = denom
        .lu()
        .solve(&numer)
        .expect("Padé denominator is nonsingular for scaled norm <= 1/2");
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) {
        let diff = (a - b).abs().max();
        assert!(diff <= tol, "max |diff| = {diff:e}\n{a}\n{b}");
    }

    #[test]
    fn zero_matrix_gives_identity() {
        let z = DMatrix::<f64>::zeros(4, 4);
        assert_eq!(expm(&z), DMatrix::identity(4, 4));
    }

    #[test]
    fn diagonal_matrix() {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-3.0, 0.5, 2.0]));
        let e = expm(&d);
        let want = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            (-3.0f64).exp(),
            0.5f64.exp(),
            2.0f64.exp(),
        ]));
        assert_close(&e, &want, 1e-13);
    }

    #[test]
    fn matches_nalgebra_on_generators() {
        let q = DMatrix::from_row_slice(
            3,
            3,
            &[-4.0, 3.0, 1.0, 0.5, -0.5, 0.0, 2.0, 7.0, -9.0],
        );
        for scale in [0.01, 0.3, 1.0, 5.0] {
            let a = &q * scale;
            assert_close(&expm(&a), &a.clone().exp(), 1e-12);
        }
    }

    #[test]
    fn nilpotent_block() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 3.0, 0.0, 0.0]);
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 0.0, 1.0]);
        assert_close(&expm(&a), &want, 1e-14);
    }
}
