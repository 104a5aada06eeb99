use nalgebra::{DMatrix, DVector};

use crate::scalar::Scalar;

pub fn spectral_radius<T: Scalar>(a: &DMatrix<T>) -> T {
    if a.nrows() == 0 {
        return T::zero();
    }
    a.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| (z.re * z.re + z.im * z.im).sqrt())
        .fold(T::zero(), |m, v| if v > m { v } else { m })
}

pub fn mat_pow<T: Scalar>(a: &DMatrix<T>, k: usize) -> DMatrix<T> {
    let mut r = DMatrix::identity(a.nrows(), a.ncols());
    for _ in 0..k {
        r = &r * a;
    }
    r
}

pub fn inf_norm<T: Scalar>(a: &DMatrix<T>) -> T {
    a.row_iter()
        .map(|r| r.iter().fold(T::zero(), |s, v| s + v.abs()))
        .fold(T::zero(), |m, v| if v > m { v } else { m })
}

pub fn vec_inf<T: Scalar>(v: &DVector<T>) -> T {
    v.iter()
        .fold(T::zero(), |m, x| if x.abs() > m { x.abs() } else { m })
}

pub fn max<T: Scalar>(a: T, b: T) -> T {
    if a > b {
        a
    } else {
        b
    }
}

pub fn min<T: Scalar>(a: T, b: T) -> T {
    if a < b {
        a
    } else {
        b
    }
}
