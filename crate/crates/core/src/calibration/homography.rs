//! Planar homography estimation and the closed-form intrinsics
//! initialization from absolute-conic constraints.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};

use super::CalibrationError;
use crate::geometry::{nearest_rotation, CameraIntrinsics, Pose};

/// Similarity that centers points and scales their mean distance to √2.
fn normalizer(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let spread = points.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if spread > 0.0 { std::f64::consts::SQRT_2 / spread } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0)
}

fn apply_h(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Normalized DLT homography mapping `src` onto `dst`.
pub fn estimate_homography(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Result<Matrix3<f64>, CalibrationError> {
    if src.len() != dst.len() || src.len() < 4 {
        return Err(CalibrationError::SingularInitialization("homography needs ≥ 4 correspondences".into()));
    }
    let ts = normalizer(src);
    let td = normalizer(dst);
    let mut a = DMatrix::<f64>::zeros(2 * src.len(), 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let s = apply_h(&ts, s);
        let d = apply_h(&td, d);
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let h = smallest_right_singular_vector(a)?;
    let hn = Matrix3::from_row_slice(h.as_slice());
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| CalibrationError::SingularInitialization("degenerate point spread".into()))?;
    let mut full = td_inv * hn * ts;
    let scale = full[(2, 2)];
    if scale.abs() > 1e-300 {
        full /= scale;
    }
    Ok(full)
}

fn smallest_right_singular_vector(a: DMatrix<f64>) -> Result<nalgebra::DVector<f64>, CalibrationError> {
    let ncols = a.ncols();
    // Pad so the thin SVD exposes the full right basis.
    let a = if a.nrows() < ncols { a.resize_vertically(ncols, 0.0) } else { a };
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| CalibrationError::SingularInitialization("SVD failed".into()))?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    Ok(v_t.row(imin).transpose())
}

fn conic_row(h: &Matrix3<f64>, i: usize, j: usize) -> [f64; 6] {
    let hi = h.column(i);
    let hj = h.column(j);
    [
        hi[0] * hj[0],
        hi[0] * hj[1] + hi[1] * hj[0],
        hi[1] * hj[1],
        hi[2] * hj[0] + hi[0] * hj[2],
        hi[2] * hj[1] + hi[1] * hj[2],
        hi[2] * hj[2],
    ]
}

/// Zero-skew intrinsics from per-view homographies (board plane → pixels).
///
/// Pixels are pre-conditioned by `pixel_norm` (an affine zero-skew map), so
/// the recovered matrix is mapped back through its inverse.
pub fn intrinsics_from_homographies(
    homographies: &[Matrix3<f64>],
    pixel_norm: &Matrix3<f64>,
) -> Result<CameraIntrinsics, CalibrationError> {
    let rows = 2 * homographies.len() + 1;
    let mut v = DMatrix::<f64>::zeros(rows, 6);
    for (k, h) in homographies.iter().enumerate() {
        let hn = pixel_norm * h;
        let hn = hn / hn.norm();
        let v12 = conic_row(&hn, 0, 1);
        let v11 = conic_row(&hn, 0, 0);
        let v22 = conic_row(&hn, 1, 1);
        for c in 0..6 {
            v[(2 * k, c)] = v12[c];
            v[(2 * k + 1, c)] = v11[c] - v22[c];
        }
    }
    // Zero skew: B12 = 0.
    v[(rows - 1, 1)] = 1.0;

    let svd = v.clone().svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv.len() < 6 || sv[4] <= 1e-10 * sv[0] {
        return Err(CalibrationError::SingularInitialization(
            "absolute-conic system is rank deficient (views too similar or too few)".into(),
        ));
    }
    let b = smallest_right_singular_vector(v)?;
    let mut b = [b[0], b[1], b[2], b[3], b[4], b[5]];
    if b[0] < 0.0 {
        b.iter_mut().for_each(|x| *x = -*x);
    }
    let [b11, b12, b22, b13, b23, b33] = b;
    let den = b11 * b22 - b12 * b12;
    if !(b11 > 0.0 && den > 0.0) {
        return Err(CalibrationError::SingularInitialization("conic is not positive definite".into()));
    }
    let v0 = (b12 * b13 - b11 * b23) / den;
    let lambda = b33 - (b13 * b13 + v0 * (b12 * b13 - b11 * b23)) / b11;
    if !(lambda / b11 > 0.0) {
        return Err(CalibrationError::SingularInitialization("negative focal-length estimate".into()));
    }
    let alpha = (lambda / b11).sqrt();
    let beta = (lambda * b11 / den).sqrt();
    let gamma = -b12 * alpha * alpha * beta / lambda;
    let u0 = gamma * v0 / beta - b13 * alpha * alpha / lambda;

    let kn = Matrix3::new(alpha, 0.0, u0, 0.0, beta, v0, 0.0, 0.0, 1.0);
    let inv = pixel_norm
        .try_inverse()
        .ok_or_else(|| CalibrationError::SingularInitialization("pixel normalizer not invertible".into()))?;
    let k = inv * kn;
    let intr = CameraIntrinsics::pinhole(k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)]);
    if !(intr.fx.is_finite() && intr.fy.is_finite() && intr.fx > 0.0 && intr.fy > 0.0) {
        return Err(CalibrationError::SingularInitialization("non-finite intrinsics".into()));
    }
    Ok(intr)
}

/// Board pose from a homography expressed relative to `k` (pixels) or the
/// identity (normalized coordinates).
pub fn pose_from_homography(k: &Matrix3<f64>, h: &Matrix3<f64>) -> Result<Pose, CalibrationError> {
    let kinv = k
        .try_inverse()
        .ok_or_else(|| CalibrationError::SingularInitialization("intrinsics not invertible".into()))?;
    let m = kinv * h;
    let (h1, h2, h3) = (m.column(0).into_owned(), m.column(1).into_owned(), m.column(2).into_owned());
    let mut scale = 2.0 / (h1.norm() + h2.norm());
    if !scale.is_finite() {
        return Err(CalibrationError::SingularInitialization("degenerate homography".into()));
    }
    if h3.z * scale < 0.0 {
        scale = -scale;
    }
    let r1 = h1 * scale;
    let r2 = h2 * scale;
    let r3 = r1.cross(&r2);
    let rot = nearest_rotation(&Matrix3::from_columns(&[r1, r2, r3]));
    Ok(Pose { rotation: rot, translation: h3 * scale })
}

pub fn pixel_normalizer(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len().max(1) as f64;
    let mean = points.iter().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let spread = points.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if spread > 0.0 { 1.0 / spread } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_known_homography() {
        let h_true = Matrix3::new(800.0, 20.0, 300.0, -15.0, 790.0, 200.0, 0.05, -0.02, 1.0);
        let src: Vec<_> = (0..20).map(|i| Vector2::new((i % 5) as f64 * 0.1, (i / 5) as f64 * 0.1)).collect();
        let dst: Vec<_> = src.iter().map(|p| apply_h(&h_true, p)).collect();
        let h = estimate_homography(&src, &dst).unwrap();
        assert!((h - h_true).abs().max() < 1e-8, "{h}");
    }

    #[test]
    fn too_few_points_is_an_error() {
        let p = vec![Vector2::new(0.0, 0.0); 3];
        assert!(estimate_homography(&p, &p).is_err());
    }
}
