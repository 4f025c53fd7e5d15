//! 3×3 rotations and the 6-D (first two columns) representation.

pub type Mat3 = [[f64; 3]; 3];

pub fn rot_x(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rot_y(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// `[c1x, c1y, c1z, c2x, c2y, c2z]`
pub fn matrix_to_rot6d(m: &Mat3) -> [f64; 6] {
    [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]
}

/// Gram–Schmidt lift of a 6-D rotation to a proper rotation matrix.
pub fn rot6d_to_matrix(r: &[f64; 6]) -> Mat3 {
    let norm = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let b1 = norm([r[0], r[1], r[2]]);
    let a2 = [r[3], r[4], r[5]];
    let d = b1[0] * a2[0] + b1[1] * a2[1] + b1[2] * a2[2];
    let b2 = norm([a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]]);
    let b3 = [b1[1] * b2[2] - b1[2] * b2[1], b1[2] * b2[0] - b1[0] * b2[2], b1[0] * b2[1] - b1[1] * b2[0]];
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        m[i] = [b1[i], b2[i], b3[i]];
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(m: &Mat3) -> f64 {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    #[test]
    fn round_trip_of_rotation() {
        let m = matmul3(&rot_y(0.7), &rot_x(-0.3));
        let back = rot6d_to_matrix(&matrix_to_rot6d(&m));
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[i][j] - back[i][j]).abs() < 1e-14);
            }
        }
    }

    proptest! {
        #[test]
        fn lift_is_proper_rotation(v in prop::array::uniform6(-1.0f64..1.0)) {
            let c1 = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let cross = [v[1] * v[5] - v[2] * v[4], v[2] * v[3] - v[0] * v[5], v[0] * v[4] - v[1] * v[3]];
            let c12 = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
            prop_assume!(c1 > 1e-3 && c12 > 1e-3);
            let m = rot6d_to_matrix(&v);
            let mtm = matmul3(&[[m[0][0], m[1][0], m[2][0]], [m[0][1], m[1][1], m[2][1]], [m[0][2], m[1][2], m[2][2]]], &m);
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((mtm[i][j] - want).abs() < 1e-9);
                }
            }
            prop_assert!((det(&m) - 1.0).abs() < 1e-9);
        }
    }
}
