//! Rotation representations, perspective projection, and the Procrustes
//! alignment kernel shared by training, metrics, and kinematics.

use nalgebra::{DMatrix, Matrix3, Vector3};
use ndarray::{Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Relative singular-value threshold below which a centered cloud is
/// treated as rank-deficient.
const RANK_TOL: f64 = 1e-10;

/// A proper rotation: orthonormal 3x3 matrix with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3 {
    matrix: Matrix3<f64>,
}

impl Rotation3 {
    pub fn identity() -> Self {
        Rotation3 {
            matrix: Matrix3::identity(),
        }
    }

    /// Builds a rotation from a raw matrix, checking orthonormality and
    /// determinant to 1e-9 elementwise.
    pub fn from_matrix(matrix: Matrix3<f64>) -> Result<Self> {
        let gram = matrix.transpose() * matrix;
        let eye = Matrix3::<f64>::identity();
        for i in 0..3 {
            for j in 0..3 {
                if (gram[(i, j)] - eye[(i, j)]).abs() > 1e-9 {
                    return Err(Error::InvalidRotation(format!(
                        "R^T R deviates from identity at ({i},{j})"
                    )));
                }
            }
        }
        let det = matrix.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidRotation(format!("det = {det}, expected +1")));
        }
        Ok(Rotation3 { matrix })
    }

    pub(crate) fn from_matrix_unchecked(matrix: Matrix3<f64>) -> Self {
        Rotation3 { matrix }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    /// Rotates a point: `R * p`.
    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.matrix * p
    }

    pub fn inverse(&self) -> Self {
        Rotation3 {
            matrix: self.matrix.transpose(),
        }
    }

    /// Rotation about the world y-axis by `angle` radians.
    pub fn about_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation3 {
            matrix: Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        }
    }
}

/// Axis-angle rotation vector; the direction is the axis and the magnitude
/// is the angle in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle(pub Vector3<f64>);

impl AxisAngle {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        AxisAngle(Vector3::new(x, y, z))
    }

    pub fn zero() -> Self {
        AxisAngle(Vector3::zeros())
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

fn skew(v: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// sin(t)/t and (1-cos(t))/t^2 with Taylor fallbacks near zero.
fn rodrigues_coeffs(theta_sq: f64) -> (f64, f64) {
    if theta_sq < 1e-8 {
        let a = 1.0 - theta_sq / 6.0 + theta_sq * theta_sq / 120.0;
        let b = 0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0;
        (a, b)
    } else {
        let theta = theta_sq.sqrt();
        ((theta.sin()) / theta, (1.0 - theta.cos()) / theta_sq)
    }
}

/// Rodrigues' rotation formula: axis-angle vector to rotation matrix.
///
/// Total over all finite inputs; the zero vector maps to the identity.
pub fn rodrigues(aa: AxisAngle) -> Rotation3 {
    let v = aa.0;
    let theta_sq = v.norm_squared();
    let (a, b) = rodrigues_coeffs(theta_sq);
    let k = skew(v);
    Rotation3 {
        matrix: Matrix3::identity() + k * a + k * k * b,
    }
}

/// Partial derivatives of the Rodrigues matrix with respect to the three
/// axis-angle components. Uses series expansions of the coefficient
/// derivatives so the map stays smooth through the origin.
pub fn rodrigues_jacobian(aa: AxisAngle) -> [Matrix3<f64>; 3] {
    let v = aa.0;
    let theta_sq = v.norm_squared();
    let (a, b) = rodrigues_coeffs(theta_sq);
    // c1 = (theta*cos - sin)/theta^3, c2 = (theta*sin - 2(1-cos))/theta^4
    let (c1, c2) = if theta_sq < 1e-6 {
        (
            -1.0 / 3.0 + theta_sq / 30.0 - theta_sq * theta_sq / 840.0,
            -1.0 / 12.0 + theta_sq / 180.0 - theta_sq * theta_sq / 6720.0,
        )
    } else {
        let theta = theta_sq.sqrt();
        let (s, c) = theta.sin_cos();
        (
            (theta * c - s) / (theta_sq * theta),
            (theta * s - 2.0 * (1.0 - c)) / (theta_sq * theta_sq),
        )
    };
    let k = skew(v);
    let k2 = k * k;
    let basis = [
        skew(Vector3::new(1.0, 0.0, 0.0)),
        skew(Vector3::new(0.0, 1.0, 0.0)),
        skew(Vector3::new(0.0, 0.0, 1.0)),
    ];
    let mut out = [Matrix3::zeros(); 3];
    for i in 0..3 {
        let e = basis[i];
        out[i] = k * (c1 * v[i]) + e * a + k2 * (c2 * v[i]) + (e * k + k * e) * b;
    }
    out
}

/// Result of a Procrustes solve: the proper rotation, the least-squares
/// scale (1 when scale solving is off), and the squared-error residual of
/// the aligned centered clouds.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentResult {
    pub rotation: Rotation3,
    pub scale: f64,
    pub residual: f64,
}

/// Solves the orthogonal Procrustes problem on centered clouds: finds the
/// rotation `R` (and optionally scale `s`) minimizing
/// `sum_i || target_i - s * R * source_i ||^2` after both clouds are
/// centered on their centroids.
///
/// The reflection case is resolved by flipping the singular direction with
/// the smallest singular value, so `det(R) = +1` always holds.
pub fn solve_procrustes(
    target: ArrayView2<f64>,
    source: ArrayView2<f64>,
    with_scale: bool,
) -> Result<AlignmentResult> {
    let n = target.nrows();
    if n != source.nrows() || target.ncols() != 3 || source.ncols() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "target {}x{}, source {}x{}, expected matching Jx3",
            target.nrows(),
            target.ncols(),
            source.nrows(),
            source.ncols()
        )));
    }
    if n < 3 {
        return Err(Error::DegenerateCloud);
    }

    let centroid = |m: ArrayView2<f64>| -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for row in m.rows() {
            c += Vector3::new(row[0], row[1], row[2]);
        }
        c / n as f64
    };
    let ct = centroid(target);
    let cs = centroid(source);

    let mut src_c = DMatrix::<f64>::zeros(n, 3);
    let mut tgt_c = DMatrix::<f64>::zeros(n, 3);
    for i in 0..n {
        for k in 0..3 {
            src_c[(i, k)] = source[[i, k]] - cs[k];
            tgt_c[(i, k)] = target[[i, k]] - ct[k];
        }
    }

    // Rank of the centered source decides whether a unique rotation exists.
    let sv = src_c.clone().svd(false, false).singular_values;
    let s_max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let s_second = {
        let mut v: Vec<f64> = sv.iter().cloned().collect();
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if v.len() > 1 {
            v[1]
        } else {
            0.0
        }
    };
    if s_max <= 0.0 || s_second <= RANK_TOL * s_max {
        return Err(Error::DegenerateCloud);
    }

    // Cross-covariance H = sum_i source_i * target_i^T = S_c^T T_c.
    let h3 = src_c.transpose() * &tgt_c;
    let h = Matrix3::from_fn(|i, j| h3[(i, j)]);
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let v = v_t.transpose();

    // Kabsch correction: flip the direction of the smallest singular value
    // when U V^T describes a reflection.
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        let mut min_i = 0;
        for i in 1..3 {
            if svd.singular_values[i] < svd.singular_values[min_i] {
                min_i = i;
            }
        }
        d[(min_i, min_i)] = -1.0;
    }
    let rot = v * d * u.transpose();

    // Least-squares scale applied after rotation.
    let mut dot = 0.0;
    let mut nrm = 0.0;
    for i in 0..n {
        let s = Vector3::new(src_c[(i, 0)], src_c[(i, 1)], src_c[(i, 2)]);
        let t = Vector3::new(tgt_c[(i, 0)], tgt_c[(i, 1)], tgt_c[(i, 2)]);
        let rs = rot * s;
        dot += t.dot(&rs);
        nrm += rs.norm_squared();
    }
    let scale = if with_scale { dot / nrm } else { 1.0 };

    let mut residual = 0.0;
    for i in 0..n {
        let s = Vector3::new(src_c[(i, 0)], src_c[(i, 1)], src_c[(i, 2)]);
        let t = Vector3::new(tgt_c[(i, 0)], tgt_c[(i, 1)], tgt_c[(i, 2)]);
        residual += (t - rot * s * scale).norm_squared();
    }

    Ok(AlignmentResult {
        rotation: Rotation3 { matrix: rot },
        scale,
        residual,
    })
}

/// Pinhole camera. Extrinsics map world points into the camera frame as
/// `p_cam = rotation * p_world + translation`; the camera looks down +z.
#[derive(Debug, Clone)]
pub struct Camera {
    pub rotation: Rotation3,
    pub translation: Vector3<f64>,
    pub focal_length: f64,
    pub principal_point: [f64; 2],
    pub image_size: [u32; 2],
}

impl Camera {
    pub fn world_to_camera(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply(p) + self.translation
    }
}

/// Projects a T x J x 3 trajectory through a pinhole camera to pixel
/// coordinates: `u = f*x/z + cx`, `v = f*y/z + cy`.
pub fn project_perspective(points: ArrayView3<f64>, camera: &Camera) -> Result<Array3<f64>> {
    let (t_len, j_len, dim) = points.dim();
    if dim != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected TxJx3 points, got last dim {dim}"
        )));
    }
    let mut out = Array3::zeros((t_len, j_len, 2));
    for t in 0..t_len {
        for j in 0..j_len {
            let p = Vector3::new(points[[t, j, 0]], points[[t, j, 1]], points[[t, j, 2]]);
            let c = camera.world_to_camera(p);
            if c.z <= 0.0 {
                return Err(Error::BehindCamera { frame: t, joint: j });
            }
            out[[t, j, 0]] = camera.focal_length * c.x / c.z + camera.principal_point[0];
            out[[t, j, 1]] = camera.focal_length * c.y / c.z + camera.principal_point[1];
        }
    }
    Ok(out)
}

/// Places a camera that looks at the sequence-mean point, rotated about the
/// world y-axis by `yaw`, with the focal length chosen as the largest value
/// keeping every joint of every frame inside the image bounds shrunk by
/// `margin`.
pub fn place_camera(
    points: ArrayView3<f64>,
    image_size: [u32; 2],
    margin: f64,
    yaw: f64,
) -> Camera {
    let (t_len, j_len, _) = points.dim();
    let n = (t_len * j_len) as f64;
    let mut mean = Vector3::zeros();
    for t in 0..t_len {
        for j in 0..j_len {
            mean += Vector3::new(points[[t, j, 0]], points[[t, j, 1]], points[[t, j, 2]]);
        }
    }
    mean /= n;

    let mut radius = 0.0_f64;
    for t in 0..t_len {
        for j in 0..j_len {
            let p = Vector3::new(points[[t, j, 0]], points[[t, j, 1]], points[[t, j, 2]]);
            radius = radius.max((p - mean).norm());
        }
    }

    let dir = Rotation3::about_y(yaw).apply(Vector3::new(0.0, 0.0, 1.0));
    let distance = if radius > 0.0 { 3.0 * radius } else { 1.0 };
    let center = mean - dir * distance;

    // Look-at frame: z toward the scene, x = up x z, y = z x x.
    let up = Vector3::new(0.0, 1.0, 0.0);
    let z_axis = dir;
    let x_axis = up.cross(&z_axis).normalize();
    let y_axis = z_axis.cross(&x_axis);
    let rot = Matrix3::from_rows(&[x_axis.transpose(), y_axis.transpose(), z_axis.transpose()]);
    let rotation = Rotation3 { matrix: rot };
    let translation = -(rot * center);

    let w = image_size[0] as f64;
    let h = image_size[1] as f64;
    let half_w = (1.0 - margin) * w / 2.0;
    let half_h = (1.0 - margin) * h / 2.0;

    let mut focal = f64::INFINITY;
    for t in 0..t_len {
        for j in 0..j_len {
            let p = Vector3::new(points[[t, j, 0]], points[[t, j, 1]], points[[t, j, 2]]);
            let c = rot * p + translation;
            if c.x.abs() > 0.0 {
                focal = focal.min(half_w * c.z / c.x.abs());
            }
            if c.y.abs() > 0.0 {
                focal = focal.min(half_h * c.z / c.y.abs());
            }
        }
    }
    if !focal.is_finite() {
        focal = w.max(h);
    }

    Camera {
        rotation,
        translation,
        focal_length: focal,
        principal_point: [w / 2.0, h / 2.0],
        image_size,
    }
}
