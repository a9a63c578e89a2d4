//! Small linear-algebra layer: rotations, cameras, and the Gaussian primitive.
//!
//! Camera convention is vision-style: camera space has +x right, +y down and
//! +z forward; a pixel `(i, j)` samples image coordinate `(i + 0.5, j + 0.5)`.

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Quaternion norms within this distance of 1 are silently renormalized.
pub const QUAT_RENORM_TOL: f64 = 1e-3;
/// Determinant floor for the analytic 3x3 inverse.
pub const DET_FLOOR: f64 = 1e-12;

/// Quaternion stored as (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Quat::IDENTITY
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quat::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        Quat::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    /// Renormalizes small drift and rejects anything further from unit length.
    pub fn checked_unit(self) -> Result<Self> {
        let n = self.norm();
        if !n.is_finite() || (n - 1.0).abs() > QUAT_RENORM_TOL {
            return Err(Error::InvalidRotation { norm: n });
        }
        Ok(self.normalized())
    }

    pub fn from_axis_angle(axis_angle: &Vec3) -> Self {
        let angle = axis_angle.norm();
        if angle < 1e-12 {
            return Quat::IDENTITY;
        }
        let axis = axis_angle / angle;
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, axis.x * s, axis.y * s, axis.z * s)
    }

    pub fn from_matrix(m: &Mat3) -> Self {
        let r = nalgebra::Rotation3::from_matrix_unchecked(*m);
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(&r);
        let q = q.quaternion();
        let out = Quat::new(q.w, q.i, q.j, q.k);
        if out.w < 0.0 {
            Quat::new(-out.w, -out.x, -out.y, -out.z)
        } else {
            out
        }
    }

    /// Rotation matrix of the normalized quaternion.
    pub fn to_matrix(self) -> Mat3 {
        unit_quat_matrix(self.normalized())
    }

    pub fn mul(self, o: Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }
}

fn unit_quat_matrix(q: Quat) -> Mat3 {
    let Quat { w, x, y, z } = q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient w.r.t. `q.to_matrix()` back to the raw (unnormalized)
/// quaternion components.
pub fn quat_matrix_backward(q: Quat, d_rot: &Mat3) -> [f64; 4] {
    let n = q.norm();
    let u = q.normalized();
    let Quat { w, x, y, z } = u;
    let dw = Mat3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Mat3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Mat3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Mat3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let g = [
        d_rot.component_mul(&dw).sum(),
        d_rot.component_mul(&dx).sum(),
        d_rot.component_mul(&dy).sum(),
        d_rot.component_mul(&dz).sum(),
    ];
    let ua = u.to_array();
    let dot: f64 = (0..4).map(|i| ua[i] * g[i]).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (g[i] - ua[i] * dot) / n;
    }
    out
}

pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn exp_so3(w: &Vec3) -> Mat3 {
    let theta = w.norm();
    let k = hat(w);
    if theta < 1e-8 {
        return Mat3::identity() + k + k * k * 0.5;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Mat3::identity() + k * a + k * k * b
}

/// Partial derivatives of `exp_so3(w)` with respect to each component of `w`.
pub fn exp_so3_jacobian(w: &Vec3) -> [Mat3; 3] {
    let theta2 = w.norm_squared();
    let basis = [Vec3::x(), Vec3::y(), Vec3::z()];
    if theta2 < 1e-10 {
        let kw = hat(w);
        return basis.map(|e| {
            let ke = hat(&e);
            ke + (ke * kw + kw * ke) * 0.5
        });
    }
    let r = exp_so3(w);
    let kw = hat(w);
    let i_minus_r = Mat3::identity() - r;
    basis.map(|e| {
        let wi = w.dot(&e);
        let v = w.cross(&(i_minus_r * e));
        (kw * wi + hat(&v)) * r / theta2
    })
}

pub fn log_so3(r: &Mat3) -> Vec3 {
    nalgebra::Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Closest rotation in Frobenius norm.
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}

/// Gradient of a loss w.r.t. a left-multiplied rotation increment
/// `R <- exp(delta) R`, evaluated at `delta = 0`.
pub fn rotation_increment_grad(r: &Mat3, d_rot: &Mat3) -> Vec3 {
    let a = d_rot * r.transpose();
    Vec3::new(a[(2, 1)] - a[(1, 2)], a[(0, 2)] - a[(2, 0)], a[(1, 0)] - a[(0, 1)])
}

/// The x-mirror `diag(-1, 1, 1)`.
pub fn mirror_x() -> Mat3 {
    Mat3::from_diagonal(&Vec3::new(-1.0, 1.0, 1.0))
}

/// Mirror of an axis-angle rotation under `diag(-1, 1, 1)`: `M R(w) M = R(w')`.
pub fn mirror_axis_angle(w: &Vec3) -> Vec3 {
    Vec3::new(w.x, -w.y, -w.z)
}

/// Analytic 3x3 inverse through cofactors.
pub fn inverse3(m: &Mat3) -> Result<Mat3> {
    let det = m.determinant();
    if !det.is_finite() || det.abs() < DET_FLOOR {
        return Err(Error::DegenerateCovariance { det });
    }
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)];
    let adj = Mat3::new(
        c(1, 1, 2, 2),
        -c(0, 1, 2, 2),
        c(0, 1, 1, 2),
        -c(1, 0, 2, 2),
        c(0, 0, 2, 2),
        -c(0, 0, 1, 2),
        c(1, 0, 2, 1),
        -c(0, 0, 2, 1),
        c(0, 0, 1, 1),
    );
    Ok(adj / det)
}

/// `R(q) diag(s)^2 R(q)^T`.
pub fn covariance(scale: &Vec3, q: Quat) -> Result<Mat3> {
    let q = q.checked_unit()?;
    Ok(covariance_from_rotation(scale, &q.to_matrix()))
}

pub fn covariance_from_rotation(scale: &Vec3, rot: &Mat3) -> Mat3 {
    let m = rot * Mat3::from_diagonal(scale);
    m * m.transpose()
}

/// Unnormalized Gaussian weight `exp(-1/2 d^T Sigma^-1 d)`.
pub fn gaussian_weight(x: &Vec3, mean: &Vec3, cov: &Mat3) -> Result<f64> {
    let inv = inverse3(cov)?;
    let d = x - mean;
    Ok((-0.5 * d.dot(&(inv * d))).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        width: usize,
        height: usize,
        near: f64,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Spec(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Spec("image size must be at least 1x1".into()));
        }
        if !(near > 0.0) {
            return Err(Error::Spec(format!("near plane must be positive, got {near}")));
        }
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
            near,
        })
    }

    /// Pinhole camera at `eye` looking at `target`; `up` is the world up
    /// direction (image rows grow opposite to it).
    pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3, focal: f64, width: usize, height: usize) -> Self {
        let f = (target - eye).normalize();
        let x = f.cross(up).normalize();
        let y = f.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), f.transpose()]);
        let translation = -(rotation * eye);
        Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 * 0.5,
            cy: height as f64 * 0.5,
            rotation,
            translation,
            width,
            height,
            near: 0.01,
        }
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Camera seeing the x-mirrored world; with `cx = width / 2` its image is
    /// the horizontal flip of this camera's image.
    pub fn mirrored_x(&self) -> Camera {
        let m = mirror_x();
        Camera {
            rotation: m * self.rotation * m,
            translation: m * self.translation,
            cx: self.width as f64 - self.cx,
            ..self.clone()
        }
    }
}

/// Pinhole projection to `(u, v, depth)`.
pub fn project_point(x: &Vec3, cam: &Camera) -> Result<(f64, f64, f64)> {
    let p = cam.to_camera(x);
    if p.z <= cam.near {
        return Err(Error::BehindCamera {
            depth: p.z,
            near: cam.near,
        });
    }
    Ok((cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy, p.z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subject {
    LeftHand,
    RightHand,
    Object,
}

impl Subject {
    pub fn as_str(self) -> &'static str {
        match self {
            Subject::LeftHand => "left",
            Subject::RightHand => "right",
            Subject::Object => "object",
        }
    }

    pub fn parse(s: &str) -> Option<Subject> {
        match s {
            "left" => Some(Subject::LeftHand),
            "right" => Some(Subject::RightHand),
            "object" => Some(Subject::Object),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian3D {
    pub center: Vec3,
    pub scale: Vec3,
    pub rotation: Quat,
    pub opacity: f64,
    pub color: Vec3,
}

impl Gaussian3D {
    pub fn isotropic(center: Vec3, scale: f64, opacity: f64, color: Vec3) -> Self {
        Gaussian3D {
            center,
            scale: Vec3::repeat(scale),
            rotation: Quat::IDENTITY,
            opacity,
            color,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Spec(format!("non-positive scale {:?}", self.scale)));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::Spec(format!("opacity {} outside [0,1]", self.opacity)));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Spec(format!("color {:?} outside [0,1]", self.color)));
        }
        self.rotation.checked_unit()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub subject: Subject,
    pub gaussians: Vec<Gaussian3D>,
}

impl GaussianSet {
    pub fn new(subject: Subject, gaussians: Vec<Gaussian3D>) -> Self {
        GaussianSet { subject, gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn centers(&self) -> Vec<Vec3> {
        self.gaussians.iter().map(|g| g.center).collect()
    }

    /// Concatenates several sets (tagged with the first set's subject).
    pub fn merged(sets: &[&GaussianSet]) -> GaussianSet {
        let subject = sets.first().map(|s| s.subject).unwrap_or(Subject::Object);
        GaussianSet {
            subject,
            gaussians: sets.iter().flat_map(|s| s.gaussians.iter().copied()).collect(),
        }
    }
}

/// Uniform hash grid for nearest-neighbor queries.
pub struct PointGrid<'a> {
    points: &'a [Vec3],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> PointGrid<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let (lo, hi) = points.iter().fold((Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        });
        let extent = (hi - lo).max().max(1e-12);
        // about two points per cell for surface-like clouds
        let cell = extent / (points.len() as f64 / 2.0).sqrt().max(1.0);
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        PointGrid { points, cell, cells }
    }

    fn key(p: &Vec3, cell: f64) -> [i64; 3] {
        [(p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64]
    }

    /// Squared distance to the nearest point. Visits shells of cells until
    /// the next shell lies beyond the best distance found; queries far from
    /// the cloud fall back to a linear scan.
    pub fn nearest_sq(&self, q: &Vec3) -> f64 {
        const MAX_RING: i64 = 4;
        let k = Self::key(q, self.cell);
        let mut best = f64::INFINITY;
        for ring in 0..=MAX_RING {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                            for &i in ids {
                                best = best.min((self.points[i] - q).norm_squared());
                            }
                        }
                    }
                }
            }
            // every point in shell ring + 1 is at least ring * cell away
            let reach = ring as f64 * self.cell;
            if reach * reach >= best {
                return best;
            }
        }
        self.points.iter().map(|p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min)
    }

    /// Indices of the `k` nearest points other than `exclude`, closest
    /// first, ties broken by index.
    pub fn k_nearest(&self, q: &Vec3, k: usize, exclude: Option<usize>) -> Vec<usize> {
        const MAX_RING: i64 = 4;
        let key = Self::key(q, self.cell);
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let push = |d: f64, i: usize, best: &mut Vec<(f64, usize)>| {
            if best.len() == k && (d, i) >= best[k - 1] {
                return;
            }
            let pos = best.partition_point(|e| *e < (d, i));
            best.insert(pos, (d, i));
            best.truncate(k);
        };
        if k == 0 {
            return Vec::new();
        }
        for ring in 0..=MAX_RING {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[key[0] + dx, key[1] + dy, key[2] + dz]) {
                            for &i in ids {
                                if Some(i) != exclude {
                                    push((self.points[i] - q).norm_squared(), i, &mut best);
                                }
                            }
                        }
                    }
                }
            }
            let reach = ring as f64 * self.cell;
            if best.len() == k && best[k - 1].0 < reach * reach {
                return best.into_iter().map(|(_, i)| i).collect();
            }
        }
        best.clear();
        for (i, p) in self.points.iter().enumerate() {
            if Some(i) != exclude {
                push((p - q).norm_squared(), i, &mut best);
            }
        }
        best.into_iter().map(|(_, i)| i).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (a - b).abs().max() < tol
    }

    #[test]
    fn covariance_closed_forms() {
        let c = covariance(&Vec3::new(1.0, 1.0, 1.0), Quat::IDENTITY).unwrap();
        assert!(close(&c, &Mat3::identity(), 1e-15));
        let c = covariance(&Vec3::new(2.0, 1.0, 1.0), Quat::IDENTITY).unwrap();
        assert!(close(&c, &Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0)), 1e-15));

        // 90 degrees about z: explicit R S S^T R^T product.
        let q = Quat::from_axis_angle(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let r = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let s = Mat3::from_diagonal(&Vec3::new(2.0, 1.0, 1.0));
        let expected = r * s * s.transpose() * r.transpose();
        let c = covariance(&Vec3::new(2.0, 1.0, 1.0), q).unwrap();
        assert!(close(&c, &expected, 1e-12));
        assert!(close(&c, &Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 1.0)), 1e-12));
    }

    #[test]
    fn covariance_rejects_bad_quaternion() {
        let err = covariance(&Vec3::repeat(1.0), Quat::new(2.0, 0.0, 0.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::InvalidRotation { .. }));
        // Small drift is renormalized.
        assert!(covariance(&Vec3::repeat(1.0), Quat::new(1.0005, 0.0, 0.0, 0.0)).is_ok());
    }

    #[test]
    fn weight_examples() {
        let mu = Vec3::new(0.3, -0.2, 1.0);
        assert_eq!(gaussian_weight(&mu, &mu, &Mat3::identity()).unwrap(), 1.0);
        let x = mu + Vec3::new(0.0, 1.0, 0.0);
        let w = gaussian_weight(&x, &mu, &Mat3::identity()).unwrap();
        assert!((w - (-0.5f64).exp()).abs() < 1e-15);
        assert!((w - 0.60653).abs() < 1e-5);

        let sigma = Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0));
        let x = mu + Vec3::new(2.0, 0.0, 0.0);
        // Solve sigma y = d with nalgebra's LU as the independent route.
        let d = Vec3::new(2.0, 0.0, 0.0);
        let y = sigma.lu().solve(&d).unwrap();
        let expected = (-0.5 * d.dot(&y)).exp();
        let w = gaussian_weight(&x, &mu, &sigma).unwrap();
        assert!((w - expected).abs() < 1e-15);
        assert!((w - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn weight_rejects_singular() {
        let sigma = Mat3::from_diagonal(&Vec3::new(1.0, 0.0, 1.0));
        let err = gaussian_weight(&Vec3::zeros(), &Vec3::zeros(), &sigma).unwrap_err();
        assert!(matches!(err, Error::DegenerateCovariance { .. }));
    }

    fn test_camera(rotation: Mat3, translation: Vec3) -> Camera {
        Camera::new(100.0, 100.0, 50.0, 50.0, rotation, translation, 100, 100, 0.01).unwrap()
    }

    #[test]
    fn projection_examples() {
        let cam = test_camera(Mat3::identity(), Vec3::zeros());
        assert_eq!(project_point(&Vec3::new(0.0, 0.0, 1.0), &cam).unwrap(), (50.0, 50.0, 1.0));
        assert_eq!(project_point(&Vec3::new(0.5, 0.0, 1.0), &cam).unwrap(), (100.0, 50.0, 1.0));
        assert!(matches!(
            project_point(&Vec3::new(0.0, 0.0, -1.0), &cam),
            Err(Error::BehindCamera { .. })
        ));

        // Rotated camera: explicit matrix chain K [R | t] x.
        let r = exp_so3(&Vec3::new(0.1, -0.3, 0.2));
        let t = Vec3::new(0.1, 0.2, 2.0);
        let cam = test_camera(r, t);
        let x = Vec3::new(0.3, -0.4, 0.5);
        let k = Mat3::new(100.0, 0.0, 50.0, 0.0, 100.0, 50.0, 0.0, 0.0, 1.0);
        let h = k * (r * x + t);
        let (u, v, z) = project_point(&x, &cam).unwrap();
        assert!((u - h.x / h.z).abs() < 1e-12);
        assert!((v - h.y / h.z).abs() < 1e-12);
        assert!((z - h.z).abs() < 1e-12);
    }

    #[test]
    fn exp_jacobian_matches_finite_differences() {
        for w in [Vec3::new(0.3, -0.7, 0.4), Vec3::new(1e-7, 0.0, 2e-7), Vec3::zeros()] {
            let jac = exp_so3_jacobian(&w);
            for i in 0..3 {
                let mut e = Vec3::zeros();
                e[i] = 1e-6;
                let fd = (exp_so3(&(w + e)) - exp_so3(&(w - e))) / 2e-6;
                assert!(close(&fd, &jac[i], 1e-8), "component {i} at {w:?}");
            }
        }
    }

    #[test]
    fn quat_backward_matches_finite_differences() {
        let q = Quat::new(0.9, -0.3, 0.25, 0.4);
        let g = Mat3::new(0.3, -1.0, 0.2, 0.5, 0.7, -0.4, 0.1, 0.9, -0.6);
        let f = |q: Quat| g.component_mul(&q.to_matrix()).sum();
        let an = quat_matrix_backward(q, &g);
        for i in 0..4 {
            let mut a = q.to_array();
            let mut b = q.to_array();
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (f(Quat::from_array(a)) - f(Quat::from_array(b))) / 2e-6;
            assert!((fd - an[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn mirror_conjugation() {
        let w = Vec3::new(0.3, -0.5, 0.9);
        let m = mirror_x();
        assert!(close(&(m * exp_so3(&w) * m), &exp_so3(&mirror_axis_angle(&w)), 1e-14));
    }

    #[test]
    fn increment_grad_matches_finite_differences() {
        let r = exp_so3(&Vec3::new(0.2, 0.4, -0.1));
        let g = Mat3::new(0.3, -1.0, 0.2, 0.5, 0.7, -0.4, 0.1, 0.9, -0.6);
        let an = rotation_increment_grad(&r, &g);
        for i in 0..3 {
            let mut e = Vec3::zeros();
            e[i] = 1e-6;
            let fd = (g.component_mul(&(exp_so3(&e) * r)).sum() - g.component_mul(&(exp_so3(&-e) * r)).sum()) / 2e-6;
            assert!((fd - an[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn grid_knn_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut pts: Vec<Vec3> = (0..400).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        // a far outlier forces the linear fallback for its own query
        pts.push(Vec3::new(50.0, 0.0, 0.0));
        let grid = PointGrid::new(&pts);
        for (i, p) in pts.iter().enumerate() {
            let mut brute: Vec<(f64, usize)> = pts.iter().enumerate().filter(|(j, _)| *j != i).map(|(j, q)| ((p - q).norm_squared(), j)).collect();
            brute.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = brute.iter().take(5).map(|e| e.1).collect();
            assert_eq!(grid.k_nearest(p, 5, Some(i)), want);
        }
    }
}
