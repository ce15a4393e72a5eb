//! Screen-space footprints of 3D Gaussians.
//!
//! Both camera modes push the camera-space covariance through the Jacobian of
//! the projection map: `Σ₂D = J·Σ_cam·Jᵀ`. For the orthogonal camera the map
//! is linear, `J = [[fx, 0, 0], [0, fy, 0]]`, so footprints do not depend on
//! depth at all.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::camera::{Camera, Pose, ProjectionMode};

/// Diagonal floor added to every projected covariance, in pixels².
pub const COV2D_FLOOR: f64 = 0.3;
/// Squared Mahalanobis radius beyond which a Gaussian contributes nothing.
pub const CUTOFF_MAHALANOBIS_SQ: f64 = 9.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Camera-space Z in meters; the compositing order key.
    pub depth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Visible(Gaussian2D),
    Culled,
}

impl Projection {
    pub fn visible(self) -> Option<Gaussian2D> {
        match self {
            Projection::Visible(g) => Some(g),
            Projection::Culled => None,
        }
    }
}

pub fn world_to_camera(mean: &Vector3<f64>, cov: &Matrix3<f64>, pose: &Pose) -> (Vector3<f64>, Matrix3<f64>) {
    let r = &pose.rotation;
    let c = r * cov * r.transpose();
    (pose.apply(mean), (c + c.transpose()) * 0.5)
}

/// Jacobian of the pixel-projection map at a camera-space point.
/// Screen-space guard band for the covariance Jacobian, as a multiple of the
/// half field of view.
pub const JACOBIAN_GUARD: f64 = 1.3;

/// Exact derivative of the screen position with respect to camera coordinates.
pub fn mean_jacobian(mean_cam: &Vector3<f64>, camera: &Camera) -> Matrix2x3<f64> {
    match camera.mode {
        ProjectionMode::Orthogonal => Matrix2x3::new(camera.fx, 0.0, 0.0, 0.0, camera.fy, 0.0),
        ProjectionMode::Perspective => {
            let (x, y, z) = (mean_cam.x, mean_cam.y, mean_cam.z);
            let iz = 1.0 / z;
            Matrix2x3::new(camera.fx * iz, 0.0, -camera.fx * x * iz * iz, 0.0, camera.fy * iz, -camera.fy * y * iz * iz)
        }
    }
}

/// Tangents `x/z`, `y/z` clamped to the guard band, with flags telling
/// whether each was clamped.
pub fn guarded_tangents(mean_cam: &Vector3<f64>, camera: &Camera) -> ([f64; 2], [bool; 2]) {
    let lim = [
        JACOBIAN_GUARD * 0.5 * camera.width as f64 / camera.fx,
        JACOBIAN_GUARD * 0.5 * camera.height as f64 / camera.fy,
    ];
    let t = [mean_cam.x / mean_cam.z, mean_cam.y / mean_cam.z];
    let c = [t[0].clamp(-lim[0], lim[0]), t[1].clamp(-lim[1], lim[1])];
    (c, [c[0] != t[0], c[1] != t[1]])
}

/// Jacobian used to push the 3D covariance to the screen. For perspective
/// cameras the off-axis terms use guard-band clamped tangents so splats far
/// outside the view cannot blow up into screen-filling ellipses.
pub fn projection_jacobian(mean_cam: &Vector3<f64>, camera: &Camera) -> Matrix2x3<f64> {
    match camera.mode {
        ProjectionMode::Orthogonal => mean_jacobian(mean_cam, camera),
        ProjectionMode::Perspective => {
            let iz = 1.0 / mean_cam.z;
            let ([tx, ty], _) = guarded_tangents(mean_cam, camera);
            Matrix2x3::new(camera.fx * iz, 0.0, -camera.fx * tx * iz, 0.0, camera.fy * iz, -camera.fy * ty * iz)
        }
    }
}

fn project_cov(j: &Matrix2x3<f64>, cov_cam: &Matrix3<f64>) -> Matrix2<f64> {
    let c = j * cov_cam * j.transpose();
    (c + c.transpose()) * 0.5
}

/// `u = fx·X + cx`, `v = fy·Y + cy`, `Σ₂D = J·Σ·Jᵀ`. Culling is the caller's
/// concern; see [`project`].
pub fn project_orthogonal(mean_cam: &Vector3<f64>, cov_cam: &Matrix3<f64>, camera: &Camera) -> Gaussian2D {
    debug_assert_eq!(camera.mode, ProjectionMode::Orthogonal);
    let j = projection_jacobian(mean_cam, camera);
    Gaussian2D {
        mean2d: Vector2::new(camera.fx * mean_cam.x + camera.cx, camera.fy * mean_cam.y + camera.cy),
        cov2d: project_cov(&j, cov_cam),
        depth: mean_cam.z,
    }
}

/// Pinhole projection with the first-order (EWA) covariance approximation.
/// Points at or in front of the near plane, or beyond the far plane, are culled.
pub fn project_perspective(mean_cam: &Vector3<f64>, cov_cam: &Matrix3<f64>, camera: &Camera) -> Projection {
    debug_assert_eq!(camera.mode, ProjectionMode::Perspective);
    let z = mean_cam.z;
    if !(z > camera.near) || z > camera.far {
        return Projection::Culled;
    }
    let j = projection_jacobian(mean_cam, camera);
    Projection::Visible(Gaussian2D {
        mean2d: Vector2::new(
            camera.fx * mean_cam.x / z + camera.cx,
            camera.fy * mean_cam.y / z + camera.cy,
        ),
        cov2d: project_cov(&j, cov_cam),
        depth: z,
    })
}

/// Mode dispatch plus culling. Orthogonal cameras cull anything above the
/// camera (negative depth) and nothing else.
pub fn project(mean_cam: &Vector3<f64>, cov_cam: &Matrix3<f64>, camera: &Camera) -> Projection {
    match camera.mode {
        ProjectionMode::Perspective => project_perspective(mean_cam, cov_cam, camera),
        ProjectionMode::Orthogonal => {
            if mean_cam.z < 0.0 {
                Projection::Culled
            } else {
                Projection::Visible(project_orthogonal(mean_cam, cov_cam, camera))
            }
        }
    }
}

pub fn regularize_cov2d(cov2d: &Matrix2<f64>) -> Matrix2<f64> {
    cov2d + Matrix2::identity() * COV2D_FLOOR
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Pose;
    use nalgebra::{Rotation3, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bev_camera() -> Camera {
        Camera::orthogonal(2.0, 2.0, 100.0, 100.0, Pose::identity(), 200, 200).unwrap()
    }

    fn pinhole() -> Camera {
        Camera::perspective(80.0, 90.0, 32.0, 24.0, Pose::identity(), 64, 48, 0.5, 100.0).unwrap()
    }

    fn sorted_eigs(m: &Matrix3<f64>) -> Vec<f64> {
        let mut e: Vec<f64> = SymmetricEigen::new(*m).eigenvalues.iter().copied().collect();
        e.sort_by(f64::total_cmp);
        e
    }

    #[test]
    fn identity_pose_is_a_no_op() {
        let m = Vector3::new(1.0, -2.0, 3.0);
        let c = Matrix3::new(2.0, 0.1, 0.0, 0.1, 1.0, 0.2, 0.0, 0.2, 3.0);
        let (mc, cc) = world_to_camera(&m, &c, &Pose::identity());
        assert_eq!(mc, m);
        assert_eq!(cc, c);
    }

    #[test]
    fn translation_moves_mean_only() {
        let t = Vector3::new(0.5, 1.5, -2.0);
        let pose = Pose {
            rotation: Matrix3::identity(),
            translation: t,
        };
        let c = Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0));
        let (mc, cc) = world_to_camera(&Vector3::zeros(), &c, &pose);
        assert_eq!(mc, t);
        assert_eq!(cc, c);
    }

    #[test]
    fn rotation_preserves_covariance_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0));
        for _ in 0..50 {
            let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), rng.gen_range(0.0..6.0));
            let pose = Pose {
                rotation: *r.matrix(),
                translation: Vector3::zeros(),
            };
            let (_, cc) = world_to_camera(&Vector3::zeros(), &c, &pose);
            let e = sorted_eigs(&cc);
            for (got, want) in e.iter().zip([1.0, 2.0, 3.0]) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_center_maps_to_principal_point_at_any_depth() {
        let cam = bev_camera();
        for z in [0.0, 0.5, 3.0, 50.0] {
            let g = project_orthogonal(&Vector3::new(0.0, 0.0, z), &Matrix3::identity(), &cam);
            assert_eq!(g.mean2d, Vector2::new(100.0, 100.0));
        }
    }

    #[test]
    fn orthogonal_unit_covariance_scales_by_focal_squared() {
        let g = project_orthogonal(&Vector3::new(1.0, 1.0, 1.0), &Matrix3::identity(), &bev_camera());
        assert_eq!(g.cov2d, Matrix2::new(4.0, 0.0, 0.0, 4.0));
    }

    #[test]
    fn orthogonal_hand_computed_point() {
        let g = project_orthogonal(&Vector3::new(10.0, -5.0, 7.0), &Matrix3::identity(), &bev_camera());
        assert_eq!(g.mean2d, Vector2::new(120.0, 90.0));
        assert_eq!(g.depth, 7.0);
    }

    #[test]
    fn orthogonal_culls_points_above_camera() {
        let cam = bev_camera();
        assert_eq!(project(&Vector3::new(0.0, 0.0, -0.1), &Matrix3::identity(), &cam), Projection::Culled);
        assert!(project(&Vector3::new(0.0, 0.0, 0.0), &Matrix3::identity(), &cam).visible().is_some());
    }

    #[test]
    fn perspective_axis_point_hits_principal_point() {
        let cam = pinhole();
        let g = project_perspective(&Vector3::new(0.0, 0.0, 4.0), &Matrix3::identity(), &cam)
            .visible()
            .unwrap();
        assert_eq!(g.mean2d, Vector2::new(cam.cx, cam.cy));
    }

    #[test]
    fn perspective_culls_inside_near_plane() {
        let cam = pinhole();
        let p = project_perspective(&Vector3::new(0.0, 0.0, cam.near / 2.0), &Matrix3::identity(), &cam);
        assert_eq!(p, Projection::Culled);
    }

    #[test]
    fn perspective_jacobian_matches_central_differences() {
        let cam = pinhole();
        let f = |p: &Vector3<f64>| Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..100 {
            let p = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(1.0..20.0));
            let j = mean_jacobian(&p, &cam);
            for k in 0..3 {
                let mut dp = Vector3::zeros();
                dp[k] = h;
                let fd = (f(&(p + dp)) - f(&(p - dp))) / (2.0 * h);
                for r in 0..2 {
                    let denom = j[(r, k)].abs().max(fd[r].abs()).max(1e-8);
                    assert!((j[(r, k)] - fd[r]).abs() / denom < 1e-6, "J[{r},{k}] {} vs {}", j[(r, k)], fd[r]);
                }
            }
        }
    }

    #[test]
    fn covariance_jacobian_is_guarded_off_axis() {
        let cam = pinhole();
        let inside = Vector3::new(0.5, -0.4, 2.0);
        assert_eq!(projection_jacobian(&inside, &cam), mean_jacobian(&inside, &cam));
        // x/z = 10, far beyond the 1.3× half-fov band (0.52)
        let outside = Vector3::new(20.0, 0.0, 2.0);
        let j = projection_jacobian(&outside, &cam);
        assert_eq!(j[(0, 2)], -80.0 * JACOBIAN_GUARD * 32.0 / 80.0 / 2.0);
        assert!(j[(0, 2)].abs() < mean_jacobian(&outside, &cam)[(0, 2)].abs() / 10.0);
        let (_, clamped) = guarded_tangents(&outside, &cam);
        assert_eq!(clamped, [true, false]);
    }

    #[test]
    fn regularization_adds_floor() {
        assert_eq!(regularize_cov2d(&Matrix2::zeros()), Matrix2::new(0.3, 0.0, 0.0, 0.3));
        assert_eq!(regularize_cov2d(&Matrix2::new(4.0, 0.0, 0.0, 4.0)), Matrix2::new(4.3, 0.0, 0.0, 4.3));
    }

    #[test]
    fn regularized_psd_samples_are_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let a = Matrix2::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
            );
            // rank-deficient samples included
            let psd = if rng.gen_bool(0.2) {
                let v = a.column(0).into_owned();
                v * v.transpose()
            } else {
                a * a.transpose()
            };
            assert!(regularize_cov2d(&psd).determinant() > 0.0);
        }
    }

    proptest::proptest! {
        #[test]
        fn orthogonal_projection_ignores_depth(x in -60.0f64..60.0, y in -60.0f64..60.0, z1 in 0.0f64..10.0, z2 in 0.0f64..10.0,
                                             a in 0.01f64..4.0, b in -1.0f64..1.0, c in 0.01f64..4.0) {
            let cam = bev_camera();
            let cov = Matrix3::new(a, b * (a * c).sqrt(), 0.1, b * (a * c).sqrt(), c, 0.0, 0.1, 0.0, 1.0);
            let g1 = project_orthogonal(&Vector3::new(x, y, z1), &cov, &cam);
            let g2 = project_orthogonal(&Vector3::new(x, y, z2), &cov, &cam);
            proptest::prop_assert_eq!(g1.mean2d, g2.mean2d);
            proptest::prop_assert_eq!(g1.cov2d, g2.cov2d);
        }

        #[test]
        fn orthogonal_mean_is_affine(x1 in -50.0f64..50.0, y1 in -50.0f64..50.0, x2 in -50.0f64..50.0, y2 in -50.0f64..50.0,
                                     a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let cam = bev_camera();
            let p = |x: f64, y: f64| project_orthogonal(&Vector3::new(x, y, 1.0), &Matrix3::identity(), &cam).mean2d;
            let lhs = p(a * x1 + b * x2, a * y1 + b * y2);
            let rhs = p(x1, y1) * a + p(x2, y2) * b + Vector2::new(cam.cx, cam.cy) * (1.0 - a - b);
            proptest::prop_assert!((lhs - rhs).abs().max() < 1e-9);
        }

        #[test]
        fn projected_covariances_stay_symmetric_psd(ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
                                                   s1 in -2.0f64..1.0, s2 in -2.0f64..1.0, s3 in -2.0f64..1.0,
                                                   x in -2.0f64..2.0, y in -2.0f64..2.0, z in 1.0f64..20.0) {
            let q = crate::gaussian::axis_angle_quat(Vector3::new(ax, ay, az + 1e-3), 1.0);
            let r = crate::gaussian::rotation_matrix(&q).unwrap();
            let cov = crate::gaussian::covariance(&r, &Vector3::new(s1, s2, s3));
            let mc = Vector3::new(x, y, z);
            for cam in [bev_camera(), pinhole()] {
                let g = project(&mc, &cov, &cam).visible().unwrap();
                proptest::prop_assert_eq!(g.cov2d[(0, 1)], g.cov2d[(1, 0)]);
                let e = SymmetricEigen::new(g.cov2d).eigenvalues;
                proptest::prop_assert!(e.min() >= -1e-9 * e.max().abs().max(1.0));
            }
        }
    }
}
