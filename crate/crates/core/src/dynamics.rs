//! Single rigid body dynamics with the payload external force model.
//!
//! State ordering everywhere is `[p_c; Θ; ṗ_c; ω]` with Θ = (roll, pitch,
//! yaw) in the Z-Y-X convention and ω the world-frame angular velocity.
//! The MPC state appends a constant 1 so that gravity and the payload weight
//! enter the dynamics as an affine column.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};

use crate::error::{Error, Result};
use crate::model::{Leg, RobotModel};

pub const STATE_DIM: usize = 12;
pub const AUG_DIM: usize = 13;
pub const INPUT_DIM: usize = 12;

/// Default guard on |cos(pitch)| before the Euler-rate map is inverted.
pub const SINGULARITY_EPS: f64 = 0.1;

pub type AugmentedState = SVector<f64, AUG_DIM>;
pub type StateDerivative = SVector<f64, STATE_DIM>;
pub type ContinuousA = SMatrix<f64, AUG_DIM, AUG_DIM>;
pub type ContinuousB = SMatrix<f64, AUG_DIM, INPUT_DIM>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    /// CoM position, world frame (m).
    pub position: Vector3<f64>,
    /// Roll, pitch, yaw (rad).
    pub euler: Vector3<f64>,
    /// CoM velocity, world frame (m/s).
    pub velocity: Vector3<f64>,
    /// Angular velocity, world frame (rad/s).
    pub angular_velocity: Vector3<f64>,
}

impl Default for RobotState {
    fn default() -> Self {
        Self {
            position: Vector3::zeros(),
            euler: Vector3::zeros(),
            velocity: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
        }
    }
}

impl RobotState {
    pub fn at_height(z: f64) -> Self {
        Self {
            position: Vector3::new(0.0, 0.0, z),
            ..Self::default()
        }
    }

    pub fn augmented(&self) -> AugmentedState {
        let mut x = AugmentedState::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.position);
        x.fixed_rows_mut::<3>(3).copy_from(&self.euler);
        x.fixed_rows_mut::<3>(6).copy_from(&self.velocity);
        x.fixed_rows_mut::<3>(9).copy_from(&self.angular_velocity);
        x[12] = 1.0;
        x
    }

    pub fn from_vector(x: &SVector<f64, STATE_DIM>) -> Self {
        Self {
            position: x.fixed_rows::<3>(0).into(),
            euler: x.fixed_rows::<3>(3).into(),
            velocity: x.fixed_rows::<3>(6).into(),
            angular_velocity: x.fixed_rows::<3>(9).into(),
        }
    }

    pub fn to_vector(&self) -> SVector<f64, STATE_DIM> {
        self.augmented().fixed_rows::<STATE_DIM>(0).into()
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_euler(&self.euler)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Stacked ground reaction wrenches `[F₁; F₂; M₁; M₂]`, world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput(pub SVector<f64, INPUT_DIM>);

impl Default for ControlInput {
    fn default() -> Self {
        Self(SVector::zeros())
    }
}

impl ControlInput {
    pub fn force(&self, leg: Leg) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3 * leg.index()).into()
    }

    pub fn moment(&self, leg: Leg) -> Vector3<f64> {
        self.0.fixed_rows::<3>(6 + 3 * leg.index()).into()
    }

    pub fn set_force(&mut self, leg: Leg, f: &Vector3<f64>) {
        self.0.fixed_rows_mut::<3>(3 * leg.index()).copy_from(f);
    }

    pub fn set_moment(&mut self, leg: Leg, m: &Vector3<f64>) {
        self.0.fixed_rows_mut::<3>(6 + 3 * leg.index()).copy_from(m);
    }

    pub fn zero_leg(&mut self, leg: Leg) {
        self.set_force(leg, &Vector3::zeros());
        self.set_moment(leg, &Vector3::zeros());
    }

    pub fn from_legs(forces: [Vector3<f64>; 2], moments: [Vector3<f64>; 2]) -> Self {
        let mut u = Self::default();
        for leg in Leg::BOTH {
            u.set_force(leg, &forces[leg.index()]);
            u.set_moment(leg, &moments[leg.index()]);
        }
        u
    }
}

/// Payload load as seen at one instant: mass, world-frame CoM offset from
/// the robot CoM, and contact flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PayloadLoad {
    pub mass: f64,
    pub offset_world: Vector3<f64>,
    pub contact: bool,
}

impl PayloadLoad {
    pub const NONE: PayloadLoad = PayloadLoad {
        mass: 0.0,
        offset_world: Vector3::new(0.0, 0.0, 0.0),
        contact: false,
    };

    pub fn effective_mass(&self) -> f64 {
        if self.contact {
            self.mass
        } else {
            0.0
        }
    }
}

/// External wrench applied at the CoM (disturbance pushes).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExternalWrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `R = R_z(ψ) R_y(θ) R_x(φ)`.
pub fn rotation_from_euler(euler: &Vector3<f64>) -> Matrix3<f64> {
    let (sr, cr) = euler.x.sin_cos();
    let (sp, cp) = euler.y.sin_cos();
    let (sy, cy) = euler.z.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

pub fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Maps Euler-angle rates to world angular velocity, `ω = E Θ̇`.
/// `det E = cos θ`, singular at pitch ±90°.
pub fn euler_rate_map(euler: &Vector3<f64>) -> Matrix3<f64> {
    let (sp, cp) = euler.y.sin_cos();
    let (sy, cy) = euler.z.sin_cos();
    Matrix3::new(cp * cy, -sy, 0.0, cp * sy, cy, 0.0, -sp, 0.0, 1.0)
}

/// Inverse of [`euler_rate_map`], rejecting states with `|cos θ| <= eps`.
pub fn euler_rate_map_inv(euler: &Vector3<f64>, eps: f64) -> Result<Matrix3<f64>> {
    let (sp, cp) = euler.y.sin_cos();
    if cp.abs() <= eps {
        return Err(Error::NearSingularity {
            cos_pitch: cp.abs(),
            threshold: eps,
        });
    }
    let (sy, cy) = euler.z.sin_cos();
    let tp = sp / cp;
    Ok(Matrix3::new(
        cy / cp,
        sy / cp,
        0.0,
        -sy,
        cy,
        0.0,
        cy * tp,
        sy * tp,
        1.0,
    ))
}

/// `G_I = R · diag(I) · Rᵀ`.
pub fn world_inertia(rotation: &Matrix3<f64>, body_inertia: &Vector3<f64>) -> Matrix3<f64> {
    rotation * Matrix3::from_diagonal(body_inertia) * rotation.transpose()
}

fn world_inertia_inverse(rotation: &Matrix3<f64>, body_inertia: &Vector3<f64>) -> Matrix3<f64> {
    let inv = body_inertia.map(|v| 1.0 / v);
    rotation * Matrix3::from_diagonal(&inv) * rotation.transpose()
}

/// Quantities the linear model is built around: Euler-rate inverse, world
/// inertia inverse, and the CoM position that lever arms are measured from.
#[derive(Debug, Clone, Copy)]
pub struct LinearizationPoint {
    pub euler_rate_inv: Matrix3<f64>,
    pub inertia_inv: Matrix3<f64>,
    pub com: Vector3<f64>,
}

impl LinearizationPoint {
    pub fn from_state(state: &RobotState, model: &RobotModel, eps: f64) -> Result<Self> {
        Ok(Self {
            euler_rate_inv: euler_rate_map_inv(&state.euler, eps)?,
            inertia_inv: world_inertia_inverse(&state.rotation(), &model.inertia_diag()),
            com: state.position,
        })
    }
}

/// Continuous-time `(A_c, B_c)` of the augmented model at a linearization
/// point. `ω × (G_I ω)` is dropped (small angular velocity).
pub fn linearize(
    point: &LinearizationPoint,
    model: &RobotModel,
    feet: &[Vector3<f64>; 2],
    payload: &PayloadLoad,
    contacts: [bool; 2],
) -> (ContinuousA, ContinuousB) {
    let mut a = ContinuousA::zeros();
    let mut b = ContinuousB::zeros();
    a.fixed_view_mut::<3, 3>(0, 6)
        .copy_from(&Matrix3::identity());
    a.fixed_view_mut::<3, 3>(3, 9)
        .copy_from(&point.euler_rate_inv);

    let g = model.gravity_vec();
    let m_o = payload.effective_mass();
    let lin_acc = g + g * (m_o / model.mass);
    a.fixed_view_mut::<3, 1>(6, 12).copy_from(&lin_acc);
    let payload_torque = payload.offset_world.cross(&(g * m_o));
    a.fixed_view_mut::<3, 1>(9, 12)
        .copy_from(&(point.inertia_inv * payload_torque));

    for leg in Leg::BOTH {
        if !contacts[leg.index()] {
            continue;
        }
        let i = leg.index();
        let lever = feet[i] - point.com;
        b.fixed_view_mut::<3, 3>(6, 3 * i)
            .copy_from(&(Matrix3::identity() / model.mass));
        b.fixed_view_mut::<3, 3>(9, 3 * i)
            .copy_from(&(point.inertia_inv * skew(&lever)));
        b.fixed_view_mut::<3, 3>(9, 6 + 3 * i)
            .copy_from(&point.inertia_inv);
    }
    (a, b)
}

/// Continuous matrices linearized at the current state.
pub fn continuous_matrices(
    state: &RobotState,
    model: &RobotModel,
    feet: &[Vector3<f64>; 2],
    payload: &PayloadLoad,
    contacts: [bool; 2],
) -> Result<(ContinuousA, ContinuousB)> {
    let point = LinearizationPoint::from_state(state, model, SINGULARITY_EPS)?;
    Ok(linearize(&point, model, feet, payload, contacts))
}

/// Forward-Euler discretization: `A = I + A_c dt`, `B = B_c dt`.
pub fn discretize(a_c: &ContinuousA, b_c: &ContinuousB, dt: f64) -> (ContinuousA, ContinuousB) {
    (ContinuousA::identity() + a_c * dt, b_c * dt)
}

/// Full nonlinear rigid body derivative `[ṗ; Θ̇; p̈; ω̇]`, keeping the
/// gyroscopic `ω × (G_I ω)` term.
pub fn nonlinear_derivative(
    state: &RobotState,
    model: &RobotModel,
    feet: &[Vector3<f64>; 2],
    payload: &PayloadLoad,
    u: &ControlInput,
    external: &ExternalWrench,
) -> Result<StateDerivative> {
    let euler_rate_inv = euler_rate_map_inv(&state.euler, SINGULARITY_EPS)?;
    let rot = state.rotation();
    let inertia = world_inertia(&rot, &model.inertia_diag());
    let g = model.gravity_vec();
    let m_o = payload.effective_mass();

    let mut force = external.force;
    let mut torque = external.torque;
    for leg in Leg::BOTH {
        let f = u.force(leg);
        force += f;
        torque += (feet[leg.index()] - state.position).cross(&f) + u.moment(leg);
    }
    torque += payload.offset_world.cross(&(g * m_o));
    let w = state.angular_velocity;
    torque -= w.cross(&(inertia * w));

    let lin_acc = force / model.mass + g + g * (m_o / model.mass);
    let ang_acc = inertia
        .cholesky()
        .expect("world inertia is positive definite")
        .solve(&torque);

    let mut d = StateDerivative::zeros();
    d.fixed_rows_mut::<3>(0).copy_from(&state.velocity);
    d.fixed_rows_mut::<3>(3).copy_from(&(euler_rate_inv * w));
    d.fixed_rows_mut::<3>(6).copy_from(&lin_acc);
    d.fixed_rows_mut::<3>(9).copy_from(&ang_acc);
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn standing_feet() -> [Vector3<f64>; 2] {
        [
            Vector3::new(0.0, 0.047, 0.0),
            Vector3::new(0.0, -0.047, 0.0),
        ]
    }

    #[test]
    fn euler_map_at_zero_is_identity() {
        assert_eq!(euler_rate_map(&Vector3::zeros()), Matrix3::identity());
        assert_eq!(
            euler_rate_map_inv(&Vector3::zeros(), SINGULARITY_EPS).unwrap(),
            Matrix3::identity()
        );
    }

    #[test]
    fn euler_map_singular_at_vertical_pitch() {
        let e = euler_rate_map(&Vector3::new(0.0, FRAC_PI_2 - 1e-9, 0.0));
        assert!(e.determinant().abs() < 1e-8);
        let th = 0.7;
        let e = euler_rate_map(&Vector3::new(0.3, th, -1.1));
        assert_relative_eq!(e.determinant(), th.cos(), epsilon = 1e-12);
    }

    #[test]
    fn euler_inverse_round_trip_and_guard() {
        let th = Vector3::new(0.1, 0.2, 0.3);
        let prod = euler_rate_map_inv(&th, SINGULARITY_EPS).unwrap() * euler_rate_map(&th);
        assert!((prod - Matrix3::identity()).amax() < 1e-10);
        let err = euler_rate_map_inv(&Vector3::new(0.0, 1.56, 0.0), SINGULARITY_EPS);
        assert!(matches!(err, Err(Error::NearSingularity { .. })));
    }

    #[test]
    fn rotation_examples() {
        assert_eq!(rotation_from_euler(&Vector3::zeros()), Matrix3::identity());
        let r = rotation_from_euler(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        assert!((r * Vector3::x() - Vector3::y()).amax() < 1e-15);
    }

    #[test]
    fn world_inertia_examples() {
        let d = RobotModel::default().inertia_diag();
        assert_eq!(
            world_inertia(&Matrix3::identity(), &d),
            Matrix3::from_diagonal(&Vector3::new(0.541, 0.520, 0.069))
        );
        let gi = world_inertia(&yaw_rotation(FRAC_PI_2), &d);
        assert_relative_eq!(
            gi.diagonal(),
            Vector3::new(0.520, 0.541, 0.069),
            epsilon = 1e-12
        );
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(r in -3.0f64..3.0, p in -1.5f64..1.5, y in -3.0f64..3.0) {
            let rot = rotation_from_euler(&Vector3::new(r, p, y));
            prop_assert!((rot.transpose() * rot - Matrix3::identity()).amax() < 1e-12);
            prop_assert!((rot.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn world_inertia_keeps_body_eigenvalues(r in -3.0f64..3.0, p in -1.5f64..1.5, y in -3.0f64..3.0) {
            let d = RobotModel::default().inertia_diag();
            let gi = world_inertia(&rotation_from_euler(&Vector3::new(r, p, y)), &d);
            prop_assert!((gi - gi.transpose()).amax() < 1e-14);
            let mut ev: Vec<f64> = gi.symmetric_eigenvalues().iter().copied().collect();
            ev.sort_by(f64::total_cmp);
            prop_assert!((ev[0] - 0.069).abs() < 1e-10);
            prop_assert!((ev[1] - 0.520).abs() < 1e-10);
            prop_assert!((ev[2] - 0.541).abs() < 1e-10);
        }

        // Oracle: ω from finite-differenced rotation, [ω]× = Ṙ Rᵀ.
        #[test]
        fn euler_map_matches_rotation_derivative(
            r in -3.0f64..3.0, p in -1.0f64..1.0, y in -3.0f64..3.0,
            dr in -2.0f64..2.0, dp in -2.0f64..2.0, dy in -2.0f64..2.0,
        ) {
            let th = Vector3::new(r, p, y);
            let rates = Vector3::new(dr, dp, dy);
            let h = 1e-6;
            let rdot = (rotation_from_euler(&(th + rates * h)) - rotation_from_euler(&(th - rates * h))) / (2.0 * h);
            let w = rdot * rotation_from_euler(&th).transpose();
            let w_fd = Vector3::new(w[(2, 1)], w[(0, 2)], w[(1, 0)]);
            let w_map = euler_rate_map(&th) * rates;
            prop_assert!((w_fd - w_map).amax() <= 1e-5, "{} vs {}", w_fd, w_map);
        }
    }

    #[test]
    fn force_blocks_scale_with_inverse_mass() {
        let model = RobotModel::default();
        let state = RobotState::at_height(0.55);
        let (_, b) = continuous_matrices(
            &state,
            &model,
            &standing_feet(),
            &PayloadLoad::NONE,
            [true, true],
        )
        .unwrap();
        let block = Matrix3::identity() / 16.0;
        assert_eq!(b.fixed_view::<3, 3>(6, 0).into_owned(), block);
        assert_eq!(b.fixed_view::<3, 3>(6, 3).into_owned(), block);
    }

    #[test]
    fn swing_leg_columns_vanish_and_nothing_else_changes() {
        let model = RobotModel::default();
        let state = RobotState {
            euler: Vector3::new(0.05, -0.1, 0.4),
            ..RobotState::at_height(0.5)
        };
        let feet = standing_feet();
        let (a2, b2) =
            continuous_matrices(&state, &model, &feet, &PayloadLoad::NONE, [true, true]).unwrap();
        let (a1, b1) =
            continuous_matrices(&state, &model, &feet, &PayloadLoad::NONE, [true, false]).unwrap();
        assert_eq!(a1, a2);
        for col in 0..INPUT_DIM {
            let right = (3..6).contains(&col) || (9..12).contains(&col);
            if right {
                assert!(b1.column(col).iter().all(|&v| v == 0.0), "col {col}");
            } else {
                assert_eq!(b1.column(col), b2.column(col), "col {col}");
            }
        }
        assert!(a1.row(12).iter().all(|&v| v == 0.0));
        assert!(b1.row(12).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn static_equilibrium_has_zero_acceleration() {
        let model = RobotModel::default();
        let state = RobotState::at_height(0.55);
        let feet = standing_feet();
        let fz = 16.0 * 9.81 / 2.0;
        let u = ControlInput::from_legs(
            [Vector3::new(0.0, 0.0, fz), Vector3::new(0.0, 0.0, fz)],
            [Vector3::zeros(); 2],
        );
        let (a, b) =
            continuous_matrices(&state, &model, &feet, &PayloadLoad::NONE, [true, true]).unwrap();
        let xdot = a * state.augmented() + b * u.0;
        assert!(xdot.amax() < 1e-12, "{xdot}");

        let d = nonlinear_derivative(
            &state,
            &model,
            &feet,
            &PayloadLoad::NONE,
            &u,
            &ExternalWrench::default(),
        )
        .unwrap();
        assert!(d.amax() < 1e-12);
        assert_relative_eq!(fz, 78.48, epsilon = 1e-12);
    }

    #[test]
    fn ballistic_derivative() {
        let model = RobotModel::default();
        let state = RobotState {
            angular_velocity: Vector3::new(0.3, 1.0, -0.2),
            ..RobotState::at_height(0.55)
        };
        let d = nonlinear_derivative(
            &state,
            &model,
            &standing_feet(),
            &PayloadLoad::NONE,
            &ControlInput::default(),
            &ExternalWrench::default(),
        )
        .unwrap();
        assert_relative_eq!(
            d.fixed_rows::<3>(6).into_owned(),
            Vector3::new(0.0, 0.0, -9.81),
            epsilon = 1e-15
        );
        let i = world_inertia(&Matrix3::identity(), &model.inertia_diag());
        let w = state.angular_velocity;
        let expected = i.try_inverse().unwrap() * -(w.cross(&(i * w)));
        assert_relative_eq!(d.fixed_rows::<3>(9).into_owned(), expected, epsilon = 1e-12);
    }

    #[test]
    fn payload_equilibrium_needs_combined_weight() {
        let model = RobotModel::default();
        let state = RobotState::at_height(0.55);
        let payload = PayloadLoad {
            mass: 8.0,
            offset_world: Vector3::zeros(),
            contact: true,
        };
        let total = (16.0 + 8.0) * 9.81;
        assert_relative_eq!(total, 235.44, epsilon = 1e-9);
        let u = ControlInput::from_legs(
            [
                Vector3::new(0.0, 0.0, total / 2.0),
                Vector3::new(0.0, 0.0, total / 2.0),
            ],
            [Vector3::zeros(); 2],
        );
        let d = nonlinear_derivative(
            &state,
            &model,
            &standing_feet(),
            &payload,
            &u,
            &ExternalWrench::default(),
        )
        .unwrap();
        assert!(d.amax() < 1e-12);
        // Without contact the payload contributes nothing.
        let detached = PayloadLoad {
            contact: false,
            ..payload
        };
        let (a0, _) = continuous_matrices(
            &state,
            &model,
            &standing_feet(),
            &PayloadLoad::NONE,
            [true; 2],
        )
        .unwrap();
        let (a1, _) =
            continuous_matrices(&state, &model, &standing_feet(), &detached, [true; 2]).unwrap();
        assert_eq!(a0, a1);
    }

    #[test]
    fn discretize_is_forward_euler() {
        let (a, b) = discretize(&ContinuousA::zeros(), &ContinuousB::zeros(), 0.05);
        assert_eq!(a, ContinuousA::identity());
        assert_eq!(b, ContinuousB::zeros());

        let model = RobotModel::default();
        let state = RobotState::at_height(0.55);
        let (ac, bc) = continuous_matrices(
            &state,
            &model,
            &standing_feet(),
            &PayloadLoad::NONE,
            [true, true],
        )
        .unwrap();
        let (a1, b1) = discretize(&ac, &bc, 0.04);
        let (a2, b2) = discretize(&ac, &bc, 0.02);
        let id = ContinuousA::identity();
        assert!(((a1 - id) * 0.5 - (a2 - id)).amax() < 1e-15);
        assert!((b1 * 0.5 - b2).amax() < 1e-15);
    }

    fn rk4_oracle(
        state: &RobotState,
        model: &RobotModel,
        feet: &[Vector3<f64>; 2],
        u: &ControlInput,
        t: f64,
        steps: usize,
    ) -> SVector<f64, STATE_DIM> {
        let f = |x: &SVector<f64, STATE_DIM>| {
            nonlinear_derivative(
                &RobotState::from_vector(x),
                model,
                feet,
                &PayloadLoad::NONE,
                u,
                &ExternalWrench::default(),
            )
            .unwrap()
        };
        let h = t / steps as f64;
        let mut x = state.to_vector();
        for _ in 0..steps {
            let k1 = f(&x);
            let k2 = f(&(x + k1 * (h / 2.0)));
            let k3 = f(&(x + k2 * (h / 2.0)));
            let k4 = f(&(x + k3 * h));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        x
    }

    /// One-step error of the discrete model against a fine RK4 reference.
    pub(crate) fn one_step_error(dt: f64) -> f64 {
        let model = RobotModel::default();
        let state = RobotState::at_height(0.55);
        let feet = [
            Vector3::new(0.02, 0.06, 0.0),
            Vector3::new(-0.01, -0.05, 0.0),
        ];
        let u = ControlInput::from_legs(
            [Vector3::new(6.0, -3.0, 100.0), Vector3::new(4.0, 2.0, 90.0)],
            [Vector3::new(0.0, 1.5, 0.4), Vector3::new(0.0, -0.5, 0.2)],
        );
        let (ac, bc) =
            continuous_matrices(&state, &model, &feet, &PayloadLoad::NONE, [true, true]).unwrap();
        let (a, b) = discretize(&ac, &bc, dt);
        let pred = a * state.augmented() + b * u.0;
        let truth = rk4_oracle(&state, &model, &feet, &u, dt, 200);
        (pred.fixed_rows::<STATE_DIM>(0) - truth).norm()
    }

    #[test]
    fn discretization_error_is_second_order() {
        let ratio = one_step_error(0.02) / one_step_error(0.01);
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    proptest! {
        #[test]
        fn linear_model_tracks_nonlinear_at_small_rates(
            r in -0.3f64..0.3, p in -0.3f64..0.3, y in -3.0f64..3.0,
            wx in -0.057f64..0.057, wy in -0.057f64..0.057, wz in -0.057f64..0.057,
            fx in -20.0f64..20.0, fy in -20.0f64..20.0, fz in 10.0f64..200.0,
            my in -3.0f64..3.0, mz in -3.0f64..3.0,
        ) {
            let model = RobotModel::default();
            let state = RobotState {
                position: Vector3::new(0.1, -0.2, 0.55),
                euler: Vector3::new(r, p, y),
                velocity: Vector3::new(0.3, 0.0, -0.1),
                angular_velocity: Vector3::new(wx, wy, wz),
            };
            let feet = [Vector3::new(0.15, -0.1, 0.0), Vector3::new(0.05, -0.3, 0.02)];
            let payload = PayloadLoad { mass: 2.5, offset_world: Vector3::new(0.1, 0.0, 0.2), contact: true };
            let u = ControlInput::from_legs(
                [Vector3::new(fx, fy, fz), Vector3::new(-fx, fy, fz * 0.5)],
                [Vector3::new(0.0, my, mz), Vector3::new(0.0, -my, mz)],
            );
            let (a, b) = continuous_matrices(&state, &model, &feet, &payload, [true, true]).unwrap();
            let lin = a * state.augmented() + b * u.0;
            let nl = nonlinear_derivative(&state, &model, &feet, &payload, &u, &ExternalWrench::default()).unwrap();
            let gap = (lin.fixed_rows::<STATE_DIM>(0) - nl).amax();
            prop_assert!(gap <= 0.05 * (1.0 + nl.amax()), "gap {gap}");
        }
    }
}
