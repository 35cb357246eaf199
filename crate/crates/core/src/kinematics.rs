//! Leg kinematics and the low-level force-to-torque layer.
//!
//! Each leg is a serial chain hip yaw (z) → hip roll (x) → thigh pitch (y)
//! → knee pitch (y) → ankle pitch (y), with both links of
//! [`RobotModel::leg_length`]. The contact point sits
//! [`RobotModel::ankle_offset`] below the ankle along the foot z axis.

use nalgebra::{Matrix3, Matrix6, SMatrix, Vector3, Vector6};

use crate::dynamics::rotation_from_euler;
use crate::error::{Error, Result};
use crate::model::{Leg, RobotModel};

pub type LegJacobian = SMatrix<f64, 6, 5>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyPose {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl BodyPose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: Matrix3::identity(),
        }
    }

    pub fn from_euler(position: Vector3<f64>, euler: &Vector3<f64>) -> Self {
        Self {
            position,
            rotation: rotation_from_euler(euler),
        }
    }
}

/// Joint angles of one leg: hip yaw, hip roll, thigh, knee, ankle (rad).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegJoints {
    pub leg: Leg,
    pub q: [f64; 5],
}

impl LegJoints {
    /// Knee-forward crouch used to seed inverse kinematics.
    pub fn crouched(leg: Leg) -> Self {
        Self {
            leg,
            q: [0.0, 0.0, -0.6, 1.2, -0.6],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLimits {
    pub lower: [f64; 5],
    pub upper: [f64; 5],
}

impl Default for JointLimits {
    fn default() -> Self {
        Self {
            lower: [-0.8, -0.6, -2.0, 0.0, -1.5],
            upper: [0.8, 0.6, 1.2, 2.6, 1.5],
        }
    }
}

impl JointLimits {
    pub fn contains(&self, q: &[f64; 5]) -> bool {
        (0..5).all(|i| q[i] >= self.lower[i] && q[i] <= self.upper[i])
    }

    fn clamp(&self, q: &mut [f64; 5]) {
        for i in 0..5 {
            q[i] = q[i].clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FootPose {
    /// Contact point, world frame.
    pub position: Vector3<f64>,
    /// Foot orientation; x points from heel to toe.
    pub rotation: Matrix3<f64>,
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

struct Chain {
    origins: [Vector3<f64>; 5],
    axes: [Vector3<f64>; 5],
    foot: FootPose,
}

fn chain(model: &RobotModel, joints: &LegJoints, body: &BodyPose) -> Chain {
    let q = joints.q;
    let l = model.leg_length;
    let hip = body.position + body.rotation * model.hip_in_body(joints.leg);
    let r0 = body.rotation;
    let r1 = r0 * rot_z(q[0]);
    let r2 = r1 * rot_x(q[1]);
    let r3 = r2 * rot_y(q[2]);
    let down = Vector3::new(0.0, 0.0, -l);
    let knee = hip + r3 * down;
    let r4 = r3 * rot_y(q[3]);
    let ankle = knee + r4 * down;
    let r5 = r4 * rot_y(q[4]);
    let contact = ankle + r5 * Vector3::new(0.0, 0.0, -model.ankle_offset);
    Chain {
        origins: [hip, hip, hip, knee, ankle],
        axes: [
            r0 * Vector3::z(),
            r1 * Vector3::x(),
            r2 * Vector3::y(),
            r3 * Vector3::y(),
            r4 * Vector3::y(),
        ],
        foot: FootPose {
            position: contact,
            rotation: r5,
        },
    }
}

pub fn forward_kinematics(model: &RobotModel, joints: &LegJoints, body: &BodyPose) -> FootPose {
    chain(model, joints, body).foot
}

/// World-frame contact-point Jacobian `[J_v; J_ω]` with the body held fixed.
pub fn leg_jacobian(model: &RobotModel, joints: &LegJoints, body: &BodyPose) -> LegJacobian {
    let ch = chain(model, joints, body);
    let mut j = LegJacobian::zeros();
    for i in 0..5 {
        let a = ch.axes[i];
        let lin = a.cross(&(ch.foot.position - ch.origins[i]));
        j.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        j.fixed_view_mut::<3, 1>(3, i).copy_from(&a);
    }
    j
}

/// Orientation error that ignores rotation about the foot x axis, which a
/// five-joint leg cannot control independently.
fn foot_orientation_error(
    current: &Matrix3<f64>,
    target: &Matrix3<f64>,
) -> (Vector3<f64>, Matrix3<f64>) {
    let m = target * current.transpose();
    let e = 0.5
        * Vector3::new(
            m[(2, 1)] - m[(1, 2)],
            m[(0, 2)] - m[(2, 0)],
            m[(1, 0)] - m[(0, 1)],
        );
    let axis = current.column(0).into_owned();
    let proj = Matrix3::identity() - axis * axis.transpose();
    (proj * e, proj)
}

const IK_MAX_ITERATIONS: usize = 200;
const IK_TOLERANCE: f64 = 1e-9;

/// Damped least-squares IK on contact position plus foot pitch/yaw.
/// Returns the best joints found and the remaining position error (m).
pub fn inverse_kinematics_best(
    model: &RobotModel,
    target: &FootPose,
    body: &BodyPose,
    seed: &LegJoints,
    limits: &JointLimits,
) -> (LegJoints, f64) {
    let mut joints = *seed;
    let mut best = (joints, f64::INFINITY);
    for _ in 0..IK_MAX_ITERATIONS {
        let foot = forward_kinematics(model, &joints, body);
        let ep = target.position - foot.position;
        let (er, proj) = foot_orientation_error(&foot.rotation, &target.rotation);
        let pos_err = ep.norm();
        if pos_err < best.1 {
            best = (joints, pos_err);
        }
        if pos_err < IK_TOLERANCE && er.norm() < IK_TOLERANCE {
            return (joints, pos_err);
        }
        let mut j = leg_jacobian(model, &joints, body);
        let jw = proj * j.fixed_view::<3, 5>(3, 0);
        j.fixed_view_mut::<3, 5>(3, 0).copy_from(&jw);
        let mut e = Vector6::zeros();
        e.fixed_rows_mut::<3>(0).copy_from(&ep);
        e.fixed_rows_mut::<3>(3).copy_from(&er);
        let damping = (1e-3 * e.norm()).max(1e-10).powi(2);
        let jjt = j * j.transpose() + Matrix6::identity() * damping;
        let Some(inv) = jjt.try_inverse() else { break };
        let dq = j.transpose() * inv * e;
        for i in 0..5 {
            joints.q[i] += dq[i];
        }
        limits.clamp(&mut joints.q);
    }
    let foot = forward_kinematics(model, &joints, body);
    let err = (target.position - foot.position).norm();
    if err < best.1 {
        best = (joints, err);
    }
    best
}

pub fn inverse_kinematics(
    model: &RobotModel,
    target: &FootPose,
    body: &BodyPose,
    seed: &LegJoints,
    limits: &JointLimits,
) -> Result<LegJoints> {
    let hip = body.position + body.rotation * model.hip_in_body(seed.leg);
    let ankle = target.position + target.rotation * Vector3::new(0.0, 0.0, model.ankle_offset);
    if (ankle - hip).norm() > 2.0 * model.leg_length {
        return Err(Error::Unreachable {
            residual: (ankle - hip).norm() - 2.0 * model.leg_length,
        });
    }
    let (joints, residual) = inverse_kinematics_best(model, target, body, seed, limits);
    if residual > 1e-6 {
        return Err(Error::Unreachable { residual });
    }
    Ok(joints)
}

/// Touchdown heuristic: hip projection + `ṗ Δt / 2 + k_c (ṗ - ṗ_cmd)`, placed
/// on the nominal ground height the controller assumes.
pub fn raibert_target(
    hip_position: &Vector3<f64>,
    velocity: &Vector3<f64>,
    velocity_cmd: &Vector3<f64>,
    stance_duration: f64,
    gain: f64,
    ground_height: f64,
) -> Vector3<f64> {
    let mut p =
        hip_position + velocity * (stance_duration / 2.0) + (velocity - velocity_cmd) * gain;
    p.z = ground_height;
    p
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwingState {
    pub liftoff: Vector3<f64>,
    pub target: Vector3<f64>,
    /// Swing phase in [0, 1].
    pub phase: f64,
    /// Total swing duration (s), used to turn phase rates into velocities.
    pub duration: f64,
    /// Clearance above the straight line at mid-swing (m).
    pub apex: f64,
}

/// Desired swing foot position and velocity.
///
/// Horizontal motion follows a cubic blend with zero end velocity; the
/// vertical profile adds a quartic bump peaking at `apex` at mid-swing.
pub fn swing_profile(s: &SwingState) -> (Vector3<f64>, Vector3<f64>) {
    let t = s.phase.clamp(0.0, 1.0);
    let blend = t * t * (3.0 - 2.0 * t);
    let dblend = 6.0 * t * (1.0 - t);
    let bump = 16.0 * t * t * (1.0 - t) * (1.0 - t);
    let dbump = 32.0 * t * (1.0 - t) * (1.0 - 2.0 * t);
    let delta = s.target - s.liftoff;
    let mut pos = s.liftoff + delta * blend;
    pos.z += s.apex * bump;
    let rate = if s.duration > 0.0 {
        1.0 / s.duration
    } else {
        0.0
    };
    let mut vel = delta * (dblend * rate);
    vel.z += s.apex * dbump * rate;
    (pos, vel)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwingGains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for SwingGains {
    fn default() -> Self {
        Self {
            kp: 700.0,
            kd: 20.0,
        }
    }
}

/// Cartesian PD force for a swinging foot. Asking for a swing force on a
/// stance leg violates the swing/stance exclusivity rule.
pub fn swing_force(
    desired: (&Vector3<f64>, &Vector3<f64>),
    actual: (&Vector3<f64>, &Vector3<f64>),
    gains: &SwingGains,
    in_stance: bool,
) -> Result<Vector3<f64>> {
    if in_stance {
        return Err(Error::Contract("swing force requested for a stance leg"));
    }
    Ok((desired.0 - actual.0) * gains.kp + (desired.1 - actual.1) * gains.kd)
}

/// Wrench the leg must produce at its contact point (world frame).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LegWrench {
    pub force: Vector3<f64>,
    pub moment: Vector3<f64>,
}

impl LegWrench {
    pub fn force_only(force: Vector3<f64>) -> Self {
        Self {
            force,
            moment: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.force);
        v.fixed_rows_mut::<3>(3).copy_from(&self.moment);
        v
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            force: v.fixed_rows::<3>(0).into(),
            moment: v.fixed_rows::<3>(3).into(),
        }
    }
}

/// `τ = [J_v; J_ω]ᵀ [R_fᵀ F; R_fᵀ M]` with the Jacobian expressed in the
/// foot frame, so the foot rotation cancels and `τᵀ q̇` equals the wrench
/// power at the contact point.
pub fn torque_map(
    model: &RobotModel,
    joints: &LegJoints,
    body: &BodyPose,
    foot_rotation: &Matrix3<f64>,
    wrench: &LegWrench,
) -> [f64; 5] {
    let j = leg_jacobian(model, joints, body);
    let rt = foot_rotation.transpose();
    let mut jf = LegJacobian::zeros();
    jf.fixed_view_mut::<3, 5>(0, 0)
        .copy_from(&(rt * j.fixed_view::<3, 5>(0, 0)));
    jf.fixed_view_mut::<3, 5>(3, 0)
        .copy_from(&(rt * j.fixed_view::<3, 5>(3, 0)));
    let mut wf = Vector6::zeros();
    wf.fixed_rows_mut::<3>(0).copy_from(&(rt * wrench.force));
    wf.fixed_rows_mut::<3>(3).copy_from(&(rt * wrench.moment));
    let tau = jf.transpose() * wf;
    [tau[0], tau[1], tau[2], tau[3], tau[4]]
}

pub fn clamp_torques(tau: &[f64; 5], limits: &[f64; 5]) -> ([f64; 5], [bool; 5]) {
    let mut out = *tau;
    let mut flags = [false; 5];
    for i in 0..5 {
        if tau[i].abs() > limits[i] {
            out[i] = tau[i].clamp(-limits[i], limits[i]);
            flags[i] = true;
        }
    }
    (out, flags)
}

/// Level foot frame with the given heading.
pub fn level_foot_rotation(yaw: f64) -> Matrix3<f64> {
    rot_z(yaw)
}

// Exposed for the finite-difference checks in tests and the self-check.
#[doc(hidden)]
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let angle = cos.acos();
    let v = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if angle < 1e-12 {
        return 0.5 * v;
    }
    v * (angle / (2.0 * angle.sin()))
}

/// Central-difference Jacobian of [`forward_kinematics`]; an independent
/// reference for [`leg_jacobian`].
pub fn finite_difference_jacobian(
    model: &RobotModel,
    joints: &LegJoints,
    body: &BodyPose,
    step: f64,
) -> LegJacobian {
    let mut j = LegJacobian::zeros();
    for i in 0..5 {
        let mut plus = *joints;
        let mut minus = *joints;
        plus.q[i] += step;
        minus.q[i] -= step;
        let fp = forward_kinematics(model, &plus, body);
        let fm = forward_kinematics(model, &minus, body);
        let lin = (fp.position - fm.position) / (2.0 * step);
        let ang = rotation_log(&(fp.rotation * fm.rotation.transpose())) / (2.0 * step);
        j.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        j.fixed_view_mut::<3, 1>(3, i).copy_from(&ang);
    }
    j
}

/// Spatial velocity of the contact point for joint rates `qdot`.
pub fn contact_twist(j: &LegJacobian, qdot: &[f64; 5]) -> Vector6<f64> {
    j * nalgebra::Vector5::from_row_slice(qdot)
}
