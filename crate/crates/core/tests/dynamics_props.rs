use nalgebra::Vector3;
use proptest::prelude::*;
use quadlab::dynamics::{
    hover_rpm, simulate, step, ConstantCommand, ExternalForce, MotorCommand, QuadParams, State12,
};

fn params() -> QuadParams {
    QuadParams::default()
}

fn vec3(bound: f64) -> impl Strategy<Value = Vector3<f64>> {
    [-bound..bound, -bound..bound, -bound..bound].prop_map(|[x, y, z]| Vector3::new(x, y, z))
}

prop_compose! {
    fn state()(pos in vec3(1.0),
               roll in -0.4..0.4f64, pitch in -0.4..0.4f64, yaw in -3.0..3.0f64,
               vel in vec3(1.0), rates in vec3(0.5)) -> State12 {
        State12 { pos, att: Vector3::new(roll, pitch, yaw), lin_vel: vel, ang_vel: rates }
    }
}

prop_compose! {
    /// Rotor speeds near hover, so trajectories stay well-conditioned.
    fn near_hover()(d in [-0.005..0.005f64, -0.005..0.005f64, -0.005..0.005f64, -0.005..0.005f64]) -> MotorCommand {
        let h = hover_rpm(&params());
        MotorCommand { rpm: d.map(|x| h * (1.0 + x)) }
    }
}

fn fly(initial: &State12, cmd: MotorCommand, force: Vector3<f64>, duration: f64) -> Vec<State12> {
    let mut ctrl = ConstantCommand { cmd, period: 0.02 };
    simulate(initial, &mut ctrl, |_| ExternalForce { force }, duration, &params())
        .unwrap()
        .states
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identical_inputs_give_identical_trajectories(s in state(), cmd in near_hover(), f in vec3(0.02)) {
        let a = fly(&s, cmd, f, 0.5);
        let b = fly(&s, cmd, f, 0.5);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_array().map(f64::to_bits) == y.to_array().map(f64::to_bits)));
    }

    #[test]
    fn rotors_off_conserve_horizontal_momentum(s in state()) {
        let traj = fly(&s, MotorCommand::uniform(0.0), Vector3::zeros(), 0.5);
        for st in &traj {
            prop_assert_eq!(st.lin_vel.x, s.lin_vel.x);
            prop_assert_eq!(st.lin_vel.y, s.lin_vel.y);
        }
    }

    #[test]
    fn free_fall_is_exact_for_any_initial_velocity(vz in -3.0..3.0f64, z0 in -1.0..1.0f64) {
        let mut s = State12::at_rest(Vector3::new(0.0, 0.0, z0));
        s.lin_vel.z = vz;
        let traj = fly(&s, MotorCommand::uniform(0.0), Vector3::zeros(), 1.0);
        let g = params().gravity;
        let dt = params().physics_dt;
        for (i, st) in traj.iter().enumerate() {
            let t = i as f64 * dt;
            prop_assert!((st.pos.z - (z0 + vz * t - 0.5 * g * t * t)).abs() < 1e-9);
        }
    }

    #[test]
    fn mirroring_about_xz_plane_mirrors_the_trajectory(s in state(), cmd in near_hover(), f in vec3(0.02)) {
        let mirrored_force = Vector3::new(f.x, -f.y, f.z);
        let a = fly(&s, cmd, f, 0.5);
        let b = fly(&s.mirrored_xz(), cmd.mirrored_xz(), mirrored_force, 0.5);
        for (x, y) in a.iter().zip(&b) {
            let diff = x.mirrored_xz().to_array().iter().zip(y.to_array()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            prop_assert!(diff < 1e-9, "mirror mismatch {diff:e}");
        }
    }

    #[test]
    fn single_step_velocity_follows_net_force(s in state(), f in vec3(0.05)) {
        // rotors off: only gravity and the external force act
        let p = params();
        let next = step(&s, &MotorCommand::uniform(0.0), &ExternalForce { force: f }, &p).unwrap();
        let expected = s.lin_vel + (f / p.mass + Vector3::new(0.0, 0.0, -p.gravity)) * p.physics_dt;
        prop_assert!((next.lin_vel - expected).norm() < 1e-12);
    }
}

#[test]
fn free_fall_one_second_closed_form() {
    let traj = fly(&State12::default(), MotorCommand::uniform(0.0), Vector3::zeros(), 1.0);
    let z = traj.last().unwrap().pos.z;
    assert!((z - (-0.5 * 9.81)).abs() < 1e-3, "z = {z}");
}

#[test]
fn hover_holds_position_for_one_second() {
    let traj = fly(
        &State12::default(),
        MotorCommand::uniform(hover_rpm(&params())),
        Vector3::zeros(),
        1.0,
    );
    let drift = traj.iter().map(|s| s.pos.norm()).fold(0.0, f64::max);
    assert!(drift < 1e-6, "drift {drift:e}");
}

#[test]
fn lateral_step_force_gives_impulse_velocity() {
    for f in [0.005, 0.01, 0.04] {
        let traj = fly(
            &State12::default(),
            MotorCommand::uniform(hover_rpm(&params())),
            Vector3::new(f, 0.0, 0.0),
            1.0,
        );
        let dv = traj.last().unwrap().lin_vel.x;
        assert!((dv - f * 1.0 / 0.027).abs() < 1e-3, "F = {f}: dv = {dv}");
    }
}
