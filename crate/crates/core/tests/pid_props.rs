use nalgebra::Vector3;
use proptest::prelude::*;
use quadlab::dynamics::{hover_rpm, simulate, ExternalForce, QuadParams, State12};
use quadlab::pid::{PidController, PidLimits, PidParams18, PidState, SetpointTracker};

fn vec3(bound: f64) -> impl Strategy<Value = Vector3<f64>> {
    [-bound..bound, -bound..bound, -bound..bound].prop_map(|[x, y, z]| Vector3::new(x, y, z))
}

fn gains_in_box() -> impl Strategy<Value = PidParams18> {
    let hi = [4.0, 4.0, 4.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 0.01, 0.01, 0.01, 0.002, 0.002, 0.002, 0.005, 0.005, 0.005];
    proptest::collection::vec(0.0..1.0f64, 18).prop_map(move |u| {
        let mut a = [0.0; 18];
        for i in 0..18 {
            a[i] = u[i] * hi[i];
        }
        PidParams18::from_array(&a)
    })
}

prop_compose! {
    fn state()(pos in vec3(50.0), att in vec3(3.0), vel in vec3(100.0), rates in vec3(100.0)) -> State12 {
        State12 { pos, att, lin_vel: vel, ang_vel: rates }
    }
}

fn controller(gains: PidParams18) -> PidController {
    PidController::new(gains, PidLimits::default(), QuadParams::default(), 0.02)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn motor_commands_stay_within_bounds(g in gains_in_box(), s in state(), sp in vec3(50.0),
                                         pi in vec3(2.0), ai in vec3(1.0)) {
        let c = controller(g);
        let (cmd, _) = c.goto_setpoint(&s, &sp, &PidState { pos_integral: pi, att_integral: ai });
        let max = QuadParams::default().rpm_max;
        prop_assert!(cmd.rpm.iter().all(|r| (0.0..=max).contains(r)), "{:?}", cmd.rpm);
    }

    #[test]
    fn integrals_never_exceed_clamps(g in gains_in_box(),
                                     seq in proptest::collection::vec((state(), vec3(50.0)), 1..40)) {
        let c = controller(g);
        let limits = PidLimits::default();
        let mut ps = PidState::default();
        for (s, sp) in seq {
            ps = c.goto_setpoint(&s, &sp, &ps).1;
            prop_assert!(ps.pos_integral.amax() <= limits.pos_integral);
            prop_assert!(ps.att_integral.amax() <= limits.att_integral);
        }
    }

    #[test]
    fn zero_error_gives_the_hover_command(g in gains_in_box(), p in vec3(5.0)) {
        let c = controller(g);
        let (cmd, next) = c.goto_setpoint(&State12::at_rest(p), &p, &PidState::default());
        let h = hover_rpm(&QuadParams::default());
        prop_assert!(cmd.rpm.iter().all(|r| (r - h).abs() <= 1e-9 * h));
        prop_assert_eq!(next, PidState::default());
    }
}

/// First time the z error falls to half of a 0.05 m step.
fn half_error_crossing(gains: PidParams18) -> f64 {
    let quad = QuadParams::default();
    let start = Vector3::new(0.0, 0.0, 1.0);
    let setpoint = start + Vector3::new(0.0, 0.0, 0.05);
    let mut tracker = SetpointTracker::new(controller(gains), setpoint);
    let traj = simulate(&State12::at_rest(start), &mut tracker, |_| ExternalForce::zero(), 2.0, &quad).unwrap();
    let crossing = traj
        .times()
        .zip(&traj.states)
        .find(|(_, s)| (setpoint.z - s.pos.z).abs() <= 0.025)
        .map(|(t, _)| t);
    crossing.expect("reaches half error within 2 s")
}

#[test]
fn doubling_z_position_gain_speeds_up_the_step_response() {
    for base in [1.0, 1.5, 2.0, 3.0] {
        let mut g = PidParams18::golden();
        g.pos_kp[2] = base;
        let slow = half_error_crossing(g);
        g.pos_kp[2] = 2.0 * base;
        let fast = half_error_crossing(g);
        assert!(fast < slow, "kp_z {base}: {fast} !< {slow}");
    }
}

#[test]
fn golden_gains_settle_a_small_step() {
    let quad = QuadParams::default();
    for axis in 0..3 {
        let start = Vector3::new(0.0, 0.0, 1.0);
        let mut setpoint = start;
        setpoint[axis] += 0.05;
        let mut tracker = SetpointTracker::new(controller(PidParams18::golden()), setpoint);
        let traj = simulate(&State12::at_rest(start), &mut tracker, |_| ExternalForce::zero(), 2.0, &quad).unwrap();
        let err = (traj.final_state().pos - setpoint).norm();
        assert!(err < 0.02, "axis {axis}: {err}");
    }
}
