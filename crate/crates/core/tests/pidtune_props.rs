use std::f64::consts::TAU;

use proptest::prelude::*;
use quadlab::dynamics::QuadParams;
use quadlab::pid::{PidLimits, PidParams18};
use quadlab::pidtune::{rollout_gains, GainBox, TuneConfig};
use quadlab::trajectory::{sample_trajectory, TrajectoryKind, TrajectorySpec};

const HZ: f64 = 50.0;

fn gain_box() -> GainBox {
    let cfg = TuneConfig::default();
    GainBox::new(&cfg.gain_min, &cfg.gain_max)
}

#[test]
fn sampled_waypoints_satisfy_the_parametric_form() {
    for spec in [TrajectorySpec::default_circle(), TrajectorySpec::default_helix()] {
        let pts = sample_trajectory(&spec, HZ).unwrap();
        assert_eq!(pts.len(), 301);
        for (k, p) in pts.iter().enumerate() {
            let t = k as f64 / HZ;
            let theta = TAU / 6.0 * t;
            let z = match spec.kind {
                TrajectoryKind::Circle => 0.5,
                TrajectoryKind::Helix => 0.5 + 0.5 * t / 6.0,
            };
            assert!((p.x - 0.3 * theta.cos()).abs() <= 1e-12);
            assert!((p.y - 0.3 * theta.sin()).abs() <= 1e-12);
            assert!((p.z - z).abs() <= 1e-12);
        }
        assert!(pts.windows(2).all(|w| (w[1] - w[0]).norm() < 0.05));
        assert!((pts[300] - pts[0]).xy().norm() <= 1e-12);
    }
}

#[test]
fn coarse_sampling_is_rejected() {
    let fast = TrajectorySpec {
        angular_rate: 10.0,
        ..TrajectorySpec::default_circle()
    };
    assert!(sample_trajectory(&fast, HZ).is_err());
}

#[test]
fn gain_map_endpoints() {
    let b = gain_box();
    let cfg = TuneConfig::default();
    assert_eq!(b.to_gains(&[-1.0; 18]), cfg.gain_min);
    assert_eq!(b.to_gains(&[1.0; 18]), cfg.gain_max);
    assert_eq!(b.to_gains(&[-7.0; 18]), cfg.gain_min);
    assert_eq!(b.to_gains(&[3.0; 18]), cfg.gain_max);
}

proptest! {
    #[test]
    fn gain_map_is_bijective_on_its_box(a in proptest::collection::vec(-1.0..=1.0f64, 18)) {
        let b = gain_box();
        let back = b.to_action(&b.to_gains(&a));
        for (x, y) in a.iter().zip(back) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let g = b.to_gains(&a);
        let again = b.to_gains(&b.to_action(&g)).to_array();
        for ((x, y), hi) in g.to_array().iter().zip(again).zip(b.max) {
            prop_assert!((x - y).abs() <= 1e-12 * hi);
        }
    }

    #[test]
    fn actions_outside_the_cube_clamp(a in proptest::collection::vec(-10.0..10.0f64, 18)) {
        let b = gain_box();
        let clipped: Vec<f64> = a.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        prop_assert_eq!(b.to_gains(&a), b.to_gains(&clipped));
    }
}

#[test]
fn golden_gains_score_at_least_as_well_as_zero_gains() {
    let cfg = TuneConfig::default();
    let quad = QuadParams::default();
    let limits = PidLimits::default();
    for spec in [TrajectorySpec::default_circle(), TrajectorySpec::default_helix()] {
        let golden = rollout_gains(&PidParams18::golden(), &spec, &cfg, &quad, &limits).unwrap();
        let zero = rollout_gains(&PidParams18::zeros(), &spec, &cfg, &quad, &limits).unwrap();
        assert!(!golden.diverged);
        assert!(golden.total_reward >= zero.total_reward, "{:?}", spec.kind);
        assert!(golden.rmse() < zero.rmse());
    }
}
