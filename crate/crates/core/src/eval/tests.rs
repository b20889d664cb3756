use std::f64::consts::PI;

use proptest::prelude::*;

use super::*;
use crate::geometry::generate_box_dataset_sized;
use crate::network::VelocityNetStack;
use crate::train::{init_run, zero_model, McCounts, TrainConfig};

fn config() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        d_z: 4,
        stages: 4,
        d_vel: 10,
        vel_hidden: 1,
        d_mu: 24,
        n_hidden: 3,
        mc: McCounts {
            surface: 32,
            domain: 32,
            eikonal: 32,
            occupancy: 32,
        },
        seed: 8,
        ..TrainConfig::default()
    }
}

fn setup() -> (Model, Vec<ShapeRecord>) {
    let data = generate_box_dataset_sized(3, 2, 6, 300).unwrap();
    let mut s = init_run(&config(), &data).unwrap();
    s.model.velocity.params.iter_mut().for_each(|v| *v *= 0.5);
    (s.model, data)
}

fn eval_config() -> EvalConfig {
    EvalConfig {
        encode: EncodeConfig {
            iterations: 10,
            mc_points: 64,
            ..EncodeConfig::default()
        },
        resolution: 48,
        recon_points: 200,
        emd_points: 64,
        seed: 2,
    }
}

/// `v(x) = S x + b` with `S` skew-symmetric on every stage.
struct Rigid {
    s: [f64; 4],
    b: [f64; 2],
}

impl VelocityField for Rigid {
    fn dim(&self) -> usize {
        2
    }
    fn stages(&self) -> usize {
        3
    }
    fn eval(&self, _k: usize, points: &[f64], _z: &[f64]) -> Result<Vec<f64>> {
        Ok(points
            .chunks_exact(2)
            .flat_map(|x| {
                [
                    self.s[0] * x[0] + self.s[1] * x[1] + self.b[0],
                    self.s[2] * x[0] + self.s[3] * x[1] + self.b[1],
                ]
            })
            .collect())
    }
    fn eval_jac(&self, k: usize, points: &[f64], z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.eval(k, points, z)?, self.s.repeat(points.len() / 2)))
    }
}

#[test]
fn aggregate_examples() {
    let a = Aggregate::of(&[3.0, 1.0, 2.0, 10.0]);
    assert_eq!(a.mean, 4.0);
    assert_eq!(a.median, 2.5);
    assert_eq!(Aggregate::of(&[5.0, 1.0, 2.0]).median, 2.0);
    assert!(Aggregate::of(&[]).mean.is_nan());
}

proptest! {
    #[test]
    fn aggregates_recompute_from_rows(values in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, any::<bool>()), 1..20)) {
        let rows: Vec<MetricRow> = values
            .iter()
            .enumerate()
            .map(|(i, (cd, em, ok))| MetricRow {
                shape_id: i,
                cd: if *ok { *cd } else { f64::NAN },
                em: if *ok { *em } else { f64::NAN },
                status: if *ok { "ok".into() } else { "failed: x".into() },
            })
            .collect();
        let report = MetricReport::from_rows(rows.clone());
        let ok: Vec<&MetricRow> = rows.iter().filter(|r| r.is_ok()).collect();
        prop_assert_eq!(report.failed, rows.len() - ok.len());
        if !ok.is_empty() {
            let mean = ok.iter().map(|r| r.cd).sum::<f64>() / ok.len() as f64;
            prop_assert!((report.cd.mean - mean).abs() < 1e-12);
            let below = ok.iter().filter(|r| r.em < report.em.median).count();
            let above = ok.iter().filter(|r| r.em > report.em.median).count();
            prop_assert!(below <= ok.len() / 2 && above <= ok.len() / 2);
        }
    }
}

#[test]
fn identical_sets_score_zero() {
    let (_, data) = setup();
    let truth = &data[0].sample.points;
    assert_eq!(compare_clouds(truth, truth, 64, 1).unwrap(), (0.0, 0.0));
}

#[test]
fn split_evaluation_is_deterministic_and_matches_zero_noise() {
    let (m, data) = setup();
    let cfg = eval_config();
    let a = evaluate_split(&m, &data, &cfg);
    let b = evaluate_split(&m, &data, &cfg);
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.rows.len(), 3);
    assert_eq!(a.failed, 0);
    assert!(a.rows.iter().all(|r| r.cd > 0.0 && r.em > 0.0));
    let noisy = noise_experiment(&m, &data, &[0.0, 0.01, 0.02], &cfg);
    assert_eq!(noisy.len(), 3);
    assert_eq!(noisy[0].1, a);
    for (_, r) in &noisy {
        assert_eq!(r.rows.len(), data.len());
    }
    assert_ne!(noisy[1].1.rows, a.rows);
}

#[test]
fn failures_are_flagged_not_fatal() {
    let (_, data) = setup();
    let m = zero_model(&config()).unwrap();
    let r = evaluate_split(&m, &data, &eval_config());
    assert_eq!(r.failed, 3);
    assert!(r.rows.iter().all(|row| row.status.starts_with("failed")));
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 1 + 3 + 2);
    assert_eq!(csv.lines().next().unwrap(), "shape_id,cd,em,status");
}

#[test]
fn report_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let report = MetricReport::from_rows(vec![MetricRow {
        shape_id: 4,
        cd: 0.5,
        em: 0.25,
        status: "ok".into(),
    }]);
    report.write(dir.path(), "split").unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("split.json")).unwrap())
            .unwrap();
    assert_eq!(json["cd"]["median"], 0.5);
    assert!(std::fs::read_to_string(dir.path().join("split.csv"))
        .unwrap()
        .contains("4,0.5,0.25,ok"));
}

#[test]
fn isometry_defect_examples() {
    let zero = VelocityNetStack::zeros(2, 3, 6, 1, 4, Some(0.1)).unwrap();
    let pts: Vec<f64> = (0..50)
        .map(|i| ((i * 37) % 100) as f64 / 50.0 - 1.0)
        .collect();
    assert_eq!(
        isometry_defect(&zero, &[vec![0.1, 0.2, 0.3]], &pts).unwrap(),
        0.0
    );
    let rigid = Rigid {
        s: [0.0, 1.3, -1.3, 0.0],
        b: [0.2, -0.4],
    };
    assert!(isometry_defect(&rigid, &[vec![], vec![]], &pts).unwrap() < 1e-12);
    let shear = Rigid {
        s: [0.0, 1.0, 0.0, 0.0],
        b: [0.0, 0.0],
    };
    // ‖S + Sᵀ‖² = 2 for a unit shear
    assert!((isometry_defect(&shear, &[vec![]], &pts).unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn speed_variance_examples() {
    assert_eq!(
        temporal_speed_variance(&[vec![1.0, 2.0], vec![1.0, 2.0]]),
        0.0
    );
    // vertex 0 varies 0 → 2 (variance 1), vertex 1 constant
    assert_eq!(
        temporal_speed_variance(&[vec![0.0, 5.0], vec![2.0, 5.0]]),
        0.5
    );
}

#[test]
fn identity_matches_closed_form_for_sine_field() {
    // ½‖J+Jᵀ‖² integrates to 6π² and ‖v‖² to 2 for amplitude (1, 1)
    let expect = 6.0 * PI * PI + 2.0;
    let c = verify_killing_identity(&TestField::default(), 1.0, 256, DerivativeMode::Auto).unwrap();
    assert!((c.lhs - expect).abs() < 1e-9 * expect, "{c:?}");
    assert!(c.rel_err < 1e-10);
    let fd = verify_killing_identity(
        &TestField::default(),
        1.0,
        256,
        DerivativeMode::FiniteDifference,
    )
    .unwrap();
    assert!(fd.rel_err < 1e-3, "{fd:?}");
}

#[test]
fn finite_difference_error_shrinks_under_refinement() {
    let errs: Vec<f64> = [33, 65, 129, 257]
        .iter()
        .map(|&r| {
            verify_killing_identity(
                &TestField::default(),
                1.0,
                r,
                DerivativeMode::FiniteDifference,
            )
            .unwrap()
            .rel_err
        })
        .collect();
    for w in errs.windows(2) {
        assert!(w[1] < w[0], "{errs:?}");
    }
    let swirl: Vec<f64> = [33, 65, 129]
        .iter()
        .map(|&r| {
            verify_killing_identity(&TestField::Swirl, 0.5, r, DerivativeMode::Auto)
                .unwrap()
                .rel_err
        })
        .collect();
    assert!(swirl[2] < swirl[1] && swirl[1] < swirl[0], "{swirl:?}");
}

#[test]
fn identity_edge_cases() {
    let z = verify_killing_identity(&TestField::Zero, 1.0, 16, DerivativeMode::Auto).unwrap();
    assert_eq!((z.lhs, z.rhs, z.rel_err), (0.0, 0.0, 0.0));
    let c = TestField::Constant { value: [0.1, 0.0] };
    assert!(matches!(
        verify_killing_identity(&c, 1.0, 16, DerivativeMode::Auto),
        Err(Error::BoundaryViolation(_))
    ));
    assert!(verify_killing_identity(&TestField::Zero, 1.0, 4, DerivativeMode::Auto).is_err());
}
