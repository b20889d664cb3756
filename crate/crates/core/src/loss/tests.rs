use super::*;
use crate::geometry::{PointCloud, SurfaceSample};
use crate::network::VelocityNetStack;
use rand::Rng as _;

/// `v(x) = A x + c` on every stage, undamped.
struct Affine {
    dim: usize,
    stages: usize,
    a: Vec<f64>,
    c: Vec<f64>,
}

impl VelocityField for Affine {
    fn dim(&self) -> usize {
        self.dim
    }
    fn stages(&self) -> usize {
        self.stages
    }
    fn eval(&self, _k: usize, points: &[f64], _z: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        Ok(points
            .chunks_exact(d)
            .flat_map(|x| {
                (0..d)
                    .map(move |i| self.c[i] + (0..d).map(|j| self.a[i * d + j] * x[j]).sum::<f64>())
            })
            .collect())
    }
    fn eval_jac(&self, k: usize, points: &[f64], z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = points.len() / self.dim;
        Ok((self.eval(k, points, z)?, self.a.repeat(n)))
    }
}

/// Template computing `c + a·x` exactly wherever the result is within the
/// clamp band.
fn affine_template(a: &[f64], c: f64) -> TemplateNet {
    let d = a.len();
    let mut net = TemplateNet::zeros(d, 2, 2).unwrap();
    let layers = net.layout().layers.clone();
    let shift = 10.0;
    for (i, l) in layers.iter().enumerate() {
        let p = &mut net.params[l.offset..l.offset + l.len()];
        if i == 0 {
            p[..d].copy_from_slice(a);
            p[l.weight_len()] = c + shift;
        } else if i + 1 < layers.len() {
            p[0] = 1.0;
        } else {
            p[0] = 1.0;
            p[l.weight_len()] = -shift;
        }
    }
    net
}

fn constant_template(d: usize, c: f64) -> TemplateNet {
    let mut net = TemplateNet::zeros(d, 2, 1).unwrap();
    let n = net.params.len();
    net.params[n - 1] = c;
    net
}

fn grid_points(m: usize) -> Vec<f64> {
    let h = 2.0 / m as f64;
    let mut pts = Vec::with_capacity(2 * m * m);
    for i in 0..m {
        for j in 0..m {
            pts.extend([-1.0 + (i as f64 + 0.5) * h, -1.0 + (j as f64 + 0.5) * h]);
        }
    }
    pts
}

fn random_points(n: usize, d: usize, r: f64, seed: u64) -> Vec<f64> {
    let mut g = rng::stream(seed, &[]);
    (0..n * d).map(|_| g.random_range(-r..r)).collect()
}

fn small_model(d: usize, seed: u64) -> (TemplateNet, VelocityNetStack) {
    let mut g = rng::stream(seed, &[1]);
    let tpl = TemplateNet::geometric(d, 8, 2, &mut g).unwrap();
    let mut stack = VelocityNetStack::uniform(d, 3, 6, 1, 4, Some(0.2), &mut g).unwrap();
    let out = *stack.layout().layers.last().unwrap();
    for k in 0..4 {
        for v in &mut stack.net_params_mut(k)[out.offset..out.offset + out.len()] {
            *v *= 0.3;
        }
    }
    (tpl, stack)
}

fn random_draw(d: usize, seed: u64, shape: usize) -> ShapeDraw {
    let mut g = rng::stream(seed, &[2]);
    let n = 12;
    let surface_points = random_points(n, d, 0.6, seed + 100);
    let mut normals = Vec::new();
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| g.random_range(-1.0..1.0)).collect();
        let l = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        normals.extend(v.iter().map(|x| x / l));
    }
    let occ_points = random_points(8, d, 0.8, seed + 200);
    let labels = (0..8).map(|i| (i % 2) as f64).collect();
    ShapeDraw {
        shape,
        z: (0..3).map(|_| g.random_range(-0.5..0.5)).collect(),
        surface_points,
        normals,
        domain_points: random_points(10, d, 0.95, seed + 300),
        occupancy: Some((occ_points, labels)),
    }
}

#[test]
fn f_cos_examples() {
    assert_eq!(f_cos(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
    assert_eq!(f_cos(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
    assert_eq!(f_cos(&[2.0, 0.0], &[2.0, 0.0]), 2.0);
    assert_eq!(f_cos(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
}

#[test]
fn huber_and_stage_examples() {
    assert!((huber(0.1, HUBER_DELTA) - 0.005).abs() < 1e-15);
    assert!((huber(1.0, HUBER_DELTA) - 0.21875).abs() < 1e-15);
    assert_eq!(pointwise_stages(10).unwrap(), vec![2, 4, 6, 8, 10]);
    assert_eq!(pointwise_stages(4).unwrap(), vec![1, 2, 3, 4]);
    assert!(pointwise_stages(3).is_err());
}

#[test]
fn pointwise_single_point_examples() {
    for (shift, expect) in [(0.1, 0.005), (1.0, 0.21875)] {
        // one stage-4 field of four stages moving the point by `shift` in total
        let field = Affine {
            dim: 2,
            stages: 4,
            a: vec![0.0; 4],
            c: vec![shift, 0.0],
        };
        // stages 1..4 all count, displacement grows linearly
        let got = pointwise_baseline_loss(&field, &[], &[-0.5, 0.0]).unwrap();
        let want: f64 = (1..=4)
            .map(|t| huber(shift * t as f64 / 4.0, HUBER_DELTA))
            .sum();
        assert!((got - want).abs() < 1e-15);
        assert!((huber(shift, HUBER_DELTA) - expect).abs() < 1e-15);
    }
    let zero = Affine {
        dim: 2,
        stages: 8,
        a: vec![0.0; 4],
        c: vec![0.0; 2],
    };
    assert_eq!(
        pointwise_baseline_loss(&zero, &[], &random_points(5, 2, 0.5, 1)).unwrap(),
        0.0
    );
}

#[test]
fn perfect_fit_has_zero_fidelity() {
    let tpl = affine_template(&[-1.0, 0.0], 0.3);
    let stack = VelocityNetStack::zeros(2, 3, 4, 1, 4, Some(0.05)).unwrap();
    let pts: Vec<f64> = (0..20)
        .flat_map(|i| [0.3, -0.9 + 0.09 * i as f64])
        .collect();
    let normals = [-1.0, 0.0].repeat(20);
    let sample = SurfaceSample::new(PointCloud::new(2, pts).unwrap(), normals, 0).unwrap();
    let v = on_surface_fidelity(&tpl, &stack, &[0.0; 3], &sample, 0.01, &McSampler::all()).unwrap();
    assert!(v.abs() < 1e-9, "{v}");
}

#[test]
fn tau_zero_reduces_to_mean_abs() {
    let (tpl, stack) = small_model(2, 3);
    let draw = random_draw(2, 3, 0);
    let sample = SurfaceSample::new(
        PointCloud::new(2, draw.surface_points.clone()).unwrap(),
        draw.normals.clone(),
        0,
    )
    .unwrap();
    let vals = on_surface_values(&tpl, &stack, &draw.z, &sample, &McSampler::all()).unwrap();
    let mean_abs = vals.iter().map(|v| v.0).sum::<f64>() / vals.len() as f64;
    let f = on_surface_fidelity(&tpl, &stack, &draw.z, &sample, 0.0, &McSampler::all()).unwrap();
    assert_eq!(f, mean_abs);
}

#[test]
fn monte_carlo_estimate_agrees_with_dense_evaluation() {
    let (tpl, stack) = small_model(2, 4);
    let rec = &crate::geometry::generate_box_dataset_sized(1, 2, 4, 4000).unwrap()[0];
    let z = [0.1, -0.2, 0.3];
    let mc = McSampler {
        count: Some(400),
        seed: 9,
    };
    let vals = on_surface_values(&tpl, &stack, &z, &rec.sample, &mc).unwrap();
    let per: Vec<f64> = vals.iter().map(|(a, c)| a + 0.01 * c).collect();
    let n = per.len() as f64;
    let mean = per.iter().sum::<f64>() / n;
    let var = per.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let dense =
        on_surface_fidelity(&tpl, &stack, &z, &rec.sample, 0.01, &McSampler::all()).unwrap();
    assert!(
        (mean - dense).abs() < 3.0 * (var / n).sqrt(),
        "{mean} vs {dense}"
    );
}

#[test]
fn off_surface_examples() {
    let stack = VelocityNetStack::zeros(2, 3, 4, 1, 4, Some(0.05)).unwrap();
    let pts = random_points(50, 2, 0.9, 5);
    let z = [0.0; 3];
    assert_eq!(
        off_surface_penalty(&constant_template(2, 0.0), &stack, &z, &pts, 100.0).unwrap(),
        1.0
    );
    let a = off_surface_penalty(&constant_template(2, 0.1), &stack, &z, &pts, 100.0).unwrap();
    assert!((a - (-10.0f64).exp()).abs() < 1e-18);
    let b = off_surface_penalty(&constant_template(2, 0.2), &stack, &z, &pts, 100.0).unwrap();
    assert!(b < a);
    assert!(off_surface_penalty(&constant_template(2, 0.2), &stack, &z, &pts, 0.0).is_err());
}

#[test]
fn eikonal_examples() {
    let pts = random_points(40, 2, 0.2, 6);
    let tpl = affine_template(&[0.6, -0.8], 0.1);
    assert!(eikonal_loss(&tpl, &pts, &[]).unwrap() < 1e-12);
    assert_eq!(
        eikonal_loss(&constant_template(2, 0.3), &pts, &pts).unwrap(),
        1.0
    );
}

#[test]
fn eikonal_term_does_not_reach_velocity_or_latents() {
    let (tpl, stack) = small_model(2, 7);
    let batch = Batch {
        shapes: vec![random_draw(2, 7, 0), random_draw(2, 8, 1)],
        eikonal_points: random_points(10, 2, 1.0, 7),
    };
    let c = TermCoefficients {
        eikonal: 1.0,
        ..Default::default()
    };
    let (b, g) = batch_objective(&tpl, &stack, &batch, &c, true).unwrap();
    let g = g.unwrap();
    assert!(b.eikonal > 0.0);
    assert_eq!(g.velocity.max_abs(), 0.0);
    assert!(g.latents.iter().all(|(_, z)| z.iter().all(|v| *v == 0.0)));
    assert!(g.template.max_abs() > 0.0);
}

#[test]
fn riemannian_closed_forms() {
    let pts = grid_points(400);
    let eta = 0.7;
    let rot = Affine {
        dim: 2,
        stages: 1,
        a: vec![0.0, -1.0, 1.0, 0.0],
        c: vec![0.0, 0.0],
    };
    let r = riemannian_regularizer(&rot, &[], &pts, eta).unwrap();
    assert!((r - eta * 8.0 / 3.0).abs() < 1e-4, "{r}");
    let id = Affine {
        dim: 2,
        stages: 1,
        a: vec![1.0, 0.0, 0.0, 1.0],
        c: vec![0.0, 0.0],
    };
    let r = riemannian_regularizer(&id, &[], &pts, eta).unwrap();
    assert!((r - (32.0 + eta * 8.0 / 3.0)).abs() < 1e-4, "{r}");
    let zero = Affine {
        dim: 2,
        stages: 3,
        a: vec![0.0; 4],
        c: vec![0.0; 2],
    };
    assert_eq!(riemannian_regularizer(&zero, &[], &pts, eta).unwrap(), 0.0);
}

#[test]
fn killing_vanishes_on_rigid_fields() {
    let mut g = rng::stream(11, &[]);
    for d in [2, 3] {
        for _ in 0..5 {
            let mut a = vec![0.0; d * d];
            for i in 0..d {
                for j in (i + 1)..d {
                    let s = g.random_range(-2.0..2.0);
                    a[i * d + j] = s;
                    a[j * d + i] = -s;
                }
            }
            let field = Affine {
                dim: d,
                stages: 2,
                a,
                c: (0..d).map(|_| g.random_range(-1.0..1.0)).collect(),
            };
            let pts = random_points(2000, d, 1.0, 12);
            let (_, jac) = field.eval_jac(0, &pts, &[]).unwrap();
            assert!(jac
                .chunks_exact(d * d)
                .all(|j| killing_integrand(j, d) < 1e-12));
            assert!(riemannian_regularizer(&field, &[], &pts, 0.0).unwrap() < 1e-12);
        }
    }
}

#[test]
fn bce_examples() {
    assert!(bce(10.0, 1.0) < 5e-5 && bce(-10.0, 0.0) < 5e-5);
    let stack = VelocityNetStack::zeros(2, 3, 4, 1, 4, Some(0.05)).unwrap();
    let pts = random_points(6, 2, 0.5, 13);
    let labels = vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
    let v = occupancy_bce_fidelity(&constant_template(2, 0.0), &stack, &[0.0; 3], &pts, &labels)
        .unwrap();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    for p in [-3.0, -0.2, 0.0, 0.7, 4.0] {
        for y in [0.0, 1.0] {
            assert!((bce(p, 1.0 - y) - bce(-p, y)).abs() < 1e-15);
        }
    }
    assert!(occupancy_bce_fidelity(
        &constant_template(2, 0.0),
        &stack,
        &[0.0; 3],
        &pts,
        &[0.5; 6]
    )
    .is_err());
}

#[test]
fn tape_terms_match_direct_evaluation() {
    for d in [2, 3] {
        let (tpl, stack) = small_model(d, 14);
        let draw = random_draw(d, 14, 0);
        let batch = Batch {
            shapes: vec![draw.clone()],
            eikonal_points: random_points(9, d, 1.0, 15),
        };
        let w = LossWeights::rectangles();
        let mut c = TermCoefficients::new(&w, Mode::Riemannian, Fidelity::Surface);
        c.pointwise = 0.1;
        c.occupancy = 1.0;
        let (b, _) = batch_objective(&tpl, &stack, &batch, &c, false).unwrap();
        let sample = SurfaceSample::new(
            PointCloud::new(d, draw.surface_points.clone()).unwrap(),
            draw.normals.clone(),
            0,
        )
        .unwrap();
        let vals = on_surface_values(&tpl, &stack, &draw.z, &sample, &McSampler::all()).unwrap();
        let n = vals.len() as f64;
        assert!((b.on_surface - vals.iter().map(|v| v.0).sum::<f64>() / n).abs() < 1e-12);
        assert!((b.normal_term - vals.iter().map(|v| v.1).sum::<f64>() / n).abs() < 1e-12);
        let off = off_surface_penalty(&tpl, &stack, &draw.z, &draw.domain_points, w.alpha).unwrap();
        assert!((b.off_surface - off).abs() < 1e-12);
        let r = riemannian_regularizer(&stack, &draw.z, &draw.domain_points, w.eta).unwrap();
        assert!((b.riemannian - r).abs() < 1e-10 * r.max(1.0));
        let mut all = draw.surface_points.clone();
        all.extend_from_slice(&draw.domain_points);
        let pw = pointwise_baseline_loss(&stack, &draw.z, &all).unwrap();
        assert!((b.pointwise - pw).abs() < 1e-12);
        let (pts, labels) = draw.occupancy.as_ref().unwrap();
        let occ = occupancy_bce_fidelity(&tpl, &stack, &draw.z, pts, labels).unwrap();
        assert!((b.occupancy - occ).abs() < 1e-12);
        let warped = crate::flow::integrate_forward(&stack, &draw.surface_points, &draw.z).unwrap();
        let eik = eikonal_loss(&tpl, &batch.eikonal_points, warped.end()).unwrap();
        assert!((b.eikonal - eik).abs() < 1e-12);
        assert!((b.total - b.weighted_total(&c)).abs() < 1e-12);
    }
}

#[test]
fn objective_bookkeeping_examples() {
    let (tpl, stack) = small_model(2, 16);
    let batch = Batch {
        shapes: vec![random_draw(2, 16, 0), random_draw(2, 17, 1)],
        eikonal_points: random_points(9, 2, 1.0, 16),
    };
    let zero = LossWeights {
        sigma2: 0.0,
        tau: 0.0,
        lambda: 0.0,
        beta: 0.0,
        alpha: 100.0,
        eta: 0.0,
        c_pw: 0.0,
        gamma: 0.0,
    };
    let b = total_training_loss(
        &tpl,
        &stack,
        &batch,
        &zero,
        Mode::Riemannian,
        Fidelity::Surface,
    )
    .unwrap();
    assert_eq!(b.total, b.on_surface);
    let w = LossWeights {
        sigma2: 0.0,
        c_pw: 0.0,
        ..LossWeights::rectangles()
    };
    let r = total_training_loss(
        &tpl,
        &stack,
        &batch,
        &w,
        Mode::Riemannian,
        Fidelity::Surface,
    )
    .unwrap();
    let p =
        total_training_loss(&tpl, &stack, &batch, &w, Mode::Pointwise, Fidelity::Surface).unwrap();
    assert_eq!(r.total, p.total);
    let full = total_training_loss(
        &tpl,
        &stack,
        &batch,
        &LossWeights::rectangles(),
        Mode::Riemannian,
        Fidelity::Surface,
    )
    .unwrap();
    let w = LossWeights::rectangles();
    let recomputed = full.on_surface
        + w.tau * full.normal_term
        + w.beta * full.off_surface
        + w.lambda * full.eikonal
        + w.sigma2 * full.riemannian;
    assert!((full.total - recomputed).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences_per_term() {
    let d = 2;
    let (tpl, stack) = small_model(d, 18);
    let batch = Batch {
        shapes: vec![random_draw(d, 18, 0), random_draw(d, 19, 1)],
        eikonal_points: random_points(6, d, 1.0, 18),
    };
    let base = TermCoefficients {
        alpha: 5.0,
        eta: 0.5,
        ..Default::default()
    };
    let terms: Vec<TermCoefficients> = vec![
        TermCoefficients {
            surface: 1.0,
            ..base
        },
        TermCoefficients {
            normal: 1.0,
            ..base
        },
        TermCoefficients {
            off_surface: 1.0,
            ..base
        },
        TermCoefficients {
            riemannian: 1.0,
            ..base
        },
        TermCoefficients {
            pointwise: 1.0,
            ..base
        },
        TermCoefficients {
            occupancy: 1.0,
            ..base
        },
        TermCoefficients {
            eikonal: 1.0,
            ..base
        },
    ];
    let h = 1e-5;
    let objective = |t: &TemplateNet, s: &VelocityNetStack, b: &Batch, c: &TermCoefficients| {
        batch_objective(t, s, b, c, false).unwrap().0.total
    };
    for c in &terms {
        let (_, g) = batch_objective(&tpl, &stack, &batch, c, true).unwrap();
        let g = g.unwrap();
        let (mut good, mut total) = (0, 0);
        let mut check = |fd: f64, an: f64| {
            total += 1;
            if (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-4) {
                good += 1;
            }
        };
        for i in (0..tpl.param_count()).step_by(3) {
            let (mut a, mut b) = (tpl.clone(), tpl.clone());
            a.params[i] += h;
            b.params[i] -= h;
            check(
                (objective(&a, &stack, &batch, c) - objective(&b, &stack, &batch, c)) / (2.0 * h),
                g.template.data[i],
            );
        }
        for i in (0..stack.param_count()).step_by(7) {
            let (mut a, mut b) = (stack.clone(), stack.clone());
            a.params[i] += h;
            b.params[i] -= h;
            check(
                (objective(&tpl, &a, &batch, c) - objective(&tpl, &b, &batch, c)) / (2.0 * h),
                g.velocity.data[i],
            );
        }
        for (slot, (shape, gz)) in g.latents.iter().enumerate() {
            assert_eq!(*shape, slot);
            for i in 0..gz.len() {
                let (mut a, mut b) = (batch.clone(), batch.clone());
                a.shapes[slot].z[i] += h;
                b.shapes[slot].z[i] -= h;
                check(
                    (objective(&tpl, &stack, &a, c) - objective(&tpl, &stack, &b, c)) / (2.0 * h),
                    gz[i],
                );
            }
        }
        assert!(good as f64 >= 0.95 * total as f64, "{c:?}: {good}/{total}");
    }
}

#[test]
fn latent_objective_matches_direct_evaluation_and_finite_differences() {
    for d in [2, 3] {
        let (tpl, stack) = small_model(d, 21);
        let draw = random_draw(d, 22, 0);
        let (labels_pts, labels) = draw.occupancy.clone().unwrap();
        let sample = SurfaceSample::new(
            PointCloud::new(d, draw.surface_points.clone()).unwrap(),
            draw.normals.clone(),
            0,
        )
        .unwrap();
        let (value, grad) =
            latent_objective(&tpl, &stack, &draw.z, &draw.surface_points, None).unwrap();
        let direct =
            on_surface_fidelity(&tpl, &stack, &draw.z, &sample, 0.0, &McSampler::all()).unwrap();
        assert!((value - direct).abs() < 1e-12);
        let (bce_value, bce_grad) =
            latent_objective(&tpl, &stack, &draw.z, &labels_pts, Some(&labels)).unwrap();
        let bce_direct =
            occupancy_bce_fidelity(&tpl, &stack, &draw.z, &labels_pts, &labels).unwrap();
        assert!((bce_value - bce_direct).abs() < 1e-12);
        let h = 1e-5;
        for (labels, g) in [(None, &grad), (Some(labels.as_slice()), &bce_grad)] {
            let pts = if labels.is_some() {
                &labels_pts
            } else {
                &draw.surface_points
            };
            for i in 0..draw.z.len() {
                let (mut zp, mut zm) = (draw.z.clone(), draw.z.clone());
                zp[i] += h;
                zm[i] -= h;
                let fp = latent_objective(&tpl, &stack, &zp, pts, labels).unwrap().0;
                let fm = latent_objective(&tpl, &stack, &zm, pts, labels).unwrap().0;
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (fd - g[i]).abs() <= 1e-6 + 1e-4 * fd.abs(),
                    "d {d} i {i}: {fd} vs {}",
                    g[i]
                );
            }
        }
    }
}
