use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use romnisweep::autograd::Graph;
use romnisweep::camera::{RigCalibration, ScenePoint};
use romnisweep::corr::{build_pyramid, correlation_volume};
use romnisweep::fusion::fuse_opposite;
use romnisweep::sweep::SweepConfig;
use romnisweep::synth::render::index_of_distance;
use romnisweep::train::sequence_loss;
use romnisweep::update::convex_upsample;
use romnisweep::Tensor;

fn tensor(shape: &[usize], values: &[f64]) -> Tensor {
    Tensor::from_vec(shape, values.to_vec())
}

fn vol(h: usize, w: usize, d: usize, c: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0..2.0f64, h * w * d * c).prop_map(move |v| Tensor::from_vec(&[h, w, d, c], v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unproject_then_project_is_identity(u in 0.0..639.0f64, v in 0.0..639.0f64, slot in 0usize..4) {
        let cam = &RigCalibration::default_rig().cameras[slot];
        let ray = match cam.unproject([u, v]) {
            Ok(r) => r,
            Err(_) => return Ok(()),
        };
        let p = cam.project_camera_frame(&(ray * 3.0));
        prop_assert!(p.valid);
        prop_assert!((p.pixel[0] - u).abs() < 1e-6 && (p.pixel[1] - v).abs() < 1e-6);
    }

    #[test]
    fn projection_is_rotation_equivariant(
        axis in prop::array::uniform3(-1.0..1.0f64),
        angle in -3.0..3.0f64,
        point in prop::array::uniform3(-4.0..4.0f64),
        slot in 0usize..4,
    ) {
        let axis = Vector3::from(axis);
        prop_assume!(axis.norm() > 1e-3);
        let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        let cam = RigCalibration::default_rig().cameras[slot].clone();
        let mut turned = cam.clone();
        turned.rotation = cam.rotation * r.matrix().transpose();
        let p = Vector3::from(point);
        let a = cam.project(&ScenePoint::Finite(p)).unwrap();
        let b = turned.project(&ScenePoint::Finite(r * p)).unwrap();
        prop_assert_eq!(a.valid, b.valid);
        prop_assert!((a.pixel[0] - b.pixel[0]).abs() < 1e-9 && (a.pixel[1] - b.pixel[1]).abs() < 1e-9);
    }

    #[test]
    fn opposite_fusion_is_convex(a in vol(2, 3, 2, 3), b in vol(2, 3, 2, 3), w in prop::collection::vec(0.0..1.0f64, 12)) {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let vw = g.constant(tensor(&[2, 3, 2, 1], &w));
        let out = fuse_opposite(&mut g, va, vb, vw).unwrap();
        for ((o, x), y) in g.value(out).data().iter().zip(a.data()).zip(b.data()) {
            prop_assert!(*o >= x.min(*y) - 1e-12 && *o <= x.max(*y) + 1e-12);
        }
    }

    #[test]
    fn pyramid_preserves_the_mean(c in vol(2, 2, 16, 1)) {
        let mut g = Graph::new();
        let v = g.constant(c.clone().reshape(&[2, 2, 16]));
        let pyr = build_pyramid(&mut g, v).unwrap();
        let mean = c.mean();
        for level in &pyr.levels {
            let m = g.value(*level).mean();
            prop_assert!((m - mean).abs() <= 1e-6 * mean.abs().max(1.0));
        }
    }

    #[test]
    fn correlation_is_bilinear(a1 in vol(2, 2, 3, 4), a2 in vol(2, 2, 3, 4), b in vol(2, 2, 3, 4), s in -3.0..3.0f64, t in -3.0..3.0f64) {
        let corr = |x: &Tensor, y: &Tensor| {
            let mut g = Graph::new();
            let (vx, vy) = (g.constant(x.clone()), g.constant(y.clone()));
            let c = correlation_volume(&mut g, vx, vy).unwrap();
            g.value(c).clone()
        };
        let mixed = a1.zip_map(&a2, |p, q| s * p + t * q);
        let lhs = corr(&mixed, &b);
        let rhs = corr(&a1, &b).zip_map(&corr(&a2, &b), |p, q| s * p + t * q);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() < 1e-9);
        }
        // and in the second argument
        let lhs = corr(&b, &mixed);
        let rhs = corr(&b, &a1).zip_map(&corr(&b, &a2), |p, q| s * p + t * q);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((l - r).abs() < 1e-9);
        }
    }

    #[test]
    fn convex_upsampling_stays_within_the_neighborhood(
        d in prop::collection::vec(-5.0..5.0f64, 12),
        mask in prop::collection::vec(-4.0..4.0f64, 36 * 12),
    ) {
        let (h, w) = (3, 4);
        let mut g = Graph::new();
        let vd = g.constant(tensor(&[h, w], &d));
        let vm = g.constant(tensor(&[36, h, w], &mask));
        let up = convex_upsample(&mut g, vd, vm).unwrap();
        let out = g.value(up).data();
        for y in 0..2 * h {
            for x in 0..2 * w {
                let (cy, cx) = (y / 2, x / 2);
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                    for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                        lo = lo.min(d[ny * w + nx]);
                        hi = hi.max(d[ny * w + nx]);
                    }
                }
                let v = out[y * 2 * w + x];
                prop_assert!(v >= 2.0 * lo - 1e-9 && v <= 2.0 * hi + 1e-9, "{v} not in [{}, {}]", 2.0 * lo, 2.0 * hi);
            }
        }
    }

    #[test]
    fn sequence_loss_is_monotone_in_each_error(
        preds in prop::collection::vec(-4.0..4.0f64, 16),
        gt in prop::collection::vec(-4.0..4.0f64, 8),
        pick in 0usize..16,
        bump in 0.0..3.0f64,
    ) {
        let loss = |p: &[f64]| {
            let mut g = Graph::new();
            let history: Vec<_> = p.chunks(8).map(|c| g.constant(tensor(&[2, 4], c))).collect();
            let l = sequence_loss(&mut g, &history, &tensor(&[2, 4], &gt), &[true; 8], 0.9).unwrap();
            g.value(l).item()
        };
        let mut worse = preds.clone();
        let e = worse[pick] - gt[pick % 8];
        worse[pick] += if e >= 0.0 { bump } else { -bump };
        prop_assert!(loss(&worse) >= loss(&preds) - 1e-12);
    }

    #[test]
    fn gt_index_decreases_with_distance(r1 in 0.6..100.0f64, r2 in 0.6..100.0f64) {
        let sweep = SweepConfig::default();
        let (near, far) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        prop_assert!(index_of_distance(&sweep, near) >= index_of_distance(&sweep, far));
    }
}
