//! Oracle and invariant checks that run without data or training: sweep
//! geometry against an independent projection loop, camera coverage, gradient
//! checks of every custom operation, closed-form constants, and the metrics.

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::camera::RigCalibration;
use crate::corr::{build_pyramid, lookup, lookup_channels, LOOKUP_RADIUS};
use crate::fusion::{adaptive_weights, FusionMode, Mlp, VolumeFusion, BACK, FRONT, LEFT, RIGHT};
use crate::gradcheck::{check_inputs, check_params, projection, weighted_total, DEFAULT_STEP};
use crate::sweep::{build_grids, warp_features, SweepConfig};
use crate::tensor::Tensor;
use crate::train::{loss_weights, metrics, sequence_loss};
use crate::update::{convex_upsample, UpdateBlock, MASK_CHANNELS};

/// Largest relative gradient error accepted by the differentiability check.
pub const GRAD_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct Check {
    pub criterion: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    pub fn line(&self) -> String {
        format!(
            "criterion {} {:<22} {}  {} ({:.2}s)",
            self.criterion,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail,
            self.seconds
        )
    }
}

fn timed(criterion: u32, name: &'static str, limit_s: f64, f: impl FnOnce() -> (bool, String)) -> Check {
    let start = Instant::now();
    let (ok, detail) = f();
    let seconds = start.elapsed().as_secs_f64();
    let in_time = seconds < limit_s;
    Check {
        criterion,
        name,
        passed: ok && in_time,
        detail: if in_time {
            detail
        } else {
            format!("{detail}; exceeded {limit_s} s")
        },
        seconds,
    }
}

/// Equidistant projection written out from first principles: camera-frame
/// ray, angle to the optical axis, radius `f θ` along the image direction.
fn oracle_pixel(rig: &RigCalibration, slot: usize, theta: f64, phi: f64, inv_depth: f64) -> Option<[f64; 2]> {
    let cam = &rig.cameras[slot];
    let dir = Vector3::new(phi.cos() * theta.cos(), phi.sin(), phi.cos() * theta.sin());
    // direction from the camera to ref + dir / d, scaled by d
    let to_point = dir + (rig.reference() - cam.center()) * inv_depth;
    let p = cam.rotation * to_point;
    let planar = (p.x * p.x + p.y * p.y).sqrt();
    let incidence = planar.atan2(p.z);
    if incidence > cam.fov_deg.to_radians() / 2.0 {
        return None;
    }
    let r = cam.focal * incidence;
    let (ux, uy) = if planar > 0.0 {
        (p.x / planar, p.y / planar)
    } else {
        (0.0, 0.0)
    };
    let (w, h) = cam.resolution;
    let u = cam.principal_point[0] + r * ux;
    let v = cam.principal_point[1] + r * uy;
    Some([2.0 * u / (w - 1) as f64 - 1.0, 2.0 * v / (h - 1) as f64 - 1.0])
}

/// Sampling grids against [`oracle_pixel`] on a 16 × 32 × 8 grid.
pub fn geometry_oracle() -> Check {
    timed(1, "geometry oracle", 10.0, || {
        let rig = RigCalibration::default_rig();
        let cfg = SweepConfig {
            num_spheres: 16,
            out_width: 64,
            out_height: 32,
            ..SweepConfig::default()
        };
        let grids = build_grids(&rig, &cfg).expect("valid configuration");
        let (rows, cols) = cfg.half_size();
        let spheres = cfg.half_spheres();
        let (mut max_diff, mut mask_mismatch) = (0.0f64, 0usize);
        for (slot, grid) in grids.iter().enumerate() {
            for k in 0..rows {
                let phi = cfg.phi_min + (k as f64 + 0.5) * (cfg.phi_max - cfg.phi_min) / rows as f64;
                for j in 0..cols {
                    let theta = cfg.theta_min + (j as f64 + 0.5) * (cfg.theta_max - cfg.theta_min) / cols as f64;
                    for s in 0..spheres {
                        let d = (2 * s) as f64 / (cfg.num_spheres - 1) as f64 / cfg.min_depth;
                        let cell = grid.cell(k, j, s);
                        match oracle_pixel(&rig, slot, theta, phi, d) {
                            Some(xy) if grid.valid[cell] => {
                                for a in 0..2 {
                                    max_diff = max_diff.max((grid.coords.data()[2 * cell + a] - xy[a]).abs());
                                }
                            }
                            None if !grid.valid[cell] => {}
                            _ => mask_mismatch += 1,
                        }
                    }
                }
            }
        }
        (
            max_diff < 1e-6 && mask_mismatch == 0,
            format!("{rows}x{cols}x{spheres} cells, max |diff| {max_diff:.2e}, validity mismatches {mask_mismatch}"),
        )
    })
}

/// Front+back and right+left jointly see every cell on the default rig.
pub fn coverage_property() -> Check {
    timed(2, "coverage", 10.0, || {
        let rig = RigCalibration::default_rig();
        let cfg = SweepConfig::default();
        let grids = build_grids(&rig, &cfg).expect("valid configuration");
        let joint = |a: usize, b: usize| {
            let n = grids[a].valid.len();
            let hit = (0..n).filter(|&i| grids[a].valid[i] || grids[b].valid[i]).count();
            100.0 * hit as f64 / n as f64
        };
        let (fb, rl) = (joint(FRONT, BACK), joint(RIGHT, LEFT));
        (
            fb == 100.0 && rl == 100.0,
            format!("front+back {fb:.4}%, right+left {rl:.4}%"),
        )
    })
}

fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = projection(&shape, seed + id.index() as u64).map(|v| scale * v);
    }
}

fn worst(errs: impl IntoIterator<Item = f64>) -> f64 {
    errs.into_iter().fold(0.0, f64::max)
}

/// Largest relative error of each custom operation on micro shapes.
pub fn gradient_errors() -> Vec<(&'static str, f64)> {
    let step = DEFAULT_STEP;
    let mut out = Vec::new();

    // warp: 16×16 image, features [2, 8, 8], grid 4 × 8 × 8
    let rig = RigCalibration::default_rig().with_resolution(16, 16);
    let cfg = SweepConfig {
        num_spheres: 16,
        out_width: 16,
        out_height: 8,
        ..SweepConfig::default()
    };
    let grids: Vec<_> = build_grids(&rig, &cfg)
        .expect("valid")
        .into_iter()
        .map(std::sync::Arc::new)
        .collect();
    let w_vol = projection(&[4, 8, 8, 2], 11);
    let e = check_inputs(
        &[projection(&[2, 8, 8], 10)],
        |g, v| {
            let vol = warp_features(g, v[0], &grids[RIGHT]).expect("shapes");
            weighted_total(g, vol, w_vol.clone())
        },
        step,
        128,
    );
    out.push(("warp_features", worst(e)));

    // adaptive weights with grid embedding: MLP (2C + 4, C, 1), C = 2
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "m", (8, 2, 1));
    randomize(&mut store, 20, 1.0);
    let (ea, eb) = (grids[FRONT].grid_embed.clone(), grids[BACK].grid_embed.clone());
    let w_cell = projection(&[4, 8, 8, 1], 12);
    let vols = [projection(&[4, 8, 8, 2], 13), projection(&[4, 8, 8, 2], 14)];
    let e = check_inputs(
        &vols,
        |g, v| {
            let (a, b) = (g.constant(ea.clone()), g.constant(eb.clone()));
            let w = adaptive_weights(g, &store, &mlp, v[0], v[1], Some((a, b))).expect("shapes");
            weighted_total(g, w, w_cell.clone())
        },
        step,
        128,
    );
    let p = check_params(
        &store,
        |g, s| {
            let (x, y) = (g.constant(vols[0].clone()), g.constant(vols[1].clone()));
            let (a, b) = (g.constant(ea.clone()), g.constant(eb.clone()));
            let w = adaptive_weights(g, s, &mlp, x, y, Some((a, b))).expect("shapes");
            weighted_total(g, w, w_cell.clone())
        },
        step,
        64,
    );
    out.push((
        "adaptive_weights",
        worst(e.into_iter().chain(p.into_iter().map(|x| x.1))),
    ));

    // lookup at off-lattice estimates: correlation [4, 8, 16]
    let d0 = Tensor::from_fn(&[4, 8], |i| 0.37 + (i as f64 * 0.613) % 14.0);
    let w_look = projection(&[lookup_channels(LOOKUP_RADIUS), 4, 8], 15);
    let e = check_inputs(
        &[projection(&[4, 8, 16], 16), d0],
        |g, v| {
            let pyr = build_pyramid(g, v[0]).expect("depth extent");
            let out = lookup(g, &pyr, v[1], LOOKUP_RADIUS).expect("shapes");
            weighted_total(g, out, w_look.clone())
        },
        step,
        200,
    );
    out.push(("lookup", worst(e)));

    // GRU step, C = 2: hidden [4, 4, 8]
    let mut store = ParamStore::new();
    let block = UpdateBlock::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), 2, LOOKUP_RADIUS);
    randomize(&mut store, 30, 0.3);
    let inputs = [
        projection(&[4, 4, 8], 31).map(|v| 0.5 * v),
        projection(&[36, 4, 8], 32),
        projection(&[2, 4, 8], 33),
    ];
    let w_h = projection(&[4, 4, 8], 34);
    let e = check_inputs(
        &inputs,
        |g, v| {
            let h = block.gru_step(g, &store, v[0], v[1], v[2]).expect("shapes");
            weighted_total(g, h, w_h.clone())
        },
        step,
        100,
    );
    let p = check_params(
        &store,
        |g, s| {
            let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let h = block.gru_step(g, s, v[0], v[1], v[2]).expect("shapes");
            weighted_total(g, h, w_h.clone())
        },
        step,
        40,
    );
    let gru_params = p.into_iter().filter(|(n, _)| n.starts_with("update.gru")).map(|x| x.1);
    out.push(("gru_step", worst(e.into_iter().chain(gru_params))));

    // convex upsampling: coarse [4, 8]
    let w_up = projection(&[8, 16], 35);
    let e = check_inputs(
        &[projection(&[4, 8], 36), projection(&[MASK_CHANNELS, 4, 8], 37)],
        |g, v| {
            let up = convex_upsample(g, v[0], v[1]).expect("shapes");
            weighted_total(g, up, w_up.clone())
        },
        step,
        300,
    );
    out.push(("convex_upsample", worst(e)));

    // sequence loss over three iterations
    let gt = projection(&[4, 8], 38).map(|v| 8.0 + 4.0 * v);
    let mask: Vec<bool> = (0..32).map(|i| i % 7 != 3).collect();
    let preds: Vec<Tensor> = (0..3)
        .map(|k| projection(&[4, 8], 40 + k).map(|v| 8.0 + 5.0 * v))
        .collect();
    let e = check_inputs(
        &preds,
        |g, v| sequence_loss(g, v, &gt, &mask, 0.9).expect("shapes"),
        step,
        64,
    );
    out.push(("sequence_loss", worst(e)));
    out
}

pub fn differentiability() -> Check {
    timed(3, "differentiability", 120.0, || {
        let errs = gradient_errors();
        let ok = errs.iter().all(|(_, e)| *e < GRAD_TOLERANCE);
        let detail = errs
            .iter()
            .map(|(n, e)| format!("{n} {e:.1e}"))
            .collect::<Vec<_>>()
            .join(", ");
        (ok, format!("max relative error: {detail}"))
    })
}

pub fn exactness() -> Check {
    timed(4, "exactness", 10.0, || {
        let mut problems = Vec::new();
        let w = loss_weights(12, 0.9);
        let weight_err = w
            .iter()
            .enumerate()
            .map(|(i, v)| (v - 0.9f64.powi(11 - i as i32)).abs())
            .fold(0.0, f64::max);
        if w.len() != 12 || weight_err > 1e-12 || w[11] != 1.0 {
            problems.push(format!("loss weights off by {weight_err:e}"));
        }

        let mut g = Graph::new();
        let corr = g.constant(projection(&[2, 3, 16], 1));
        let pyr = build_pyramid(&mut g, corr).expect("extent");
        let d = g.constant(Tensor::full(&[2, 3], 3.3));
        let looked = lookup(&mut g, &pyr, d, LOOKUP_RADIUS).expect("shapes");
        if lookup_channels(LOOKUP_RADIUS) != 36 || g.shape(looked)[0] != 36 {
            problems.push(format!("lookup has {} channels", g.shape(looked)[0]));
        }

        let c = 8;
        for (mode, emb, expect) in [
            (FusionMode::AdaptiveOpposite, true, (2 * c + 4, c, 1)),
            (FusionMode::AdaptiveOpposite, false, (2 * c, c, 1)),
            (FusionMode::AllWeighting, false, (4 * c, c, 4)),
        ] {
            let mut store = ParamStore::new();
            let f = VolumeFusion::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), mode, emb, c);
            for mlp in f.mlps() {
                if mlp.widths(&store) != expect {
                    problems.push(format!(
                        "{mode} MLP widths {:?}, expected {expect:?}",
                        mlp.widths(&store)
                    ));
                }
            }
        }

        let mut max_dev = 0.0f64;
        for (k, value) in [0.0, 1.0, 7.25, 31.0].into_iter().enumerate() {
            let coarse = g.constant(Tensor::full(&[4, 8], value));
            let mask = g.constant(projection(&[MASK_CHANNELS, 4, 8], 50 + k as u64).map(|v| 20.0 * v));
            let up = convex_upsample(&mut g, coarse, mask).expect("shapes");
            max_dev = max_dev.max(
                g.value(up)
                    .data()
                    .iter()
                    .map(|v| (v - 2.0 * value).abs())
                    .fold(0.0, f64::max),
            );
        }
        if max_dev > 1e-6 {
            problems.push(format!("convex upsampling of constants deviates by {max_dev:e}"));
        }
        let ok = problems.is_empty();
        let detail = if ok {
            format!("weights err {weight_err:.0e}, 36 lookup channels, MLP widths match, upsample dev {max_dev:.0e}")
        } else {
            problems.join("; ")
        };
        (ok, detail)
    })
}

/// Scalar loop over pixels, written independently of [`metrics`].
fn brute_metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> [f64; 5] {
    let mut n = 0.0;
    let mut acc = [0.0; 5];
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let e = if pred[i] > gt[i] {
            pred[i] - gt[i]
        } else {
            gt[i] - pred[i]
        };
        n += 1.0;
        if e > 1.0 {
            acc[0] += 1.0;
        }
        if e > 3.0 {
            acc[1] += 1.0;
        }
        if e > 5.0 {
            acc[2] += 1.0;
        }
        acc[3] += e;
        acc[4] += e * e;
    }
    [
        100.0 * acc[0] / n,
        100.0 * acc[1] / n,
        100.0 * acc[2] / n,
        acc[3] / n,
        (acc[4] / n).sqrt(),
    ]
}

pub fn metrics_oracle() -> Check {
    timed(8, "metrics oracle", 10.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut max_diff = 0.0f64;
        let mut order_violations = 0;
        for trial in 0..200 {
            let n = if trial == 0 { 1000 } else { rng.gen_range(1..400) };
            let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..31.0)).collect();
            let pred: Vec<f64> = gt.iter().map(|v| v + rng.gen_range(-8.0..8.0)).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
            mask[0] = true;
            let m = metrics(&pred, &gt, &mask).expect("non-empty mask");
            let b = brute_metrics(&pred, &gt, &mask);
            for (x, y) in [m.gt1, m.gt3, m.gt5, m.mae, m.rms].iter().zip(b) {
                max_diff = max_diff.max((x - y).abs());
            }
            if !(0.0 <= m.gt5 && m.gt5 <= m.gt3 && m.gt3 <= m.gt1 && m.gt1 <= 100.0 && m.rms >= m.mae && m.mae >= 0.0) {
                order_violations += 1;
            }
        }
        (
            max_diff <= 1e-9 && order_violations == 0,
            format!("max |diff| vs scalar loop {max_diff:.1e}, ordering violations {order_violations}"),
        )
    })
}

/// Every check, in criterion order.
pub fn run_all() -> Vec<Check> {
    vec![
        geometry_oracle(),
        coverage_property(),
        differentiability(),
        exactness(),
        metrics_oracle(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_agrees_with_camera_model() {
        let rig = RigCalibration::default_rig();
        let cam = &rig.cameras[FRONT];
        // straight ahead at infinity lands on the principal point
        let xy = oracle_pixel(&rig, FRONT, std::f64::consts::FRAC_PI_2, 0.0, 0.0).unwrap();
        let (w, h) = cam.resolution;
        assert!((xy[0] - (2.0 * cam.principal_point[0] / (w - 1) as f64 - 1.0)).abs() < 1e-12);
        assert!((xy[1] - (2.0 * cam.principal_point[1] / (h - 1) as f64 - 1.0)).abs() < 1e-12);
        // straight behind is outside 220°
        assert!(oracle_pixel(&rig, FRONT, -std::f64::consts::FRAC_PI_2, 0.0, 0.0).is_none());
    }
}
