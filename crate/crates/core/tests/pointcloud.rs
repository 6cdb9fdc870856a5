use romnisweep::camera::RigCalibration;
use romnisweep::io::ply::{encode_ply, export_pointcloud, DEFAULT_INDEX_FLOOR};
use romnisweep::sweep::SweepConfig;
use romnisweep::synth::render::index_of_distance;
use romnisweep::synth::{generate_scene, gt_inverse_index, Preset};

fn nearest(values: impl Iterator<Item = f64>, target: f64) -> usize {
    values
        .enumerate()
        .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
        .unwrap()
        .0
}

#[test]
fn exported_points_reproject_to_their_indices() {
    let rig = RigCalibration::default_rig().with_resolution(64, 64);
    let sweep = SweepConfig {
        num_spheres: 32,
        out_width: 128,
        out_height: 32,
        ..SweepConfig::default()
    };
    let (w, h) = (sweep.out_width, sweep.out_height);
    let scene = generate_scene(8, Preset::Medium, &rig, &sweep);
    let gt = gt_inverse_index(&scene, &rig, &sweep);
    let cloud = export_pointcloud(&gt.index, Some(&gt.mask), &sweep, None, DEFAULT_INDEX_FLOOR).unwrap();

    let kept: Vec<usize> = (0..w * h)
        .filter(|&i| gt.mask[i] && gt.index[i] >= DEFAULT_INDEX_FLOOR)
        .collect();
    assert_eq!(cloud.len(), kept.len());

    for (p, &i) in cloud.points.iter().zip(&kept) {
        let rho = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let theta = p[2].atan2(p[0]);
        let phi = (p[1] / rho).asin();
        let j = nearest((0..w).map(|j| sweep.theta(j, w)), theta);
        let k = nearest((0..h).map(|k| sweep.phi(k, h)), phi);
        assert_eq!(k * w + j, i);
        assert!((index_of_distance(&sweep, rho) - gt.index[i]).abs() <= 0.5);
    }

    let bytes = encode_ply(&cloud, true);
    let text = String::from_utf8(bytes).unwrap();
    assert!(text.contains(&format!("element vertex {}\n", kept.len())));
    let body = text.split("end_header\n").nth(1).unwrap();
    assert_eq!(body.lines().count(), kept.len());
}
