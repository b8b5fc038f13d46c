//! The residual models evaluated at the true pose and shape must agree with
//! the renderer that produced the images.

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapefit::photometric::{depth_at_pixel, photometric_residual};
use shapefit::shape::ShapeInstance;
use shapefit::silhouette::{pi_value, DEFAULT_RAY_SAMPLES};
use shapefit::synth::{car_model, random_car_scene, SceneCamera, SyntheticScene};

fn scenes() -> (shapefit::shape::ShapeModel, Vec<SyntheticScene>) {
    let model = car_model(3).unwrap();
    let scenes = (0..3)
        .map(|s| random_car_scene(&model, &SceneCamera::default(), &mut ChaCha8Rng::seed_from_u64(40 + s)).unwrap())
        .collect();
    (model, scenes)
}

fn mask_pixels(scene: &SyntheticScene) -> impl Iterator<Item = (usize, usize)> + '_ {
    let m = &scene.mask_left;
    (0..m.height())
        .flat_map(move |v| (0..m.width()).map(move |u| (u, v)))
        .filter(move |&(u, v)| m.get(u, v) >= 0.5)
}

#[test]
fn photometric_residual_vanishes_at_ground_truth() {
    let (model, scenes) = scenes();
    for scene in &scenes {
        let shape = ShapeInstance::new(&model, &scene.z).unwrap();
        let camera_to_object = scene.pose.inverse();
        let (mut sum, mut n) = (0.0, 0);
        for (u, v) in mask_pixels(scene) {
            let p = Vector2::new(u as f64, v as f64);
            let Some(hit) = depth_at_pixel(&shape, &camera_to_object, &scene.rig, &p, false) else {
                continue;
            };
            let rendered = scene.depth_left.get(u, v);
            // grazing rays may step past a thin crossing in either tracer
            if hit.normal_cos > 0.1 {
                assert!(
                    (hit.depth - rendered).abs() < 1e-6 * rendered,
                    "depth {} vs rendered {rendered}",
                    hit.depth
                );
            }
            if let Some(r) = photometric_residual(&scene.left, &scene.right, &scene.rig, &p, hit.depth) {
                sum += r.abs();
                n += 1;
            }
        }
        assert!(n > 500);
        let mean = sum / n as f64;
        // occlusion edges and bilinear resampling leave a small remainder
        assert!(mean < 2.0 / 255.0, "mean |r| = {mean}");
    }
}

#[test]
fn soft_silhouette_matches_rendered_mask() {
    let (model, scenes) = scenes();
    for scene in &scenes {
        let shape = ShapeInstance::new(&model, &scene.z).unwrap();
        let camera_to_object = scene.pose.inverse();
        let m = &scene.mask_left;
        let (mut agree, mut total) = (0, 0);
        for v in 0..m.height() {
            for u in 0..m.width() {
                let dir = scene.rig.left.ray(&Vector2::new(u as f64, v as f64));
                let pi = pi_value(&shape, &camera_to_object, &Vector3::zeros(), &dir, 300.0, DEFAULT_RAY_SAMPLES);
                total += 1;
                if (pi >= 0.5) == (m.get(u, v) >= 0.5) {
                    agree += 1;
                }
            }
        }
        assert!(agree as f64 >= 0.995 * total as f64, "{agree}/{total}");
    }
}
