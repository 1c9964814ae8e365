use proptest::prelude::*;
use remocap::losses::{mean_speed, SpeedNorm};
use remocap::parallel::Execution;
use remocap::synth::{
    generate_dataset, generate_sample, project_joints, rasterize_frame, read_dataset, read_dataset_from,
    sample_scene, write_dataset, write_dataset_to, Rect, SceneSpec, NUM_JOINTS, RIGID_JOINT_PAIRS,
};
use remocap::tensor::{Tape, Tensor};
use remocap::Error;

fn small_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        frames: 4,
        height: 24,
        width: 20,
        vertices: 6,
        seed,
        ..SceneSpec::default()
    }
}

fn joint(t: &Tensor, f: usize, k: usize) -> [f64; 3] {
    let i = (f * NUM_JOINTS + k) * 3;
    [t.data()[i], t.data()[i + 1], t.data()[i + 2]]
}

#[test]
fn bone_lengths_are_constant_over_time() {
    let spec = SceneSpec::default();
    let mut worst = 0.0f64;
    for index in 0..100 {
        let body = sample_scene(&spec, index).unwrap().target;
        for &(a, b) in &RIGID_JOINT_PAIRS {
            let len = |f| {
                let (p, q) = (joint(&body.joints3d, f, a), joint(&body.joints3d, f, b));
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
            };
            let l0 = len(0);
            assert!(l0 > 0.0);
            for f in 1..spec.frames {
                worst = worst.max((len(f) - l0).abs());
            }
        }
    }
    assert!(worst < 1e-9, "bone length drift {worst} mm");
}

#[test]
fn projection_is_consistent_for_every_frame() {
    let spec = SceneSpec::default();
    for index in 0..20 {
        let body = sample_scene(&spec, index).unwrap().target;
        let cam = body.camera.data();
        for f in 0..spec.frames {
            let j = Tensor::new([NUM_JOINTS, 3], body.joints3d.data()[f * NUM_JOINTS * 3..(f + 1) * NUM_JOINTS * 3].to_vec()).unwrap();
            let p = project_joints(&j, [cam[f * 3], cam[f * 3 + 1], cam[f * 3 + 2]]).unwrap();
            assert_eq!(p.data(), &body.joints2d.data()[f * NUM_JOINTS * 2..(f + 1) * NUM_JOINTS * 2]);
        }
    }
}

#[test]
fn visibility_marks_exactly_the_covered_joints() {
    let spec = SceneSpec {
        occlusion_level: 1.0,
        ..SceneSpec::default()
    };
    let mut hidden = 0;
    for index in 0..30 {
        let scene = sample_scene(&spec, index).unwrap();
        let body = &scene.target;
        for f in 0..spec.frames {
            let rects: Vec<Rect> = scene.occluders.iter().map(|o| o.at(f)).collect();
            for k in 0..NUM_JOINTS {
                let i = (f * NUM_JOINTS + k) * 2;
                let (u, v) = (body.joints2d.data()[i].floor(), body.joints2d.data()[i + 1].floor());
                let on_image = u >= 0.0 && v >= 0.0 && u < spec.width as f64 && v < spec.height as f64;
                let covered = on_image && rects.iter().any(|r| r.covers_pixel(v as usize, u as usize));
                let vis = body.visibility.data()[f * NUM_JOINTS + k];
                assert_eq!(vis, if covered { 0.0 } else { 1.0 });
                hidden += covered as usize;
            }
        }
    }
    assert!(hidden > 0, "no joint was ever occluded at level 1");
}

#[test]
fn occluder_pixel_is_painted_white() {
    let rect = Rect {
        center: [5.5, 3.5],
        half: [0.6, 0.6],
    };
    let img = rasterize_frame(8, 10, &[], &[rect]);
    assert_eq!(img.get(&[0, 3, 5]), 1.0);
    assert_eq!(img.data().iter().filter(|&&v| v != 0.0).count(), 1);
}

#[test]
fn pixels_stay_in_unit_interval() {
    let spec = SceneSpec {
        occlusion_level: 1.0,
        ..SceneSpec::default()
    };
    let data = generate_dataset(&spec, 0, 13, Execution::default()).unwrap();
    let frames: usize = data.iter().map(|s| s.images.shape()[0]).sum();
    assert!(frames >= 100);
    for s in &data {
        assert!(s.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(s.images.data().iter().any(|&v| v > 0.0));
    }
}

#[test]
fn ground_truth_moves() {
    let spec = SceneSpec::default();
    for index in 0..10 {
        let s = generate_sample(&spec, index).unwrap();
        let tape = Tape::new();
        let v = mean_speed(tape.constant(s.body.joints3d), SpeedNorm::JointsTimesFrames).unwrap();
        assert!(v.item() > 0.0);
    }
}

#[test]
fn datasets_are_independent_of_range_and_execution() {
    let spec = small_spec(3);
    let par = generate_dataset(&spec, 5, 6, Execution::default()).unwrap();
    let seq = generate_dataset(&spec, 7, 2, Execution::Sequential).unwrap();
    assert_eq!(&par[2..4], &seq[..]);
    assert_eq!(par[0], generate_sample(&spec, 5).unwrap());
}

#[test]
fn empty_dataset_round_trips() {
    let mut buf = Vec::new();
    write_dataset_to(&mut buf, &[]).unwrap();
    assert!(read_dataset_from(buf.as_slice()).unwrap().is_empty());
}

#[test]
fn file_round_trip_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.rmcd");
    let data = generate_dataset(&small_spec(1), 0, 3, Execution::default()).unwrap();
    write_dataset(&path, &data).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), data);
    let err = read_dataset(&dir.path().join("missing.rmcd")).unwrap_err();
    assert!(matches!(err, Error::File { .. }), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dataset_round_trip_is_bit_exact(seed in any::<u64>(), count in 0usize..4, level in 0.0f64..=1.0) {
        let spec = SceneSpec { occlusion_level: level, ..small_spec(seed) };
        let data = generate_dataset(&spec, seed % 1000, count, Execution::default()).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&mut buf, &data).unwrap();
        let back = read_dataset_from(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), data.len());
        for (a, b) in back.iter().zip(&data) {
            for (x, y) in [(&a.images, &b.images), (&a.body.joints3d, &b.body.joints3d),
                           (&a.body.vertices3d, &b.body.vertices3d), (&a.body.joints2d, &b.body.joints2d),
                           (&a.body.camera, &b.body.camera), (&a.body.visibility, &b.body.visibility)] {
                prop_assert_eq!(x.shape(), y.shape());
                prop_assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
        // Any strict prefix is a truncation error.
        if !buf.is_empty() {
            let cut = buf.len() / 2;
            prop_assert!(matches!(read_dataset_from(&buf[..cut]), Err(Error::Truncated(_))));
        }
    }

    #[test]
    fn zero_occlusion_has_no_occluders(seed in any::<u64>(), index in 0u64..1000) {
        let spec = SceneSpec { occlusion_level: 0.0, ..small_spec(seed) };
        let scene = sample_scene(&spec, index).unwrap();
        prop_assert!(scene.occluders.is_empty());
        prop_assert!(scene.target.visibility.data().iter().all(|&v| v == 1.0));
    }
}
