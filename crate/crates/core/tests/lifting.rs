use mvdet::geometry::{relative_pose, PinholeCamera, RigCamera};
use mvdet::oracle::{lifting_surface_check, temporal_surface_check};
use mvdet::scene::{generate_scene, SceneSpec};
use mvdet::voxel::{lift, lift_temporal, FrameInput};
use mvdet::{CameraRig, GridSpec, ImageFeature, Se3, ViewLabel};
use nalgebra::Vector3;

fn input(f: &mvdet::scene::RenderedFrame) -> FrameInput {
    FrameInput {
        rig: f.rig.clone(),
        features: f.features.clone(),
    }
}

#[test]
fn surface_voxels_carry_their_coordinates() {
    let grid = GridSpec::default();
    let spec = SceneSpec {
        seed: 11,
        ..SceneSpec::default()
    };
    let frame = &generate_scene(&spec).unwrap()[0];
    let vol = lift(&frame.features, &frame.rig, &grid).unwrap();
    let check = lifting_surface_check(frame, &grid, &vol);
    println!("{check:?}");
    assert!(check.surface_voxels > 50);
    assert!(check.fraction() >= 0.99, "{check:?}");
}

#[test]
fn overlap_voxel_is_exact_mean_of_two_views() {
    let grid = GridSpec::new((9.0, 11.0), (-1.0, 1.0), (-1.0, 1.0), [0.5; 3]).unwrap();
    let mk = |view, y: f64| RigCamera {
        view,
        camera: PinholeCamera::mounted(50.0, 50.0, 40.0, 30.0, 80, 60, Vector3::new(0.0, y, 0.0), 0.0, 0.0).unwrap(),
    };
    let rig = CameraRig::new(vec![mk(ViewLabel::Front, 0.3), mk(ViewLabel::FrontLeft, -0.3)], Se3::identity(), 0).unwrap();
    let fa = ImageFeature::from_fn(ViewLabel::Front, 15, 20, 2, 4.0, |r, c, ch| (r * 31 + c * 7 + ch) as f64 * 0.01).unwrap();
    let fb = ImageFeature::from_fn(ViewLabel::FrontLeft, 15, 20, 2, 4.0, |r, c, ch| ((r + 2 * c) as f64).sin() + ch as f64).unwrap();
    let vol = lift(&[fa.clone(), fb.clone()], &rig, &grid).unwrap();
    for idx in 0..grid.num_voxels() {
        let [i, j, k] = grid.unravel(idx);
        let p = grid.center(i, j, k);
        let pa = rig.camera(ViewLabel::Front).unwrap().project(&p);
        let pb = rig.camera(ViewLabel::FrontLeft).unwrap().project(&p);
        let sa = fa.sample_bilinear(pa.u, pa.v).unwrap();
        let sb = fb.sample_bilinear(pb.u, pb.v).unwrap();
        for ch in 0..2 {
            assert_eq!(vol.features(i, j, k)[ch], (sa[ch] + sb[ch]) / 2.0);
        }
    }
}

#[test]
fn static_world_agrees_across_five_meters_of_motion() {
    let grid = GridSpec::default();
    let spec = SceneSpec {
        seed: 5,
        frames: 2,
        ego_step: 5.0,
        ..SceneSpec::default()
    };
    let frames = generate_scene(&spec).unwrap();
    let (prev, curr) = (&frames[0], &frames[1]);
    let rel = relative_pose(&curr.rig, &prev.rig);
    assert!((rel.translation() - Vector3::new(5.0, 0.0, 0.0)).norm() < 1e-12);
    let stereo = lift_temporal(&input(curr), &input(prev), &rel, &grid).unwrap();
    let check = temporal_surface_check(curr, prev, &rel, &grid, &stereo, 0.5);
    println!("{check:?}");
    assert!(check.surface_voxels > 50);
    assert!(check.fraction() >= 0.99, "{check:?}");
}

#[test]
fn copied_frame_duplicates_channel_halves() {
    let grid = GridSpec::new((0.0, 30.0), (-10.0, 10.0), (-2.0, 2.0), [1.0; 3]).unwrap();
    let spec = SceneSpec {
        seed: 2,
        feature_cols: 32,
        feature_rows: 20,
        stride: 16.0,
        ..SceneSpec::default()
    };
    let f = &generate_scene(&spec).unwrap()[0];
    let stereo = lift_temporal(&input(f), &input(f), &Se3::identity(), &grid).unwrap();
    for idx in 0..grid.num_voxels() {
        assert_eq!(stereo.frame_features_at(idx, 0), stereo.frame_features_at(idx, 1));
    }
}
