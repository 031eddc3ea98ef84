//! Reduced-size versions of the oracle checks, runnable from the binary.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use mvdet::anchor::{assign_targets, generate_anchors, AnchorConfig};
use mvdet::boxes::bev_iou;
use mvdet::losses::{cross_entropy_dir, focal_loss, gaussian_focal, smooth_l1, SMOOTH_L1_BETA};
use mvdet::neck::{dual_path_forward, Activation, DualPathWeights};
use mvdet::nms::{rotated_nms, score_order};
use mvdet::oracle::{brute_assign, brute_nms, central_difference, hull_bev_iou, lifting_surface_check, raster_bev_iou};
use mvdet::scene::{generate_scene, SceneSpec};
use mvdet::voxel::lift;
use mvdet::{Box3D, FeatureVolume, GridSpec, ObjectClass};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct SuiteResult {
    pub name: &'static str,
    /// A one-line summary on success.
    pub outcome: Result<String>,
}

pub fn run_all(weights: Option<&Path>) -> Vec<SuiteResult> {
    let suites: [(&'static str, Box<dyn Fn() -> Result<String>>); 6] = [
        ("iou_raster", Box::new(iou_raster)),
        ("nms_bruteforce", Box::new(nms_bruteforce)),
        ("assignment", Box::new(assignment)),
        ("gradients", Box::new(gradients)),
        ("lifting_roundtrip", Box::new(lifting_roundtrip)),
        ("neck", Box::new(move || neck(weights))),
    ];
    suites
        .into_iter()
        .map(|(name, f)| SuiteResult { name, outcome: f() })
        .collect()
}

fn random_box(rng: &mut ChaCha8Rng, spread: f64) -> Box3D {
    let class = ObjectClass::from_index(rng.gen_range(0..3)).expect("class index");
    Box3D::new(
        Vector3::new(rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), 0.0),
        [rng.gen_range(0.5..5.0), rng.gen_range(0.5..2.5), 1.5],
        rng.gen_range(-3.2..3.2),
        class,
    )
    .expect("valid box")
    .with_score(rng.gen_range(0.0..1.0))
}

fn iou_raster() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (a, b) = (random_box(&mut rng, 2.0), random_box(&mut rng, 2.0));
        let exact = bev_iou(&a, &b);
        let hull = hull_bev_iou(&a, &b);
        ensure!((exact - hull).abs() < 1e-9, "clipping {exact} vs hull {hull}");
        worst = worst.max((exact - raster_bev_iou(&a, &b, 400)).abs());
    }
    ensure!(worst < 1e-2, "raster deviation {worst}");
    Ok(format!("50 pairs, max raster deviation {worst:.2e}"))
}

fn nms_bruteforce() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let boxes: Vec<Box3D> = (0..200).map(|_| random_box(&mut rng, 20.0)).collect();
    let order = score_order(&boxes);
    for thr in [0.1, 0.3, 0.7] {
        ensure!(
            rotated_nms(&boxes, &order, thr) == brute_nms(&boxes, &order, thr),
            "kept sets differ at threshold {thr}"
        );
    }
    Ok("200 boxes at 3 thresholds".into())
}

fn assignment() -> Result<String> {
    let grid = GridSpec::new((0.0, 12.0), (-6.0, 6.0), (-2.0, 2.0), [1.0, 1.0, 4.0])?;
    let cfg = AnchorConfig::default();
    let anchors = generate_anchors(&grid, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for scene in 0..10 {
        let n = rng.gen_range(0..5);
        let gts: Vec<Box3D> = (0..n)
            .map(|_| {
                let b = random_box(&mut rng, 5.0);
                b.with_center(Vector3::new(b.center.x + 6.0, b.center.y, 0.0))
            })
            .collect();
        let fast = assign_targets(&anchors, &gts, &cfg)?;
        ensure!(fast.labels == brute_assign(&anchors, &gts, &cfg), "labels differ in scene {scene}");
    }
    Ok("10 scenes".into())
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn gradients() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p: f64 = rng.gen_range(0.02..0.98);
        for positive in [true, false] {
            let (_, g) = focal_loss(p, positive, 0.25, 2.0);
            worst = worst.max(rel_err(g, central_difference(|x| focal_loss(x, positive, 0.25, 2.0).0, p, h)));
        }
        let x: f64 = rng.gen_range(-2.0..2.0);
        if (x.abs() - SMOOTH_L1_BETA).abs() > 1e-4 {
            let (_, g) = smooth_l1(x, SMOOTH_L1_BETA);
            worst = worst.max(rel_err(g, central_difference(|x| smooth_l1(x, SMOOTH_L1_BETA).0, x, h)));
        }
        let logits = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
        let bin = rng.gen_range(0..2);
        let (_, g) = cross_entropy_dir(logits, bin);
        for k in 0..2 {
            let n = central_difference(
                |v| {
                    let mut l = logits;
                    l[k] = v;
                    cross_entropy_dir(l, bin).0
                },
                logits[k],
                h,
            );
            worst = worst.max(rel_err(g[k], n));
        }
        let (pred, target) = (rng.gen_range(0.02..0.98), rng.gen_range(0.0..0.99));
        let (_, g) = gaussian_focal(&[pred], &[target], 2.0, 4.0)?;
        let n = central_difference(|v| gaussian_focal(&[v], &[target], 2.0, 4.0).map_or(f64::NAN, |r| r.0), pred, h);
        worst = worst.max(rel_err(g[0], n));
    }
    ensure!(worst < 1e-6, "worst relative gradient error {worst:.2e}");
    Ok(format!("100 points per loss, worst relative error {worst:.2e}"))
}

fn lifting_roundtrip() -> Result<String> {
    let spec = SceneSpec {
        seed: 11,
        ..SceneSpec::default()
    };
    let frames = generate_scene(&spec)?;
    let grid = GridSpec::default();
    let vol = lift(&frames[0].features, &frames[0].rig, &grid)?;
    let check = lifting_surface_check(&frames[0], &grid, &vol);
    ensure!(check.surface_voxels > 0, "no surface voxels found");
    ensure!(
        check.fraction() >= 0.99,
        "{} of {} surface voxels within tolerance",
        check.within_tolerance,
        check.surface_voxels
    );
    Ok(format!(
        "{} surface voxels, {:.2}% within half a voxel",
        check.surface_voxels,
        100.0 * check.fraction()
    ))
}

fn neck(weights: Option<&Path>) -> Result<String> {
    let w = match weights {
        Some(p) => DualPathWeights::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            // seeded weights must also survive a save/load round trip
            let seeded = DualPathWeights::seeded(4, 2, 12, 42);
            let dir = std::env::temp_dir().join(format!("mvdet-selftest-{}", std::process::id()));
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("neck.bin");
            seeded.save(&path)?;
            let loaded = DualPathWeights::load(&path);
            let _ = std::fs::remove_dir_all(&dir);
            let loaded = loaded?;
            ensure!(loaded == seeded, "weights changed across save/load");
            loaded
        }
    };
    let nz = w.mono.input_nz;
    let grid = GridSpec::new((0.0, 4.0), (0.0, 3.0), (0.0, nz as f64 * 0.5), [0.5; 3])?;
    let volume = |channels: usize, frames: usize, phase: f64| {
        let n = grid.num_voxels();
        let data = (0..n * channels).map(|i| ((i as f64) * 0.37 + phase).sin()).collect();
        FeatureVolume::from_parts(grid, channels, frames, data, vec![true; n])
    };
    let c = w.mono.in_channels;
    let out = dual_path_forward(&volume(c, 1, 0.0)?, &volume(c * w.frames(), w.frames(), 0.5)?, &w, Activation::Relu)?;
    if out.fused.data().iter().any(|v| !v.is_finite()) {
        bail!("non-finite fused features");
    }
    ensure!(out.omega.data().iter().all(|o| (0.0..=1.0).contains(o)), "gate outside [0, 1]");
    for ((f, m), s) in out.fused.data().iter().zip(out.mono.data()).zip(out.stereo.data()) {
        ensure!(*f >= m.min(*s) && *f <= m.max(*s), "fused value outside the two paths");
    }
    Ok(format!("{c} channels, {} frames, {nz} vertical voxels", w.frames()))
}
