//! Acceptance suite. Runs every criterion at its stated sample counts and
//! tolerances, prints one PASS/FAIL line per criterion and exits non-zero if
//! any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use mvdet::anchor::{assign_targets, decode_and_nms, generate_anchors, AnchorConfig, AnchorHeadOutput};
use mvdet::boxes::{bev_iou, iou3d, wrap_angle};
use mvdet::center::{decode_centers, extract_peaks, render_targets, CenterConfig, Heatmap};
use mvdet::geometry::{augment_camera, relative_pose, Augmentation, DEFAULT_SCALE_RANGE};
use mvdet::losses::{
    cross_entropy_dir, focal_loss, gaussian_focal, smooth_l1, total_anchor_loss, total_center_loss, AnchorLossParts,
    CenterLossParts, LossWeights, SMOOTH_L1_BETA,
};
use mvdet::metrics::{average_precision, evaluate, ApMode, LetConfig, MatchRecord};
use mvdet::neck::{fuse_gate, BevFeature, FusionGate};
use mvdet::nms::{rotated_nms, score_order};
use mvdet::oracle::{
    brute_assign, brute_nms, brute_peaks, central_difference, lifting_surface_check, raster_bev_iou,
    temporal_surface_check,
};
use mvdet::scene::{generate_scene, perfect_head_maps, RenderedFrame, SceneSpec};
use mvdet::voxel::{lift, lift_temporal, FrameInput};
use mvdet::{Box3D, BoxDelta, CameraRig, GridSpec, ImageFeature, ObjectClass, PinholeCamera, RigCamera, Se3, ViewLabel};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Criterion = (&'static str, fn() -> Result<String>);

fn main() {
    let criteria: [Criterion; 10] = [
        ("geometry round trip", c1_geometry),
        ("lifting oracle", c2_lifting),
        ("temporal static-world consistency", c3_temporal),
        ("rotated IoU", c4_iou),
        ("assignment and NMS oracles", c5_assignment_nms),
        ("loss gradients and weights", c6_losses),
        ("center head round trip", c7_center),
        ("LET metrics", c8_metrics),
        ("fusion gate", c9_gate),
        ("CLI determinism", c10_determinism),
    ];
    let mut failures = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(anyhow::anyhow!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1}s]", k + 1),
            Err(e) => {
                failures += 1;
                println!("criterion {:>2} FAIL  {name}: {e:#} [{secs:.1}s]", k + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}

fn rig_camera(rng: &mut ChaCha8Rng) -> PinholeCamera {
    PinholeCamera::mounted(
        rng.gen_range(200.0..900.0),
        rng.gen_range(200.0..900.0),
        320.0,
        240.0,
        640,
        480,
        Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.0..2.5)),
        rng.gen_range(-3.2..3.2),
        rng.gen_range(-0.3..0.3),
    )
    .expect("valid camera")
}

fn c1_geometry() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_m = 0.0f64;
    for _ in 0..10_000 {
        let cam = rig_camera(&mut rng);
        let (u, v, d) = (rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0), rng.gen_range(0.5..80.0));
        let p = cam.unproject(u, v, d)?;
        let proj = cam.project(&p);
        let back = cam.unproject(proj.u, proj.v, proj.depth)?;
        worst_m = worst_m.max((back - p).norm());
    }
    ensure!(worst_m < 1e-6, "project/unproject error {worst_m:.3e} m");

    let mut worst_px = 0.0f64;
    let mut pairs = 0;
    while pairs < 10_000 {
        let cam = rig_camera(&mut rng);
        let aug = Augmentation {
            scale: rng.gen_range(DEFAULT_SCALE_RANGE.0..DEFAULT_SCALE_RANGE.1),
            crop_origin: [rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0)],
            crop_size: [560, 400],
            hflip: rng.gen_bool(0.5),
        };
        let out = augment_camera(&cam, &aug, DEFAULT_SCALE_RANGE)?;
        let p = Vector3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
        let a = cam.project(&p);
        if a.depth <= 0.1 {
            continue;
        }
        let b = out.project(&p);
        let (u, v) = aug.map_pixel(a.u, a.v);
        worst_px = worst_px.max((b.u - u).abs().max((b.v - v).abs()));
        pairs += 1;
    }
    ensure!(worst_px < 1e-6, "augmentation commutation error {worst_px:.3e} px");
    Ok(format!(
        "10000 round trips max {worst_m:.2e} m; 10000 augmented projections max {worst_px:.2e} px"
    ))
}

fn input(f: &RenderedFrame) -> FrameInput {
    FrameInput {
        rig: f.rig.clone(),
        features: f.features.clone(),
    }
}

fn c2_lifting() -> Result<String> {
    let grid = GridSpec::default();
    let mut summary = Vec::new();
    for seed in 1..=5 {
        let spec = SceneSpec {
            seed,
            ..SceneSpec::default()
        };
        let frame = &generate_scene(&spec)?[0];
        let vol = lift(&frame.features, &frame.rig, &grid)?;
        let check = lifting_surface_check(frame, &grid, &vol);
        ensure!(check.surface_voxels > 0, "seed {seed}: no surface voxels");
        ensure!(
            check.fraction() >= 0.99,
            "seed {seed}: {} of {} surface voxels within half a voxel (max error {:.3})",
            check.within_tolerance,
            check.surface_voxels,
            check.max_error
        );
        summary.push(format!("{}/{}", check.within_tolerance, check.surface_voxels));
    }

    // two cameras with overlapping frusta: every voxel is the plain mean
    let small = GridSpec::new((9.0, 11.0), (-1.0, 1.0), (-1.0, 1.0), [0.5; 3])?;
    let mk = |view, y: f64| -> Result<RigCamera> {
        Ok(RigCamera {
            view,
            camera: PinholeCamera::mounted(50.0, 50.0, 40.0, 30.0, 80, 60, Vector3::new(0.0, y, 0.0), 0.0, 0.0)?,
        })
    };
    let rig = CameraRig::new(vec![mk(ViewLabel::Front, 0.3)?, mk(ViewLabel::FrontLeft, -0.3)?], Se3::identity(), 0)?;
    let fa = ImageFeature::from_fn(ViewLabel::Front, 15, 20, 2, 4.0, |r, c, ch| (r * 31 + c * 7 + ch) as f64 * 0.01)?;
    let fb = ImageFeature::from_fn(ViewLabel::FrontLeft, 15, 20, 2, 4.0, |r, c, ch| ((r + 2 * c) as f64).sin() + ch as f64)?;
    let vol = lift(&[fa.clone(), fb.clone()], &rig, &small)?;
    for idx in 0..small.num_voxels() {
        let [i, j, k] = small.unravel(idx);
        let p = small.center(i, j, k);
        let pa = rig.camera(ViewLabel::Front).expect("front").project(&p);
        let pb = rig.camera(ViewLabel::FrontLeft).expect("front-left").project(&p);
        let sa = fa.sample_bilinear(pa.u, pa.v).context("front sample")?;
        let sb = fb.sample_bilinear(pb.u, pb.v).context("front-left sample")?;
        for ch in 0..2 {
            ensure!(vol.features(i, j, k)[ch] == (sa[ch] + sb[ch]) / 2.0, "voxel {idx} is not the exact mean");
        }
    }
    Ok(format!(
        "surface voxels within tolerance per seed {}; {} two-view voxels equal the exact mean",
        summary.join(", "),
        small.num_voxels()
    ))
}

fn c3_temporal() -> Result<String> {
    let grid = GridSpec::default();
    let mut summary = Vec::new();
    for seed in [5, 6, 7] {
        let spec = SceneSpec {
            seed,
            frames: 2,
            ego_step: 5.0,
            ..SceneSpec::default()
        };
        let frames = generate_scene(&spec)?;
        let (prev, curr) = (&frames[0], &frames[1]);
        let rel = relative_pose(&curr.rig, &prev.rig);
        ensure!((rel.translation() - Vector3::new(5.0, 0.0, 0.0)).norm() < 1e-12, "unexpected relative pose");
        let stereo = lift_temporal(&input(curr), &input(prev), &rel, &grid)?;
        let check = temporal_surface_check(curr, prev, &rel, &grid, &stereo, 0.5);
        ensure!(check.surface_voxels > 0, "seed {seed}: no mutually visible surface voxels");
        ensure!(
            check.fraction() >= 0.99,
            "seed {seed}: {} of {} voxels agree",
            check.within_tolerance,
            check.surface_voxels
        );
        summary.push(format!("{}/{}", check.within_tolerance, check.surface_voxels));
    }

    let small = GridSpec::new((0.0, 30.0), (-10.0, 10.0), (-2.0, 2.0), [1.0; 3])?;
    let spec = SceneSpec {
        seed: 2,
        feature_cols: 32,
        feature_rows: 20,
        stride: 16.0,
        ..SceneSpec::default()
    };
    let f = &generate_scene(&spec)?[0];
    let stereo = lift_temporal(&input(f), &input(f), &Se3::identity(), &small)?;
    for idx in 0..small.num_voxels() {
        ensure!(
            stereo.frame_features_at(idx, 0) == stereo.frame_features_at(idx, 1),
            "copied frame differs at voxel {idx}"
        );
    }
    Ok(format!(
        "5 m motion, agreeing voxels per seed {}; copied-frame halves identical",
        summary.join(", ")
    ))
}

fn random_box(rng: &mut ChaCha8Rng, spread: f64, class: ObjectClass) -> Box3D {
    Box3D::new(
        Vector3::new(rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), rng.gen_range(-1.0..1.0)),
        [rng.gen_range(0.3..5.0), rng.gen_range(0.3..2.5), rng.gen_range(0.5..2.0)],
        rng.gen_range(-3.2..3.2),
        class,
    )
    .expect("valid box")
    .with_score(rng.gen_range(0.0..1.0))
}

fn c4_iou() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let (mut worst, mut worst_rigid) = (0.0f64, 0.0f64);
    let mut overlapping = 0;
    for _ in 0..500 {
        let a = random_box(&mut rng, 2.0, ObjectClass::Car);
        let b = random_box(&mut rng, 2.0, ObjectClass::Car);
        let exact = bev_iou(&a, &b);
        overlapping += usize::from(exact > 0.0);
        worst = worst.max((exact - raster_bev_iou(&a, &b, 2000)).abs());
        let g = Se3::from_euler(0.0, 0.0, rng.gen_range(-3.2..3.2), Vector3::new(
            rng.gen_range(-100.0..100.0),
            rng.gen_range(-100.0..100.0),
            rng.gen_range(-5.0..5.0),
        ));
        let (ta, tb) = (a.transformed(&g), b.transformed(&g));
        worst_rigid = worst_rigid
            .max((bev_iou(&ta, &tb) - exact).abs())
            .max((iou3d(&ta, &tb) - iou3d(&a, &b)).abs());
    }
    ensure!(worst < 2e-3, "raster deviation {worst:.3e}");
    ensure!(worst_rigid < 1e-9, "rigid-transform change {worst_rigid:.3e}");
    Ok(format!(
        "500 pairs ({overlapping} overlapping) max |Δ| {worst:.2e} vs 2000x2000 raster; rigid change {worst_rigid:.1e}"
    ))
}

fn c5_assignment_nms() -> Result<String> {
    let cfg = AnchorConfig::default();
    let thresholds: Vec<(f64, f64)> = cfg.classes.iter().map(|c| (c.pos_iou, c.neg_iou)).collect();
    ensure!(thresholds == vec![(0.6, 0.45), (0.5, 0.35), (0.5, 0.35)], "unexpected thresholds {thresholds:?}");
    let grid = GridSpec::new((0.0, 12.0), (-6.0, 6.0), (-2.0, 2.0), [1.0, 1.0, 4.0])?;
    let anchors = generate_anchors(&grid, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut positives = 0;
    for scene in 0..100 {
        let n = rng.gen_range(0..6);
        let gts: Vec<Box3D> = (0..n)
            .map(|_| {
                let class = ObjectClass::from_index(rng.gen_range(0..3)).expect("class");
                let b = random_box(&mut rng, 5.0, class);
                b.with_center(Vector3::new(b.center.x + 6.0, b.center.y, 0.0))
            })
            .collect();
        let fast = assign_targets(&anchors, &gts, &cfg)?;
        ensure!(fast.labels == brute_assign(&anchors, &gts, &cfg), "labels differ in scene {scene}");
        positives += fast.num_positive();
    }

    let boxes: Vec<Box3D> = (0..1000)
        .map(|_| {
            let class = ObjectClass::from_index(rng.gen_range(0..3)).expect("class");
            random_box(&mut rng, 30.0, class)
        })
        .collect();
    let order = score_order(&boxes);
    let mut kept_total = 0;
    for thr in [0.1, 0.3, 0.5, 0.7] {
        let kept = rotated_nms(&boxes, &order, thr);
        ensure!(kept == brute_nms(&boxes, &order, thr), "NMS kept sets differ at threshold {thr}");
        kept_total += kept.len();
    }

    // 6000 disjoint anchors with distinct scores: only the budgets limit the output
    let spaced: Vec<Box3D> = (0..6000)
        .map(|i| {
            Box3D::new(Vector3::new((i % 100) as f64 * 2.0, (i / 100) as f64 * 2.0, 0.0), [0.5, 0.5, 1.0], 0.0, ObjectClass::Car)
                .expect("valid box")
        })
        .collect();
    let mut out = AnchorHeadOutput {
        scores: vec![0.0; spaced.len() * ObjectClass::COUNT],
        deltas: vec![BoxDelta::default(); spaced.len()],
        dir_logits: vec![[1.0, 0.0]; spaced.len()],
    };
    for i in 0..spaced.len() {
        // a scrambled but distinct score per anchor
        out.scores[i * ObjectClass::COUNT] = ((i * 7919) % 6000 + 1) as f64 / 6001.0;
    }
    let mut ranked: Vec<f64> = (0..spaced.len()).map(|i| out.scores[i * ObjectClass::COUNT]).collect();
    ranked.sort_by(|a, b| b.total_cmp(a));
    let dets = decode_and_nms(&out, &spaced, &cfg)?;
    ensure!(dets.len() == 500, "keep budget: {} detections", dets.len());
    ensure!(dets.iter().map(|d| d.score).eq(ranked[..500].iter().copied()), "kept boxes are not the top 500");
    let loose = AnchorConfig {
        post_nms: usize::MAX,
        ..cfg.clone()
    };
    let dets = decode_and_nms(&out, &spaced, &loose)?;
    ensure!(dets.len() == 4096, "top-k budget: {} candidates survived", dets.len());
    ensure!(dets.iter().map(|d| d.score).eq(ranked[..4096].iter().copied()), "candidates are not the top 4096");
    Ok(format!(
        "100 scenes equal ({positives} positives); 1000-box NMS equal at 4 thresholds ({kept_total} kept); 4096/500 budgets hold"
    ))
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn c6_losses() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let h = 1e-6;
    let mut worst = [0.0f64; 4];
    let mut n_smooth = 0;
    while n_smooth < 1000 {
        let x: f64 = rng.gen_range(-2.0..2.0);
        if (x.abs() - SMOOTH_L1_BETA).abs() <= 1e-4 {
            continue;
        }
        let (_, g) = smooth_l1(x, SMOOTH_L1_BETA);
        worst[1] = worst[1].max(rel_err(g, central_difference(|x| smooth_l1(x, SMOOTH_L1_BETA).0, x, h)));
        n_smooth += 1;
    }
    for i in 0..1000 {
        let p: f64 = rng.gen_range(0.02..0.98);
        let positive = i % 2 == 0;
        let (_, g) = focal_loss(p, positive, 0.25, 2.0);
        worst[0] = worst[0].max(rel_err(g, central_difference(|x| focal_loss(x, positive, 0.25, 2.0).0, p, h)));

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
            worst[2] = worst[2].max(rel_err(g[k], n));
        }

        let pred: f64 = rng.gen_range(0.02..0.98);
        let target = if i % 3 == 0 { 1.0 } else { rng.gen_range(0.0..0.99) };
        let (_, g) = gaussian_focal(&[pred], &[target], 2.0, 4.0)?;
        let n = central_difference(|v| gaussian_focal(&[v], &[target], 2.0, 4.0).map_or(f64::NAN, |r| r.0), pred, h);
        worst[3] = worst[3].max(rel_err(g[0], n));
    }
    let names = ["focal", "smooth-l1", "direction CE", "gaussian focal"];
    for (name, w) in names.iter().zip(worst) {
        ensure!(w < 1e-6, "{name}: worst relative error {w:.3e}");
    }
    let w = LossWeights::default();
    let anchor_total = total_anchor_loss(&AnchorLossParts { cls: 1.0, reg: 1.0, dir: 1.0 }, &w);
    let center_total = total_center_loss(&CenterLossParts { keypoint: 1.0, reg: 1.0 }, &w);
    ensure!(anchor_total == 3.2, "anchor total {anchor_total}");
    ensure!(center_total == 1.25, "center total {center_total}");
    Ok(format!(
        "1000 points per loss, worst relative errors {}; totals {anchor_total} and {center_total}",
        worst.iter().map(|w| format!("{w:.1e}")).collect::<Vec<_>>().join("/")
    ))
}

fn c7_center() -> Result<String> {
    let grid = GridSpec::new((0.0, 30.0), (-15.0, 15.0), (-2.0, 4.0), [0.5, 0.5, 6.0])?;
    let cfg = CenterConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut recovered = 0;
    for scene in 0..20 {
        let mut gts: Vec<Box3D> = Vec::new();
        let n = rng.gen_range(1..=10);
        while gts.len() < n {
            let class = ObjectClass::from_index(rng.gen_range(0..3)).expect("class");
            let b = Box3D::new(
                Vector3::new(rng.gen_range(1.0..29.0), rng.gen_range(-14.0..14.0), rng.gen_range(-1.0..1.0)),
                [rng.gen_range(0.5..5.0), rng.gen_range(0.5..2.5), rng.gen_range(1.0..2.0)],
                rng.gen_range(-3.1..3.1),
                class,
            )?;
            // distinct center cells, spaced beyond every circle-NMS radius
            if gts.iter().all(|o| (o.center.xy() - b.center.xy()).norm() > 4.5) {
                gts.push(b);
            }
        }
        let t = render_targets(&gts, &grid, &cfg);
        let dets = decode_centers(&extract_peaks(&t.heatmap, cfg.max_peaks), &t.regression_map(), &grid, &cfg)?;
        ensure!(dets.len() == gts.len(), "scene {scene}: {} detections for {} boxes", dets.len(), gts.len());
        for gt in &gts {
            let d = dets
                .iter()
                .find(|d| (d.center - gt.center).norm() < 1e-6)
                .with_context(|| format!("scene {scene}: box at {:?} not recovered", gt.center))?;
            ensure!(d.class == gt.class, "scene {scene}: class mismatch");
            ensure!((0..3).all(|k| (d.dims[k] - gt.dims[k]).abs() < 1e-6), "scene {scene}: dims mismatch");
            ensure!(wrap_angle(d.yaw - gt.yaw).abs() < 1e-6, "scene {scene}: yaw mismatch");
            recovered += 1;
        }
    }
    for round in 0..20 {
        let (nx, ny) = (31, 27);
        let data = (0..nx * ny * 3)
            .map(|_| if round % 2 == 0 { rng.gen_range(0..4) as f64 / 4.0 } else { rng.gen_range(0.0..1.0) })
            .collect();
        let h = Heatmap::from_data(nx, ny, data)?;
        ensure!(extract_peaks(&h, 100) == brute_peaks(&h, 100), "peak lists differ in round {round}");
    }
    Ok(format!("{recovered} boxes recovered over 20 scenes; peaks equal the exhaustive scan on 20 maps"))
}

fn records(rows: &[(bool, f64, f64)]) -> Vec<MatchRecord> {
    rows.iter()
        .enumerate()
        .map(|(i, &(tp, score, aff))| MatchRecord {
            frame: 0,
            pred: i,
            gt: tp.then_some(i),
            class: ObjectClass::Car,
            score,
            let_iou: if tp { 1.0 } else { 0.0 },
            affinity: if tp { aff } else { 0.0 },
        })
        .collect()
}

fn c8_metrics() -> Result<String> {
    let grid = GridSpec::default();
    let cfg = LetConfig::default();
    let spec = SceneSpec {
        seed: 4,
        frames: 2,
        feature_cols: 32,
        feature_rows: 20,
        stride: 16.0,
        ..SceneSpec::default()
    };
    let frames = generate_scene(&spec)?;
    let ccfg = CenterConfig::default();
    let preds: Vec<Vec<Box3D>> = perfect_head_maps(&frames, &grid, &ccfg)
        .iter()
        .map(|(h, r)| decode_centers(&extract_peaks(h, ccfg.max_peaks), r, &grid, &ccfg))
        .collect::<mvdet::Result<_>>()?;
    let gts: Vec<Vec<Box3D>> = frames.iter().map(|f| f.gts.clone()).collect();
    let rigs: Vec<CameraRig> = frames.iter().map(|f| f.rig.clone()).collect();
    let report = evaluate(&preds, &gts, Some(&rigs), &cfg)?;
    ensure!(report.map == Some(1.0) && report.mapl == Some(1.0), "perfect: mAP {:?} mAPL {:?}", report.map, report.mapl);

    let shifted: Vec<Vec<Box3D>> = preds
        .iter()
        .zip(&gts)
        .map(|(p, g)| {
            p.iter()
                .map(|b| {
                    let gt = g.iter().find(|gt| (gt.center - b.center).norm() < 1e-6).expect("matching gt");
                    let range = gt.center.norm();
                    b.with_center(b.center + 0.4 * cfg.tolerance(range) * gt.center / range)
                })
                .collect()
        })
        .collect();
    let report = evaluate(&shifted, &gts, Some(&rigs), &cfg)?;
    for c in report.classes.iter().filter(|c| c.num_gt > 0) {
        let (ap, apl) = (c.ap.unwrap_or(f64::NAN), c.apl.unwrap_or(f64::NAN));
        ensure!((ap - 1.0).abs() < 1e-6 && (apl - 0.6).abs() < 1e-6, "{}: AP {ap} APL {apl}", c.class);
    }

    let hand = average_precision(&records(&[(true, 0.9, 1.0), (false, 0.8, 1.0), (true, 0.7, 1.0)]), 2, ApMode::Ap)
        .context("hand example has ground truth")?;
    ensure!((hand - 5.0 / 6.0).abs() < 1e-9, "hand example AP {hand}");

    let mut rng = ChaCha8Rng::seed_from_u64(108);
    for trial in 0..1000 {
        let n = rng.gen_range(1..30);
        let rows: Vec<(bool, f64, f64)> = (0..n)
            .map(|_| (rng.gen_bool(0.5), rng.gen_range(0.0..1.0), rng.gen_range(0.0..=1.0)))
            .collect();
        let gt_count = rows.iter().filter(|r| r.0).count() + rng.gen_range(0..5);
        if gt_count == 0 {
            continue;
        }
        let recs = records(&rows);
        let ap = average_precision(&recs, gt_count, ApMode::Ap).expect("gt present");
        let apl = average_precision(&recs, gt_count, ApMode::Apl).expect("gt present");
        ensure!(apl <= ap, "trial {trial}: APL {apl} > AP {ap}");
    }
    Ok(format!(
        "perfect mAP = mAPL = 1; 0.4·T shift gives AP 1 and APL 0.6; hand example AP {hand:.10}; APL ≤ AP on 1000 trials"
    ))
}

fn bev(nx: usize, ny: usize, c: usize, values: &[f64]) -> Result<BevFeature> {
    Ok(BevFeature::new(nx, ny, c, values.to_vec())?)
}

fn c9_gate() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let (nx, ny, c) = (5, 4, 3);
    let n = nx * ny * c;
    let sample = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect() };
    let (m, s) = (sample(&mut rng), sample(&mut rng));
    let (fused, _) = fuse_gate(&bev(nx, ny, c, &m)?, &bev(nx, ny, c, &s)?, &FusionGate::zeros(c))?;
    for k in 0..n {
        ensure!(fused.data()[k] == 0.5 * (m[k] + s[k]), "zero gate does not average at {k}");
    }
    let hot = FusionGate {
        weight: vec![0.0; 2 * c],
        bias: 50.0,
    };
    let (fused, _) = fuse_gate(&bev(nx, ny, c, &m)?, &bev(nx, ny, c, &s)?, &hot)?;
    let dev = fused.data().iter().zip(&s).map(|(f, s)| (f - s).abs()).fold(0.0, f64::max);
    ensure!(dev < 1e-6, "saturated gate deviates {dev:.3e} from stereo");
    for trial in 0..1000 {
        let (m, s) = (sample(&mut rng), sample(&mut rng));
        let gate = FusionGate {
            weight: (0..2 * c).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            bias: rng.gen_range(-5.0..5.0),
        };
        let (fused, omega) = fuse_gate(&bev(nx, ny, c, &m)?, &bev(nx, ny, c, &s)?, &gate)?;
        for (k, f) in fused.data().iter().enumerate() {
            ensure!(*f >= m[k].min(s[k]) && *f <= m[k].max(s[k]), "trial {trial}: fused value outside paths");
        }
        ensure!(omega.data().iter().all(|o| (0.0..=1.0).contains(o)), "trial {trial}: gate outside [0, 1]");
    }
    Ok(format!("exact averaging; saturated deviation {dev:.1e}; 1000 random gates stay between paths"))
}

fn mvdet_cmd(args: &[&str], threads: Option<usize>) -> Result<()> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mvdet"));
    cmd.args(args);
    match threads {
        Some(n) => cmd.env(mvdet_cli::THREADS_ENV, n.to_string()),
        None => cmd.env_remove(mvdet_cli::THREADS_ENV),
    };
    let out = cmd.output()?;
    if !out.status.success() {
        bail!("mvdet {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    }
    Ok(())
}

fn read_tree(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir)?.to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn c10_determinism() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let root = tmp.path();
    std::fs::write(
        root.join("spec.toml"),
        "seed = 21\nframes = 3\nego_step = 2.0\n[counts]\ncar = 5\npedestrian = 3\ncyclist = 3\n",
    )?;
    std::fs::write(
        root.join("run.toml"),
        "seed = 3\nhead = \"both\"\ntemporal = \"dual\"\n[neck]\nweights = \"neck.bin\"\n",
    )?;
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();
    mvdet_cmd(&["init-weights", "--out", &p("neck.bin"), "--seed", "5", "--config", &p("run.toml")], None)?;

    let mut runs = Vec::new();
    for (k, threads) in [None, None, Some(1), Some(4)].into_iter().enumerate() {
        let scene = p(&format!("scene{k}"));
        let preds = p(&format!("preds{k}.txt"));
        let report = p(&format!("report{k}.txt"));
        mvdet_cmd(&["gen", "--spec", &p("spec.toml"), "--out", &scene], threads)?;
        mvdet_cmd(&["detect", "--config", &p("run.toml"), "--scenes", &scene, "--out", &preds], threads)?;
        mvdet_cmd(
            &["eval", "--preds", &preds, "--scenes", &scene, "--config", &p("run.toml"), "--report", &report],
            threads,
        )?;
        let files = (
            read_tree(Path::new(&scene))?,
            std::fs::read(&preds)?,
            std::fs::read(&report)?,
            std::fs::read(format!("{report}.csv"))?,
        );
        runs.push(files);
    }
    let labels = ["repeat run", "1 thread", "4 threads"];
    for (label, run) in labels.iter().zip(&runs[1..]) {
        ensure!(run.0 == runs[0].0, "{label}: scene files differ");
        ensure!(run.1 == runs[0].1, "{label}: predictions differ");
        ensure!(run.2 == runs[0].2 && run.3 == runs[0].3, "{label}: reports differ");
    }
    let n_preds = String::from_utf8_lossy(&runs[0].1).lines().filter(|l| !l.starts_with('#')).count();
    Ok(format!(
        "gen/detect/eval byte-identical over 2 default runs, 1 and 4 threads ({} scene files, {n_preds} predictions)",
        runs[0].0.len()
    ))
}
