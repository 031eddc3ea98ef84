use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mvdet::anchor::{assign_targets, decode_and_nms, generate_anchors, AnchorHeadOutput, LinearAnchorHead};
use mvdet::center::{decode_centers, extract_peaks, render_targets, LinearCenterHead};
use mvdet::geometry::relative_pose;
use mvdet::metrics::{ensemble_merge, evaluate, ClassReport, EvalReport, LetConfig};
use mvdet::neck::{collapse_to_bev, dual_path_forward, DualPathWeights};
use mvdet::scene::{generate_scene, SceneSpec, FEATURE_CHANNELS};
use mvdet::voxel::{concat_frames, lift, lift_temporal, select_previous_frame, FrameInput};
use mvdet::{Box3D, GridSpec};

use crate::config::{HeadKind, RunConfig, TemporalMode};
use crate::format::{flatten_frames, fmt_sig9, write_boxes};
use crate::scene_dir::{read_boxes, read_rigs, read_scene, write_scene, SceneData};
use crate::selftest;

#[derive(Debug, Parser)]
#[command(name = "mvdet", version, about = "Multi-view camera 3D detection toolkit on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene into a scene directory.
    Gen(GenArgs),
    /// Run lifting, neck and heads over a scene directory.
    Detect(DetectArgs),
    /// Score predictions with LET-3D-AP and LET-3D-APL.
    Eval(EvalArgs),
    /// Run the built-in oracle suites.
    Selftest(SelftestArgs),
    /// Write seeded neck weights.
    InitWeights(InitWeightsArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Scene spec (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the scene file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub scenes: PathBuf,
    /// Prediction file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub head: Option<HeadKind>,
    #[arg(long, value_enum)]
    pub temporal: Option<TemporalMode>,
    /// Overrides the config's head seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Decode ideal head outputs built from the ground truth.
    #[arg(long)]
    pub oracle_maps: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub preds: PathBuf,
    /// Scene directory supplying ground truth and rigs.
    #[arg(long, conflicts_with_all = ["gt", "rigs"])]
    pub scenes: Option<PathBuf>,
    /// Ground-truth box file, used when no scene directory is given.
    #[arg(long, required_unless_present = "scenes")]
    pub gt: Option<PathBuf>,
    /// Rig file enabling the per-view breakdown.
    #[arg(long, requires = "gt")]
    pub rigs: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Text report; PR samples go to the same path with `.csv` appended.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Neck weights to check; seeded weights are used otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InitWeightsArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Takes the vertical voxel count from this config's grid.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = FEATURE_CHANNELS)]
    pub channels: usize,
    /// Frames in the stereo volume.
    #[arg(long, default_value_t = 2)]
    pub frames: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Detect(a) => cmd_detect(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Selftest(a) => cmd_selftest(&a),
        Command::InitWeights(a) => cmd_init_weights(&a),
    }
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let text = fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let mut spec: SceneSpec = toml::from_str(&text).with_context(|| format!("parsing {}", args.spec.display()))?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let frames = generate_scene(&spec)?;
    let scene = SceneData::from_rendered(&frames);
    write_scene(&args.out, &spec, &scene)?;
    println!(
        "wrote {} frame(s) with {} object(s) to {}",
        scene.frames(),
        spec.counts.total(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_detect(args: &DetectArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(h) = args.head {
        cfg.head = h;
    }
    if let Some(t) = args.temporal {
        cfg.temporal = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.oracle_maps |= args.oracle_maps;
    cfg.validate()?;
    let scene = read_scene(&args.scenes)?;
    let preds = detect_scene(&cfg, &scene)?;
    fs::write(&args.out, write_boxes(&flatten_frames(&preds)))
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} prediction(s) over {} frame(s) to {}",
        preds.iter().map(Vec::len).sum::<usize>(),
        preds.len(),
        args.out.display()
    );
    Ok(())
}

/// Runs the configured pipeline over every frame of `scene`.
pub fn detect_scene(cfg: &RunConfig, scene: &SceneData) -> Result<Vec<Vec<Box3D>>> {
    if cfg.oracle_maps {
        return (0..scene.frames()).map(|f| oracle_frame(cfg, &scene.gts[f])).collect();
    }
    let path = cfg
        .neck
        .weights
        .as_ref()
        .ok_or_else(|| anyhow!("neck weights are required; set `weights` under [neck]"))?;
    let weights = DualPathWeights::load(path).with_context(|| format!("loading neck weights {}", path.display()))?;
    check_weights(cfg, scene, &weights)?;
    (0..scene.frames())
        .map(|f| detect_frame(cfg, scene, f, &weights).with_context(|| format!("frame {f}")))
        .collect()
}

fn check_weights(cfg: &RunConfig, scene: &SceneData, w: &DualPathWeights) -> Result<()> {
    let nz = cfg.grid.dims()[2];
    if w.mono.input_nz != nz {
        bail!("neck weights expect {} vertical voxels, grid has {nz}", w.mono.input_nz);
    }
    if let Some(feat) = scene.features.first().and_then(|f| f.first()) {
        if feat.channels() != w.mono.in_channels {
            bail!(
                "neck weights expect {} feature channels, scene has {}",
                w.mono.in_channels,
                feat.channels()
            );
        }
    }
    if cfg.temporal == TemporalMode::Dual && w.frames() != 2 {
        bail!("dual-path mode needs two-frame stereo weights, file has {}", w.frames());
    }
    Ok(())
}

fn oracle_frame(cfg: &RunConfig, gts: &[Box3D]) -> Result<Vec<Box3D>> {
    let center = || -> Result<Vec<Box3D>> {
        let t = render_targets(gts, &cfg.grid, &cfg.center);
        let peaks = extract_peaks(&t.heatmap, cfg.center.max_peaks);
        Ok(decode_centers(&peaks, &t.regression_map(), &cfg.grid, &cfg.center)?)
    };
    let anchor = || -> Result<Vec<Box3D>> {
        let anchors = generate_anchors(&cfg.grid, &cfg.anchor);
        let assignment = assign_targets(&anchors, gts, &cfg.anchor)?;
        let out = AnchorHeadOutput::from_assignment(&anchors, &assignment);
        Ok(decode_and_nms(&out, &anchors, &cfg.anchor)?)
    };
    run_heads(cfg, anchor, center)
}

fn run_heads(
    cfg: &RunConfig,
    anchor: impl FnOnce() -> Result<Vec<Box3D>>,
    center: impl FnOnce() -> Result<Vec<Box3D>>,
) -> Result<Vec<Box3D>> {
    match cfg.head {
        HeadKind::Anchor => anchor(),
        HeadKind::Center => center(),
        HeadKind::Both => Ok(ensemble_merge(&[anchor()?, center()?], cfg.anchor.nms_iou)?),
    }
}

fn detect_frame(cfg: &RunConfig, scene: &SceneData, f: usize, w: &DualPathWeights) -> Result<Vec<Box3D>> {
    let grid = &cfg.grid;
    let act = cfg.neck.activation;
    let mono_vol = lift(&scene.features[f], &scene.rigs[f], grid)?;
    let bev = match cfg.temporal {
        TemporalMode::Mono => collapse_to_bev(&mono_vol, &w.mono, act)?,
        TemporalMode::Dual => {
            let history: Vec<u64> = (0..f as u64).collect();
            let stereo_vol = match select_previous_frame(&history, cfg.frame_sampling(f)) {
                Some(p) => {
                    let p = p as usize;
                    let frame = |i: usize| FrameInput {
                        rig: scene.rigs[i].clone(),
                        features: scene.features[i].clone(),
                    };
                    let rel = relative_pose(&scene.rigs[f], &scene.rigs[p]);
                    lift_temporal(&frame(f), &frame(p), &rel, grid)?
                }
                // no earlier frame: the current one stands in for it
                None => concat_frames(&[mono_vol.clone(), mono_vol.clone()])?,
            };
            dual_path_forward(&mono_vol, &stereo_vol, w, act)?.fused
        }
    };
    let anchor = || -> Result<Vec<Box3D>> {
        let anchors = generate_anchors(grid, &cfg.anchor);
        let head = LinearAnchorHead::seeded(bev.channels(), &cfg.anchor, cfg.seed);
        Ok(decode_and_nms(&head.forward(&bev)?, &anchors, &cfg.anchor)?)
    };
    let center = || -> Result<Vec<Box3D>> {
        let head = LinearCenterHead::seeded(bev.channels(), cfg.seed.wrapping_add(1));
        let (heat, reg) = head.forward(&bev)?;
        let peaks = extract_peaks(&heat, cfg.center.max_peaks);
        Ok(decode_centers(&peaks, &reg, grid, &cfg.center)?)
    };
    run_heads(cfg, anchor, center)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let let_cfg = match &args.config {
        Some(p) => RunConfig::load(p)?.let_metric,
        None => LetConfig::default(),
    };
    let (gts, rigs) = match (&args.scenes, &args.gt) {
        (Some(dir), _) => {
            let rigs = read_rigs(&dir.join("rigs.txt"))?;
            (read_boxes(&dir.join("gt.txt"), rigs.len())?, Some(rigs))
        }
        (None, Some(gt)) => match &args.rigs {
            Some(r) => {
                let rigs = read_rigs(r)?;
                (read_boxes(gt, rigs.len())?, Some(rigs))
            }
            None => {
                let frames = frame_count(gt)?.max(frame_count(&args.preds)?);
                (read_boxes(gt, frames)?, None)
            }
        },
        (None, None) => bail!("either --scenes or --gt is required"),
    };
    let preds = read_boxes(&args.preds, gts.len())?;
    let report = evaluate(&preds, &gts, rigs.as_deref(), &let_cfg)?;
    fs::write(&args.report, report_text(&report, gts.len()))
        .with_context(|| format!("writing {}", args.report.display()))?;
    let csv = csv_path(&args.report);
    fs::write(&csv, report_csv(&report)).with_context(|| format!("writing {}", csv.display()))?;
    println!("mAP {}  mAPL {}", opt(report.map), opt(report.mapl));
    Ok(())
}

/// One past the largest frame id in a box file.
fn frame_count(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let boxes = crate::format::parse_boxes(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(boxes.iter().map(|b| b.frame + 1).max().unwrap_or(0))
}

pub fn csv_path(report: &Path) -> PathBuf {
    let mut s = report.as_os_str().to_owned();
    s.push(".csv");
    s.into()
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_sig9).unwrap_or_else(|| "n/a".into())
}

fn class_table(out: &mut String, indent: &str, classes: &[ClassReport], map: Option<f64>, mapl: Option<f64>) {
    let _ = writeln!(out, "{indent}{:<12} {:>7} {:>8} {:>12} {:>12}", "class", "num_gt", "num_pred", "APL", "AP");
    for c in classes {
        let _ = writeln!(
            out,
            "{indent}{:<12} {:>7} {:>8} {:>12} {:>12}",
            c.class.as_str(),
            c.num_gt,
            c.num_pred,
            opt(c.apl),
            opt(c.ap)
        );
    }
    let _ = writeln!(out, "{indent}{:<12} {:>7} {:>8} {:>12} {:>12}", "mean", "", "", opt(mapl), opt(map));
}

pub fn report_text(report: &EvalReport, frames: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# LET-3D evaluation over {frames} frame(s)");
    class_table(&mut out, "", &report.classes, report.map, report.mapl);
    let _ = writeln!(out, "mAPL {}", opt(report.mapl));
    let _ = writeln!(out, "mAP {}", opt(report.map));
    for v in &report.views {
        let name = v.view.map_or("none", |v| v.as_str());
        let _ = writeln!(out, "\nview {name}");
        class_table(&mut out, "  ", &v.classes, v.map, v.mapl);
    }
    out
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("scope,class,score,recall,precision,precision_l\n");
    let scopes = std::iter::once(("all", &report.classes))
        .chain(report.views.iter().map(|v| (v.view.map_or("none", |v| v.as_str()), &v.classes)));
    for (scope, classes) in scopes {
        for c in classes {
            for p in &c.pr {
                let _ = writeln!(
                    out,
                    "{scope},{},{},{},{},{}",
                    c.class,
                    fmt_sig9(p.score),
                    fmt_sig9(p.recall),
                    fmt_sig9(p.precision),
                    fmt_sig9(p.precision_l)
                );
            }
        }
    }
    out
}

pub fn cmd_selftest(args: &SelftestArgs) -> Result<()> {
    let results = selftest::run_all(args.weights.as_deref());
    let mut failed = Vec::new();
    for r in &results {
        match &r.outcome {
            Ok(detail) => println!("PASS {:<18} {detail}", r.name),
            Err(e) => {
                println!("FAIL {:<18} {e:#}", r.name);
                failed.push(r.name);
            }
        }
    }
    if failed.is_empty() {
        println!("all {} suites passed", results.len());
        Ok(())
    } else {
        bail!("failed suites: {}", failed.join(", "))
    }
}

pub fn cmd_init_weights(args: &InitWeightsArgs) -> Result<()> {
    let grid = match &args.config {
        Some(p) => RunConfig::load(p)?.grid,
        None => GridSpec::default(),
    };
    if args.channels == 0 || args.frames == 0 {
        bail!("channels and frames must be positive");
    }
    let w = DualPathWeights::seeded(args.channels, args.frames, grid.dims()[2], args.seed);
    w.save(&args.out)?;
    println!("wrote neck weights to {}", args.out.display());
    Ok(())
}
