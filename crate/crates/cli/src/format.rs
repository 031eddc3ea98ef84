//! Text and binary file formats shared by the commands.
//!
//! Boxes are one record per line, `frame_id class cx cy cz l w h yaw score`,
//! with floats printed to nine significant digits. Rigs are labeled blocks:
//!
//! ```text
//! frame <id> <timestamp> <ego_from_world: 9 rotation + 3 translation>
//! camera <view> <fx> <fy> <cx> <cy> <width> <height> <mirrored 0|1> <cam_from_ego: 12 numbers>
//! end
//! ```
//!
//! Rig numbers use the shortest representation that parses back to the same
//! `f64`, so poses survive the rotation validity check unchanged. Lines
//! starting with `#` are comments. Feature maps are little-endian binaries:
//! magic `MVDETIMG`, view index (u8), rows, cols, channels (u32), stride and
//! row-major values (f64).

use std::fmt::Write as _;
use std::io::{Read, Write};

use anyhow::{anyhow, bail, Context, Result};
use mvdet::{Box3D, CameraRig, ImageFeature, ObjectClass, PinholeCamera, RigCamera, Se3, ViewLabel};
use nalgebra::{Matrix3, Vector3};

pub const BOX_HEADER: &str = "# frame_id class cx cy cz l w h yaw score";

/// Formats `v` with nine significant digits, positional where that stays
/// short and scientific otherwise; trailing zeros are dropped.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_finite() { "0".into() } else { format!("{v}") };
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..15).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        trim_zeros(s)
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn parse_f64(tok: &str, what: &str) -> Result<f64> {
    let v: f64 = tok.parse().with_context(|| format!("{what}: `{tok}` is not a number"))?;
    if !v.is_finite() {
        bail!("{what}: `{tok}` is not finite");
    }
    Ok(v)
}

/// A box tagged with its frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameBox {
    pub frame: usize,
    pub bbox: Box3D,
}

pub fn write_boxes(boxes: &[FrameBox]) -> String {
    let mut out = String::from(BOX_HEADER);
    out.push('\n');
    for fb in boxes {
        let b = &fb.bbox;
        let vals = [
            b.center.x, b.center.y, b.center.z, b.dims[0], b.dims[1], b.dims[2], b.yaw, b.score,
        ];
        let _ = write!(out, "{} {}", fb.frame, b.class);
        for v in vals {
            out.push(' ');
            out.push_str(&fmt_sig9(v));
        }
        out.push('\n');
    }
    out
}

/// Parses box records; errors name the offending line.
pub fn parse_boxes(text: &str) -> Result<Vec<FrameBox>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let rec = parse_box_line(line).with_context(|| format!("line {}: `{line}`", n + 1))?;
        out.push(rec);
    }
    Ok(out)
}

fn parse_box_line(line: &str) -> Result<FrameBox> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 10 {
        bail!("expected 10 fields, found {}", toks.len());
    }
    let frame: usize = toks[0]
        .parse()
        .with_context(|| format!("frame_id `{}` is not a non-negative integer", toks[0]))?;
    let class: ObjectClass = toks[1].parse().map_err(|e| anyhow!("{e}"))?;
    let names = ["cx", "cy", "cz", "l", "w", "h", "yaw", "score"];
    let mut v = [0.0; 8];
    for (k, name) in names.iter().enumerate() {
        v[k] = parse_f64(toks[k + 2], name)?;
    }
    let bbox = Box3D::new(Vector3::new(v[0], v[1], v[2]), [v[3], v[4], v[5]], v[6], class)?.with_score(v[7]);
    Ok(FrameBox { frame, bbox })
}

/// Groups boxes into `frames` per-frame lists, keeping file order.
pub fn group_by_frame(boxes: &[FrameBox], frames: usize) -> Result<Vec<Vec<Box3D>>> {
    let mut out = vec![Vec::new(); frames];
    for fb in boxes {
        out.get_mut(fb.frame)
            .ok_or_else(|| anyhow!("frame_id {} outside 0..{frames}", fb.frame))?
            .push(fb.bbox);
    }
    Ok(out)
}

pub fn flatten_frames(frames: &[Vec<Box3D>]) -> Vec<FrameBox> {
    frames
        .iter()
        .enumerate()
        .flat_map(|(frame, boxes)| boxes.iter().map(move |&bbox| FrameBox { frame, bbox }))
        .collect()
}

fn push_se3(out: &mut String, t: &Se3) {
    let r = t.rotation();
    for i in 0..3 {
        for j in 0..3 {
            let _ = write!(out, " {}", r[(i, j)]);
        }
    }
    for v in t.translation().iter() {
        let _ = write!(out, " {v}");
    }
}

fn parse_se3(toks: &[&str], what: &str) -> Result<Se3> {
    if toks.len() != 12 {
        bail!("{what}: expected 12 numbers, found {}", toks.len());
    }
    let v: Vec<f64> = toks
        .iter()
        .map(|t| parse_f64(t, what))
        .collect::<Result<_>>()?;
    let rot = Matrix3::from_row_slice(&v[..9]);
    Ok(Se3::new(rot, Vector3::new(v[9], v[10], v[11]))?)
}

pub fn write_rigs(rigs: &[CameraRig]) -> String {
    let mut out = String::from("# frame <id> <timestamp> <ego_from_world>\n# camera <view> fx fy cx cy width height mirrored <cam_from_ego>\n");
    for (f, rig) in rigs.iter().enumerate() {
        let _ = write!(out, "frame {f} {}", rig.timestamp);
        push_se3(&mut out, &rig.ego_from_world);
        out.push('\n');
        for rc in rig.cameras() {
            let c = &rc.camera;
            let _ = write!(
                out,
                "camera {} {} {} {} {} {} {} {}",
                rc.view,
                c.fx,
                c.fy,
                c.cx,
                c.cy,
                c.width,
                c.height,
                u8::from(c.mirrored)
            );
            push_se3(&mut out, &c.cam_from_ego);
            out.push('\n');
        }
        out.push_str("end\n");
    }
    out
}

pub fn parse_rigs(text: &str) -> Result<Vec<CameraRig>> {
    let mut rigs = Vec::new();
    let mut current: Option<(Se3, u64, Vec<RigCamera>)> = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ctx = || format!("rig line {}: `{line}`", n + 1);
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "frame" => {
                if current.is_some() {
                    bail!("{}: previous frame block not closed", ctx());
                }
                if toks.len() != 15 {
                    bail!("{}: expected frame id, timestamp and 12 pose numbers", ctx());
                }
                let id: usize = toks[1].parse().with_context(ctx)?;
                if id != rigs.len() {
                    bail!("{}: frame {id} out of sequence, expected {}", ctx(), rigs.len());
                }
                let ts: u64 = toks[2].parse().with_context(ctx)?;
                let pose = parse_se3(&toks[3..], "ego_from_world").with_context(ctx)?;
                current = Some((pose, ts, Vec::new()));
            }
            "camera" => {
                let Some((_, _, cams)) = current.as_mut() else {
                    bail!("{}: camera outside a frame block", ctx());
                };
                if toks.len() != 21 {
                    bail!("{}: expected view, 7 intrinsics and 12 pose numbers", ctx());
                }
                let view: ViewLabel = toks[1].parse().map_err(|e| anyhow!("{e}")).with_context(ctx)?;
                let num = |i: usize, w: &str| parse_f64(toks[i], w);
                let width: u32 = toks[6].parse().with_context(ctx)?;
                let height: u32 = toks[7].parse().with_context(ctx)?;
                let mirrored = match toks[8] {
                    "0" => false,
                    "1" => true,
                    other => bail!("{}: mirrored flag must be 0 or 1, got `{other}`", ctx()),
                };
                let pose = parse_se3(&toks[9..], "cam_from_ego").with_context(ctx)?;
                let mut camera = PinholeCamera::new(
                    num(2, "fx").with_context(ctx)?,
                    num(3, "fy").with_context(ctx)?,
                    num(4, "cx").with_context(ctx)?,
                    num(5, "cy").with_context(ctx)?,
                    width,
                    height,
                    pose,
                )
                .with_context(ctx)?;
                camera.mirrored = mirrored;
                cams.push(RigCamera { view, camera });
            }
            "end" => {
                let Some((pose, ts, cams)) = current.take() else {
                    bail!("{}: `end` without a frame block", ctx());
                };
                rigs.push(CameraRig::new(cams, pose, ts).with_context(ctx)?);
            }
            other => bail!("{}: unknown record `{other}`", ctx()),
        }
    }
    if current.is_some() {
        bail!("rig file ends inside a frame block");
    }
    Ok(rigs)
}

const FEATURE_MAGIC: &[u8; 8] = b"MVDETIMG";

pub fn write_feature<W: Write>(f: &ImageFeature, mut w: W) -> Result<()> {
    let view = ViewLabel::ALL.iter().position(|v| *v == f.view).expect("known view") as u8;
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&[view])?;
    for d in [f.rows(), f.cols(), f.channels()] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&f.stride().to_le_bytes())?;
    let mut buf = Vec::with_capacity(f.data().len() * 8);
    for v in f.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_feature<R: Read>(mut r: R) -> Result<ImageFeature> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).context("truncated feature header")?;
    if &magic != FEATURE_MAGIC {
        bail!("not a feature map file");
    }
    let mut view = [0u8; 1];
    r.read_exact(&mut view)?;
    let view = *ViewLabel::ALL
        .get(view[0] as usize)
        .ok_or_else(|| anyhow!("unknown view index {}", view[0]))?;
    let mut u = [0u8; 4];
    let mut dims = [0usize; 3];
    for d in &mut dims {
        r.read_exact(&mut u).context("truncated feature header")?;
        *d = u32::from_le_bytes(u) as usize;
    }
    let mut b = [0u8; 8];
    r.read_exact(&mut b).context("truncated feature header")?;
    let stride = f64::from_le_bytes(b);
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|x| x.checked_mul(dims[2]))
        .ok_or_else(|| anyhow!("feature dimensions overflow"))?;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != n * 8 {
        bail!("feature payload has {} bytes, expected {}", raw.len(), n * 8);
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(ImageFeature::new(view, dims[0], dims[1], dims[2], stride, data)?)
}
