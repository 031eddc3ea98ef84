//! Volume-to-BEV neck and the gated fusion of monocular and stereo BEV maps.
//!
//! Each neck is three residual stages of 3×3×3 convolutions with stride 2
//! along z, growing channels `c → 2c → 4c → 4c`. The residual z-extent left
//! after the stages is folded into channels and projected back to `4c`, so
//! every neck emits an `(N_x, N_y, 4c)` map regardless of its input width.
//!
//! The fusion gate is a 1×1 convolution over `[mono | stereo]` giving one
//! logit per cell; `ω = σ(logit)` and `fused = ω·stereo + (1 − ω)·mono`.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::FeatureVolume;

/// Range of the seeded uniform weight initialisation.
pub const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// No nonlinearity; makes the neck a linear map for property checks.
    Linear,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Linear => v,
        }
    }
}

/// Dense `(N_x, N_y, N_z, C)` tensor used inside the neck.
#[derive(Debug, Clone, PartialEq)]
struct Tensor4 {
    dims: [usize; 3],
    channels: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    fn at(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let idx = (i * self.dims[1] + j) * self.dims[2] + k;
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }
}

/// 3D convolution, zero padded in x/y/z for odd kernels, strided along z.
/// Weights are laid out `[kx][ky][kz][in][out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride_z: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride_z: usize) -> Self {
        Conv3d {
            in_channels,
            out_channels,
            kernel,
            stride_z,
            weight: vec![0.0; kernel.pow(3) * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    fn seeded(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride_z: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut conv = Conv3d::zeros(in_channels, out_channels, kernel, stride_z);
        fill_uniform(&mut conv.weight, rng);
        fill_uniform(&mut conv.bias, rng);
        conv
    }

    fn weight_index(&self, kx: usize, ky: usize, kz: usize, ci: usize, co: usize) -> usize {
        ((((kx * self.kernel + ky) * self.kernel + kz) * self.in_channels + ci) * self.out_channels)
            + co
    }

    /// Mutable access to one kernel tap.
    pub fn weight_mut(&mut self, tap: [usize; 3], ci: usize, co: usize) -> &mut f64 {
        let idx = self.weight_index(tap[0], tap[1], tap[2], ci, co);
        &mut self.weight[idx]
    }

    pub fn output_nz(&self, nz: usize) -> usize {
        let pad = self.kernel / 2;
        (nz + 2 * pad - self.kernel) / self.stride_z + 1
    }

    fn forward(&self, x: &Tensor4) -> Tensor4 {
        let [nx, ny, nz] = x.dims;
        let out_nz = self.output_nz(nz);
        let pad = self.kernel as isize / 2;
        let co_n = self.out_channels;
        let mut data = vec![0.0; nx * ny * out_nz * co_n];
        data.par_chunks_mut(ny * out_nz * co_n)
            .enumerate()
            .for_each(|(i, plane)| {
                for j in 0..ny {
                    for kz_out in 0..out_nz {
                        let out = &mut plane[(j * out_nz + kz_out) * co_n..][..co_n];
                        out.copy_from_slice(&self.bias);
                        for kx in 0..self.kernel {
                            let xi = i as isize + kx as isize - pad;
                            if xi < 0 || xi >= nx as isize {
                                continue;
                            }
                            for ky in 0..self.kernel {
                                let yj = j as isize + ky as isize - pad;
                                if yj < 0 || yj >= ny as isize {
                                    continue;
                                }
                                for kz in 0..self.kernel {
                                    let zk = (kz_out * self.stride_z) as isize + kz as isize - pad;
                                    if zk < 0 || zk >= nz as isize {
                                        continue;
                                    }
                                    let input = x.at(xi as usize, yj as usize, zk as usize);
                                    let base = self.weight_index(kx, ky, kz, 0, 0);
                                    for (ci, &v) in input.iter().enumerate() {
                                        if v == 0.0 {
                                            continue;
                                        }
                                        let w = &self.weight[base + ci * co_n..][..co_n];
                                        for (o, wv) in out.iter_mut().zip(w) {
                                            *o += wv * v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        Tensor4 {
            dims: [nx, ny, out_nz],
            channels: co_n,
            data,
        }
    }
}

/// `act(conv3(x) + skip(x))` with a strided 1×1×1 projection on the skip path.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStage {
    pub conv: Conv3d,
    pub skip: Conv3d,
}

impl ResidualStage {
    fn forward(&self, x: &Tensor4, act: Activation) -> Tensor4 {
        let mut main = self.conv.forward(x);
        let skip = self.skip.forward(x);
        for (m, s) in main.data.iter_mut().zip(&skip.data) {
            *m = act.apply(*m + s);
        }
        main
    }
}

/// Weights of one volume-to-BEV neck.
#[derive(Debug, Clone, PartialEq)]
pub struct NeckWeights {
    pub in_channels: usize,
    pub base_channels: usize,
    pub input_nz: usize,
    pub stages: Vec<ResidualStage>,
    /// `(residual_nz · 4c) → 4c` projection, `[in][out]` layout.
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
}

fn fill_uniform(buf: &mut [f64], rng: &mut ChaCha8Rng) {
    for v in buf.iter_mut() {
        // stored as f32 so weight files reproduce the in-memory values exactly
        *v = rng.gen_range(-INIT_SCALE..=INIT_SCALE) as f32 as f64;
    }
}

fn stage_plan(in_channels: usize, base: usize) -> [(usize, usize); 3] {
    [(in_channels, 2 * base), (2 * base, 4 * base), (4 * base, 4 * base)]
}

impl NeckWeights {
    pub fn output_channels(&self) -> usize {
        4 * self.base_channels
    }

    /// z-extent left after the three stride-2 stages.
    pub fn residual_nz(&self) -> usize {
        self.stages
            .iter()
            .fold(self.input_nz, |nz, s| s.conv.output_nz(nz))
    }

    pub fn zeros(in_channels: usize, base_channels: usize, input_nz: usize) -> Self {
        let stages = stage_plan(in_channels, base_channels)
            .into_iter()
            .map(|(ci, co)| ResidualStage {
                conv: Conv3d::zeros(ci, co, 3, 2),
                skip: Conv3d::zeros(ci, co, 1, 2),
            })
            .collect();
        let mut w = NeckWeights {
            in_channels,
            base_channels,
            input_nz,
            stages,
            head_weight: Vec::new(),
            head_bias: vec![0.0; 4 * base_channels],
        };
        w.head_weight = vec![0.0; w.residual_nz() * 4 * base_channels * 4 * base_channels];
        w
    }

    pub fn seeded(in_channels: usize, base_channels: usize, input_nz: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = NeckWeights::zeros(in_channels, base_channels, input_nz);
        for (stage, (ci, co)) in w
            .stages
            .iter_mut()
            .zip(stage_plan(in_channels, base_channels))
        {
            stage.conv = Conv3d::seeded(ci, co, 3, 2, &mut rng);
            stage.skip = Conv3d::seeded(ci, co, 1, 2, &mut rng);
        }
        fill_uniform(&mut w.head_weight, &mut rng);
        fill_uniform(&mut w.head_bias, &mut rng);
        w
    }

    /// Weights under which the neck copies its input channels cyclically
    /// into the `4c` output (valid for `input_nz = 1`).
    pub fn channel_tiling(in_channels: usize, base_channels: usize) -> Self {
        let mut w = NeckWeights::zeros(in_channels, base_channels, 1);
        for stage in &mut w.stages {
            let skip = &mut stage.skip;
            for co in 0..skip.out_channels {
                *skip.weight_mut([0, 0, 0], co % skip.in_channels, co) = 1.0;
            }
        }
        let c4 = 4 * base_channels;
        for c in 0..c4 {
            w.head_weight[c * c4 + c] = 1.0;
        }
        w
    }

    fn tensors(&self) -> Vec<(String, Vec<usize>, &Vec<f64>)> {
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for (part, conv) in [("conv", &stage.conv), ("skip", &stage.skip)] {
                let k = conv.kernel;
                out.push((
                    format!("stage{s}.{part}.weight"),
                    vec![k, k, k, conv.in_channels, conv.out_channels],
                    &conv.weight,
                ));
                out.push((format!("stage{s}.{part}.bias"), vec![conv.out_channels], &conv.bias));
            }
        }
        let c4 = self.output_channels();
        out.push((
            "head.weight".into(),
            vec![self.residual_nz() * c4, c4],
            &self.head_weight,
        ));
        out.push(("head.bias".into(), vec![c4], &self.head_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter_mut().enumerate() {
            let ResidualStage { conv, skip } = stage;
            out.push((format!("stage{s}.conv.weight"), &mut conv.weight));
            out.push((format!("stage{s}.conv.bias"), &mut conv.bias));
            out.push((format!("stage{s}.skip.weight"), &mut skip.weight));
            out.push((format!("stage{s}.skip.bias"), &mut skip.bias));
        }
        out.push(("head.weight".into(), &mut self.head_weight));
        out.push(("head.bias".into(), &mut self.head_bias));
        out
    }
}

/// Bird-eye-view map `(N_x, N_y, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeature {
    nx: usize,
    ny: usize,
    channels: usize,
    data: Vec<f64>,
}

impl BevFeature {
    pub fn new(nx: usize, ny: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nx * ny * channels {
            return Err(Error::ShapeMismatch(format!(
                "BEV buffer of {} values does not match {nx}x{ny}x{channels}",
                data.len()
            )));
        }
        Ok(BevFeature {
            nx,
            ny,
            channels,
            data,
        })
    }

    pub fn zeros(nx: usize, ny: usize, channels: usize) -> Self {
        BevFeature {
            nx,
            ny,
            channels,
            data: vec![0.0; nx * ny * channels],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.nx, self.ny, self.channels]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let idx = (i * self.ny + j) * self.channels;
        &self.data[idx..idx + self.channels]
    }

    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let idx = (i * self.ny + j) * self.channels;
        &mut self.data[idx..idx + self.channels]
    }
}

/// Runs one neck, reducing the volume's z-axis into a `4c`-channel BEV map.
pub fn collapse_to_bev(vol: &FeatureVolume, w: &NeckWeights, act: Activation) -> Result<BevFeature> {
    let [nx, ny, nz] = vol.grid().dims();
    if vol.channels() != w.in_channels || nz != w.input_nz {
        return Err(Error::ShapeMismatch(format!(
            "volume has {} channels and N_z = {nz}, neck expects {} and {}",
            vol.channels(),
            w.in_channels,
            w.input_nz
        )));
    }
    let mut x = Tensor4 {
        dims: [nx, ny, nz],
        channels: vol.channels(),
        data: vol.data().to_vec(),
    };
    for stage in &w.stages {
        x = stage.forward(&x, act);
    }
    let c4 = w.output_channels();
    let folded = x.dims[2] * x.channels;
    debug_assert_eq!(folded * c4, w.head_weight.len());
    let mut data = vec![0.0; nx * ny * c4];
    data.par_chunks_mut(c4).enumerate().for_each(|(cell, out)| {
        out.copy_from_slice(&w.head_bias);
        // the z-column of this cell is contiguous: [z0 channels | z1 channels | ...]
        let column = &x.data[cell * folded..(cell + 1) * folded];
        for (f, &v) in column.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let row = &w.head_weight[f * c4..(f + 1) * c4];
            for (o, wv) in out.iter_mut().zip(row) {
                *o += wv * v;
            }
        }
    });
    BevFeature::new(nx, ny, c4, data)
}

/// 1×1 convolution `[mono | stereo] → 1` followed by a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGate {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl FusionGate {
    pub fn zeros(bev_channels: usize) -> Self {
        FusionGate {
            weight: vec![0.0; 2 * bev_channels],
            bias: 0.0,
        }
    }

    pub fn seeded(bev_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gate = FusionGate::zeros(bev_channels);
        fill_uniform(&mut gate.weight, &mut rng);
        let mut b = [0.0];
        fill_uniform(&mut b, &mut rng);
        gate.bias = b[0];
        gate
    }
}

/// Logistic function kept strictly inside `(0, 1)`.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Returns `(fused, omega)` where omega has a single channel.
pub fn fuse_gate(
    mono: &BevFeature,
    stereo: &BevFeature,
    gate: &FusionGate,
) -> Result<(BevFeature, BevFeature)> {
    if mono.shape() != stereo.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mono {:?} and stereo {:?} BEV maps differ",
            mono.shape(),
            stereo.shape()
        )));
    }
    let c = mono.channels;
    if gate.weight.len() != 2 * c {
        return Err(Error::ShapeMismatch(format!(
            "gate expects {} input channels, maps have {}",
            gate.weight.len(),
            2 * c
        )));
    }
    let cells = mono.nx * mono.ny;
    let mut fused = vec![0.0; cells * c];
    let mut omega = vec![0.0; cells];
    fused
        .par_chunks_mut(c)
        .zip(omega.par_iter_mut())
        .enumerate()
        .for_each(|(cell, (out, w))| {
            let m = &mono.data[cell * c..(cell + 1) * c];
            let s = &stereo.data[cell * c..(cell + 1) * c];
            let logit = gate.bias
                + m.iter().zip(&gate.weight[..c]).map(|(a, b)| a * b).sum::<f64>()
                + s.iter().zip(&gate.weight[c..]).map(|(a, b)| a * b).sum::<f64>();
            let g = sigmoid(logit);
            *w = g;
            for ((o, &mv), &sv) in out.iter_mut().zip(m).zip(s) {
                // convex combination, clamped against rounding past either end
                let v = g * sv + (1.0 - g) * mv;
                *o = v.clamp(mv.min(sv), mv.max(sv));
            }
        });
    Ok((
        BevFeature::new(mono.nx, mono.ny, c, fused)?,
        BevFeature::new(mono.nx, mono.ny, 1, omega)?,
    ))
}

/// Weights for both necks and the fusion gate.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPathWeights {
    pub mono: NeckWeights,
    pub stereo: NeckWeights,
    pub gate: FusionGate,
}

/// Output of the dual-path neck.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPathOutput {
    pub fused: BevFeature,
    pub omega: BevFeature,
    pub mono: BevFeature,
    pub stereo: BevFeature,
}

impl DualPathWeights {
    /// Seeded weights for `channels` features per frame and `frames` stereo frames.
    pub fn seeded(channels: usize, frames: usize, input_nz: usize, seed: u64) -> Self {
        let mono = NeckWeights::seeded(channels, channels, input_nz, seed);
        let stereo = NeckWeights::seeded(
            frames * channels,
            channels,
            input_nz,
            seed.wrapping_add(1),
        );
        let gate = FusionGate::seeded(4 * channels, seed.wrapping_add(2));
        DualPathWeights { mono, stereo, gate }
    }

    pub fn frames(&self) -> usize {
        self.stereo.in_channels / self.mono.in_channels
    }

    fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (prefix, neck) in [("mono", &self.mono), ("stereo", &self.stereo)] {
            for (name, shape, data) in neck.tensors() {
                out.push((format!("{prefix}.{name}"), shape, data.clone()));
            }
        }
        out.push((
            "gate.weight".into(),
            vec![self.gate.weight.len()],
            self.gate.weight.clone(),
        ));
        out.push(("gate.bias".into(), vec![1], vec![self.gate.bias]));
        out
    }

    /// Writes `path` as packed little-endian f32 and `path.json` with the
    /// tensor manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        let mut entries = Vec::new();
        for (name, shape, data) in self.named_tensors() {
            entries.push(TensorEntry {
                name,
                shape,
                offset: bytes.len() / 4,
                len: data.len(),
            });
            for v in data {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let manifest = WeightManifest {
            format: MANIFEST_FORMAT.into(),
            channels: self.mono.in_channels,
            frames: self.frames(),
            input_nz: self.mono.input_nz,
            tensors: entries,
        };
        fs::write(path, bytes)?;
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::InvalidWeights(e.to_string()))?;
        fs::write(manifest_path(path), json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest_text = fs::read_to_string(manifest_path(path))
            .map_err(|e| Error::InvalidWeights(format!("manifest: {e}")))?;
        let manifest: WeightManifest = serde_json::from_str(&manifest_text)
            .map_err(|e| Error::InvalidWeights(format!("manifest: {e}")))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::InvalidWeights(format!(
                "unsupported format `{}`",
                manifest.format
            )));
        }
        if manifest.channels == 0 || manifest.frames == 0 || manifest.input_nz == 0 {
            return Err(Error::InvalidWeights("zero-sized neck in manifest".into()));
        }
        let bytes = fs::read(path).map_err(|e| Error::InvalidWeights(format!("{e}")))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::InvalidWeights("payload is not a whole number of f32".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut w = DualPathWeights {
            mono: NeckWeights::zeros(manifest.channels, manifest.channels, manifest.input_nz),
            stereo: NeckWeights::zeros(
                manifest.channels * manifest.frames,
                manifest.channels,
                manifest.input_nz,
            ),
            gate: FusionGate::zeros(4 * manifest.channels),
        };
        let expected = w.named_tensors();
        if expected.len() != manifest.tensors.len() {
            return Err(Error::InvalidWeights(format!(
                "manifest lists {} tensors, expected {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        let mut total = 0;
        for ((name, shape, data), entry) in expected.iter().zip(&manifest.tensors) {
            if &entry.name != name || &entry.shape != shape || entry.len != data.len() {
                return Err(Error::InvalidWeights(format!(
                    "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                    entry.name, entry.shape
                )));
            }
            total += entry.len;
        }
        if values.len() != total {
            return Err(Error::InvalidWeights(format!(
                "payload holds {} values, manifest needs {total}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidWeights(format!("non-finite value at index {bad}")));
        }
        let slice = |e: &TensorEntry| values[e.offset..e.offset + e.len].to_vec();
        let find = |n: &str| manifest.tensors.iter().find(|e| e.name == n).unwrap();
        for (prefix, neck) in [("mono", &mut w.mono), ("stereo", &mut w.stereo)] {
            for (name, buf) in neck.tensors_mut() {
                *buf = slice(find(&format!("{prefix}.{name}")));
            }
        }
        w.gate.weight = slice(find("gate.weight"));
        w.gate.bias = slice(find("gate.bias"))[0];
        Ok(w)
    }
}

const MANIFEST_FORMAT: &str = "mvdet-neck-f32le-v1";

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightManifest {
    format: String,
    channels: usize,
    frames: usize,
    input_nz: usize,
    tensors: Vec<TensorEntry>,
}

/// Runs the monocular and stereo necks and fuses them.
pub fn dual_path_forward(
    mono_vol: &FeatureVolume,
    stereo_vol: &FeatureVolume,
    w: &DualPathWeights,
    act: Activation,
) -> Result<DualPathOutput> {
    if mono_vol.grid() != stereo_vol.grid() {
        return Err(Error::ShapeMismatch("mono and stereo volumes use different grids".into()));
    }
    let mono = collapse_to_bev(mono_vol, &w.mono, act)?;
    let stereo = collapse_to_bev(stereo_vol, &w.stereo, act)?;
    let (fused, omega) = fuse_gate(&mono, &stereo, &w.gate)?;
    Ok(DualPathOutput {
        fused,
        omega,
        mono,
        stereo,
    })
}
