//! Frame folders, clip sampling, augmentation, checkpoints and PNG output.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::events::{downsample_voxel, simulate_events, voxelize, EventStream, VoxelGrid};
use crate::frame::Frame;
use crate::model::ModelInput;
use crate::nn::{Adam, ParamStore};
use crate::resample::downsample_frame;
use crate::tensor::Tensor;

pub fn read_png(path: &Path) -> Result<Frame> {
    let bad = |msg: String| Error::Image { path: path.to_path_buf(), msg };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let rgb = |px: &[u8]| -> [f64; 3] {
        let v = |i: usize| px[i] as f64 / 255.0;
        match channels {
            1 | 2 => [v(0); 3],
            _ => [v(0), v(1), v(2)],
        }
    };
    Ok(Frame::from_fn(h, w, |y, x| {
        let at = y * info.line_size + x * channels;
        rgb(&buf[at..at + channels])
    }))
}

/// 8-bit RGB PNG; values are clamped to `[0, 1]` and rounded.
pub fn write_png(path: &Path, frame: &Frame) -> Result<()> {
    let bad = |e: png::EncodingError| Error::Image { path: path.to_path_buf(), msg: e.to_string() };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), frame.width() as u32, frame.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(bad)?;
    let bytes: Vec<u8> = frame.data().iter().map(|v| quantize8(*v)).collect();
    writer.write_image_data(&bytes).map_err(bad)?;
    writer.finish().map_err(bad)
}

pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// All `*.png` files of `dir` in file-name order.
pub fn load_frames_dir(dir: &Path) -> Result<Vec<Frame>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Range(format!("no PNG frames in {}", dir.display())));
    }
    let frames = paths.iter().map(|p| read_png(p)).collect::<Result<Vec<_>>>()?;
    let (h, w) = (frames[0].height(), frames[0].width());
    if let Some((p, f)) = paths.iter().zip(&frames).find(|(_, f)| (f.height(), f.width()) != (h, w)) {
        return Err(Error::Shape(format!("{} is {}x{}, expected {h}x{w}", p.display(), f.height(), f.width())));
    }
    Ok(frames)
}

/// Write `frame_0000.png`, `frame_0001.png`, ... into `dir`.
pub fn save_prediction(frames: &[Frame], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = dir.join(format!("frame_{i:04}.png"));
            write_png(&p, f)?;
            Ok(p)
        })
        .collect()
}

/// A clip of `t + 1` frames of sequence `sequence` starting at `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipIndex {
    pub sequence: usize,
    pub start: usize,
    pub stride: usize,
}

/// Every clip start, `stride` frames apart, that fits `t + 1` frames.
pub fn clip_indices(sequence_lengths: &[usize], t: usize, stride: usize) -> Vec<ClipIndex> {
    let stride = stride.max(1);
    sequence_lengths
        .iter()
        .enumerate()
        .flat_map(|(sequence, &n)| {
            let last = n.checked_sub(t + 1);
            (0..).step_by(stride).take_while(move |&s| last.is_some_and(|l| s <= l)).map(move |start| ClipIndex { sequence, start, stride })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub lr_pair: [Frame; 2],
    pub voxel_fwd: VoxelGrid,
    pub voxel_bwd: VoxelGrid,
    /// `t + 1` frames at `k / t`.
    pub gt: Vec<Frame>,
    pub s: f64,
    pub t: usize,
}

impl TrainingSample {
    pub fn input(&self) -> ModelInput {
        ModelInput {
            lr0: self.lr_pair[0].clone(),
            lr1: self.lr_pair[1].clone(),
            voxel_fwd: self.voxel_fwd.clone(),
            voxel_bwd: self.voxel_bwd.clone(),
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.t).map(|k| k as f64 / self.t as f64).collect()
    }
}

/// Endpoints of `frames[start..=start + t]` downsampled by `s`, all frames kept
/// as GT, events simulated over the clip (or taken from `events`), voxelized
/// at GT resolution with `m` segments and downsampled by `s`.
pub fn sample_clip(
    frames: &[Frame],
    t: usize,
    s: f64,
    start: usize,
    m: usize,
    threshold: f64,
    events: Option<&EventStream>,
) -> Result<TrainingSample> {
    if t < 1 {
        return Err(Error::InvalidConfig("temporal scale t must be >= 1".into()));
    }
    if !(s >= 1.0) {
        return Err(Error::InvalidConfig(format!("spatial scale s must be >= 1, got {s}")));
    }
    if start + t >= frames.len() {
        return Err(Error::Range(format!("clip [{start}, {}] needs {} frames, sequence has {}", start + t, start + t + 1, frames.len())));
    }
    let gt = frames[start..=start + t].to_vec();
    let (h, w) = (gt[0].height(), gt[0].width());
    let simulated;
    let events = match events {
        Some(e) => e,
        None => {
            simulated = simulate_events(&gt, threshold)?;
            &simulated
        }
    };
    let voxel_fwd = downsample_voxel(&voxelize(events, h, w, m)?, s)?;
    let voxel_bwd = voxel_fwd.reversed();
    let lr_pair = [downsample_frame(&gt[0], s)?, downsample_frame(&gt[t], s)?];
    Ok(TrainingSample { lr_pair, voxel_fwd, voxel_bwd, gt, s, t })
}

/// A rotation by `rot * 90` degrees counter-clockwise, preceded by an optional
/// horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub rot: u8,
    pub flip: bool,
}

impl Geometry {
    pub const IDENTITY: Self = Self { rot: 0, flip: false };

    /// Output size for an `h x w` input.
    pub fn size(self, h: usize, w: usize) -> (usize, usize) {
        if self.rot % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    pub fn apply_plane(self, p: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = self.size(h, w);
        let mut out = vec![0.0; p.len()];
        for y in 0..oh {
            for x in 0..ow {
                // Source pixel of output (y, x) for a counter-clockwise rotation.
                let (sy, sx) = match self.rot % 4 {
                    0 => (y, x),
                    1 => (x, w - 1 - y),
                    2 => (h - 1 - y, w - 1 - x),
                    _ => (h - 1 - x, y),
                };
                let sx = if self.flip { w - 1 - sx } else { sx };
                out[y * ow + x] = p[sy * w + sx];
            }
        }
        out
    }

    pub fn apply_frame(self, f: &Frame) -> Frame {
        let (oh, ow) = self.size(f.height(), f.width());
        let planes = f.planes().map(|p| self.apply_plane(&p, f.height(), f.width()));
        Frame::from_planes(oh, ow, &planes)
    }

    pub fn apply_voxel(self, v: &VoxelGrid) -> VoxelGrid {
        let (oh, ow) = self.size(v.height(), v.width());
        let data = (0..v.bins()).flat_map(|b| self.apply_plane(v.bin(b), v.height(), v.width())).collect();
        VoxelGrid::from_tensor(&Tensor::from_parts(vec![v.bins(), oh, ow], data)).expect("geometry keeps voxel validity")
    }

    pub fn apply_sample(self, smp: &TrainingSample) -> TrainingSample {
        TrainingSample {
            lr_pair: smp.lr_pair.clone().map(|f| self.apply_frame(&f)),
            voxel_fwd: self.apply_voxel(&smp.voxel_fwd),
            voxel_bwd: self.apply_voxel(&smp.voxel_bwd),
            gt: smp.gt.iter().map(|f| self.apply_frame(f)).collect(),
            ..*smp
        }
    }
}

fn crop_voxel(v: &VoxelGrid, y0: usize, x0: usize, h: usize, w: usize) -> VoxelGrid {
    let data = (0..v.bins())
        .flat_map(|b| {
            let plane = v.bin(b);
            (0..h).flat_map(move |y| (0..w).map(move |x| plane[(y0 + y) * v.width() + x0 + x]))
        })
        .collect();
    VoxelGrid::from_tensor(&Tensor::from_parts(vec![v.bins(), h, w], data)).expect("crop keeps voxel validity")
}

/// Smallest `k` in `1..=8` with `k * s` integral.
fn lattice_step(s: f64) -> Option<usize> {
    (1..=8).find(|&k| ((k as f64 * s) - (k as f64 * s).round()).abs() < 1e-9)
}

/// LR window `(y0, x0)`: the LR crop covers `[y0, y0 + crop)` and the GT crop
/// `[s * y0, s * (y0 + crop))`.
pub fn crop_sample(smp: &TrainingSample, y0: usize, x0: usize, crop: usize) -> Result<TrainingSample> {
    let s = smp.s;
    let (h, w) = (smp.lr_pair[0].height(), smp.lr_pair[0].width());
    if y0 + crop > h || x0 + crop > w {
        return Err(Error::Range(format!("LR crop {crop}x{crop} at ({y0},{x0}) exceeds {h}x{w}")));
    }
    let gs = crop as f64 * s;
    let (gy, gx) = (y0 as f64 * s, x0 as f64 * s);
    if [gs, gy, gx].iter().any(|v| (v - v.round()).abs() > 1e-9) {
        return Err(Error::InvalidConfig(format!("GT crop {gs} at ({gy},{gx}) is not integral for s = {s}")));
    }
    let (gs, gy, gx) = (gs.round() as usize, gy.round() as usize, gx.round() as usize);
    Ok(TrainingSample {
        lr_pair: [smp.lr_pair[0].crop(y0, x0, crop, crop)?, smp.lr_pair[1].crop(y0, x0, crop, crop)?],
        voxel_fwd: crop_voxel(&smp.voxel_fwd, y0, x0, crop, crop),
        voxel_bwd: crop_voxel(&smp.voxel_bwd, y0, x0, crop, crop),
        gt: smp.gt.iter().map(|f| f.crop(gy, gx, gs, gs)).collect::<Result<_>>()?,
        ..*smp
    })
}

/// Random aligned crop, rotation and flip, shared by every tensor of the sample.
pub fn augment(smp: &TrainingSample, seed: u64, crop: usize) -> Result<TrainingSample> {
    let (h, w) = (smp.lr_pair[0].height(), smp.lr_pair[0].width());
    if h < crop || w < crop {
        return Err(Error::Range(format!("LR frames {h}x{w} are smaller than the {crop}x{crop} crop")));
    }
    let step =
        lattice_step(smp.s).ok_or_else(|| Error::InvalidConfig(format!("scale {} does not keep crops on the pixel lattice", smp.s)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = rng.gen_range(0..=(h - crop) / step) * step;
    let x0 = rng.gen_range(0..=(w - crop) / step) * step;
    let geo = Geometry { rot: rng.gen_range(0..4), flip: rng.gen() };
    Ok(geo.apply_sample(&crop_sample(smp, y0, x0, crop)?))
}

/// Frames of a square moving horizontally over a smooth background, rendered
/// with exact area coverage so sub-pixel positions stay anti-aliased.
pub fn moving_square(frames: usize, height: usize, width: usize, speed: f64) -> Vec<Frame> {
    let side = (height.min(width) as f64 / 3.0).round();
    let (y0, x_start) = ((height as f64 - side) / 2.0, width as f64 / 6.0);
    let overlap = |p: f64, a: f64, b: f64| ((p + 1.0).min(b) - p.max(a)).max(0.0);
    (0..frames)
        .map(|k| {
            let x0 = x_start + speed * k as f64;
            Frame::from_fn(height, width, |y, x| {
                let (fy, fx) = (y as f64 / height as f64, x as f64 / width as f64);
                let bg = [0.2 + 0.3 * fx, 0.25 + 0.2 * fy, 0.5 - 0.2 * fx];
                let cover = overlap(y as f64, y0, y0 + side) * overlap(x as f64, x0, x0 + side);
                let fg = [0.9, 0.8, 0.15];
                [0, 1, 2].map(|c| bg[c] * (1.0 - cover) + fg[c] * cover)
            })
        })
        .collect()
}

const CKPT_MAGIC: &str = "EVCKPT 1";

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: Config,
    stage: u8,
    step: usize,
    best_psnr: Option<f64>,
    adam: Option<AdamHeader>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Parameters, optimizer state and progress counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    /// Stage of the last completed step (1 or 2).
    pub stage: u8,
    /// Steps completed within `stage`.
    pub step: usize,
    pub best_psnr: Option<f64>,
    pub params: Vec<(String, Tensor)>,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn capture(config: &Config, store: &ParamStore, adam: Option<&Adam>, stage: u8, step: usize, best_psnr: Option<f64>) -> Self {
        Self {
            config: config.clone(),
            stage,
            step,
            best_psnr,
            params: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            adam: adam.cloned(),
        }
    }

    /// Copy the parameters into `store`.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        store.load(self.params.clone())
    }
}

/// One magic line, one JSON header line, then every tensor as little-endian
/// f64 in header order (parameters, then Adam first and second moments).
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut tensors: Vec<TensorEntry> = ck.params.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect();
    if let Some(a) = &ck.adam {
        for (prefix, set) in [("adam.m", &a.m), ("adam.v", &a.v)] {
            tensors.extend(
                set.iter().zip(&ck.params).map(|(t, (n, _))| TensorEntry { name: format!("{prefix}:{n}"), shape: t.shape().to_vec() }),
            );
        }
    }
    let header = CkptHeader {
        config: ck.config.clone(),
        stage: ck.stage,
        step: ck.step,
        best_psnr: ck.best_psnr,
        adam: ck.adam.as_ref().map(|a| AdamHeader { beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step }),
        tensors,
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::Parse { path: path.to_path_buf(), msg: e.to_string() })?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "{CKPT_MAGIC}")?;
        writeln!(w, "{json}")?;
        let adam_sets = ck.adam.iter().flat_map(|a| a.m.iter().chain(&a.v));
        for t in ck.params.iter().map(|(_, t)| t).chain(adam_sets) {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Parse { path: path.to_path_buf(), msg };
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    if lines.next() != Some(CKPT_MAGIC.as_bytes()) {
        return Err(bad("not an EVCKPT 1 checkpoint".into()));
    }
    let header: CkptHeader =
        serde_json::from_slice(lines.next().ok_or_else(|| bad("missing header".into()))?).map_err(|e| bad(e.to_string()))?;
    header.config.validate()?;
    let mut payload = lines.next().unwrap_or_default();
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(bad(format!("payload has {} bytes, expected {}", payload.len(), total * 8)));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            payload.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
    }
    let n_params = if header.adam.is_some() {
        if tensors.len() % 3 != 0 {
            return Err(bad("optimizer state does not match the parameter count".into()));
        }
        tensors.len() / 3
    } else {
        tensors.len()
    };
    let mut rest = tensors.split_off(n_params);
    let adam = header.adam.map(|a| {
        let v = rest.split_off(n_params).into_iter().map(|(_, t)| t).collect();
        let m = rest.into_iter().map(|(_, t)| t).collect();
        Adam { beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step, m, v }
    });
    Ok(Checkpoint { config: header.config, stage: header.stage, step: header.step, best_psnr: header.best_psnr, params: tensors, adam })
}
