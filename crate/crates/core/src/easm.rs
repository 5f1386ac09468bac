//! Event-adapted synthesis: event-modulated alignment of the two input frames
//! toward every segment timestamp, direction fusion, and bidirectional
//! recurrent compensation over the resulting feature sequence.

use crate::autograd::{Graph, Var};
use crate::config::{Direction, Levels, Sweep};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBuilder};
use crate::tensor::Tensor;

/// Deformable kernel side.
pub const DCN_K: usize = 3;

/// A feature sequence on the uniform grid `k / (len - 1)`.
#[derive(Clone, Debug)]
pub struct FeatureSequence<'g> {
    pub maps: Vec<Var<'g>>,
    pub timestamps: Vec<f64>,
}

impl<'g> FeatureSequence<'g> {
    pub fn new(maps: Vec<Var<'g>>) -> Result<Self> {
        if maps.len() < 2 {
            return Err(Error::Shape(format!("feature sequence needs >= 2 maps, got {}", maps.len())));
        }
        let n = maps.len() - 1;
        let timestamps = (0..=n).map(|k| k as f64 / n as f64).collect();
        Ok(Self { maps, timestamps })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

fn same_spatial(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a.len() != 3 || b.len() != 3 || a[1..] != b[1..] {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Modulated deformable convolution: bilinear resampling of `x` at
/// `offset`-shifted kernel taps weighted by `mask`, then a `C*K*K -> C_out` projection.
pub fn deform_conv<'g>(g: &'g Graph<'g>, x: Var<'g>, offset: Var<'g>, mask: Var<'g>, proj: &Conv2d) -> Result<Var<'g>> {
    let [c, h, w] = x.shape()[..] else {
        return Err(Error::Shape(format!("deform_conv expects C x H x W, got {:?}", x.shape())));
    };
    let cols = x.deform_columns(offset, mask, DCN_K)?.reshape(&[c * DCN_K * DCN_K, h, w])?;
    proj.forward(g, cols)
}

/// Event modulation block: `mv * (1 + gamma(e)) + beta(e)`.
#[derive(Clone, Debug)]
pub struct Emb {
    pub gamma: Conv2d,
    pub beta: Conv2d,
}

impl Emb {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize) -> Self {
        pb.scoped(name, |pb| Self { gamma: pb.conv2d_zero("gamma", c, c, 3, 1), beta: pb.conv2d_zero("beta", c, c, 3, 1) })
    }

    pub fn forward<'g>(&self, g: &'g Graph<'g>, mv: Var<'g>, event: Var<'g>) -> Result<Var<'g>> {
        same_spatial(&mv.shape(), &event.shape(), "event modulation")?;
        let gamma = self.gamma.forward(g, event)?;
        let beta = self.beta.forward(g, event)?;
        emb_modulate(mv, gamma, beta)
    }
}

/// `mv * (1 + gamma) + beta`.
pub fn emb_modulate<'g>(mv: Var<'g>, gamma: Var<'g>, beta: Var<'g>) -> Result<Var<'g>> {
    mv.mul(gamma.add_scalar(1.0))?.add(beta)
}

#[derive(Clone, Debug)]
struct EmaLevel {
    mv: Conv2d,
    /// Merges the motion feature with the upsampled coarser offsets.
    mv_fuse: Option<Conv2d>,
    emb: Emb,
    off_feat: Conv2d,
    /// `3K^2` channels: `(dy, dx)` per tap, then mask logits.
    off_head: Conv2d,
    dcn: Conv2d,
    /// Merges the aligned feature with the upsampled coarser alignment.
    agg: Option<Conv2d>,
}

/// One alignment direction: pyramids and a coarse-to-fine cascade.
#[derive(Clone, Debug)]
pub struct EmaDirection {
    frame_down: Vec<Conv2d>,
    event_down: Vec<Conv2d>,
    levels: Vec<EmaLevel>,
}

impl EmaDirection {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize, levels: usize) -> Self {
        let kk = DCN_K * DCN_K;
        pb.scoped(name, |pb| {
            let frame_down = (1..levels).map(|l| pb.conv2d(&format!("frame_down{l}"), c, c, 3, 2)).collect();
            let event_down = (1..levels).map(|l| pb.conv2d(&format!("event_down{l}"), c, c, 3, 2)).collect();
            let levels = (0..levels)
                .map(|l| {
                    let coarser = l + 1 < levels;
                    pb.scoped(&format!("level{l}"), |pb| EmaLevel {
                        mv: pb.conv2d("mv", 2 * c, c, 3, 1),
                        mv_fuse: coarser.then(|| pb.conv2d("mv_fuse", c + 2 * kk, c, 3, 1)),
                        emb: Emb::new(pb, "emb", c),
                        off_feat: pb.conv2d("off_feat", 2 * c, c, 3, 1),
                        off_head: pb.conv2d_zero("off_head", c, 3 * kk, 3, 1),
                        dcn: pb.conv2d_zero("dcn", c * kk, c, 1, 1),
                        agg: coarser.then(|| pb.conv2d_zero("agg", 2 * c, c, 3, 1)),
                    })
                })
                .collect();
            Self { frame_down, event_down, levels }
        })
    }

    fn pyramid<'g>(g: &'g Graph<'g>, x: Var<'g>, down: &[Conv2d]) -> Result<Vec<Var<'g>>> {
        let mut out = vec![x];
        for conv in down {
            let next = conv.forward_lrelu(g, *out.last().expect("non-empty"))?;
            out.push(next);
        }
        Ok(out)
    }

    /// Align `reference` toward each event segment, using motion between
    /// `reference` and `other`. Returns one finest-level map per segment.
    pub fn align<'g>(&self, g: &'g Graph<'g>, reference: Var<'g>, other: Var<'g>, events: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
        same_spatial(&reference.shape(), &other.shape(), "alignment frames")?;
        let ref_pyr = Self::pyramid(g, reference, &self.frame_down)?;
        let oth_pyr = Self::pyramid(g, other, &self.frame_down)?;
        let kk = DCN_K * DCN_K;
        events
            .iter()
            .map(|&e| {
                same_spatial(&reference.shape(), &e.shape(), "alignment event feature")?;
                let ev_pyr = Self::pyramid(g, e, &self.event_down)?;
                let mut prev: Option<(Var<'g>, Var<'g>)> = None;
                for l in (0..self.levels.len()).rev() {
                    let lv = &self.levels[l];
                    let (fr, fo, fe) = (ref_pyr[l], oth_pyr[l], ev_pyr[l]);
                    let (h, w) = (fr.shape()[1], fr.shape()[2]);
                    let mut mv = lv.mv.forward_lrelu(g, g.concat0(&[fr, fo])?)?;
                    let up = match (prev, lv.mv_fuse.as_ref()) {
                        (Some((off, aligned)), Some(fuse)) => {
                            let off_up = off.resize_bilinear(h, w)?.scale(2.0);
                            mv = fuse.forward_lrelu(g, g.concat0(&[mv, off_up])?)?;
                            Some((off_up, aligned.resize_bilinear(h, w)?))
                        }
                        _ => None,
                    };
                    let mv_mod = lv.emb.forward(g, mv, fe)?;
                    let feat = lv.off_feat.forward_lrelu(g, g.concat0(&[mv, mv_mod])?)?;
                    let raw = lv.off_head.forward(g, feat)?;
                    let mut offset = raw.narrow0(0, 2 * kk)?;
                    if let Some((off_up, _)) = up {
                        offset = offset.add(off_up)?;
                    }
                    let mask = raw.narrow0(2 * kk, kk)?.sigmoid();
                    let mut aligned = fr.add(deform_conv(g, fr, offset, mask, &lv.dcn)?)?;
                    if let (Some((_, coarse)), Some(agg)) = (up, lv.agg.as_ref()) {
                        let delta = agg.forward(g, g.concat0(&[aligned, coarse])?)?;
                        aligned = aligned.add(delta)?;
                    }
                    prev = Some((offset, aligned));
                }
                Ok(prev.expect("at least one level").1)
            })
            .collect()
    }
}

/// Event-modulated alignment in both directions plus their fusion.
#[derive(Clone, Debug)]
pub struct Ema {
    pub direction: Direction,
    pub fwd: EmaDirection,
    pub bwd: EmaDirection,
    pub fuse: Conv2d,
}

impl Ema {
    pub fn new(pb: &mut ParamBuilder, c: usize, direction: Direction, levels: Levels) -> Self {
        pb.scoped("ema", |pb| Self {
            direction,
            fwd: EmaDirection::new(pb, "fwd", c, levels.count()),
            bwd: EmaDirection::new(pb, "bwd", c, levels.count()),
            fuse: pb.conv2d("fuse", 2 * c, c, 3, 1),
        })
    }

    /// `ev_fwd[m]` encodes segment `m`; `ev_bwd[m]` encodes segment `m` of the
    /// reversed voxel, i.e. timestamp `1 - (m + 1) / (M + 1)`.
    pub fn forward<'g>(
        &self,
        g: &'g Graph<'g>,
        f0: Var<'g>,
        f1: Var<'g>,
        ev_fwd: &[Var<'g>],
        ev_bwd: &[Var<'g>],
    ) -> Result<FeatureSequence<'g>> {
        if ev_fwd.is_empty() {
            return Err(Error::Shape("alignment needs at least one event segment".into()));
        }
        let fwd = self.fwd.align(g, f0, f1, ev_fwd)?;
        let mids = match self.direction {
            Direction::Fwd => fwd,
            Direction::FwdBwd => {
                if ev_bwd.len() != ev_fwd.len() {
                    return Err(Error::Shape(format!("{} forward vs {} backward segments", ev_fwd.len(), ev_bwd.len())));
                }
                let mut bwd = self.bwd.align(g, f1, f0, ev_bwd)?;
                bwd.reverse();
                fuse_directions(g, &self.fuse, &fwd, &bwd)?
            }
        };
        let mut maps = Vec::with_capacity(mids.len() + 2);
        maps.push(f0);
        maps.extend(mids);
        maps.push(f1);
        FeatureSequence::new(maps)
    }
}

/// Per index: `lrelu(conv(cat(fwd_m, bwd_m)))`. `bwd` is already in forward time order.
pub fn fuse_directions<'g>(g: &'g Graph<'g>, conv: &Conv2d, fwd: &[Var<'g>], bwd: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
    if fwd.len() != bwd.len() {
        return Err(Error::Shape(format!("fuse {} forward vs {} backward maps", fwd.len(), bwd.len())));
    }
    fwd.iter().zip(bwd).map(|(&a, &b)| conv.forward_lrelu(g, g.concat0(&[a, b])?)).collect()
}

/// Gated fusion of frame and event features from globally pooled statistics.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub frame_gate: Conv2d,
    pub event_gate: Conv2d,
}

impl ChannelAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize) -> Self {
        pb.scoped(name, |pb| Self {
            frame_gate: pb.conv2d("frame_gate", 2 * c, c, 1, 1),
            event_gate: pb.conv2d("event_gate", 2 * c, c, 1, 1),
        })
    }

    /// `sigmoid(gate_F) * F + sigmoid(gate_E) * E`.
    pub fn forward<'g>(&self, g: &'g Graph<'g>, frame: Var<'g>, event: Var<'g>) -> Result<Var<'g>> {
        same_spatial(&frame.shape(), &event.shape(), "channel attention")?;
        let c2 = frame.shape()[0] + event.shape()[0];
        let pooled = g.concat0(&[frame, event])?.global_avg_pool().reshape(&[c2, 1, 1])?;
        let gf = self.frame_gate.forward(g, pooled)?.sigmoid().reshape(&[frame.shape()[0]])?;
        let ge = self.event_gate.forward(g, pooled)?.sigmoid().reshape(&[event.shape()[0]])?;
        frame.mul_channels(gf)?.add(event.mul_channels(ge)?)
    }
}

/// Conv-gated recurrent cell.
#[derive(Clone, Debug)]
pub struct RecurrentCell {
    pub update: Conv2d,
    pub candidate: Conv2d,
    pub out: Conv2d,
}

impl RecurrentCell {
    /// `extra` is the width of additional inputs (the other sweep's output).
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize, extra: usize) -> Self {
        pb.scoped(name, |pb| Self {
            update: pb.conv2d("update", 2 * c + extra, c, 3, 1),
            candidate: pb.conv2d("candidate", 2 * c + extra, c, 3, 1),
            out: pb.conv2d_zero("out", 2 * c, c, 3, 1),
        })
    }

    /// Returns `(r, h')`.
    pub fn step<'g>(&self, g: &'g Graph<'g>, x: Var<'g>, h: Var<'g>, extra: Option<Var<'g>>) -> Result<(Var<'g>, Var<'g>)> {
        let mut parts = vec![x];
        parts.extend(extra);
        parts.push(h);
        let inp = g.concat0(&parts)?;
        let z = self.update.forward(g, inp)?.sigmoid();
        let cand = self.candidate.forward(g, inp)?.tanh();
        let keep = z.scale(-1.0).add_scalar(1.0);
        let h_new = keep.mul(h)?.add(z.mul(cand)?)?;
        let r = self.out.forward(g, g.concat0(&[x, h_new])?)?;
        Ok((r, h_new))
    }
}

/// Bidirectional recurrent compensation.
#[derive(Clone, Debug)]
pub struct Brc {
    pub enabled: bool,
    pub sweep: Sweep,
    pub attention: bool,
    pub event_conv: Conv2d,
    pub att_fwd: ChannelAttention,
    pub att_bwd: ChannelAttention,
    pub cell_fwd: RecurrentCell,
    pub cell_bwd: RecurrentCell,
}

impl Brc {
    pub fn new(pb: &mut ParamBuilder, c: usize, enabled: bool, sweep: Sweep, attention: bool) -> Self {
        pb.scoped("brc", |pb| Self {
            enabled,
            sweep,
            attention,
            event_conv: pb.conv2d("event_conv", c, c, 5, 1),
            att_fwd: ChannelAttention::new(pb, "att_fwd", c),
            att_bwd: ChannelAttention::new(pb, "att_bwd", c),
            cell_fwd: RecurrentCell::new(pb, "cell_fwd", c, c),
            cell_bwd: RecurrentCell::new(pb, "cell_bwd", c, 0),
        })
    }

    /// Event features on the sequence grid: zeros at both ends, a 5x5 conv of
    /// each segment feature in between.
    pub fn event_features<'g>(&self, g: &'g Graph<'g>, segments: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
        let first = segments.first().ok_or_else(|| Error::Shape("no event segments".into()))?;
        let zero = g.constant(Tensor::zeros(&first.shape()));
        let mut out = vec![zero];
        for &s in segments {
            out.push(self.event_conv.forward_lrelu(g, s)?);
        }
        out.push(zero);
        Ok(out)
    }

    fn combine<'g>(&self, g: &'g Graph<'g>, att: &ChannelAttention, f: Var<'g>, e: Var<'g>) -> Result<Var<'g>> {
        if self.attention {
            att.forward(g, f, e)
        } else {
            f.add(e)
        }
    }

    /// `event_feats` has one map per sequence entry.
    pub fn forward<'g>(&self, g: &'g Graph<'g>, seq: &FeatureSequence<'g>, event_feats: &[Var<'g>]) -> Result<FeatureSequence<'g>> {
        if seq.len() < 2 {
            return Err(Error::Shape("recurrent compensation needs a sequence of >= 2".into()));
        }
        if event_feats.len() != seq.len() {
            return Err(Error::Shape(format!("{} event features for a sequence of {}", event_feats.len(), seq.len())));
        }
        if !self.enabled {
            return Ok(seq.clone());
        }
        let n = seq.len();
        let zero = g.constant(Tensor::zeros(&seq.maps[0].shape()));
        let mut r_bwd = vec![None; n];
        if matches!(self.sweep, Sweep::Bwd | Sweep::FwdBwd) {
            let mut h = zero;
            for i in (0..n).rev() {
                let x = self.combine(g, &self.att_bwd, seq.maps[i], event_feats[i])?;
                let (r, h_new) = self.cell_bwd.step(g, x, h, None)?;
                r_bwd[i] = Some(r);
                h = h_new;
            }
        }
        let maps = match self.sweep {
            Sweep::Bwd => seq.maps.iter().zip(&r_bwd).map(|(&f, r)| f.add(r.expect("swept"))).collect::<Result<_>>()?,
            Sweep::Fwd | Sweep::FwdBwd => {
                let mut h = zero;
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let x = self.combine(g, &self.att_fwd, seq.maps[i], event_feats[i])?;
                    let (r, h_new) = self.cell_fwd.step(g, x, h, Some(r_bwd[i].unwrap_or(zero)))?;
                    out.push(seq.maps[i].add(r)?);
                    h = h_new;
                }
                out
            }
        };
        Ok(FeatureSequence { maps, timestamps: seq.timestamps.clone() })
    }
}
