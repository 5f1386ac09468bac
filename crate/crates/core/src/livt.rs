//! Local implicit video transformer: decodes continuous `(time, y, x)` queries
//! from a feature sequence by attending over a local spatiotemporal grid.

use std::ops::Range;

use crate::autograd::{Graph, Var};
use crate::config::{AttentionMode, LivtConfig, PosEncoding};
use crate::easm::FeatureSequence;
use crate::error::{Error, Result};
use crate::nn::{Conv3d, Linear, ParamBuilder, ParamId};
use crate::tensor::Tensor;

/// Window sums closer than this are treated as ties.
const TIE_EPS: f64 = 1e-12;

/// Indices of the `tg` timestamps minimizing `sum |tau_i - target|`, as a
/// contiguous ascending window (ties go to the earlier window).
///
/// `timestamps` must be ascending.
pub fn select_window(target: f64, timestamps: &[f64], tg: usize) -> Result<Range<usize>> {
    if tg == 0 {
        return Err(Error::InvalidConfig("temporal grid extent T_G must be >= 1".into()));
    }
    if tg > timestamps.len() {
        return Err(Error::InvalidConfig(format!("T_G = {tg} exceeds the {} available timestamps", timestamps.len())));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Range(format!("target time {target} outside [0, 1]")));
    }
    let cost = |start: usize| timestamps[start..start + tg].iter().map(|t| (t - target).abs()).sum::<f64>();
    let mut best = 0;
    let mut best_cost = cost(0);
    for start in 1..=timestamps.len() - tg {
        let c = cost(start);
        if c < best_cost - TIE_EPS {
            best = start;
            best_cost = c;
        }
    }
    Ok(best..best + tg)
}

/// The selected timestamps themselves.
pub fn select_timestamps(target: f64, timestamps: &[f64], tg: usize) -> Result<Vec<f64>> {
    Ok(timestamps[select_window(target, timestamps, tg)?].to_vec())
}

/// `[sin(2^0 d), cos(2^0 d), ..., sin(2^(L-1) d), cos(2^(L-1) d)]` where each
/// term covers the three components of `d`; `6L` values.
pub fn positional_encoding(d: [f64; 3], l: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * l);
    for k in 0..l {
        let f = (1u64 << k) as f64;
        out.extend(d.iter().map(|v| (f * v).sin()));
        out.extend(d.iter().map(|v| (f * v).cos()));
    }
    out
}

/// HR output side for an LR side `n` at scale `s`: `ceil(n * s)`.
pub fn hr_size(n: usize, s: f64) -> usize {
    ((n as f64 * s) - 1e-9).ceil().max(1.0) as usize
}

/// Continuous LR coordinate of HR pixel `o` (half-pixel centers).
pub fn lr_coord(o: usize, s: f64) -> f64 {
    (o as f64 + 0.5) / s - 0.5
}

/// Nearest LR pixel to a continuous coordinate (ties round up), clamped.
pub fn nearest(c: f64, n: usize) -> usize {
    ((c + 0.5).floor().max(0.0) as usize).min(n - 1)
}

fn linear_taps(c: f64, n: usize) -> [(usize, f64); 2] {
    let c = c.clamp(0.0, (n - 1) as f64);
    let i0 = c.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    let f = c - i0 as f64;
    [(i0, 1.0 - f), (i1, f)]
}

/// Trilinear taps over a `t x h x w` volume at continuous `(u, y, x)`, with
/// `u` in slice units. Coordinates are clamped to the volume.
pub fn trilinear_taps(u: f64, y: f64, x: f64, t: usize, h: usize, w: usize) -> ([usize; 8], [f64; 8]) {
    let (tu, ty, tx) = (linear_taps(u, t), linear_taps(y, h), linear_taps(x, w));
    let mut idx = [0; 8];
    let mut wts = [0.0; 8];
    let mut k = 0;
    for &(ti, wt) in &tu {
        for &(yi, wy) in &ty {
            for &(xi, wx) in &tx {
                idx[k] = (ti * h + yi) * w + xi;
                wts[k] = wt * wy * wx;
                k += 1;
            }
        }
    }
    (idx, wts)
}

/// Row-major `hg x wg` neighborhood of `(cy, cx)` in slice `slice`, replicate-clamped.
pub fn local_indices(slice: usize, cy: usize, cx: usize, hg: usize, wg: usize, h: usize, w: usize) -> Vec<usize> {
    let (ry, rx) = ((hg / 2) as isize, (wg / 2) as isize);
    let mut out = Vec::with_capacity(hg * wg);
    for dy in -ry..=ry {
        for dx in -rx..=rx {
            let yy = (cy as isize + dy).clamp(0, h as isize - 1) as usize;
            let xx = (cx as isize + dx).clamp(0, w as isize - 1) as usize;
            out.push((slice * h + yy) * w + xx);
        }
    }
    out
}

/// Per-slice softmax attention, outputs concatenated along channels.
///
/// `q` is `N x C`; each slice supplies keys and values `N x J x C` and a logit
/// bias `N x J`. Returns `N x (slices * C)`.
pub fn local_attention<'g>(q: Var<'g>, slices: &[(Var<'g>, Var<'g>, Var<'g>)]) -> Result<Var<'g>> {
    let g = q.graph();
    let qs = q.shape();
    let [n, c] = qs[..] else {
        return Err(Error::Shape(format!("query must be N x C, got {qs:?}")));
    };
    if slices.is_empty() {
        return Err(Error::Shape("attention over zero slices".into()));
    }
    let mut parts = Vec::with_capacity(slices.len());
    for &(k, v, b) in slices {
        let ks = k.shape();
        if ks.len() != 3 || ks[0] != n || ks[2] != c || v.shape() != ks || b.shape() != [n, ks[1]] {
            return Err(Error::Shape(format!("attention slice k {ks:?} / v {:?} / b {:?} for query {qs:?}", v.shape(), b.shape())));
        }
        let logits = q.batched_dot(k)?.scale(1.0 / (c as f64).sqrt()).add(b)?;
        let attn = logits.softmax_rows()?;
        parts.push(attn.batched_weighted_sum(v)?.t()?);
    }
    g.concat0(&parts)?.t()
}

/// Target times and scales for one render.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySpec {
    pub s: f64,
    pub times: Vec<f64>,
    /// Temporal cell extent `1 / t`.
    pub cell_t: f64,
}

impl QuerySpec {
    /// `t + 1` frames at `k / t`.
    pub fn uniform(s: f64, t: usize) -> Result<Self> {
        if t == 0 {
            return Err(Error::InvalidConfig("temporal scale t must be >= 1".into()));
        }
        let q = Self { s, times: (0..=t).map(|k| k as f64 / t as f64).collect(), cell_t: 1.0 / t as f64 };
        q.validate()?;
        Ok(q)
    }

    /// Explicit times; the temporal cell is `1 / max(1, n - 1)`.
    pub fn explicit(s: f64, times: Vec<f64>) -> Result<Self> {
        let n = times.len().saturating_sub(1).max(1);
        let q = Self { s, times, cell_t: 1.0 / n as f64 };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s >= 1.0) || !self.s.is_finite() {
            return Err(Error::InvalidConfig(format!("spatial scale s must be >= 1, got {}", self.s)));
        }
        if self.times.is_empty() {
            return Err(Error::InvalidConfig("no target timestamps".into()));
        }
        if let Some(t) = self.times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Range(format!("target timestamp {t} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Key, query and value volumes as `(T*H*W) x C` matrices.
#[derive(Clone, Copy, Debug)]
pub struct Embedded<'g> {
    pub k: Var<'g>,
    pub q: Var<'g>,
    pub v: Var<'g>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl<'g> Embedded<'g> {
    /// Re-home detached values onto another graph.
    pub fn from_values(g: &'g Graph<'g>, k: Tensor, q: Tensor, v: Tensor, t: usize, h: usize, w: usize) -> Self {
        Self { k: g.constant(k), q: g.constant(q), v: g.constant(v), t, h, w }
    }

    pub fn timestamps(&self) -> Vec<f64> {
        let n = (self.t - 1).max(1) as f64;
        (0..self.t).map(|k| k as f64 / n).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Livt {
    pub cfg: LivtConfig,
    pub feat: Conv3d,
    pub key: Conv3d,
    pub query: Conv3d,
    pub value: Conv3d,
    pub bias_proj: Linear,
    pub bias_table: ParamId,
    pub mlp: Vec<Linear>,
}

impl Livt {
    pub fn new(pb: &mut ParamBuilder, c_in: usize, cfg: &LivtConfig) -> Self {
        let ci = cfg.channels;
        let [tg, hg, wg] = cfg.local_grid;
        pb.scoped("livt", |pb| {
            let feat = pb.conv3d("feat", c_in, ci, 3);
            let key = pb.conv3d("key", ci, ci, 3);
            let query = pb.conv3d("query", ci, ci, 3);
            let value = pb.conv3d("value", ci, ci, 3);
            let bias_proj = pb.linear("bias_proj", 6 * cfg.frequencies, 1);
            let bias_table = pb.table("bias_table", &[tg * hg * wg, 1]);
            let mut dims = vec![tg * ci + ci + 3];
            dims.extend(&cfg.mlp_hidden);
            dims.push(3);
            let mlp = dims.windows(2).enumerate().map(|(i, d)| pb.linear(&format!("mlp{i}"), d[0], d[1])).collect();
            Self { cfg: cfg.clone(), feat, key, query, value, bias_proj, bias_table, mlp }
        })
    }

    /// Three embeddings of the stacked sequence via 3-D convolutions.
    pub fn embed<'g>(&self, g: &'g Graph<'g>, seq: &FeatureSequence<'g>) -> Result<Embedded<'g>> {
        let first = seq.maps[0].shape();
        let (h, w) = (first[1], first[2]);
        let t = seq.len();
        let vol = g.stack0(&seq.maps)?.swap01()?;
        let feat = self.feat.forward(g, vol)?.leaky_relu(crate::nn::LRELU_SLOPE);
        let ci = self.cfg.channels;
        let as_rows = |x: Var<'g>| -> Result<Var<'g>> { x.reshape(&[ci, t * h * w])?.t() };
        Ok(Embedded {
            k: as_rows(self.key.forward(g, feat)?)?,
            q: as_rows(self.query.forward(g, feat)?)?,
            v: as_rows(self.value.forward(g, feat)?)?,
            t,
            h,
            w,
        })
    }

    /// RGB at HR pixels `pixels` (`(row, col)`) of the frame at `target`; `N x 3`.
    pub fn decode<'g>(&self, e: &Embedded<'g>, target: f64, s: f64, cell_t: f64, pixels: &[(usize, usize)]) -> Result<Var<'g>> {
        let g = e.q.graph();
        let [tg, hg, wg] = self.cfg.local_grid;
        let (t, h, w) = (e.t, e.h, e.w);
        let n = pixels.len();
        if n == 0 {
            return Err(Error::Shape("decode called with no query pixels".into()));
        }
        let stamps = e.timestamps();
        let window = select_window(target, &stamps, tg)?;
        let dt = 1.0 / (t - 1).max(1) as f64;
        let u = target / dt;
        let coords: Vec<(f64, f64)> = pixels.iter().map(|&(oy, ox)| (lr_coord(oy, s), lr_coord(ox, s))).collect();

        let q = match self.cfg.attention {
            AttentionMode::CrossScale => {
                let mut idx = Vec::with_capacity(8 * n);
                let mut wts = Vec::with_capacity(8 * n);
                for &(y, x) in &coords {
                    let (i, wv) = trilinear_taps(u, y, x, t, h, w);
                    idx.extend(i);
                    wts.extend(wv);
                }
                e.q.weighted_gather(idx, wts, 8)?
            }
            AttentionMode::Neighborhood => {
                let ti = nearest(u, t);
                e.q.gather_rows(coords.iter().map(|&(y, x)| (ti * h + nearest(y, h)) * w + nearest(x, w)).collect())?
            }
        };

        let j = hg * wg;
        let ci = self.cfg.channels;
        let (half_y, half_x) = ((hg + 1) as f64 / 2.0, (wg + 1) as f64 / 2.0);
        let tau_norm = tg as f64 * dt;
        let mut slices = Vec::with_capacity(tg);
        for (si, ti) in window.enumerate() {
            let mut idx = Vec::with_capacity(n * j);
            for &(y, x) in &coords {
                idx.extend(local_indices(ti, nearest(y, h), nearest(x, w), hg, wg, h, w));
            }
            let k = e.k.gather_rows(idx.clone())?.reshape(&[n, j, ci])?;
            let v = e.v.gather_rows(idx.clone())?.reshape(&[n, j, ci])?;
            let b = match self.cfg.pos_encoding {
                PosEncoding::Cosine => {
                    let l = self.cfg.frequencies;
                    let dtau = (stamps[ti] - target) / tau_norm;
                    let mut enc = Vec::with_capacity(n * j * 6 * l);
                    for (&(y, x), keys) in coords.iter().zip(idx.chunks(j)) {
                        for &key in keys {
                            let rem = key % (h * w);
                            let (ky, kx) = ((rem / w) as f64, (rem % w) as f64);
                            enc.extend(positional_encoding([dtau, (kx - x) / half_x, (ky - y) / half_y], l));
                        }
                    }
                    let enc = g.constant(Tensor::new(&[n * j, 6 * l], enc)?);
                    self.bias_proj.forward(g, enc)?.reshape(&[n, j])?
                }
                PosEncoding::Learnable => {
                    let rows = (0..n).flat_map(|_| (0..j).map(move |p| si * j + p)).collect();
                    g.param(self.bias_table).gather_rows(rows)?.reshape(&[n, j])?
                }
            };
            slices.push((k, v, b));
        }
        let z = local_attention(q, &slices)?;
        let cell = [2.0 / (s * h as f64), 2.0 / (s * w as f64), cell_t];
        let cell = g.constant(Tensor::from_fn(&[3, n], |i| cell[i / n]));
        let mut x = g.concat0(&[z.t()?, q.t()?, cell])?.t()?;
        for (i, layer) in self.mlp.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i + 1 < self.mlp.len() {
                x = x.gelu();
            }
        }
        Ok(x)
    }

    /// A full `3 x ceil(sH) x ceil(sW)` frame at `target`.
    pub fn render_frame<'g>(&self, e: &Embedded<'g>, target: f64, s: f64, cell_t: f64) -> Result<Var<'g>> {
        let (oh, ow) = (hr_size(e.h, s), hr_size(e.w, s));
        let pixels: Vec<(usize, usize)> = (0..oh).flat_map(|y| (0..ow).map(move |x| (y, x))).collect();
        self.decode(e, target, s, cell_t, &pixels)?.t()?.reshape(&[3, oh, ow])
    }

    /// One frame per target time.
    pub fn render<'g>(&self, e: &Embedded<'g>, query: &QuerySpec) -> Result<Vec<Var<'g>>> {
        query.validate()?;
        query.times.iter().map(|&tau| self.render_frame(e, tau, query.s, query.cell_t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{max_rel_error_in, max_rel_error_step};
    use crate::nn::{InitScheme, ParamStore};
    use rand::{Rng, SeedableRng};

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    fn grid(m: usize) -> Vec<f64> {
        (0..m + 2).map(|k| k as f64 / (m + 1) as f64).collect()
    }

    #[test]
    fn selection_examples() {
        let g = grid(7);
        assert_eq!(select_timestamps(0.0, &g, 3).unwrap(), vec![0.0, 0.125, 0.25]);
        assert_eq!(select_timestamps(0.3, &g, 3).unwrap(), vec![0.125, 0.25, 0.375]);
        assert_eq!(select_timestamps(1.0, &g, 3).unwrap(), vec![0.75, 0.875, 1.0]);
        // Exact midpoint between 0.25 and 0.375 with T_G = 1 goes to the earlier one.
        assert_eq!(select_timestamps(0.3125, &g, 1).unwrap(), vec![0.25]);
        assert!(select_window(0.5, &g, 0).is_err());
        assert!(select_window(0.5, &g, 10).is_err());
        assert!(select_window(1.5, &g, 2).is_err());
    }

    #[test]
    fn encoding_pattern_width_and_parity() {
        let z = positional_encoding([0.0; 3], 10);
        assert_eq!(z.len(), 60);
        for (i, v) in z.iter().enumerate() {
            assert_eq!(*v, if (i / 3) % 2 == 0 { 0.0 } else { 1.0 });
        }
        let d = [0.3, -0.7, 0.55];
        let a = positional_encoding(d, 4);
        let b = positional_encoding(d.map(|v| -v), 4);
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            if (i / 3) % 2 == 0 {
                assert!((x + y).abs() < 1e-12);
            } else {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trilinear_is_exact_at_nodes_and_linear_between() {
        let vol = rnd(&[3, 4, 5], 1);
        let at = |u: f64, y: f64, x: f64| {
            let (i, w) = trilinear_taps(u, y, x, 3, 4, 5);
            i.iter().zip(&w).map(|(&i, &w)| w * vol.data()[i]).sum::<f64>()
        };
        assert_eq!(at(1.0, 2.0, 3.0), vol.get(&[1, 2, 3]));
        let mid = at(0.5, 2.0, 3.0);
        assert!((mid - 0.5 * (vol.get(&[0, 2, 3]) + vol.get(&[1, 2, 3]))).abs() < 1e-15);
        // Clamped outside the volume.
        assert_eq!(at(0.0, -0.25, -3.0), vol.get(&[0, 0, 0]));
    }

    #[test]
    fn neighborhoods_are_row_major_and_clamped() {
        let (h, w) = (5, 6);
        assert_eq!(local_indices(0, 2, 3, 3, 3, h, w), vec![8, 9, 10, 14, 15, 16, 20, 21, 22]);
        assert_eq!(local_indices(1, 0, 0, 3, 3, h, w), vec![30, 30, 31, 30, 30, 31, 36, 36, 37]);
        assert_eq!(local_indices(0, 4, 5, 1, 1, h, w), vec![29]);
    }

    fn dense_oracle(q: &Tensor, k: &Tensor, v: &Tensor, b: &Tensor) -> Vec<f64> {
        let (n, j, c) = (k.dim(0), k.dim(1), k.dim(2));
        let mut out = Vec::new();
        for a in 0..n {
            let logits: Vec<f64> = (0..j)
                .map(|p| (0..c).map(|ch| q.get(&[a, ch]) * k.get(&[a, p, ch])).sum::<f64>() / (c as f64).sqrt() + b.get(&[a, p]))
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            for ch in 0..c {
                out.push((0..j).map(|p| ex[p] / z * v.get(&[a, p, ch])).sum());
            }
        }
        out
    }

    #[test]
    fn attention_matches_a_dense_loop() {
        let g = Graph::detached();
        let (n, j, c) = (2, 9, 4);
        let q = rnd(&[n, c], 1);
        let k = rnd(&[n, j, c], 2);
        let v = rnd(&[n, j, c], 3);
        let b = rnd(&[n, j], 4);
        let z = local_attention(g.constant(q.clone()), &[(g.constant(k.clone()), g.constant(v.clone()), g.constant(b.clone()))]).unwrap();
        let want = dense_oracle(&q, &k, &v, &b);
        for (a, w) in z.value().data().iter().zip(&want) {
            assert!((a - w).abs() < 1e-12);
        }
        // Constant keys and zero bias: plain average of the values.
        let kc = Tensor::full(&[n, j, c], 0.3);
        let z = local_attention(g.constant(q), &[(g.constant(kc), g.constant(v.clone()), g.constant(Tensor::zeros(&[n, j])))]).unwrap();
        for a in 0..n {
            for ch in 0..c {
                let mean = (0..j).map(|p| v.get(&[a, p, ch])).sum::<f64>() / j as f64;
                assert!((z.value().get(&[a, ch]) - mean).abs() < 1e-12);
            }
        }
        let err =
            max_rel_error_step(&[rnd(&[n, c], 5), k, v, b], 1e-5, |x| local_attention(x[0], &[(x[1], x[2], x[3])]).unwrap().square().sum());
        assert!(err < 1e-6, "{err}");
    }

    fn toy_livt(scheme: InitScheme, cfg: &LivtConfig) -> (ParamStore, Livt) {
        let mut store = ParamStore::new();
        let livt = Livt::new(&mut ParamBuilder::new(&mut store, 11, scheme), 4, cfg);
        (store, livt)
    }

    fn small_cfg() -> LivtConfig {
        LivtConfig { channels: 4, frequencies: 2, mlp_hidden: vec![8, 8], ..LivtConfig::default() }
    }

    #[test]
    fn embeddings_have_the_volume_shape_and_differ() {
        let cfg = LivtConfig { channels: 16, ..small_cfg() };
        let (store, livt) = toy_livt(InitScheme::Dense, &cfg);
        let g = Graph::inference(&store);
        let seq = FeatureSequence::new((0..5).map(|i| g.constant(rnd(&[4, 8, 8], i))).collect()).unwrap();
        let e = livt.embed(&g, &seq).unwrap();
        assert_eq!((e.t, e.h, e.w), (5, 8, 8));
        for v in [e.k, e.q, e.v] {
            assert_eq!(v.shape(), vec![5 * 64, 16]);
        }
        assert_ne!(*e.k.value(), *e.q.value());
        assert_ne!(*e.q.value(), *e.v.value());
    }

    #[test]
    fn query_sampling_hits_nodes_and_averages_between() {
        let (t, h, w, c) = (4, 3, 3, 2);
        let g = Graph::detached();
        let q = rnd(&[t * h * w, c], 3);
        let stamps: Vec<usize> = (0..t).collect();
        for &ti in &stamps {
            for y in 0..h {
                for x in 0..w {
                    let (i, wts) = trilinear_taps(ti as f64, lr_coord(y, 1.0), lr_coord(x, 1.0), t, h, w);
                    let row = g.constant(q.clone()).weighted_gather(i.to_vec(), wts.to_vec(), 8).unwrap();
                    for ch in 0..c {
                        assert_eq!(row.value().get(&[0, ch]), q.get(&[(ti * h + y) * w + x, ch]));
                    }
                }
            }
        }
    }

    #[test]
    fn render_shapes_for_integer_and_fractional_scales() {
        let (store, livt) = toy_livt(InitScheme::Dense, &small_cfg());
        let g = Graph::inference(&store);
        let seq = FeatureSequence::new((0..5).map(|i| g.constant(rnd(&[4, 6, 5], i))).collect()).unwrap();
        let e = livt.embed(&g, &seq).unwrap();
        for (s, t, hw) in [(1.0, 1, (6, 5)), (1.5, 3, (9, 8)), (4.0, 2, (24, 20))] {
            let frames = livt.render(&e, &QuerySpec::uniform(s, t).unwrap()).unwrap();
            assert_eq!(frames.len(), t + 1);
            for f in frames {
                assert_eq!(f.shape(), vec![3, hw.0, hw.1]);
                assert!(f.value().all_finite());
            }
        }
    }

    #[test]
    fn one_by_one_equals_batch_rendering() {
        let (store, livt) = toy_livt(InitScheme::Dense, &small_cfg());
        let g = Graph::inference(&store);
        let seq = FeatureSequence::new((0..5).map(|i| g.constant(rnd(&[4, 4, 4], i))).collect()).unwrap();
        let e = livt.embed(&g, &seq).unwrap();
        let q = QuerySpec::explicit(2.0, vec![0.0, 0.3, 0.9]).unwrap();
        let batch = livt.render(&e, &q).unwrap();
        for (i, &tau) in q.times.iter().enumerate() {
            let one = livt.render_frame(&e, tau, 2.0, q.cell_t).unwrap();
            assert_eq!(*one.value(), *batch[i].value());
        }
    }

    #[test]
    fn decoder_gradients_match_central_differences() {
        for pos in [PosEncoding::Cosine, PosEncoding::Learnable] {
            for attention in [AttentionMode::CrossScale, AttentionMode::Neighborhood] {
                let cfg = LivtConfig { pos_encoding: pos, attention, local_grid: [2, 3, 3], ..small_cfg() };
                let (store, livt) = toy_livt(InitScheme::Dense, &cfg);
                let livt = &livt;
                let err = max_rel_error_in(&store, &[rnd(&[3, 4, 3, 3], 7)], 1e-3, |v| {
                    let g = v[0].graph();
                    let maps = (0..3).map(|i| v[0].narrow0(i, 1).unwrap().reshape(&[4, 3, 3]).unwrap()).collect();
                    let seq = FeatureSequence::new(maps).unwrap();
                    let e = livt.embed(g, &seq).unwrap();
                    livt.decode(&e, 0.4, 1.5, 0.5, &[(0, 0), (2, 3), (4, 4)]).unwrap().square().sum()
                });
                assert!(err < 1e-3, "{pos:?} {attention:?}: {err}");
            }
        }
    }
}
