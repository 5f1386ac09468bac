//! Index-driven ops: row gathers, batched attention products and modulated
//! deformable sampling.

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn rows_cols(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [p, c] => Ok((p, c)),
        ref s => Err(Error::Shape(format!("{what} expects a 2-D matrix, got {s:?}"))),
    }
}

fn sample(plane: &[f64], corners: &[usize; 4], weights: &[f64; 4]) -> f64 {
    corners.iter().zip(weights).filter(|(&ci, _)| ci != usize::MAX).map(|(&ci, &wt)| wt * plane[ci]).sum()
}

impl<'g> Var<'g> {
    /// `out[n, :] = sum_j weights[n*J + j] * self[index[n*J + j], :]` for a `P x C` matrix.
    ///
    /// Indices and weights are constants; only `self` is differentiated.
    pub fn weighted_gather(self, index: Vec<usize>, weights: Vec<f64>, taps: usize) -> Result<Var<'g>> {
        let x = self.value();
        let (p, c) = rows_cols(&x, "weighted_gather")?;
        if taps == 0 || index.len() != weights.len() || !index.len().is_multiple_of(taps) {
            return Err(Error::Shape(format!("weighted_gather: {} indices / {} weights / {taps} taps", index.len(), weights.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= p) {
            return Err(Error::Shape(format!("weighted_gather index {bad} >= {p}")));
        }
        let n = index.len() / taps;
        let mut out = vec![0.0; n * c];
        for (row, (idx, w)) in out.chunks_mut(c).zip(index.chunks(taps).zip(weights.chunks(taps))) {
            for (&i, &wv) in idx.iter().zip(w) {
                if wv == 0.0 {
                    continue;
                }
                for (o, v) in row.iter_mut().zip(&x.data()[i * c..(i + 1) * c]) {
                    *o += wv * v;
                }
            }
        }
        Ok(self.g.record(Tensor::from_parts(vec![n, c], out), &[self], move |gy, _| {
            let mut gx = vec![0.0; p * c];
            for (grow, (idx, w)) in gy.data().chunks(c).zip(index.chunks(taps).zip(weights.chunks(taps))) {
                for (&i, &wv) in idx.iter().zip(w) {
                    for (d, gv) in gx[i * c..(i + 1) * c].iter_mut().zip(grow) {
                        *d += wv * gv;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![p, c], gx))]
        }))
    }

    /// Plain row gather of a `P x C` matrix: `out[n] = self[index[n]]`.
    pub fn gather_rows(self, index: Vec<usize>) -> Result<Var<'g>> {
        let w = vec![1.0; index.len()];
        self.weighted_gather(index, w, 1)
    }

    /// Per-row inner products: `q` is `N x C`, `keys` is `N x J x C`, result `N x J`.
    pub fn batched_dot(self, keys: Var<'g>) -> Result<Var<'g>> {
        let (q, k) = (self.value(), keys.value());
        let (&[n, c], &[nk, j, ck]) = (q.shape(), k.shape()) else {
            return Err(Error::Shape(format!("batched_dot {:?} . {:?}", q.shape(), k.shape())));
        };
        if n != nk || c != ck {
            return Err(Error::Shape(format!("batched_dot {:?} . {:?}", q.shape(), k.shape())));
        }
        let mut out = vec![0.0; n * j];
        for r in 0..n {
            let qr = &q.data()[r * c..(r + 1) * c];
            for jj in 0..j {
                let kr = &k.data()[(r * j + jj) * c..(r * j + jj + 1) * c];
                out[r * j + jj] = qr.iter().zip(kr).map(|(a, b)| a * b).sum();
            }
        }
        Ok(self.g.record(Tensor::from_parts(vec![n, j], out), &[self, keys], move |gy, mask| {
            let gq = mask[0].then(|| {
                let mut d = vec![0.0; n * c];
                for r in 0..n {
                    for jj in 0..j {
                        let g = gy.data()[r * j + jj];
                        let kr = &k.data()[(r * j + jj) * c..(r * j + jj + 1) * c];
                        for (dv, kv) in d[r * c..(r + 1) * c].iter_mut().zip(kr) {
                            *dv += g * kv;
                        }
                    }
                }
                Tensor::from_parts(vec![n, c], d)
            });
            let gk = mask[1].then(|| {
                let mut d = vec![0.0; n * j * c];
                for r in 0..n {
                    let qr = &q.data()[r * c..(r + 1) * c];
                    for jj in 0..j {
                        let g = gy.data()[r * j + jj];
                        for (dv, qv) in d[(r * j + jj) * c..(r * j + jj + 1) * c].iter_mut().zip(qr) {
                            *dv = g * qv;
                        }
                    }
                }
                Tensor::from_parts(vec![n, j, c], d)
            });
            vec![gq, gk]
        }))
    }

    /// Per-row weighted sums: `self` is `N x J` weights, `values` is `N x J x C`, result `N x C`.
    pub fn batched_weighted_sum(self, values: Var<'g>) -> Result<Var<'g>> {
        let (a, v) = (self.value(), values.value());
        let (&[n, j], &[nv, jv, c]) = (a.shape(), v.shape()) else {
            return Err(Error::Shape(format!("batched_weighted_sum {:?} x {:?}", a.shape(), v.shape())));
        };
        if n != nv || j != jv {
            return Err(Error::Shape(format!("batched_weighted_sum {:?} x {:?}", a.shape(), v.shape())));
        }
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            for jj in 0..j {
                let w = a.data()[r * j + jj];
                let vr = &v.data()[(r * j + jj) * c..(r * j + jj + 1) * c];
                for (o, x) in out[r * c..(r + 1) * c].iter_mut().zip(vr) {
                    *o += w * x;
                }
            }
        }
        Ok(self.g.record(Tensor::from_parts(vec![n, c], out), &[self, values], move |gy, mask| {
            let ga = mask[0].then(|| {
                let mut d = vec![0.0; n * j];
                for r in 0..n {
                    let gr = &gy.data()[r * c..(r + 1) * c];
                    for jj in 0..j {
                        let vr = &v.data()[(r * j + jj) * c..(r * j + jj + 1) * c];
                        d[r * j + jj] = gr.iter().zip(vr).map(|(p, q)| p * q).sum();
                    }
                }
                Tensor::from_parts(vec![n, j], d)
            });
            let gv = mask[1].then(|| {
                let mut d = vec![0.0; n * j * c];
                for r in 0..n {
                    let gr = &gy.data()[r * c..(r + 1) * c];
                    for jj in 0..j {
                        let w = a.data()[r * j + jj];
                        for (dv, g) in d[(r * j + jj) * c..(r * j + jj + 1) * c].iter_mut().zip(gr) {
                            *dv = w * g;
                        }
                    }
                }
                Tensor::from_parts(vec![n, j, c], d)
            });
            vec![ga, gv]
        }))
    }

    /// Modulated deformable sampling (the column stage of a DCNv2 convolution).
    ///
    /// `self` is a `C x H x W` map, `offset` is `2K x H x W` with `(dy, dx)` per
    /// tap, `mask` is `K x H x W` (already squashed), `K = k*k`. The result is the
    /// `(C*K) x (H*W)` column matrix whose row `c*K + tap` holds
    /// `mask * bilinear(x_c, y - k/2 + ky + dy, x - k/2 + kx + dx)`, zero outside the map.
    pub fn deform_columns(self, offset: Var<'g>, mask: Var<'g>, k: usize) -> Result<Var<'g>> {
        let (x, off, m) = (self.value(), offset.value(), mask.value());
        let [c, h, w] = *x.shape() else {
            return Err(Error::Shape(format!("deform_columns expects C x H x W, got {:?}", x.shape())));
        };
        let taps = k * k;
        if off.shape() != [2 * taps, h, w] || m.shape() != [taps, h, w] {
            return Err(Error::Shape(format!("deform_columns offset {:?} / mask {:?} for {k}x{k} over {h}x{w}", off.shape(), m.shape())));
        }
        let hw = h * w;
        let half = (k / 2) as f64;
        // Per (tap, position): four corner indices (or usize::MAX) and bilinear weights.
        let mut corners = vec![[usize::MAX; 4]; taps * hw];
        let mut weights = vec![[0.0f64; 4]; taps * hw];
        let mut fracs = vec![(0.0f64, 0.0f64); taps * hw];
        for t in 0..taps {
            let (ky, kx) = ((t / k) as f64, (t % k) as f64);
            for y in 0..h {
                for xx in 0..w {
                    let pos = y * w + xx;
                    let py = y as f64 - half + ky + off.data()[(2 * t) * hw + pos];
                    let px = xx as f64 - half + kx + off.data()[(2 * t + 1) * hw + pos];
                    let (y0, x0) = (py.floor(), px.floor());
                    let (ly, lx) = (py - y0, px - x0);
                    let slot = t * hw + pos;
                    fracs[slot] = (ly, lx);
                    let cand = [(y0, x0), (y0, x0 + 1.0), (y0 + 1.0, x0), (y0 + 1.0, x0 + 1.0)];
                    let wts = [(1.0 - ly) * (1.0 - lx), (1.0 - ly) * lx, ly * (1.0 - lx), ly * lx];
                    for (i, (&(cy, cx), &wt)) in cand.iter().zip(&wts).enumerate() {
                        if cy >= 0.0 && cx >= 0.0 && cy < h as f64 && cx < w as f64 {
                            corners[slot][i] = cy as usize * w + cx as usize;
                        }
                        weights[slot][i] = wt;
                    }
                }
            }
        }
        let mut cols = vec![0.0; c * taps * hw];
        for ch in 0..c {
            let plane = &x.data()[ch * hw..(ch + 1) * hw];
            for t in 0..taps {
                let row = &mut cols[(ch * taps + t) * hw..(ch * taps + t + 1) * hw];
                for (pos, v) in row.iter_mut().enumerate() {
                    *v = m.data()[t * hw + pos] * sample(plane, &corners[t * hw + pos], &weights[t * hw + pos]);
                }
            }
        }
        let y = Tensor::from_parts(vec![c * taps, hw], cols);
        Ok(self.g.record(y, &[self, offset, mask], move |gy, need| {
            let at = |plane: &[f64], ci: usize| if ci == usize::MAX { 0.0 } else { plane[ci] };
            let mut gx = need[0].then(|| vec![0.0; c * hw]);
            let mut goff = need[1].then(|| vec![0.0; 2 * taps * hw]);
            let mut gm = need[2].then(|| vec![0.0; taps * hw]);
            for ch in 0..c {
                let plane = &x.data()[ch * hw..(ch + 1) * hw];
                for t in 0..taps {
                    for pos in 0..hw {
                        let slot = t * hw + pos;
                        let g = gy.data()[(ch * taps + t) * hw + pos];
                        if g == 0.0 {
                            continue;
                        }
                        let mv = m.data()[slot];
                        let cs = &corners[slot];
                        if let Some(gx) = gx.as_mut() {
                            for (&ci, &wt) in cs.iter().zip(&weights[slot]) {
                                if ci != usize::MAX {
                                    gx[ch * hw + ci] += g * mv * wt;
                                }
                            }
                        }
                        if let Some(gm) = gm.as_mut() {
                            gm[slot] += g * sample(plane, cs, &weights[slot]);
                        }
                        if let Some(goff) = goff.as_mut() {
                            let (ly, lx) = fracs[slot];
                            let (v00, v01, v10, v11) = (at(plane, cs[0]), at(plane, cs[1]), at(plane, cs[2]), at(plane, cs[3]));
                            let d_ly = (1.0 - lx) * (v10 - v00) + lx * (v11 - v01);
                            let d_lx = (1.0 - ly) * (v01 - v00) + ly * (v11 - v10);
                            goff[2 * t * hw + pos] += g * mv * d_ly;
                            goff[(2 * t + 1) * hw + pos] += g * mv * d_lx;
                        }
                    }
                }
            }
            vec![
                gx.map(|d| Tensor::from_parts(vec![c, h, w], d)),
                goff.map(|d| Tensor::from_parts(vec![2 * taps, h, w], d)),
                gm.map(|d| Tensor::from_parts(vec![taps, h, w], d)),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::max_rel_error;
    use super::super::Graph;
    use super::*;

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn gather_and_attention_gradients() {
        let x = rnd(&[6, 3], 1);
        let err = max_rel_error(&[x], |v| {
            v[0].weighted_gather(vec![0, 5, 2, 2, 1, 3], vec![0.2, 0.8, 1.0, -0.5, 0.3, 0.7], 2).unwrap().square().sum()
        });
        assert!(err < 1e-6, "{err}");
        let err = max_rel_error(&[rnd(&[2, 4], 2), rnd(&[2, 3, 4], 3), rnd(&[2, 3, 4], 4)], |v| {
            let logits = v[0].batched_dot(v[1]).unwrap().softmax_rows().unwrap();
            logits.batched_weighted_sum(v[2]).unwrap().square().sum()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn deform_columns_gradients() {
        // Offsets kept away from integer lattice crossings within the FD step.
        let off = rnd(&[18, 4, 5], 6).map(|v| 0.37 * v + 0.11);
        let err =
            max_rel_error(&[rnd(&[2, 4, 5], 5), off, rnd(&[9, 4, 5], 7)], |v| v[0].deform_columns(v[1], v[2], 3).unwrap().square().sum());
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn zero_offset_unit_mask_is_im2col() {
        let x = rnd(&[2, 4, 4], 8);
        let g = Graph::detached();
        let cols = g
            .constant(x.clone())
            .deform_columns(g.constant(Tensor::zeros(&[18, 4, 4])), g.constant(Tensor::ones(&[9, 4, 4])), 3)
            .unwrap()
            .value();
        // Centre tap reproduces the input; tap (0,0) reads the up-left neighbour.
        for ch in 0..2 {
            for p in 0..16 {
                assert_eq!(cols.get(&[ch * 9 + 4, p]), x.data()[ch * 16 + p]);
            }
        }
        assert_eq!(cols.get(&[0, 5]), x.get(&[0, 0, 0]));
        assert_eq!(cols.get(&[0, 0]), 0.0);
    }
}
