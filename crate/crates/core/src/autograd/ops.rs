//! Elementwise, reduction, shape and dense linear-algebra ops.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

fn same_shape(a: &Var<'_>, b: &Var<'_>, op: &str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::Shape(format!("{op}: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

impl<'g> Var<'g> {
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let x = self.value();
        let y = x.map(f);
        let y_saved = std::rc::Rc::new(y.clone());
        self.g.record(y, &[self], move |gy, _| {
            let data = x.data().iter().zip(y_saved.data()).zip(gy.data()).map(|((&xi, &yi), &gi)| gi * df(xi, yi)).collect();
            vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]
        })
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        same_shape(&self, &other, "add")?;
        let y = self.value().zip_map(&other.value(), |a, b| a + b);
        Ok(self.g.record(y, &[self, other], |gy, _| vec![Some(gy.clone()), Some(gy.clone())]))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        same_shape(&self, &other, "sub")?;
        let y = self.value().zip_map(&other.value(), |a, b| a - b);
        Ok(self.g.record(y, &[self, other], |gy, _| vec![Some(gy.clone()), Some(gy.scale(-1.0))]))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        same_shape(&self, &other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let y = a.zip_map(&b, |x, y| x * y);
        Ok(self.g.record(y, &[self, other], move |gy, m| {
            vec![m[0].then(|| gy.zip_map(&b, |g, v| g * v)), m[1].then(|| gy.zip_map(&a, |g, v| g * v))]
        }))
    }

    pub fn scale(self, k: f64) -> Var<'g> {
        let y = self.value().scale(k);
        self.g.record(y, &[self], move |gy, _| vec![Some(gy.scale(k))])
    }

    pub fn add_scalar(self, k: f64) -> Var<'g> {
        let y = self.value().map(|v| v + k);
        self.g.record(y, &[self], |gy, _| vec![Some(gy.clone())])
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|v| v * v, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.unary(move |v| if v >= 0.0 { v } else { slope * v }, move |x, _| if x >= 0.0 { 1.0 } else { slope })
    }

    pub fn relu(self) -> Var<'g> {
        self.leaky_relu(0.0)
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(|v| 1.0 / (1.0 + (-v).exp()), |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Var<'g> {
        self.unary(
            |v| 0.5 * v * (1.0 + libm::erf(v * FRAC_1_SQRT_2)),
            |x, _| {
                let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
                cdf + x * pdf
            },
        )
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.g.record(Tensor::scalar(x.sum()), &[self], move |gy, _| vec![Some(Tensor::full(&shape, gy.data()[0]))])
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = x.reshape(shape)?;
        Ok(self.g.record(y, &[self], move |gy, _| vec![Some(gy.clone().reshaped(&old))]))
    }

    /// Slice `len` entries of the leading axis starting at `start`.
    pub fn narrow0(self, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if start + len > shape[0] {
            return Err(Error::Shape(format!("narrow {start}+{len} beyond {:?}", shape)));
        }
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let y = Tensor::from_parts(out_shape, x.data()[start * inner..(start + len) * inner].to_vec());
        Ok(self.g.record(y, &[self], move |gy, _| {
            let mut g = Tensor::zeros(&shape);
            g.data_mut()[start * inner..(start + len) * inner].copy_from_slice(gy.data());
            vec![Some(g)]
        }))
    }

    /// 2-D transpose.
    pub fn t(self) -> Result<Var<'g>> {
        if self.shape().len() != 2 {
            return Err(Error::Shape(format!("transpose needs 2-D, got {:?}", self.shape())));
        }
        let y = self.value().t();
        Ok(self.g.record(y, &[self], |gy, _| vec![Some(gy.t())]))
    }

    /// `(m x k) @ (k x n)`.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0) {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
        }
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut c, 0.0);
        Ok(self.g.record(Tensor::from_parts(vec![m, n], c), &[self, other], move |gy, mask| {
            let ga = mask[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, gy.data(), false, b.data(), true, &mut d, 0.0);
                Tensor::from_parts(vec![m, k], d)
            });
            let gb = mask[1].then(|| {
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, gy.data(), false, &mut d, 0.0);
                Tensor::from_parts(vec![k, n], d)
            });
            vec![ga, gb]
        }))
    }

    /// Add a length-`d` bias to every row of an `n x d` matrix.
    pub fn add_row_bias(self, bias: Var<'g>) -> Result<Var<'g>> {
        let (x, b) = (self.value(), bias.value());
        if x.ndim() != 2 || b.len() != x.dim(1) {
            return Err(Error::Shape(format!("row bias {:?} + {:?}", x.shape(), b.shape())));
        }
        let d = x.dim(1);
        let bshape = b.shape().to_vec();
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(d) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        Ok(self.g.record(y, &[self, bias], move |gy, mask| {
            let gb = mask[1].then(|| {
                let mut acc = vec![0.0; d];
                for row in gy.data().chunks(d) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::from_parts(bshape.clone(), acc)
            });
            vec![Some(gy.clone()), gb]
        }))
    }

    /// Swap the two leading axes: `A x B x ...` to `B x A x ...`.
    pub fn swap01(self) -> Result<Var<'g>> {
        let x = self.value();
        if x.ndim() < 2 {
            return Err(Error::Shape(format!("swap01 needs >= 2 axes, got {:?}", x.shape())));
        }
        let (a, b) = (x.dim(0), x.dim(1));
        let inner = x.len() / (a * b).max(1);
        let permute = move |src: &[f64], a: usize, b: usize| {
            let mut out = vec![0.0; src.len()];
            for i in 0..a {
                for j in 0..b {
                    out[(j * a + i) * inner..(j * a + i + 1) * inner].copy_from_slice(&src[(i * b + j) * inner..(i * b + j + 1) * inner]);
                }
            }
            out
        };
        let mut shape = x.shape().to_vec();
        shape.swap(0, 1);
        let in_shape = x.shape().to_vec();
        let y = Tensor::from_parts(shape, permute(x.data(), a, b));
        Ok(self.g.record(y, &[self], move |gy, _| vec![Some(Tensor::from_parts(in_shape.clone(), permute(gy.data(), b, a)))]))
    }

    /// Multiply each channel of a `C x ...` tensor by a per-channel scalar from `g` (length C).
    pub fn mul_channels(self, gate: Var<'g>) -> Result<Var<'g>> {
        let (x, s) = (self.value(), gate.value());
        let c = x.dim(0);
        if s.len() != c {
            return Err(Error::Shape(format!("channel gate {:?} for {:?}", s.shape(), x.shape())));
        }
        let inner = x.len() / c.max(1);
        let mut y = (*x).clone();
        for (ch, chunk) in y.data_mut().chunks_mut(inner).enumerate() {
            let k = s.data()[ch];
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        let sshape = s.shape().to_vec();
        Ok(self.g.record(y, &[self, gate], move |gy, mask| {
            let gx = mask[0].then(|| {
                let mut g = gy.clone();
                for (ch, chunk) in g.data_mut().chunks_mut(inner).enumerate() {
                    let k = s.data()[ch];
                    chunk.iter_mut().for_each(|v| *v *= k);
                }
                g
            });
            let gs = mask[1].then(|| {
                let d: Vec<f64> =
                    gy.data().chunks(inner).zip(x.data().chunks(inner)).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum()).collect();
                Tensor::from_parts(sshape.clone(), d)
            });
            vec![gx, gs]
        }))
    }

    /// Global average pool: `C x ...` to `C`.
    pub fn global_avg_pool(self) -> Var<'g> {
        let x = self.value();
        let c = x.dim(0);
        let inner = x.len() / c.max(1);
        let means: Vec<f64> = x.data().chunks(inner).map(|ch| ch.iter().sum::<f64>() / inner as f64).collect();
        let shape = x.shape().to_vec();
        self.g.record(Tensor::from_parts(vec![c], means), &[self], move |gy, _| {
            let mut g = Tensor::zeros(&shape);
            for (ch, chunk) in g.data_mut().chunks_mut(inner).enumerate() {
                let v = gy.data()[ch] / inner as f64;
                chunk.iter_mut().for_each(|x| *x = v);
            }
            vec![Some(g)]
        })
    }

    /// Row-wise softmax of an `n x d` matrix.
    pub fn softmax_rows(self) -> Result<Var<'g>> {
        let x = self.value();
        if x.ndim() != 2 {
            return Err(Error::Shape(format!("softmax needs 2-D, got {:?}", x.shape())));
        }
        let d = x.dim(1);
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let ys = std::rc::Rc::new(y.clone());
        Ok(self.g.record(y, &[self], move |gy, _| {
            let mut g = gy.clone();
            for (grow, yrow) in g.data_mut().chunks_mut(d).zip(ys.data().chunks(d)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for (gv, yv) in grow.iter_mut().zip(yrow) {
                    *gv = yv * (*gv - dot);
                }
            }
            vec![Some(g)]
        }))
    }
}

impl<'s> Graph<'s> {
    /// Concatenate along the leading axis.
    pub fn concat0<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let values: Vec<_> = parts.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let y = Tensor::concat0(&refs)?;
        let sizes: Vec<(Vec<usize>, usize)> = values.iter().map(|v| (v.shape().to_vec(), v.len())).collect();
        Ok(self.record(y, parts, move |gy, mask| {
            let mut off = 0;
            sizes
                .iter()
                .zip(mask)
                .map(|((shape, n), &m)| {
                    let part = m.then(|| Tensor::from_parts(shape.clone(), gy.data()[off..off + n].to_vec()));
                    off += n;
                    part
                })
                .collect()
        }))
    }

    /// Stack equally shaped values along a new leading axis.
    pub fn stack0<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::Shape("stack of zero values".into()))?.shape();
        let mut flat = Vec::with_capacity(parts.len());
        for p in parts {
            let mut s = vec![1];
            s.extend_from_slice(&p.shape());
            if p.shape() != first {
                return Err(Error::Shape(format!("stack {:?} vs {:?}", p.shape(), first)));
            }
            flat.push(p.reshape(&s)?);
        }
        self.concat0(&flat)
    }
}
