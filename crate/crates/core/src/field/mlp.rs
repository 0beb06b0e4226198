//! Fully connected tanh network on the concatenated input `(x, t)`.
//!
//! Exact spatial derivatives are carried by `d` forward tangents (one per
//! coordinate direction). Parameter gradients come from a reverse sweep
//! through that tangent-augmented forward pass, which also yields
//! `J^T vbar + cbar * grad(div)` for the spatial gradient of a seeded output.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    n_in: usize,
    n_out: usize,
    /// offset of the row-major weight block
    w: usize,
    /// offset of the bias block
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dim: usize,
    hidden: Vec<usize>,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

/// Values recorded by the tangent-augmented forward pass.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tape {
    /// `z[0]` is the input `(x, t)`, `z[l + 1]` the output of hidden layer `l`.
    z: Vec<Vec<f64>>,
    /// Tangents of pre-activations and activations per hidden layer, `[k * n + i]`.
    da: Vec<Vec<f64>>,
    dz: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    /// Jacobian columns: `jac[k * d + i] = dv_i / dx_k`.
    pub jac: Vec<f64>,
    pub div: f64,
}

fn layout(dim: usize, hidden: &[usize]) -> (Vec<Layer>, usize) {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(dim + 1);
    sizes.extend_from_slice(hidden);
    sizes.push(dim);
    let mut layers = Vec::with_capacity(sizes.len() - 1);
    let mut off = 0;
    for w in sizes.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        layers.push(Layer { n_in, n_out, w: off, b: off + n_in * n_out });
        off += n_in * n_out + n_out;
    }
    (layers, off)
}

pub(crate) fn param_count(dim: usize, hidden: &[usize]) -> usize {
    layout(dim, hidden).1
}

impl Mlp {
    /// Uniform `+-1/sqrt(fan_in)` initialization with the output layer scaled by `scale`.
    pub fn init(dim: usize, hidden: &[usize], seed: u64, scale: f64) -> Result<Self> {
        validate_arch(dim, hidden)?;
        if !scale.is_finite() {
            return Err(Error::InvalidArgument("init scale must be finite".into()));
        }
        let (layers, n) = layout(dim, hidden);
        let mut params = vec![0.0; n];
        let mut rng = stream(seed, &[0x6d6c_705f_696e_6974]);
        let last = layers.len() - 1;
        for (li, layer) in layers.iter().enumerate() {
            let bound = 1.0 / (layer.n_in as f64).sqrt();
            let s = if li == last { scale } else { 1.0 };
            for p in &mut params[layer.w..layer.b + layer.n_out] {
                *p = s * rng.random_range(-bound..bound);
            }
        }
        Ok(Self { dim, hidden: hidden.to_vec(), layers, params })
    }

    pub fn from_params(dim: usize, hidden: &[usize], params: Vec<f64>) -> Result<Self> {
        validate_arch(dim, hidden)?;
        let (layers, n) = layout(dim, hidden);
        if params.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: params.len() });
        }
        Ok(Self { dim, hidden: hidden.to_vec(), layers, params })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn weights(&self, l: &Layer) -> &[f64] {
        &self.params[l.w..l.b]
    }

    fn bias(&self, l: &Layer) -> &[f64] {
        &self.params[l.b..l.b + l.n_out]
    }

    fn input(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.dim + 1);
        z.extend_from_slice(x);
        z.push(t);
        z
    }

    pub(crate) fn velocity(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut z = self.input(t, x);
        for (li, layer) in self.layers.iter().enumerate() {
            let w = self.weights(layer);
            let mut a = self.bias(layer).to_vec();
            for (i, ai) in a.iter_mut().enumerate() {
                *ai += dot(&w[i * layer.n_in..(i + 1) * layer.n_in], &z);
            }
            if li + 1 < self.layers.len() {
                a.iter_mut().for_each(|v| *v = v.tanh());
            }
            z = a;
        }
        z
    }

    pub(crate) fn forward(&self, t: f64, x: &[f64]) -> Tape {
        let d = self.dim;
        let n_hidden = self.hidden.len();
        let mut z = Vec::with_capacity(n_hidden + 1);
        let mut da = Vec::with_capacity(n_hidden);
        let mut dz: Vec<Vec<f64>> = Vec::with_capacity(n_hidden);
        z.push(self.input(t, x));
        for l in 0..n_hidden {
            let layer = &self.layers[l];
            let (n_in, n) = (layer.n_in, layer.n_out);
            let w = self.weights(layer);
            let zin = &z[l];
            let mut zl = self.bias(layer).to_vec();
            for (i, zi) in zl.iter_mut().enumerate() {
                *zi = (*zi + dot(&w[i * n_in..(i + 1) * n_in], zin)).tanh();
            }
            let mut dal = vec![0.0; d * n];
            if l == 0 {
                for k in 0..d {
                    for (i, a) in dal[k * n..(k + 1) * n].iter_mut().enumerate() {
                        *a = w[i * n_in + k];
                    }
                }
            } else {
                let prev = &dz[l - 1];
                for k in 0..d {
                    let pk = &prev[k * n_in..(k + 1) * n_in];
                    for (a, row) in dal[k * n..(k + 1) * n].iter_mut().zip(w.chunks_exact(n_in)) {
                        *a = dot(row, pk);
                    }
                }
            }
            let mut dzl = dal.clone();
            for blk in dzl.chunks_exact_mut(n) {
                for (v, zi) in blk.iter_mut().zip(&zl) {
                    *v *= 1.0 - zi * zi;
                }
            }
            z.push(zl);
            da.push(dal);
            dz.push(dzl);
        }
        let out = &self.layers[n_hidden];
        let n_in = out.n_in;
        let w = self.weights(out);
        let zh = &z[n_hidden];
        let dzh = &dz[n_hidden - 1];
        let mut v = self.bias(out).to_vec();
        let mut jac = vec![0.0; d * d];
        for i in 0..d {
            let row = &w[i * n_in..(i + 1) * n_in];
            v[i] += dot(row, zh);
            for k in 0..d {
                jac[k * d + i] = dot(row, &dzh[k * n_in..(k + 1) * n_in]);
            }
        }
        let div = (0..d).map(|k| jac[k * d + k]).sum();
        Tape { z, da, dz, v, jac, div }
    }

    /// Reverse sweep for the scalar `vbar . v + cbar * div`. Accumulates its
    /// parameter gradient into `grad` (when given) and returns its x-gradient.
    pub(crate) fn reverse(
        &self,
        tape: &Tape,
        vbar: &[f64],
        cbar: f64,
        mut grad: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let d = self.dim;
        let n_hidden = self.hidden.len();
        let out = self.layers[n_hidden];
        let n_in = out.n_in;
        let w = self.weights(&out);
        let zh = &tape.z[n_hidden];
        let dzh = &tape.dz[n_hidden - 1];
        let mut zbar = vec![0.0; n_in];
        let mut dzbar = vec![0.0; d * n_in];
        for i in 0..d {
            let row = &w[i * n_in..(i + 1) * n_in];
            let vb = vbar[i];
            for j in 0..n_in {
                zbar[j] += vb * row[j];
                dzbar[i * n_in + j] = cbar * row[j];
            }
            if let Some(g) = grad.as_deref_mut() {
                let grow = &mut g[out.w + i * n_in..out.w + (i + 1) * n_in];
                let dzi = &dzh[i * n_in..(i + 1) * n_in];
                for j in 0..n_in {
                    grow[j] += vb * zh[j] + cbar * dzi[j];
                }
                g[out.b + i] += vb;
            }
        }
        for l in (0..n_hidden).rev() {
            let layer = self.layers[l];
            let n = layer.n_out;
            let n_in = layer.n_in;
            let zl = &tape.z[l + 1];
            let dal = &tape.da[l];
            let mut abar = vec![0.0; n];
            let mut dabar = vec![0.0; d * n];
            for i in 0..n {
                let s1 = 1.0 - zl[i] * zl[i];
                let s2 = -2.0 * zl[i] * s1;
                let mut ab = s1 * zbar[i];
                for k in 0..d {
                    let dzb = dzbar[k * n + i];
                    dabar[k * n + i] = s1 * dzb;
                    ab += s2 * dal[k * n + i] * dzb;
                }
                abar[i] = ab;
            }
            let w = self.weights(&layer);
            let zin = &tape.z[l];
            if let Some(g) = grad.as_deref_mut() {
                let (gw, gb) = g[layer.w..layer.b + n].split_at_mut(n * n_in);
                for (i, grow) in gw.chunks_exact_mut(n_in).enumerate() {
                    let ab = abar[i];
                    for (gj, zj) in grow.iter_mut().zip(zin) {
                        *gj += ab * zj;
                    }
                    if l == 0 {
                        for k in 0..d {
                            grow[k] += dabar[k * n + i];
                        }
                    } else {
                        let dzp = &tape.dz[l - 1];
                        for k in 0..d {
                            let c = dabar[k * n + i];
                            if c != 0.0 {
                                for (gj, sj) in grow.iter_mut().zip(&dzp[k * n_in..(k + 1) * n_in]) {
                                    *gj += c * sj;
                                }
                            }
                        }
                    }
                    gb[i] += ab;
                }
            }
            let mut new_zbar = vec![0.0; n_in];
            for (row, ab) in w.chunks_exact(n_in).zip(&abar) {
                for (zb, r) in new_zbar.iter_mut().zip(row) {
                    *zb += r * ab;
                }
            }
            if l == 0 {
                new_zbar.truncate(d);
                return new_zbar;
            }
            let mut new_dzbar = vec![0.0; d * n_in];
            for (k, dst) in new_dzbar.chunks_exact_mut(n_in).enumerate() {
                for (row, c) in w.chunks_exact(n_in).zip(&dabar[k * n..(k + 1) * n]) {
                    if *c != 0.0 {
                        for (o, r) in dst.iter_mut().zip(row) {
                            *o += r * c;
                        }
                    }
                }
            }
            zbar = new_zbar;
            dzbar = new_dzbar;
        }
        unreachable!("an mlp has at least one hidden layer")
    }

    /// Spatial gradient of the divergence by nested directional derivatives.
    pub(crate) fn grad_divergence(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let tape = self.forward(t, x);
        let n_hidden = self.hidden.len();
        let out = self.layers[n_hidden];
        let w_o = self.weights(&out);
        let mut g = vec![0.0; d];
        for j in 0..d {
            for k in 0..=j {
                // second directional derivative along (e_k, e_j) of the last activations
                let mut dd: Vec<f64> = Vec::new();
                for l in 0..n_hidden {
                    let layer = self.layers[l];
                    let n = layer.n_out;
                    let zl = &tape.z[l + 1];
                    let da = &tape.da[l];
                    let mut next = vec![0.0; n];
                    if l > 0 {
                        let w = self.weights(&layer);
                        for i in 0..n {
                            next[i] = dot(&w[i * layer.n_in..(i + 1) * layer.n_in], &dd);
                        }
                    }
                    for i in 0..n {
                        let s1 = 1.0 - zl[i] * zl[i];
                        let s2 = -2.0 * zl[i] * s1;
                        next[i] = s2 * da[k * n + i] * da[j * n + i] + s1 * next[i];
                    }
                    dd = next;
                }
                let n_in = out.n_in;
                g[j] += dot(&w_o[k * n_in..(k + 1) * n_in], &dd);
                if k != j {
                    g[k] += dot(&w_o[j * n_in..(j + 1) * n_in], &dd);
                }
            }
        }
        g
    }
}

fn validate_arch(dim: usize, hidden: &[usize]) -> Result<()> {
    if dim == 0 {
        return Err(Error::InvalidArgument("field dimension must be >= 1".into()));
    }
    if hidden.is_empty() || hidden.contains(&0) {
        return Err(Error::InvalidArgument("mlp needs at least one non-empty hidden layer".into()));
    }
    Ok(())
}

/// Dot product with four independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (p, q) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += p[i] * q[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
