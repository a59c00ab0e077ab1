//! Dense layer primitives with hand-written reverse passes.
//!
//! Matrices are row-major `Vec<f64>`; activations are `[rows, features]`,
//! weights `[in, out]`.

/// A named-shape parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Weight {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Weight {
    pub fn zeros(shape: &[usize]) -> Self {
        Weight { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Weight { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// `x[n,i] · w[i,o]`.
pub fn matmul(x: &[f64], w: &[f64], n: usize, i: usize, o: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        let xr = &x[r * i..(r + 1) * i];
        let orow = &mut out[r * o..(r + 1) * o];
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w[k * o..(k + 1) * o];
            for (ov, &wv) in orow.iter_mut().zip(wrow) {
                *ov += xv * wv;
            }
        }
    }
    out
}

/// Accumulates `x[n,i]ᵀ · dy[n,o]` into `dw[i,o]`.
pub fn matmul_tn_acc(x: &[f64], dy: &[f64], dw: &mut [f64], n: usize, i: usize, o: usize) {
    for r in 0..n {
        let dyr = &dy[r * o..(r + 1) * o];
        for k in 0..i {
            let xv = x[r * i + k];
            if xv == 0.0 {
                continue;
            }
            for (d, &g) in dw[k * o..(k + 1) * o].iter_mut().zip(dyr) {
                *d += xv * g;
            }
        }
    }
}

/// `dy[n,o] · w[i,o]ᵀ`.
pub fn matmul_nt(dy: &[f64], w: &[f64], n: usize, i: usize, o: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * i];
    for r in 0..n {
        let dyr = &dy[r * o..(r + 1) * o];
        for k in 0..i {
            let wrow = &w[k * o..(k + 1) * o];
            out[r * i + k] = dyr.iter().zip(wrow).map(|(a, b)| a * b).sum();
        }
    }
    out
}

pub fn linear(x: &[f64], w: &Weight, b: &Weight, n: usize) -> Vec<f64> {
    let (i, o) = (w.shape[0], w.shape[1]);
    let mut y = matmul(x, &w.data, n, i, o);
    for row in y.chunks_exact_mut(o) {
        for (v, bv) in row.iter_mut().zip(&b.data) {
            *v += bv;
        }
    }
    y
}

/// Reverse of [`linear`]: accumulates weight/bias grads, returns `dx`.
pub fn linear_backward(x: &[f64], dy: &[f64], w: &Weight, dw: &mut Weight, db: &mut Weight, n: usize) -> Vec<f64> {
    let (i, o) = (w.shape[0], w.shape[1]);
    matmul_tn_acc(x, dy, &mut dw.data, n, i, o);
    for row in dy.chunks_exact(o) {
        for (d, g) in db.data.iter_mut().zip(row) {
            *d += g;
        }
    }
    matmul_nt(dy, &w.data, n, i, o)
}

pub const LN_EPS: f64 = 1e-6;

/// Per-row layer norm cache: normalized values and inverse std.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &[f64], gain: &Weight, bias: &Weight, d: usize) -> (Vec<f64>, NormCache) {
    let n = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(n);
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain.data[j] + bias.data[j];
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub fn layer_norm_backward(dy: &[f64], cache: &NormCache, gain: &Weight, dgain: &mut Weight, dbias: &mut Weight, d: usize) -> Vec<f64> {
    let n = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for j in 0..d {
            dgain.data[j] += dyr[j] * xh[j];
            dbias.data[j] += dyr[j];
            dxhat[j] = dyr[j] * gain.data[j];
        }
        let mean_g = dxhat.iter().sum::<f64>() / d as f64;
        let mean_gx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[r * d + j] = cache.inv_std[r] * (dxhat[j] - mean_g - xh[j] * mean_gx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
