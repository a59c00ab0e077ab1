//! Brute-force references written without the library's layout helpers.

use vidgen_core::swin::{AttnWeights, TokenField};

/// Rotary angle for pair `p` of a `d`-wide vector at `(t, y, x)`.
fn rope_angle(d: usize, base: f64, p: usize, pos: [f64; 3]) -> f64 {
    let third = d / 3;
    let per_axis = third / 2;
    let axis = p / per_axis;
    let j = p % per_axis;
    pos[axis] * base.powf(-2.0 * j as f64 / third as f64)
}

fn rope(v: &[f64], base: f64, pos: [f64; 3]) -> Vec<f64> {
    let d = v.len();
    let mut out = v.to_vec();
    for p in 0..d / 2 {
        let a = rope_angle(d, base, p, pos);
        out[2 * p] = v[2 * p] * a.cos() - v[2 * p + 1] * a.sin();
        out[2 * p + 1] = v[2 * p] * a.sin() + v[2 * p + 1] * a.cos();
    }
    out
}

/// Full `n × n` attention over all tokens where pairs outside a common
/// window, or straddling the roll seam, are excluded.
pub fn masked_global_attention(x: &TokenField, w_t: usize, shifted: bool, base: f64, wts: &AttnWeights) -> Vec<f64> {
    let (t, hw, d) = (x.t, x.h * x.w, x.d);
    let n = t * hw;
    let s = if shifted && t >= w_t { w_t / 2 } else { 0 };
    let rolled = |f: usize| (f + t - s) % t;
    let window = |f: usize| rolled(f) / w_t;
    let wrapped = |f: usize| rolled(f) >= t - s;
    let allowed = |a: usize, b: usize| {
        let (fa, fb) = (a / hw, b / hw);
        window(fa) == window(fb) && (s == 0 || wrapped(fa) == wrapped(fb))
    };
    let pos = |i: usize| {
        let f = i / hw;
        let r = rolled(f);
        [(r - window(f) * w_t) as f64, ((i % hw) / x.w) as f64, (i % x.w) as f64]
    };
    let proj = |i: usize, col0: usize| -> Vec<f64> {
        (0..d)
            .map(|o| {
                let mut acc = wts.b_qkv.data[col0 + o];
                for k in 0..d {
                    acc += x.data[i * d + k] * wts.w_qkv.data[k * 3 * d + col0 + o];
                }
                acc
            })
            .collect()
    };
    let q: Vec<Vec<f64>> = (0..n).map(|i| rope(&proj(i, 0), base, pos(i))).collect();
    let k: Vec<Vec<f64>> = (0..n).map(|i| rope(&proj(i, d), base, pos(i))).collect();
    let v: Vec<Vec<f64>> = (0..n).map(|i| proj(i, 2 * d)).collect();
    let hd = d / wts.heads;
    let mut mixed = vec![0.0; n * d];
    for h in 0..wts.heads {
        let r = h * hd..(h + 1) * hd;
        for i in 0..n {
            let scores: Vec<Option<f64>> = (0..n)
                .map(|j| {
                    allowed(i, j).then(|| {
                        q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                })
                .collect();
            let max = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
            for (j, sc) in scores.iter().enumerate() {
                if let Some(sc) = sc {
                    let p = (sc - max).exp() / z;
                    for c in r.clone() {
                        mixed[i * d + c] += p * v[j][c];
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for o in 0..d {
            let mut acc = wts.b_o.data[o];
            for c in 0..d {
                acc += mixed[i * d + c] * wts.w_o.data[c * d + o];
            }
            out[i * d + o] = acc;
        }
    }
    out
}
