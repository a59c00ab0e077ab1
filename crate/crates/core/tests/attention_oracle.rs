mod oracle;

use vidgen_core::swin::{window_attention_with, AttnWeights, RopeConfig, TokenField, WindowSpec};
use vidgen_core::{Exec, Rng};

fn random_weights(d: usize, heads: usize, rng: &mut Rng) -> AttnWeights {
    let mut w = AttnWeights::zeros(d, heads);
    let s = 1.0 / (d as f64).sqrt();
    for buf in [&mut w.w_qkv.data, &mut w.b_qkv.data, &mut w.w_o.data, &mut w.b_o.data] {
        buf.iter_mut().for_each(|v| *v = rng.normal() * s);
    }
    w
}

#[test]
fn window_attention_matches_masked_global() {
    let mut rng = Rng::new(99);
    for case in 0..30 {
        let t = [4, 7, 8, 12][rng.below(4)];
        let w_t = [2, 4][rng.below(2)];
        let (h, w) = [(2, 2), (4, 4), (2, 8)][rng.below(3)];
        let d = [12, 24][rng.below(2)];
        let heads = if d == 12 { 2 } else { [2, 4][rng.below(2)] };
        let x = TokenField::new(t, h, w, d, (0..t * h * w * d).map(|_| rng.normal()).collect()).unwrap();
        let wts = random_weights(d, heads, &mut rng);
        let rope = RopeConfig::for_dim(d).unwrap();
        for shifted in [false, true] {
            let got = window_attention_with(&x, WindowSpec::new(w_t).unwrap(), shifted, &rope, &wts, Exec::Sequential).unwrap();
            let want = oracle::masked_global_attention(&x, w_t, shifted, rope.base, &wts);
            let err = got.data.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-10, "case {case} t={t} w_t={w_t} shifted={shifted}: {err}");
        }
    }
}
