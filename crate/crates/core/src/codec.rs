//! Fixed, parameter-free stand-in for a video autoencoder.
//!
//! Each 2×2 pixel block `[a b; c d]` of every frame and channel becomes four
//! latent channels: the block mean and three Haar-style detail terms. Decoding
//! is the exact inverse, so `decode(encode(x)) == x` up to rounding and the
//! block means of the round trip equal those of the input.

use crate::error::{config, Result};
use crate::latent::{Extent5, LatentGrid};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ToyCodec;

impl ToyCodec {
    /// Pixel `(b, c, f, h, w)` → latent `(b, 4c, f, h/2, w/2)`.
    pub fn encode(&self, pixels: &LatentGrid) -> Result<LatentGrid> {
        let e = pixels.extent();
        if !e.h.is_multiple_of(2) || !e.w.is_multiple_of(2) {
            return Err(config(format!("codec needs even spatial dims, got {e}")));
        }
        let out_e = Extent5 { c: 4 * e.c, h: e.h / 2, w: e.w / 2, ..e };
        let mut out = vec![0.0; out_e.len()];
        for b in 0..e.b {
            for c in 0..e.c {
                for f in 0..e.f {
                    for y in 0..out_e.h {
                        for x in 0..out_e.w {
                            let a = pixels.get(b, c, f, 2 * y, 2 * x);
                            let bb = pixels.get(b, c, f, 2 * y, 2 * x + 1);
                            let cc = pixels.get(b, c, f, 2 * y + 1, 2 * x);
                            let d = pixels.get(b, c, f, 2 * y + 1, 2 * x + 1);
                            let terms = [
                                (a + bb + cc + d) / 4.0,
                                (a - bb + cc - d) / 4.0,
                                (a + bb - cc - d) / 4.0,
                                (a - bb - cc + d) / 4.0,
                            ];
                            for (k, v) in terms.into_iter().enumerate() {
                                out[out_e.offset(b, 4 * c + k, f, y, x)] = v;
                            }
                        }
                    }
                }
            }
        }
        Ok(LatentGrid::from_parts(out_e, out))
    }

    /// Latent `(b, 4c, f, h, w)` → pixel `(b, c, f, 2h, 2w)`.
    pub fn decode(&self, latent: &LatentGrid) -> Result<LatentGrid> {
        let e = latent.extent();
        if !e.c.is_multiple_of(4) {
            return Err(config(format!("codec latent needs a multiple of 4 channels, got {e}")));
        }
        let out_e = Extent5 { c: e.c / 4, h: e.h * 2, w: e.w * 2, ..e };
        let mut out = vec![0.0; out_e.len()];
        for b in 0..e.b {
            for c in 0..out_e.c {
                for f in 0..e.f {
                    for y in 0..e.h {
                        for x in 0..e.w {
                            let ll = latent.get(b, 4 * c, f, y, x);
                            let hd = latent.get(b, 4 * c + 1, f, y, x);
                            let vd = latent.get(b, 4 * c + 2, f, y, x);
                            let dd = latent.get(b, 4 * c + 3, f, y, x);
                            out[out_e.offset(b, c, f, 2 * y, 2 * x)] = ll + hd + vd + dd;
                            out[out_e.offset(b, c, f, 2 * y, 2 * x + 1)] = ll - hd + vd - dd;
                            out[out_e.offset(b, c, f, 2 * y + 1, 2 * x)] = ll + hd - vd - dd;
                            out[out_e.offset(b, c, f, 2 * y + 1, 2 * x + 1)] = ll - hd - vd + dd;
                        }
                    }
                }
            }
        }
        Ok(LatentGrid::from_parts(out_e, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{sample_gaussian, Rng};

    #[test]
    fn shapes_and_roundtrip() {
        let e = Extent5::new(2, 3, 2, 6, 4).unwrap();
        let x = sample_gaussian(e, &mut Rng::new(1));
        let z = ToyCodec.encode(&x).unwrap();
        assert_eq!(z.extent(), Extent5::new(2, 12, 2, 3, 2).unwrap());
        let back = ToyCodec.decode(&z).unwrap();
        for (a, b) in back.values().iter().zip(x.values()) {
            assert!((a - b).abs() < 1e-14);
        }
        // block means survive exactly as the mean channel
        let m = (x.get(1, 2, 1, 2, 2) + x.get(1, 2, 1, 2, 3) + x.get(1, 2, 1, 3, 2) + x.get(1, 2, 1, 3, 3)) / 4.0;
        assert!((z.get(1, 8, 1, 1, 1) - m).abs() < 1e-15);
        assert!(ToyCodec.encode(&LatentGrid::zeros(Extent5::new(1, 1, 1, 3, 4).unwrap())).is_err());
    }
}
