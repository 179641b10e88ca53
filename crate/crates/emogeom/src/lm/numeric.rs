//! Reduced-precision emulation. Storage and every op output are rounded to
//! the target format; accumulation stays in f32, as on hardware with
//! fp32 accumulators.

use emogeom_core::record::Precision;
use half::{bf16, f16};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Numeric(pub Precision);

impl Numeric {
    #[inline]
    pub fn round1(self, x: f32) -> f32 {
        match self.0 {
            Precision::Fp32 => x,
            Precision::Fp16 | Precision::Int8 => f16::from_f32(x).to_f32(),
            Precision::Bf16 => bf16::from_f32(x).to_f32(),
        }
    }

    pub fn round(self, xs: &mut [f32]) {
        if self.0 != Precision::Fp32 {
            xs.iter_mut().for_each(|x| *x = self.round1(*x));
        }
    }
}

/// Symmetric per-output-channel absmax quantization to int8, returned
/// dequantized. Scales are stored in fp16.
pub fn quantize_int8_rows(w: &mut [f32], in_dim: usize) {
    for row in w.chunks_exact_mut(in_dim) {
        let amax = row.iter().fold(0.0f32, |m, x| m.max(x.abs()));
        if amax == 0.0 {
            continue;
        }
        let scale = f16::from_f32(amax / 127.0).to_f32();
        for x in row.iter_mut() {
            *x = (*x / scale).round().clamp(-127.0, 127.0) * scale;
        }
    }
}

pub const INT8_SCHEME: &str =
    "weight-only int8: symmetric absmax per output channel, fp16 scales, no outlier decomposition; \
     embeddings, norms and the output head stay fp16; activations fp16";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fp16_overflows_to_infinity() {
        let n = Numeric(Precision::Fp16);
        assert_eq!(n.round1(1.0e5), f32::INFINITY);
        assert_eq!(n.round1(0.1), f16::from_f32(0.1).to_f32());
        assert_eq!(Numeric(Precision::Fp32).round1(1.0e5), 1.0e5);
    }

    #[test]
    fn int8_grid_has_at_most_255_levels_per_row() {
        let mut w: Vec<f32> = (0..600).map(|i| ((i * 37 % 101) as f32 - 50.0) / 7.0).collect();
        let orig = w.clone();
        quantize_int8_rows(&mut w, 300);
        for (row, o) in w.chunks(300).zip(orig.chunks(300)) {
            let amax = o.iter().fold(0.0f32, |m, x| m.max(x.abs()));
            let scale = f16::from_f32(amax / 127.0).to_f32();
            for (q, x) in row.iter().zip(o) {
                let k = q / scale;
                assert!((k - k.round()).abs() < 1e-3 && k.abs() <= 127.0 + 1e-3);
                assert!((q - x).abs() <= scale * 0.5 + 1e-6);
            }
        }
    }
}
