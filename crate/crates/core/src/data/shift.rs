use super::rng::Rng;
use super::scene::Image;
use crate::error::{Error, Result};

/// Amplitude of the sinusoidal texture overlay.
pub const TEXTURE_AMPLITUDE: f64 = 0.1;

/// Appearance change between domains.
///
/// Per channel `c` and pixel `(y, x)`:
/// `v = gain[c]·v + bias[c] + σ·n + A·sin(2π·f·(x + y)/width)`, clamped to
/// `[0, 1]`, where `n` is a standard normal drawn in row-major pixel and
/// channel order (only when `σ > 0`) and the texture term is present only
/// when `f ≠ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainShift {
    pub channel_gain: [f64; 3],
    pub channel_bias: [f64; 3],
    pub noise_sigma: f64,
    pub texture_freq: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self::identity()
    }
}

impl DomainShift {
    pub fn identity() -> Self {
        Self {
            channel_gain: [1.0; 3],
            channel_bias: [0.0; 3],
            noise_sigma: 0.0,
            texture_freq: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.channel_gain.iter().chain(&self.channel_bias).chain([&self.noise_sigma, &self.texture_freq]);
        if all.clone().any(|v| !v.is_finite()) || self.noise_sigma < 0.0 {
            return Err(Error::invalid(format!("invalid domain shift {self:?}")));
        }
        Ok(())
    }
}

/// Applies `shift` to `image`; noise is drawn from the stream for `(seed, index)`.
pub fn apply_domain_shift(image: &Image, shift: &DomainShift, seed: u64, index: u64) -> Result<Image> {
    shift.validate()?;
    let mut rng = Rng::for_index(seed, index);
    let mut out = image.clone();
    let width = image.width();
    let freq = 2.0 * std::f64::consts::PI * shift.texture_freq / width as f64;
    for (px, rgb) in out.data_mut().chunks_mut(3).enumerate() {
        let (y, x) = (px / width, px % width);
        let texture = if shift.texture_freq != 0.0 {
            TEXTURE_AMPLITUDE * (freq * (x + y) as f64).sin()
        } else {
            0.0
        };
        for (c, v) in rgb.iter_mut().enumerate() {
            let mut s = shift.channel_gain[c] * *v + shift.channel_bias[c];
            if shift.noise_sigma > 0.0 {
                s += shift.noise_sigma * rng.normal();
            }
            *v = (s + texture).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}
