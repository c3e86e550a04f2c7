use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Exact rational compression ratio, channel symbols per source value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: usize,
    pub den: usize,
}

impl Ratio {
    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("compression ratio `{s}` is not of the form a/b"));
        let (num, den) = s.split_once('/').ok_or_else(bad)?;
        let num = num.trim().parse().map_err(|_| bad())?;
        let den = den.trim().parse().map_err(|_| bad())?;
        if num == 0 || den == 0 {
            return Err(bad());
        }
        Ok(Ratio { num, den })
    }
}

/// Which receiver's decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DecoderId {
    /// High-computing decoder (deeper second stage).
    Hcd,
    /// Low-computing decoder.
    Lcd,
}

impl DecoderId {
    pub fn from_index(id: u8) -> Result<Self> {
        match id {
            1 => Ok(DecoderId::Hcd),
            2 => Ok(DecoderId::Lcd),
            other => Err(Error::UnknownDecoder(other)),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            DecoderId::Hcd => 1,
            DecoderId::Lcd => 2,
        }
    }

    /// Parameter-name prefix, `dec1` or `dec2`.
    pub fn prefix(self) -> &'static str {
        match self {
            DecoderId::Hcd => "dec1",
            DecoderId::Lcd => "dec2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub stage_dims: [usize; 4],
    pub encoder_depths: [usize; 4],
    pub hcd_depths: [usize; 4],
    pub lcd_depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub shifted_windows: bool,
    pub compression_ratio: Ratio,
    pub channel_coder_layers: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 2,
            stage_dims: [16, 32, 64, 128],
            encoder_depths: [2, 2, 6, 2],
            hcd_depths: [2, 6, 2, 2],
            lcd_depths: [2, 2, 2, 2],
            heads: [1, 2, 4, 4],
            window: 2,
            shifted_windows: false,
            compression_ratio: Ratio { num: 1, den: 16 },
            channel_coder_layers: 7,
            mlp_ratio: 2,
        }
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

impl ModelConfig {
    /// Spatial reduction from pixels to the deepest token grid.
    pub fn downsample(&self) -> usize {
        self.patch_size * 8
    }

    /// Channel symbols per deepest-stage token: `3·(p·2³)²·r`.
    pub fn symbols_per_token(&self) -> Result<usize> {
        let per_token = 3 * self.downsample() * self.downsample() * self.compression_ratio.num;
        if per_token % self.compression_ratio.den != 0 {
            return Err(Error::Config(format!(
                "compression ratio {} gives a fractional symbol width 3·{}²·{}",
                self.compression_ratio,
                self.downsample(),
                self.compression_ratio
            )));
        }
        Ok(per_token / self.compression_ratio.den)
    }

    pub fn decoder_depths(&self, which: DecoderId) -> [usize; 4] {
        match which {
            DecoderId::Hcd => self.hcd_depths,
            DecoderId::Lcd => self.lcd_depths,
        }
    }

    /// Embedding width of decoder stage `s` (0-based): decoders run the
    /// encoder's dims in reverse.
    pub fn decoder_dim(&self, s: usize) -> usize {
        self.stage_dims[3 - s]
    }

    pub fn decoder_heads(&self, s: usize) -> usize {
        self.heads[3 - s]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.window == 0 || self.mlp_ratio == 0 {
            return fail("patch_size, window and mlp_ratio must be positive".into());
        }
        if self.channel_coder_layers != 7 {
            return fail(format!(
                "channel_coder_layers is fixed at 7, got {}",
                self.channel_coder_layers
            ));
        }
        for s in 0..4 {
            let (d, h) = (self.stage_dims[s], self.heads[s]);
            if d == 0 || h == 0 || d % h != 0 {
                return fail(format!(
                    "stage {}: dim {d} must be a positive multiple of {h} heads",
                    s + 1
                ));
            }
        }
        let all = [self.encoder_depths, self.hcd_depths, self.lcd_depths];
        if all.iter().flatten().any(|&d| d == 0) {
            return fail("every stage needs at least one block".into());
        }
        if self.symbols_per_token()? == 0 {
            return fail("channel symbol width is zero".into());
        }
        Ok(())
    }

    /// Checks that `h×w` images fit the patch/merge/window geometry.
    pub fn validate_image(&self, h: usize, w: usize) -> Result<()> {
        let step = self.downsample();
        if h == 0 || w == 0 || h % step != 0 || w % step != 0 {
            return Err(Error::Config(format!(
                "image {h}×{w} must be a multiple of {step} on both axes"
            )));
        }
        for s in 0..4 {
            let (gh, gw) = self.grid(h, w, s);
            if gh % self.window != 0 || gw % self.window != 0 {
                return Err(Error::Config(format!(
                    "stage {} token grid {gh}×{gw} is not divisible by window {}",
                    s + 1,
                    self.window
                )));
            }
        }
        Ok(())
    }

    /// Token grid of encoder stage `s` (0-based).
    pub fn grid(&self, h: usize, w: usize, s: usize) -> (usize, usize) {
        let f = self.patch_size << s;
        (h / f, w / f)
    }

    /// Number of channel symbols for an `h×w×3` image.
    pub fn n_symbols(&self, h: usize, w: usize) -> Result<usize> {
        self.validate_image(h, w)?;
        let (gh, gw) = self.grid(h, w, 3);
        Ok(gh * gw * self.symbols_per_token()?)
    }

    /// Transfer between decoders needs identical last two stages.
    pub fn check_transfer_compatible(&self) -> Result<()> {
        if self.hcd_depths[2..] != self.lcd_depths[2..] {
            return Err(Error::Config(format!(
                "decoder tails differ: {:?} vs {:?}",
                &self.hcd_depths[2..],
                &self.lcd_depths[2..]
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_symbol_width() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.symbols_per_token().unwrap(), 48);
        assert_eq!(c.n_symbols(32, 32).unwrap(), 192);
        assert_eq!(c.n_symbols(64, 64).unwrap(), 768);
    }

    #[test]
    fn rejects_bad_geometry() {
        let c = ModelConfig::default();
        assert!(c.validate_image(24, 32).is_err());
        // 48 → deepest grid 3×3, not divisible by window 2
        assert!(c.validate_image(48, 48).is_err());
        let odd = ModelConfig {
            compression_ratio: Ratio { num: 1, den: 7 },
            ..ModelConfig::default()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn transfer_needs_equal_tails() {
        let mut c = ModelConfig::default();
        c.check_transfer_compatible().unwrap();
        c.lcd_depths = [2, 2, 1, 2];
        assert!(c.check_transfer_compatible().is_err());
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("1/16".parse::<Ratio>().unwrap(), Ratio { num: 1, den: 16 });
        assert!("0.0625".parse::<Ratio>().is_err());
        assert!("1/0".parse::<Ratio>().is_err());
    }
}
