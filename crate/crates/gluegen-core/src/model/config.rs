//! Translator configuration: extents, depth, hidden-width ratios, and the
//! canonical `key = value` text form used by config files and checkpoints.

use crate::error::{Error, Result};

/// Epsilon used by every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Default token-axis MLP expansion ratio.
pub const DEFAULT_TOKEN_HIDDEN_RATIO: f64 = 2.0;

/// Default channel-axis MLP expansion ratio. Chosen so the canonical 5-RM
/// and 3-RM models at 77x1024 land near their published ~51M / ~34M
/// parameter counts (verified by `param_count`).
pub const DEFAULT_DIM_HIDDEN_RATIO: f64 = 1.75;

/// Architecture of a GlueNet translator.
///
/// `token_*` are sequence lengths (L), `dim_*` are channel widths (C). The
/// encoder maps `token_in x dim_in` to `token_out x dim_out`; the decoder
/// uses the mirrored configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct GlueNetConfig {
    pub token_in: usize,
    pub token_out: usize,
    pub dim_in: usize,
    pub dim_out: usize,
    /// Residual modules in the body net (3 or 5 canonical).
    pub num_rms: usize,
    /// Head-net block repetitions; must be 1 when token extents are equal.
    pub head_repeats: usize,
    /// Token-axis MLP hidden width is `round(ratio * token_out)`.
    pub token_hidden_ratio: f64,
    /// Channel-axis MLP hidden width is `round(ratio * dim_out)`.
    pub dim_hidden_ratio: f64,
    /// Whether the tail block keeps its layer norms (default off, leaving
    /// the output range unbounded to match target statistics).
    pub tail_layer_norm: bool,
}

impl GlueNetConfig {
    /// Config with default ratios and the derived head-repeat count.
    pub fn new(token_in: usize, token_out: usize, dim_in: usize, dim_out: usize, num_rms: usize) -> Self {
        GlueNetConfig {
            token_in,
            token_out,
            dim_in,
            dim_out,
            num_rms,
            head_repeats: Self::default_head_repeats(token_in, token_out),
            token_hidden_ratio: DEFAULT_TOKEN_HIDDEN_RATIO,
            dim_hidden_ratio: DEFAULT_DIM_HIDDEN_RATIO,
            tail_layer_norm: false,
        }
    }

    /// Head-repeat rule: 1 when token extents are equal; otherwise 2 when
    /// the larger extent is at most twice the smaller, else 3.
    pub fn default_head_repeats(token_in: usize, token_out: usize) -> usize {
        if token_in == token_out {
            1
        } else {
            let (lo, hi) = if token_in < token_out {
                (token_in, token_out)
            } else {
                (token_out, token_in)
            };
            if hi <= 2 * lo {
                2
            } else {
                3
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("token_in", self.token_in),
            ("token_out", self.token_out),
            ("dim_in", self.dim_in),
            ("dim_out", self.dim_out),
            ("num_rms", self.num_rms),
            ("head_repeats", self.head_repeats),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.token_in == self.token_out && self.head_repeats != 1 {
            return Err(Error::Config(format!(
                "head_repeats must be 1 when token extents are equal, got {}",
                self.head_repeats
            )));
        }
        for (name, r) in [
            ("token_hidden_ratio", self.token_hidden_ratio),
            ("dim_hidden_ratio", self.dim_hidden_ratio),
        ] {
            if !r.is_finite() || r < 1.0 {
                return Err(Error::Config(format!("{name} must be a finite ratio >= 1, got {r}")));
            }
        }
        if self.token_hidden() == 0 || self.dim_hidden() == 0 {
            return Err(Error::Config("hidden widths round to zero".into()));
        }
        Ok(())
    }

    /// Token-axis MLP hidden width.
    pub fn token_hidden(&self) -> usize {
        (self.token_hidden_ratio * self.token_out as f64).round() as usize
    }

    /// Channel-axis MLP hidden width.
    pub fn dim_hidden(&self) -> usize {
        (self.dim_hidden_ratio * self.dim_out as f64).round() as usize
    }

    /// Mirrored configuration (decoder): in/out extents swapped, everything
    /// else carried over.
    pub fn mirrored(&self) -> Self {
        GlueNetConfig {
            token_in: self.token_out,
            token_out: self.token_in,
            dim_in: self.dim_out,
            dim_out: self.dim_in,
            num_rms: self.num_rms,
            head_repeats: self.head_repeats,
            token_hidden_ratio: self.token_hidden_ratio,
            dim_hidden_ratio: self.dim_hidden_ratio,
            tail_layer_norm: self.tail_layer_norm,
        }
    }

    /// Canonical text form: fixed key order, one `key = value` per line.
    /// Digests are computed over exactly these bytes.
    pub fn to_text(&self) -> String {
        format!(
            "token_in = {}\ntoken_out = {}\ndim_in = {}\ndim_out = {}\nnum_rms = {}\nhead_repeats = {}\ntoken_hidden_ratio = {}\ndim_hidden_ratio = {}\ntail_layer_norm = {}\n",
            self.token_in,
            self.token_out,
            self.dim_in,
            self.dim_out,
            self.num_rms,
            self.head_repeats,
            self.token_hidden_ratio,
            self.dim_hidden_ratio,
            self.tail_layer_norm,
        )
    }

    /// Parse the `key = value` text form. Lines starting with `#` and blank
    /// lines are ignored; unknown or duplicate keys are errors; the required
    /// keys are the four extents and `num_rms`, the rest default.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut token_in = None;
        let mut token_out = None;
        let mut dim_in = None;
        let mut dim_out = None;
        let mut num_rms = None;
        let mut head_repeats = None;
        let mut token_hidden_ratio = None;
        let mut dim_hidden_ratio = None;
        let mut tail_layer_norm = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let dup = |name: &str| Error::Config(format!("duplicate key `{name}`"));
            let bad = |name: &str, v: &str| Error::Config(format!("invalid value for `{name}`: `{v}`"));
            match key {
                "token_in" | "token_out" | "dim_in" | "dim_out" | "num_rms" | "head_repeats" => {
                    let parsed: usize = value.parse().map_err(|_| bad(key, value))?;
                    let slot = match key {
                        "token_in" => &mut token_in,
                        "token_out" => &mut token_out,
                        "dim_in" => &mut dim_in,
                        "dim_out" => &mut dim_out,
                        "num_rms" => &mut num_rms,
                        _ => &mut head_repeats,
                    };
                    if slot.replace(parsed).is_some() {
                        return Err(dup(key));
                    }
                }
                "token_hidden_ratio" | "dim_hidden_ratio" => {
                    let parsed: f64 = value.parse().map_err(|_| bad(key, value))?;
                    let slot = if key == "token_hidden_ratio" {
                        &mut token_hidden_ratio
                    } else {
                        &mut dim_hidden_ratio
                    };
                    if slot.replace(parsed).is_some() {
                        return Err(dup(key));
                    }
                }
                "tail_layer_norm" => {
                    let parsed: bool = value.parse().map_err(|_| bad(key, value))?;
                    if tail_layer_norm.replace(parsed).is_some() {
                        return Err(dup(key));
                    }
                }
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }

        let req = |opt: Option<usize>, name: &str| {
            opt.ok_or_else(|| Error::Config(format!("missing required key `{name}`")))
        };
        let token_in = req(token_in, "token_in")?;
        let token_out = req(token_out, "token_out")?;
        let cfg = GlueNetConfig {
            token_in,
            token_out,
            dim_in: req(dim_in, "dim_in")?,
            dim_out: req(dim_out, "dim_out")?,
            num_rms: req(num_rms, "num_rms")?,
            head_repeats: head_repeats
                .unwrap_or_else(|| Self::default_head_repeats(token_in, token_out)),
            token_hidden_ratio: token_hidden_ratio.unwrap_or(DEFAULT_TOKEN_HIDDEN_RATIO),
            dim_hidden_ratio: dim_hidden_ratio.unwrap_or(DEFAULT_DIM_HIDDEN_RATIO),
            tail_layer_norm: tail_layer_norm.unwrap_or(false),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_repeats_rule() {
        assert_eq!(GlueNetConfig::default_head_repeats(77, 77), 1);
        assert_eq!(GlueNetConfig::default_head_repeats(128, 77), 2);
        assert_eq!(GlueNetConfig::default_head_repeats(77, 128), 2);
        assert_eq!(GlueNetConfig::default_head_repeats(256, 77), 3);
        assert_eq!(GlueNetConfig::default_head_repeats(4, 8), 2);
        assert_eq!(GlueNetConfig::default_head_repeats(3, 8), 3);
    }

    #[test]
    fn equal_tokens_force_single_head_block() {
        let mut cfg = GlueNetConfig::new(8, 8, 16, 16, 1);
        assert!(cfg.validate().is_ok());
        cfg.head_repeats = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ratios_below_one_are_rejected() {
        let mut cfg = GlueNetConfig::new(8, 8, 16, 16, 1);
        cfg.dim_hidden_ratio = 0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut cfg = GlueNetConfig::new(128, 77, 768, 1024, 5);
        cfg.tail_layer_norm = true;
        let text = cfg.to_text();
        let back = GlueNetConfig::from_text(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn parse_accepts_comments_and_defaults() {
        let text = "# canonical small model\ntoken_in = 8\ntoken_out = 8\n\ndim_in = 16\ndim_out = 16\nnum_rms = 1\n";
        let cfg = GlueNetConfig::from_text(text).unwrap();
        assert_eq!(cfg.head_repeats, 1);
        assert_eq!(cfg.token_hidden_ratio, DEFAULT_TOKEN_HIDDEN_RATIO);
        assert_eq!(cfg.dim_hidden_ratio, DEFAULT_DIM_HIDDEN_RATIO);
        assert!(!cfg.tail_layer_norm);
    }

    #[test]
    fn parse_rejects_unknown_duplicate_and_missing_keys() {
        assert!(GlueNetConfig::from_text("token_in = 8\nwat = 1\n").is_err());
        assert!(GlueNetConfig::from_text(
            "token_in = 8\ntoken_in = 8\ntoken_out = 8\ndim_in = 4\ndim_out = 4\nnum_rms = 1\n"
        )
        .is_err());
        assert!(GlueNetConfig::from_text("token_in = 8\ntoken_out = 8\n").is_err());
    }

    #[test]
    fn mirror_swaps_extents() {
        let cfg = GlueNetConfig::new(128, 77, 768, 1024, 5);
        let m = cfg.mirrored();
        assert_eq!(m.token_in, 77);
        assert_eq!(m.token_out, 128);
        assert_eq!(m.dim_in, 1024);
        assert_eq!(m.dim_out, 768);
        assert_eq!(m.mirrored(), cfg);
    }

    #[test]
    fn hidden_widths_round_on_output_extents() {
        let cfg = GlueNetConfig::new(8, 8, 16, 16, 1);
        assert_eq!(cfg.token_hidden(), 16);
        assert_eq!(cfg.dim_hidden(), 28); // 1.75 * 16
    }
}
