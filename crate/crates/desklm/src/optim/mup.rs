//! µP-style width scaling for hyperparameter transfer.
//!
//! Hidden matrices already initialize at variance 1/fan_in; µP adds a
//! hidden-group LR multiplier and an output-logit scale, both
//! `base_width / width`. Embedding (and other AdamW-group) learning rates
//! are left unscaled.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MupSettings {
    pub base_width: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MupOverrides {
    /// Multiplier on the hidden-matrix (NorMuon group) learning rate.
    pub hidden_lr_mult: f64,
    /// Multiplier on embedding / 1-D (AdamW group) learning rates.
    pub adamw_lr_mult: f64,
    /// Multiplier applied to the output logits in the forward pass.
    pub logit_scale: f64,
}

pub fn mup_apply(settings: &MupSettings) -> MupOverrides {
    assert!(settings.base_width > 0 && settings.width > 0, "widths must be positive");
    let ratio = settings.base_width as f64 / settings.width as f64;
    MupOverrides { hidden_lr_mult: ratio, adamw_lr_mult: 1.0, logit_scale: ratio }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_widths_are_a_noop() {
        let o = mup_apply(&MupSettings { base_width: 128, width: 128 });
        assert_eq!(o.hidden_lr_mult, 1.0);
        assert_eq!(o.adamw_lr_mult, 1.0);
        assert_eq!(o.logit_scale, 1.0);
    }

    #[test]
    fn doubling_width_halves_hidden_lr_and_logit_scale() {
        let o = mup_apply(&MupSettings { base_width: 64, width: 128 });
        assert_eq!(o.hidden_lr_mult, 0.5);
        assert_eq!(o.logit_scale, 0.5);
        assert_eq!(o.adamw_lr_mult, 1.0);
    }

    #[test]
    fn shrinking_width_scales_up() {
        let o = mup_apply(&MupSettings { base_width: 256, width: 64 });
        assert_eq!(o.hidden_lr_mult, 4.0);
        assert_eq!(o.logit_scale, 4.0);
    }
}
