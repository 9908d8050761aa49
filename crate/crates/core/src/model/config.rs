use serde::{Deserialize, Serialize};

/// Which signal the encoders see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Two encoders: conformal factors and normals.
    Cfan,
    /// One encoder on vertex coordinates.
    Xyz,
}

/// Architecture, loss weights and optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// `(conformal, normal)` latent sizes. The coordinate variant uses their
    /// sum, split at the first size when a conformal/normal view is needed.
    pub latent_dims: (usize, usize),
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub lambda_kl: f64,
    pub lambda_d: f64,
    pub lambda_m: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Standard deviation of Gaussian vertex noise added to training inputs.
    pub noise_augment_sigma: Option<f64>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Adds the same-code cycle terms to the disentanglement penalty.
    pub ld_self_terms: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Cfan,
            latent_dims: (32, 32),
            encoder_widths: vec![12, 24, 48, 48, 96],
            decoder_widths: vec![128, 64, 64, 32, 16],
            lambda_kl: 1e-4,
            lambda_d: 5e-2,
            lambda_m: 5e-2,
            epochs: 300,
            batch: 32,
            seed: 0,
            noise_augment_sigma: None,
            learning_rate: 1e-3,
            weight_decay: 5e-5,
            ld_self_terms: false,
        }
    }
}

impl ModelConfig {
    /// Defaults for the coordinate variant, with its wider encoder.
    pub fn xyz() -> Self {
        ModelConfig {
            variant: Variant::Xyz,
            encoder_widths: vec![16, 32, 64, 64, 128],
            ..Default::default()
        }
    }

    pub fn total_latent(&self) -> usize {
        self.latent_dims.0 + self.latent_dims.1
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.latent_dims.0 == 0 || self.latent_dims.1 == 0 {
            return Err("latent sizes must be positive".into());
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.len() != self.decoder_widths.len() {
            return Err("encoder and decoder need the same positive number of layers".into());
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|&w| w == 0) {
            return Err("layer widths must be positive".into());
        }
        for (name, v) in [
            ("lambda_kl", self.lambda_kl),
            ("lambda_d", self.lambda_d),
            ("lambda_m", self.lambda_m),
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be finite and non-negative"));
            }
        }
        if self.batch < 2 {
            return Err("batch must hold at least one pair".into());
        }
        if let Some(s) = self.noise_augment_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err("noise_augment_sigma must be finite and non-negative".into());
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let c: ModelConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        c.validate()?;
        Ok(c)
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        crate::util::sha256_hex(self.to_toml().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let c = ModelConfig::default();
        assert_eq!(c.latent_dims, (32, 32));
        assert_eq!(c.lambda_kl, 1e-4);
        assert_eq!((c.lambda_d, c.lambda_m), (5e-2, 5e-2));
        assert_eq!(c.encoder_widths.len(), 5);
        assert_eq!(ModelConfig::from_toml(&c.to_toml()).unwrap(), c);
        let x = ModelConfig::xyz();
        assert_eq!(ModelConfig::from_toml(&x.to_toml()).unwrap(), x);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = ModelConfig::from_toml("epochs = 3\nlatent_dims = [4, 4]\nnoise_augment_sigma = 0.01\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.latent_dims, (4, 4));
        assert_eq!(c.noise_augment_sigma, Some(0.01));
        assert_eq!(c.batch, 32);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ModelConfig::from_toml("lambda_d = -1.0").is_err());
        assert!(ModelConfig::from_toml("batch = 1").is_err());
        assert!(ModelConfig::from_toml("encoder_widths = [4]").is_err());
        assert!(ModelConfig::from_toml("unknown = 1").is_err());
    }
}
