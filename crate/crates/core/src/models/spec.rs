use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Unet2d,
    Unet3d,
    FilmUnet,
    AttentionUnet,
    HemisUnet,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Unet2d => "unet2d",
            Architecture::Unet3d => "unet3d",
            Architecture::FilmUnet => "film_unet",
            Architecture::AttentionUnet => "attention_unet",
            Architecture::HemisUnet => "hemis_unet",
        }
    }
}

/// Network description. `spatial_dims` selects 2D or 3D kernels for the
/// architectures whose name does not fix it; `film_input_dim` is the length
/// of the metadata encoding and is filled in from the training vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub depth: usize,
    pub base_filters: usize,
    pub in_channels: usize,
    pub out_classes: usize,
    pub dropout_rate: f64,
    pub film_layers: Vec<bool>,
    pub film_metadata_key: Option<String>,
    pub n_modalities: usize,
    pub spatial_dims: Option<usize>,
    pub film_input_dim: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            architecture: Architecture::Unet2d,
            depth: 3,
            base_filters: 8,
            in_channels: 1,
            out_classes: 1,
            dropout_rate: 0.2,
            film_layers: Vec::new(),
            film_metadata_key: None,
            n_modalities: 1,
            spatial_dims: None,
            film_input_dim: 0,
        }
    }
}

impl ModelSpec {
    /// Number of blocks FiLM can modulate: encoder levels, bottleneck,
    /// decoder levels.
    pub fn modulatable_blocks(&self) -> usize {
        2 * self.depth + 1
    }

    /// Decoder-only mask, the default placement.
    pub fn default_film_layers(&self) -> Vec<bool> {
        (0..self.modulatable_blocks()).map(|i| i > self.depth).collect()
    }

    pub fn dims(&self) -> usize {
        match self.architecture {
            Architecture::Unet2d => 2,
            Architecture::Unet3d => 3,
            _ => self.spatial_dims.unwrap_or(2),
        }
    }

    pub fn kernel(&self) -> [usize; 3] {
        if self.dims() == 2 {
            [1, 3, 3]
        } else {
            [3, 3, 3]
        }
    }

    pub fn pool_factor(&self) -> [usize; 3] {
        if self.dims() == 2 {
            [1, 2, 2]
        } else {
            [2, 2, 2]
        }
    }

    /// Channels of the block at encoder level `l` (`l == depth` is the
    /// bottleneck).
    pub fn level_channels(&self, l: usize) -> usize {
        self.base_filters << l
    }

    /// Fills fields whose defaults depend on other fields.
    pub fn with_defaults(mut self) -> Self {
        if self.architecture == Architecture::FilmUnet && self.film_layers.is_empty() {
            self.film_layers = self.default_film_layers();
        }
        if self.spatial_dims.is_none() {
            self.spatial_dims = Some(self.dims());
        }
        if self.architecture == Architecture::HemisUnet && self.n_modalities == 1 && self.in_channels > 1 {
            self.n_modalities = self.in_channels;
        }
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field: &str, msg: String| Err(ModelError::InvalidSpec { field: field.to_string(), msg });
        if self.depth == 0 || self.depth > 6 {
            return bad("depth", format!("must be in 1..=6, got {}", self.depth));
        }
        if self.base_filters == 0 {
            return bad("base_filters", "must be at least 1".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels", "must be at least 1".into());
        }
        if self.out_classes == 0 {
            return bad("out_classes", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate", format!("must be in [0, 1), got {}", self.dropout_rate));
        }
        match (self.architecture, self.spatial_dims) {
            (_, Some(d)) if d != 2 && d != 3 => return bad("spatial_dims", format!("must be 2 or 3, got {d}")),
            (Architecture::Unet2d, Some(3)) | (Architecture::Unet3d, Some(2)) => {
                return bad("spatial_dims", format!("conflicts with architecture {}", self.architecture.name()))
            }
            _ => {}
        }
        let film = self.architecture == Architecture::FilmUnet;
        if !film && !self.film_layers.is_empty() {
            return bad("film_layers", "only allowed with film_unet".into());
        }
        if !film && self.film_metadata_key.is_some() {
            return bad("film_metadata_key", "requires architecture film_unet".into());
        }
        if film {
            if self.film_metadata_key.is_none() {
                return bad("film_metadata_key", "required for film_unet".into());
            }
            if !self.film_layers.is_empty() && self.film_layers.len() != self.modulatable_blocks() {
                return bad(
                    "film_layers",
                    format!("needs {} entries (encoder, bottleneck, decoder), got {}", self.modulatable_blocks(), self.film_layers.len()),
                );
            }
            if !self.film_layers.is_empty() && !self.film_layers.iter().any(|b| *b) {
                return bad("film_layers", "must select at least one layer".into());
            }
        }
        if self.architecture == Architecture::HemisUnet {
            if self.n_modalities < 1 {
                return bad("n_modalities", "must be at least 1".into());
            }
            if self.in_channels != self.n_modalities {
                return bad("n_modalities", format!("must equal in_channels ({}) for hemis_unet", self.in_channels));
            }
        } else if self.n_modalities != 1 {
            return bad("n_modalities", "only meaningful for hemis_unet".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let spec = ModelSpec::default().with_defaults();
        spec.validate().unwrap();
        assert_eq!(spec.dims(), 2);

        let film = ModelSpec {
            architecture: Architecture::FilmUnet,
            film_metadata_key: Some("contrast".into()),
            ..Default::default()
        }
        .with_defaults();
        film.validate().unwrap();
        assert_eq!(film.film_layers, vec![false, false, false, false, true, true, true]);

        let wrong = ModelSpec {
            film_layers: vec![true; 7],
            ..Default::default()
        };
        assert!(matches!(wrong.validate(), Err(ModelError::InvalidSpec { field, .. }) if field == "film_layers"));
        let wrong = ModelSpec {
            dropout_rate: 1.0,
            ..Default::default()
        };
        assert!(wrong.validate().is_err());
        let arch: Architecture = serde_json::from_str("\"attention_unet\"").unwrap();
        assert_eq!(arch, Architecture::AttentionUnet);
    }
}
