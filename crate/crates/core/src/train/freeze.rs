use regex::Regex;

use super::TrainError;
use crate::models::Model;
use crate::nn::Parameterized;

/// Parameter names with the trailing `.weight`/`.bias` removed, in visit
/// order.
pub fn parameter_groups(model: &mut Model) -> Vec<String> {
    let mut groups: Vec<String> = Vec::new();
    model.net.visit_params("", &mut |name, _| {
        let g = name.rsplit_once('.').map(|(g, _)| g).unwrap_or(name).to_string();
        if !groups.contains(&g) {
            groups.push(g);
        }
    });
    groups
}

/// Freezes every parameter whose full name matches `pattern`; returns how
/// many were frozen.
pub fn freeze_layers(model: &mut Model, pattern: &str) -> Result<usize, TrainError> {
    let re = Regex::new(pattern).map_err(|e| TrainError::FreezePattern {
        pattern: format!("{pattern} ({e})"),
        groups: Vec::new(),
    })?;
    let mut n = 0;
    model.net.visit_params("", &mut |name, p| {
        if re.is_match(name) {
            p.frozen = true;
            n += 1;
        }
    });
    if n == 0 {
        return Err(TrainError::FreezePattern {
            pattern: pattern.to_string(),
            groups: parameter_groups(model),
        });
    }
    Ok(n)
}
