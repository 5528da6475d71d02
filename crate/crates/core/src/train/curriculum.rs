use rand::Rng;

use super::TrainError;
use crate::config::CurriculumConfig;

/// Modality availability for one sample. `anchor` is the modality that was
/// guaranteed to stay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Availability {
    pub mask: Vec<bool>,
    pub anchor: usize,
}

/// Drop probability at 0-based `epoch` of `epochs`: zero during warmup,
/// then a linear ramp that reaches `p_max` at the last epoch.
pub fn drop_probability(epoch: usize, epochs: usize, schedule: &CurriculumConfig) -> Result<f64, TrainError> {
    if !(0.0..1.0).contains(&schedule.p_max) {
        return Err(TrainError::Curriculum(format!("p_max must be in [0, 1), got {}", schedule.p_max)));
    }
    let warm = (epochs as f64 * schedule.warmup_fraction).floor() as usize;
    if epoch < warm || epochs <= warm {
        return Ok(0.0);
    }
    let span = (epochs - warm) as f64;
    Ok(schedule.p_max * ((epoch - warm + 1) as f64 / span).min(1.0))
}

/// Draws an availability mask. One anchor is picked uniformly among the
/// modalities present on disk (`present`); every other present modality
/// is dropped independently with the scheduled probability.
pub fn modality_curriculum<R: Rng>(
    epoch: usize,
    epochs: usize,
    schedule: &CurriculumConfig,
    present: &[bool],
    rng: &mut R,
) -> Result<Availability, TrainError> {
    let p = drop_probability(epoch, epochs, schedule)?;
    let candidates: Vec<usize> = (0..present.len()).filter(|m| present[*m]).collect();
    if candidates.is_empty() {
        return Err(TrainError::Curriculum("sample has no modality on disk".into()));
    }
    let anchor = candidates[rng.random_range(0..candidates.len())];
    let mut mask = present.to_vec();
    if p > 0.0 {
        for m in candidates {
            if m != anchor && rng.random::<f64>() < p {
                mask[m] = false;
            }
        }
    }
    Ok(Availability { mask, anchor })
}
