use std::fmt;
use std::str::FromStr;

use ndarray::Axis;
use thiserror::Error;

use super::{matmul_affine, Affine, Volume};

#[derive(Debug, Error, PartialEq)]
pub enum OrientationError {
    #[error("invalid orientation code {0:?}: expected three letters, one from each of R/L, A/P, S/I")]
    InvalidCode(String),
}

/// Direction a voxel axis points toward, in RAS+ world space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisCode {
    R,
    L,
    A,
    P,
    S,
    I,
}

impl AxisCode {
    fn world_axis(self) -> usize {
        match self {
            AxisCode::R | AxisCode::L => 0,
            AxisCode::A | AxisCode::P => 1,
            AxisCode::S | AxisCode::I => 2,
        }
    }

    fn positive(self) -> bool {
        matches!(self, AxisCode::R | AxisCode::A | AxisCode::S)
    }

    fn from_parts(world_axis: usize, positive: bool) -> Self {
        match (world_axis, positive) {
            (0, true) => AxisCode::R,
            (0, false) => AxisCode::L,
            (1, true) => AxisCode::A,
            (1, false) => AxisCode::P,
            (2, true) => AxisCode::S,
            _ => AxisCode::I,
        }
    }

    fn letter(self) -> char {
        match self {
            AxisCode::R => 'R',
            AxisCode::L => 'L',
            AxisCode::A => 'A',
            AxisCode::P => 'P',
            AxisCode::S => 'S',
            AxisCode::I => 'I',
        }
    }
}

/// Three-letter axis code such as `RAS` or `LPI`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Orientation(pub [AxisCode; 3]);

impl Orientation {
    pub const RAS: Orientation = Orientation([AxisCode::R, AxisCode::A, AxisCode::S]);

    /// Closest axis code for each voxel axis of an affine.
    pub fn from_affine(affine: &Affine) -> Self {
        let mut used_world = [false; 3];
        let mut used_voxel = [false; 3];
        let mut codes = [AxisCode::R; 3];
        // assign greedily by largest absolute direction cosine
        for _ in 0..3 {
            let mut best = (0usize, 0usize, -1.0f64);
            for (j, used_j) in used_voxel.iter().enumerate() {
                if *used_j {
                    continue;
                }
                let norm = (0..3).map(|i| affine[i][j].powi(2)).sum::<f64>().sqrt().max(1e-12);
                for (i, used_i) in used_world.iter().enumerate() {
                    if *used_i {
                        continue;
                    }
                    let v = affine[i][j].abs() / norm;
                    if v > best.2 {
                        best = (j, i, v);
                    }
                }
            }
            let (j, i, _) = best;
            used_voxel[j] = true;
            used_world[i] = true;
            codes[j] = AxisCode::from_parts(i, affine[i][j] >= 0.0);
        }
        Orientation(codes)
    }
}

impl FromStr for Orientation {
    type Err = OrientationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || OrientationError::InvalidCode(s.to_string());
        let chars: Vec<char> = s.trim().to_ascii_uppercase().chars().collect();
        if chars.len() != 3 {
            return Err(err());
        }
        let mut codes = [AxisCode::R; 3];
        let mut seen = [false; 3];
        for (k, c) in chars.iter().enumerate() {
            let code = match c {
                'R' => AxisCode::R,
                'L' => AxisCode::L,
                'A' => AxisCode::A,
                'P' => AxisCode::P,
                'S' => AxisCode::S,
                'I' => AxisCode::I,
                _ => return Err(err()),
            };
            if seen[code.world_axis()] {
                return Err(err());
            }
            seen[code.world_axis()] = true;
            codes[k] = code;
        }
        Ok(Orientation(codes))
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in self.0 {
            write!(f, "{}", c.letter())?;
        }
        Ok(())
    }
}

/// Permutes and flips voxel axes so they point along `target`, keeping the
/// world position of every voxel fixed.
pub fn reorient(volume: &Volume, target: Orientation) -> Volume {
    let current = volume.orientation();
    if current == target {
        return volume.clone();
    }
    let dims = volume.shape3();
    // for each new axis k: the old voxel axis feeding it and whether it flips
    let mut source = [0usize; 3];
    let mut flip = [false; 3];
    for (k, t) in target.0.iter().enumerate() {
        let j = (0..3)
            .find(|&j| current.0[j].world_axis() == t.world_axis())
            .expect("orientation codes cover all world axes");
        source[k] = j;
        flip[k] = current.0[j].positive() != t.positive();
    }

    let mut view = volume.data.view().permuted_axes([0, source[0] + 1, source[1] + 1, source[2] + 1]);
    for (k, f) in flip.iter().enumerate() {
        if *f {
            view.invert_axis(Axis(k + 1));
        }
    }
    let data = view.as_standard_layout().to_owned();

    // old_index = T * new_index
    let mut t = [[0.0f64; 4]; 4];
    t[3][3] = 1.0;
    for k in 0..3 {
        let j = source[k];
        if flip[k] {
            t[j][k] = -1.0;
            t[j][3] = (dims[j] - 1) as f64;
        } else {
            t[j][k] = 1.0;
        }
    }
    let affine = matmul_affine(&volume.affine, &t);
    let spacing = [volume.spacing[source[0]], volume.spacing[source[1]], volume.spacing[source[2]]];
    Volume {
        data,
        spacing,
        affine,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn lpi_volume() -> Volume {
        let affine = [
            [-1.0, 0.0, 0.0, 20.0],
            [0.0, 0.0, -2.0, 30.0],
            [0.0, -3.0, 0.0, 40.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let data = Array4::from_shape_fn((1, 4, 5, 6), |(_, x, y, z)| (x * 100 + y * 10 + z) as f32);
        Volume::new(data, [1.0, 3.0, 2.0], affine).unwrap()
    }

    #[test]
    fn parses_and_rejects_codes() {
        assert_eq!("ras".parse::<Orientation>().unwrap(), Orientation::RAS);
        assert_eq!("LPI".parse::<Orientation>().unwrap().to_string(), "LPI");
        assert!("RRS".parse::<Orientation>().is_err());
        assert!("RA".parse::<Orientation>().is_err());
        assert!("RAX".parse::<Orientation>().is_err());
    }

    #[test]
    fn detects_orientation() {
        assert_eq!(lpi_volume().orientation().to_string(), "LIP");
    }

    #[test]
    fn same_orientation_is_identity() {
        let v = lpi_volume();
        let same = reorient(&v, v.orientation());
        assert_eq!(same, v);
    }

    #[test]
    fn world_coordinates_preserved() {
        let v = lpi_volume();
        let r = reorient(&v, Orientation::RAS);
        assert_eq!(r.orientation(), Orientation::RAS);
        assert_eq!(r.shape3(), [4, 6, 5]);
        // every voxel keeps its world coordinate and value
        for x in 0..4 {
            for y in 0..5 {
                for z in 0..6 {
                    let w = v.world([x as f64, y as f64, z as f64]);
                    let value = v.data[[0, x, y, z]];
                    let found = (0..4).flat_map(|i| (0..6).flat_map(move |j| (0..5).map(move |k| (i, j, k)))).find(|&(i, j, k)| {
                        let w2 = r.world([i as f64, j as f64, k as f64]);
                        (0..3).all(|d| (w2[d] - w[d]).abs() < 1e-6)
                    });
                    let (i, j, k) = found.expect("voxel must exist after reorient");
                    assert_eq!(r.data[[0, i, j, k]], value);
                }
            }
        }
    }

    #[test]
    fn double_flip_returns_original() {
        let v = lpi_volume();
        let back = reorient(&reorient(&v, Orientation::RAS), v.orientation());
        assert_eq!(back.data, v.data);
        for i in 0..4 {
            for j in 0..4 {
                assert!((back.affine[i][j] - v.affine[i][j]).abs() < 1e-9);
            }
        }
    }
}
