use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerrainKind {
    #[default]
    Flat,
    Slope,
    RandomSlats,
    StackedSlats,
}

/// Ground description. Slats run across the walking direction, so the
/// height depends on `x` only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainConfig {
    pub kind: TerrainKind,
    /// Incline (rad) for `slope`.
    pub slope: f64,
    /// Where the slope or the first slat begins (m).
    pub start: f64,
    /// Slat depth along x (m).
    pub slat_length: f64,
    /// Heights of consecutive stacked slats (m); flat ground after the last.
    pub slat_heights: Vec<f64>,
    /// Height levels random slats are drawn from (m).
    pub random_levels: Vec<f64>,
    /// Number of random slats.
    pub random_count: usize,
    pub seed: u64,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        Self {
            kind: TerrainKind::Flat,
            slope: 18f64.to_radians(),
            start: 0.5,
            slat_length: 0.25,
            slat_heights: vec![
                0.02, 0.04, 0.06, 0.06, 0.04, 0.02, 0.0, 0.02, 0.04, 0.06, 0.04, 0.02,
            ],
            random_levels: vec![0.0, 0.02, 0.04, 0.06],
            random_count: 40,
            seed: 0,
        }
    }
}

impl TerrainConfig {
    pub fn flat() -> Self {
        Self::default()
    }

    pub fn of_kind(kind: TerrainKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.slat_length > 0.0) {
            return invalid("terrain.slat_length must be > 0");
        }
        if !(self.slope.abs() < std::f64::consts::FRAC_PI_4) {
            return invalid("terrain.slope must be below 45 degrees");
        }
        if self.kind == TerrainKind::RandomSlats && self.random_levels.is_empty() {
            return invalid("terrain.random_levels must not be empty");
        }
        if self
            .slat_heights
            .iter()
            .chain(&self.random_levels)
            .any(|h| !h.is_finite())
        {
            return invalid("terrain heights must be finite");
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Terrain> {
        self.validate()?;
        let slats = match self.kind {
            TerrainKind::StackedSlats => self.slat_heights.clone(),
            TerrainKind::RandomSlats => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (0..self.random_count)
                    .map(|_| self.random_levels[rng.random_range(0..self.random_levels.len())])
                    .collect()
            }
            _ => Vec::new(),
        };
        Ok(Terrain {
            kind: self.kind,
            slope: self.slope,
            start: self.start,
            slat_length: self.slat_length,
            slats,
        })
    }
}

/// Height field queried only by the simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Terrain {
    kind: TerrainKind,
    slope: f64,
    start: f64,
    slat_length: f64,
    slats: Vec<f64>,
}

impl Terrain {
    pub fn flat() -> Self {
        TerrainConfig::flat()
            .build()
            .expect("default terrain is valid")
    }

    pub fn height(&self, x: f64, _y: f64) -> f64 {
        match self.kind {
            TerrainKind::Flat => 0.0,
            TerrainKind::Slope => (x - self.start).max(0.0) * self.slope.tan(),
            TerrainKind::RandomSlats | TerrainKind::StackedSlats => {
                if x < self.start {
                    return 0.0;
                }
                let i = ((x - self.start) / self.slat_length).floor() as usize;
                self.slats.get(i).copied().unwrap_or(0.0)
            }
        }
    }

    pub fn slats(&self) -> &[f64] {
        &self.slats
    }

    pub fn max_height(&self) -> f64 {
        self.slats.iter().copied().fold(0.0, f64::max)
    }
}
