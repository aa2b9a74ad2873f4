//! Phase-encode line masks.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Centered always-on band: `[n/2 - width/2, n/2 - width/2 + width)`.
pub fn band_range(n_pe: usize, width: usize) -> Range<usize> {
    let start = n_pe / 2 - width / 2;
    start..start + width
}

/// Binary selection of phase-encode lines (columns of k-space) with a
/// forced low-frequency band. Constant along the readout axis.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SamplingMask {
    n_pe: usize,
    budget: usize,
    low_freq_width: usize,
    lines: Vec<bool>,
}

impl SamplingMask {
    pub fn new(lines: Vec<bool>, low_freq_width: usize) -> Result<Self> {
        let n_pe = lines.len();
        if n_pe == 0 {
            return invalid("mask needs at least one line");
        }
        if low_freq_width > n_pe {
            return invalid(format!("band {low_freq_width} wider than {n_pe} lines"));
        }
        if band_range(n_pe, low_freq_width).any(|j| !lines[j]) {
            return invalid("mask does not contain its low-frequency band");
        }
        let budget = lines.iter().filter(|&&b| b).count();
        Ok(Self {
            n_pe,
            budget,
            low_freq_width,
            lines,
        })
    }

    pub fn from_indices(n_pe: usize, indices: &[usize], low_freq_width: usize) -> Result<Self> {
        let mut lines = vec![false; n_pe];
        for &i in indices {
            if i >= n_pe {
                return invalid(format!("line {i} out of range for {n_pe} lines"));
            }
            if lines[i] {
                return invalid(format!("line {i} listed twice"));
            }
            lines[i] = true;
        }
        Self::new(lines, low_freq_width)
    }

    pub fn full(n_pe: usize, low_freq_width: usize) -> Self {
        Self::new(vec![true; n_pe], low_freq_width).expect("full mask is valid")
    }

    /// Just the forced band.
    pub fn band_only(n_pe: usize, low_freq_width: usize) -> Result<Self> {
        let mut lines = vec![false; n_pe];
        if low_freq_width > n_pe {
            return invalid(format!("band {low_freq_width} wider than {n_pe} lines"));
        }
        for j in band_range(n_pe, low_freq_width) {
            lines[j] = true;
        }
        Self::new(lines, low_freq_width)
    }

    pub fn n_pe(&self) -> usize {
        self.n_pe
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn low_freq_width(&self) -> usize {
        self.low_freq_width
    }

    pub fn lines(&self) -> &[bool] {
        &self.lines
    }

    pub fn is_sampled(&self, j: usize) -> bool {
        self.lines[j]
    }

    pub fn band(&self) -> Range<usize> {
        band_range(self.n_pe, self.low_freq_width)
    }

    pub fn is_forced(&self, j: usize) -> bool {
        self.band().contains(&j)
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.n_pe).filter(|&j| self.lines[j]).collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.lines
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }

    /// Moves one sampled, non-forced line to an unsampled position.
    pub fn swapped(&self, remove: usize, add: usize) -> Result<Self> {
        if !self.lines[remove] || self.lines[add] || self.is_forced(remove) {
            return invalid(format!("illegal swap {remove} -> {add}"));
        }
        let mut lines = self.lines.clone();
        lines[remove] = false;
        lines[add] = true;
        Ok(Self {
            lines,
            ..self.clone()
        })
    }

    /// `n_pe budget low_freq_width` on the first line, sorted sampled
    /// indices on the second.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {}\n", self.n_pe, self.budget, self.low_freq_width);
        let idx: Vec<String> = self.indices().iter().map(|i| i.to_string()).collect();
        let _ = writeln!(s, "{}", idx.join(" "));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<usize> = lines
            .next()
            .ok_or_else(|| Error::Parse("empty mask file".into()))?
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Parse(format!("bad header token `{t}`")))
            })
            .collect::<Result<_>>()?;
        let [n_pe, budget, width] = header[..] else {
            return Err(Error::Parse("mask header needs 3 fields".into()));
        };
        let idx: Vec<usize> = lines
            .next()
            .unwrap_or("")
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Parse(format!("bad index `{t}`")))
            })
            .collect::<Result<_>>()?;
        if idx.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parse(
                "mask indices must be strictly increasing".into(),
            ));
        }
        let m = Self::from_indices(n_pe, &idx, width)?;
        if m.budget != budget {
            return Err(Error::Parse(format!(
                "header budget {budget} but {} indices",
                m.budget
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// `floor(n_pe / accel)`.
pub fn budget_for(n_pe: usize, accel: f64) -> Result<usize> {
    if !(accel >= 1.0) || !accel.is_finite() {
        return invalid(format!("acceleration must be >= 1, got {accel}"));
    }
    Ok((n_pe as f64 / accel).floor() as usize)
}

/// Band width for a low-frequency fraction: `round(frac * n_pe)`.
pub fn band_width_for(n_pe: usize, low_freq_frac: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&low_freq_frac) {
        return invalid(format!(
            "low-frequency fraction {low_freq_frac} outside [0, 1]"
        ));
    }
    Ok((low_freq_frac * n_pe as f64).round() as usize)
}

/// Uniform random mask: the band plus `budget - band` lines drawn without
/// replacement from the rest, deterministic per seed.
pub fn uniform_random_mask(
    n_pe: usize,
    accel: f64,
    low_freq_frac: f64,
    seed: u64,
) -> Result<SamplingMask> {
    let budget = budget_for(n_pe, accel)?;
    let band = band_width_for(n_pe, low_freq_frac)?;
    uniform_random_mask_with_band(n_pe, budget, band, seed)
}

pub fn uniform_random_mask_with_band(
    n_pe: usize,
    budget: usize,
    low_freq_width: usize,
    seed: u64,
) -> Result<SamplingMask> {
    if budget > n_pe {
        return invalid(format!("budget {budget} exceeds {n_pe} lines"));
    }
    if low_freq_width > budget {
        return invalid(format!(
            "low-frequency band of {low_freq_width} lines exceeds budget {budget}"
        ));
    }
    let band = band_range(n_pe, low_freq_width);
    let rest: Vec<usize> = (0..n_pe).filter(|j| !band.contains(j)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, rest.len(), budget - low_freq_width);
    let mut lines = vec![false; n_pe];
    band.for_each(|j| lines[j] = true);
    for p in picks {
        lines[rest[p]] = true;
    }
    SamplingMask::new(lines, low_freq_width)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_is_centered_on_dc() {
        assert_eq!(band_range(64, 5), 30..35);
        assert_eq!(band_range(8, 1), 4..5);
        assert_eq!(band_range(64, 6), 29..35);
        assert_eq!(band_range(6, 6), 0..6);
    }

    #[test]
    fn random_mask_examples() {
        assert_eq!(budget_for(368, 4.0).unwrap(), 92);
        let m = uniform_random_mask(368, 4.0, 0.08, 1).unwrap();
        assert_eq!(m.budget(), 92);
        assert_eq!(m.low_freq_width(), 29);
        let full = uniform_random_mask(64, 1.0, 0.08, 3).unwrap();
        assert!(full.lines().iter().all(|&b| b));
        assert_eq!(
            uniform_random_mask(64, 4.0, 0.08, 9).unwrap(),
            uniform_random_mask(64, 4.0, 0.08, 9).unwrap()
        );
        assert_ne!(
            uniform_random_mask(64, 4.0, 0.08, 9).unwrap(),
            uniform_random_mask(64, 4.0, 0.08, 10).unwrap()
        );
    }

    #[test]
    fn band_exceeding_budget_rejected() {
        assert!(matches!(
            uniform_random_mask(64, 16.0, 0.2, 0),
            Err(Error::Validation(_))
        ));
        assert!(budget_for(64, 0.0).is_err());
        assert!(budget_for(64, 0.5).is_err());
    }

    #[test]
    fn text_format() {
        let m = SamplingMask::from_indices(8, &[1, 4, 6], 1).unwrap();
        assert_eq!(m.to_text(), "8 3 1\n1 4 6\n");
        assert_eq!(SamplingMask::from_text(&m.to_text()).unwrap(), m);
        assert!(SamplingMask::from_text("8 2 1\n1 4 6\n").is_err());
        assert!(SamplingMask::from_text("8 3 1\n1 6 4\n").is_err());
        assert!(SamplingMask::from_text("8 2 1\n1 6\n").is_err()); // band line 4 missing
    }

    #[test]
    fn swap_keeps_band() {
        let m = SamplingMask::from_indices(8, &[1, 4], 1).unwrap();
        assert!(m.swapped(4, 0).is_err());
        let s = m.swapped(1, 7).unwrap();
        assert_eq!(s.indices(), vec![4, 7]);
        assert_eq!(s.budget(), 2);
    }
}
