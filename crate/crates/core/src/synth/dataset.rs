use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use scanmask_autodiff::ksf::{self, KsfEntry};
use serde::{Deserialize, Serialize};

use super::{add_noise, generate_phantom, simulate_coil_maps};
use crate::cimage::CImage;
use crate::encoding::{extract_lowfreq, Encoder, MultiCoilKSpace, SensMaps};
use crate::error::{dim, invalid, Error, Result};
use crate::fft::check_fft_dims;
use crate::mask::{band_width_for, budget_for, SamplingMask};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Grid, coil and acquisition settings for synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub h: usize,
    pub w: usize,
    pub coils: usize,
    pub accel: f64,
    pub low_freq_frac: f64,
    pub noise_sigma: f64,
    pub n_ellipses: usize,
    /// Columns of the low-frequency observation; `None` picks the smallest
    /// even width covering the forced band.
    pub lowfreq_obs_width: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            h: 64,
            w: 64,
            coils: 4,
            accel: 4.0,
            low_freq_frac: 0.08,
            noise_sigma: 0.005,
            n_ellipses: 8,
            lowfreq_obs_width: None,
        }
    }
}

impl DatasetConfig {
    pub fn budget(&self) -> Result<usize> {
        budget_for(self.w, self.accel)
    }

    pub fn band_width(&self) -> Result<usize> {
        band_width_for(self.w, self.low_freq_frac)
    }

    pub fn obs_width(&self) -> Result<usize> {
        match self.lowfreq_obs_width {
            Some(l) => Ok(l),
            None => {
                let band = self.band_width()?;
                Ok((band + band % 2).max(2).min(self.w))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_fft_dims(self.h, self.w)?;
        if self.coils == 0 {
            return invalid("coils must be >= 1");
        }
        if self.n_ellipses == 0 {
            return invalid("n_ellipses must be >= 1");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return invalid(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        let budget = self.budget()?;
        let band = self.band_width()?;
        if band > budget {
            return invalid(format!(
                "low-frequency band of {band} lines exceeds budget {budget}"
            ));
        }
        let l = self.obs_width()?;
        if l == 0 || l % 2 != 0 || l > self.w {
            return invalid(format!(
                "low-frequency observation width must be even and <= {}, got {l}",
                self.w
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub coils: usize,
    pub noise_sigma: f64,
    pub accel: f64,
    pub budget: usize,
    pub low_freq_width: usize,
    pub lowfreq_obs_width: usize,
    pub n_ellipses: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn record_count(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn record_path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}.ksf"))
    }

    pub fn mask_path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}.mask"))
    }

    /// Reads the manifest and checks every listed record file exists.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return invalid(format!("unsupported manifest version {}", m.version));
        }
        for id in m.train.iter().chain(&m.test) {
            let p = Self::record_path(dir, id);
            if !p.is_file() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("missing record file {}", p.display()),
                )));
            }
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Loads one record plus its label mask, if present.
    pub fn load_record(&self, dir: &Path, id: &str) -> Result<ScanRecord> {
        let mut rec = ScanRecord::load(&Self::record_path(dir, id), id)?;
        if rec.x_gt.dims() != (self.h, self.w) || rec.maps.coils() != self.coils {
            return dim(format!("record {id} does not match the manifest grid"));
        }
        let mp = Self::mask_path(dir, id);
        if mp.is_file() {
            let m = SamplingMask::load(&mp)?;
            if m.n_pe() != self.w {
                return dim(format!("mask of record {id} has {} lines", m.n_pe()));
            }
            rec.m_ref = Some(m);
        }
        Ok(rec)
    }

    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Vec<ScanRecord>> {
        self.ids(split)
            .par_iter()
            .map(|id| self.load_record(dir, id))
            .collect()
    }
}

/// One example: ground truth, coil maps, fully sampled noisy k-space, the
/// coil-averaged low-frequency block and an optional reference mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub id: String,
    pub x_gt: CImage,
    pub maps: SensMaps,
    pub y_full: MultiCoilKSpace,
    pub z: CImage,
    pub m_ref: Option<SamplingMask>,
}

fn stack_interleaved(imgs: &[CImage]) -> Vec<f64> {
    imgs.iter().flat_map(|i| i.to_interleaved()).collect()
}

fn unstack_interleaved(e: &KsfEntry, name: &str) -> Result<Vec<CImage>> {
    if e.dims.len() != 4 || e.dims[3] != 2 {
        return dim(format!("`{name}` must be [C, H, W, 2], got {:?}", e.dims));
    }
    let (c, h, w) = (e.dims[0], e.dims[1], e.dims[2]);
    let data = e.data.to_real::<f64>();
    (0..c)
        .map(|k| CImage::from_interleaved(h, w, &data[k * h * w * 2..(k + 1) * h * w * 2]))
        .collect()
}

fn image_entry(name: &str, img: &CImage) -> KsfEntry {
    KsfEntry::f64(name, vec![img.h(), img.w(), 2], img.to_interleaved())
}

fn image_from_entry(e: &KsfEntry, name: &str) -> Result<CImage> {
    if e.dims.len() != 3 || e.dims[2] != 2 {
        return dim(format!("`{name}` must be [H, W, 2], got {:?}", e.dims));
    }
    CImage::from_interleaved(e.dims[0], e.dims[1], &e.data.to_real::<f64>())
}

impl ScanRecord {
    pub fn to_entries(&self) -> Vec<KsfEntry> {
        let (h, w) = self.x_gt.dims();
        let c = self.maps.coils();
        vec![
            image_entry("x_gt", &self.x_gt),
            KsfEntry::f64(
                "maps",
                vec![c, h, w, 2],
                stack_interleaved(self.maps.maps()),
            ),
            KsfEntry::f64(
                "y_full",
                vec![c, h, w, 2],
                stack_interleaved(self.y_full.coils()),
            ),
            image_entry("z", &self.z),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ksf::save(path, &self.to_entries())?;
        Ok(())
    }

    pub fn load(path: &Path, id: &str) -> Result<Self> {
        let entries = ksf::load(path)?;
        let x_gt = image_from_entry(ksf::find(&entries, "x_gt")?, "x_gt")?;
        let maps = SensMaps::new(unstack_interleaved(ksf::find(&entries, "maps")?, "maps")?)?;
        let y_full = MultiCoilKSpace::new(unstack_interleaved(
            ksf::find(&entries, "y_full")?,
            "y_full",
        )?)?;
        let z = image_from_entry(ksf::find(&entries, "z")?, "z")?;
        if maps.dims() != x_gt.dims() || y_full.dims() != x_gt.dims() {
            return dim(format!("record {id}: inconsistent dims"));
        }
        if y_full.n_coils() != maps.coils() {
            return dim(format!("record {id}: coil count mismatch"));
        }
        Ok(Self {
            id: id.to_string(),
            x_gt,
            maps,
            y_full,
            z,
            m_ref: None,
        })
    }

    /// Synthesizes one record from a single seed.
    pub fn synthesize(id: &str, cfg: &DatasetConfig, seed: u64) -> Result<Self> {
        let x_gt = generate_phantom(cfg.h, cfg.w, cfg.n_ellipses, splitmix(seed ^ 1))?;
        let maps = simulate_coil_maps(cfg.coils, cfg.h, cfg.w, splitmix(seed ^ 2))?;
        let clean = Encoder::new(&maps)?.forward(&x_gt, None)?;
        let y_full = add_noise(&clean, cfg.noise_sigma, splitmix(seed ^ 3))?;
        let z = extract_lowfreq(&y_full, cfg.obs_width()?)?;
        Ok(Self {
            id: id.to_string(),
            x_gt,
            maps,
            y_full,
            z,
            m_ref: None,
        })
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of record `index` in `split`; train and test use disjoint streams.
pub fn record_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x7472_6169_6e00_0000u64,
        Split::Test => 0x7465_7374_0000_0000u64,
    };
    splitmix(splitmix(seed ^ tag).wrapping_add(index as u64))
}

fn record_id(split: Split, index: usize) -> String {
    match split {
        Split::Train => format!("train_{index:04}"),
        Split::Test => format!("test_{index:04}"),
    }
}

/// Writes `n_train + n_test` records and the manifest into `dir`.
pub fn build_dataset(
    dir: &Path,
    n_train: usize,
    n_test: usize,
    cfg: &DatasetConfig,
    seed: u64,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let jobs: Vec<(Split, usize)> = (0..n_train)
        .map(|i| (Split::Train, i))
        .chain((0..n_test).map(|i| (Split::Test, i)))
        .collect();
    jobs.par_iter()
        .map(|&(split, i)| {
            let id = record_id(split, i);
            let rec = ScanRecord::synthesize(&id, cfg, record_seed(seed, split, i))?;
            rec.save(&DatasetManifest::record_path(dir, &id))
        })
        .collect::<Result<()>>()?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        h: cfg.h,
        w: cfg.w,
        coils: cfg.coils,
        noise_sigma: cfg.noise_sigma,
        accel: cfg.accel,
        budget: cfg.budget()?,
        low_freq_width: cfg.band_width()?,
        lowfreq_obs_width: cfg.obs_width()?,
        n_ellipses: cfg.n_ellipses,
        train: (0..n_train).map(|i| record_id(Split::Train, i)).collect(),
        test: (0..n_test).map(|i| record_id(Split::Test, i)).collect(),
    };
    manifest.save(dir)?;
    Ok(manifest)
}
