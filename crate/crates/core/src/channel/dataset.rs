//! On-disk dataset: `manifest.json` plus one little-endian binary file per
//! period and split. Each file is the concatenation of its samples, each
//! sample the row-major `(I*N) x (Q*M)` matrix as `(re, im)` f64 pairs.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::generate::gen_samples;
use super::{ChannelModel, CsiSample, ScenarioConfig};
use crate::diffnum::TensorC;
use crate::rng;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train = 0,
    Test = 1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub period: usize,
    pub split: Split,
    pub file: String,
    pub count: usize,
    pub aps: usize,
    pub users: usize,
    pub rows: usize,
    pub cols: usize,
    pub channel_model: ChannelModel,
    pub label: usize,
    pub stream_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub scenario: ScenarioConfig,
    /// Channel models indexed by class label.
    pub labels: Vec<ChannelModel>,
    pub files: Vec<DatasetFile>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<CsiSample>,
    pub test: Vec<CsiSample>,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.manifest.labels.len()
    }

    pub fn test_by_model(&self, model: ChannelModel) -> Vec<&CsiSample> {
        let periods: Vec<usize> = self
            .manifest
            .files
            .iter()
            .filter(|f| f.channel_model == model && f.split == Split::Test)
            .map(|f| f.period)
            .collect();
        self.test.iter().filter(|s| periods.contains(&s.period_index)).collect()
    }
}

fn label_for(labels: &[ChannelModel], model: ChannelModel) -> usize {
    labels.iter().position(|&m| m == model).unwrap_or(labels.len())
}

fn write_samples(path: &Path, samples: &[CsiSample]) -> Result<()> {
    let mut buf = Vec::with_capacity(samples.iter().map(|s| s.h.len() * 16).sum());
    for s in samples {
        for z in s.h.data() {
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::Persistence(format!("{}: {e}", path.display())))?;
    f.write_all(&buf)
        .map_err(|e| Error::Persistence(format!("{}: {e}", path.display())))
}

/// Writes every period of `scenario` under `dir` and returns the manifest.
pub fn gen_dataset(scenario: &ScenarioConfig, dir: &Path) -> Result<Manifest> {
    scenario.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::Persistence(format!("{}: {e}", dir.display())))?;
    let labels = scenario.class_labels();
    let mut files = Vec::new();
    for (pi, spec) in scenario.periods.iter().enumerate() {
        let label = label_for(&labels, spec.channel_model);
        for (split, count) in [(Split::Train, spec.sample_count), (Split::Test, spec.test_count)] {
            if count == 0 {
                continue;
            }
            let samples = gen_samples(scenario, pi, split, count, label)?;
            let name = format!(
                "period_{pi:03}_{}.bin",
                match split {
                    Split::Train => "train",
                    Split::Test => "test",
                }
            );
            write_samples(&dir.join(&name), &samples)?;
            files.push(DatasetFile {
                period: pi,
                split,
                file: name,
                count,
                aps: spec.aps,
                users: spec.users,
                rows: spec.users * scenario.user_antennas,
                cols: spec.aps * scenario.ap_antennas,
                channel_model: spec.channel_model,
                label,
                stream_seed: rng::derive_seed(scenario.seed, &[pi as u64, split as u64]),
            });
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        scenario: scenario.clone(),
        labels,
        files,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json).map_err(|e| Error::Persistence(format!("manifest: {e}")))?;
    Ok(manifest)
}

fn read_samples(dir: &Path, manifest: &Manifest, entry: &DatasetFile) -> Result<Vec<CsiSample>> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::Persistence(format!("{}: {e}", path.display())))?;
    let per = entry.rows * entry.cols;
    if bytes.len() != entry.count * per * 16 {
        return Err(Error::Persistence(format!(
            "{} has {} bytes, manifest implies {}",
            entry.file,
            bytes.len(),
            entry.count * per * 16
        )));
    }
    let sc = &manifest.scenario;
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    vals.chunks_exact(per * 2)
        .map(|chunk| {
            let data = chunk.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect();
            let h = TensorC::new(vec![entry.rows, entry.cols], data)?;
            let mut s = CsiSample::new(h, entry.aps, entry.users, sc.ap_antennas, sc.user_antennas)?
                .with_noise(sc.noise_power)
                .with_label(entry.label);
            s.period_index = entry.period;
            Ok(s)
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::Persistence(format!("{}: {e}", dir.join("manifest.json").display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Persistence(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for entry in &manifest.files {
        let samples = read_samples(dir, &manifest, entry)?;
        match entry.split {
            Split::Train => train.extend(samples),
            Split::Test => test.extend(samples),
        }
    }
    Ok(Dataset { manifest, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::PeriodSpec;

    fn small_scenario() -> ScenarioConfig {
        let mut sc = ScenarioConfig {
            seed: 42,
            ..ScenarioConfig::default()
        };
        for m in ChannelModel::ALL {
            sc.periods.push(PeriodSpec::new(2, 2, m, 4, 2));
        }
        sc
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let sc = small_scenario();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_dataset(&sc, a.path()).unwrap();
        gen_dataset(&sc, b.path()).unwrap();
        for f in ["manifest.json", "period_000_train.bin", "period_002_test.bin"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn load_round_trip_and_labels() {
        let sc = small_scenario();
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_dataset(&sc, dir.path()).unwrap();
        assert_eq!(manifest.labels, ChannelModel::ALL.to_vec());
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 12);
        assert_eq!(ds.test.len(), 6);
        assert_eq!(ds.train[5].label, 1);
        let fresh = gen_samples(&sc, 1, Split::Train, 4, 1).unwrap();
        assert_eq!(ds.train[4..8], fresh[..]);
        // first value of the first file is the little-endian real part
        let raw = fs::read(dir.path().join("period_000_train.bin")).unwrap();
        assert_eq!(
            f64::from_le_bytes(raw[..8].try_into().unwrap()),
            ds.train[0].h.data()[0].re
        );
    }

    #[test]
    fn truncated_file_is_a_persistence_error() {
        let sc = small_scenario();
        let dir = tempfile::tempdir().unwrap();
        gen_dataset(&sc, dir.path()).unwrap();
        let p = dir.path().join("period_001_train.bin");
        let raw = fs::read(&p).unwrap();
        fs::write(&p, &raw[..raw.len() - 8]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Persistence(_))));
    }
}
