//! Synthetic cell-free channel realizations.
//!
//! Three channel families are supported: a geometric multipath model and a
//! Rician model whose zero Rice factor is pure Rayleigh fading. Every sample
//! draws APs and users uniformly over a square area, attenuates each link by
//! a distance power law and stacks the per-link `N x M` blocks into one
//! `(I*N) x (Q*M)` matrix.

mod dataset;
mod generate;
mod geometry;

use serde::{Deserialize, Serialize};

use crate::diffnum::TensorC;
use crate::{Error, Result};

pub use dataset::{gen_dataset, load_dataset, Dataset, DatasetFile, Manifest, Split, FORMAT_VERSION};
pub use generate::{gen_multipath, gen_rician, gen_sample, gen_samples, sample_stream};
pub use geometry::{pathloss_beta, place_nodes, steering_vector, Geometry, D_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelModel {
    Multipath,
    Rayleigh,
    Rician,
}

impl ChannelModel {
    pub const ALL: [ChannelModel; 3] = [ChannelModel::Multipath, ChannelModel::Rayleigh, ChannelModel::Rician];

    pub fn name(self) -> &'static str {
        match self {
            ChannelModel::Multipath => "multipath",
            ChannelModel::Rayleigh => "rayleigh",
            ChannelModel::Rician => "rician",
        }
    }
}

impl std::fmt::Display for ChannelModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ChannelModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multipath" => Ok(ChannelModel::Multipath),
            "rayleigh" => Ok(ChannelModel::Rayleigh),
            "rician" | "rice" => Ok(ChannelModel::Rician),
            other => Err(Error::Config(format!("unknown channel model `{other}`"))),
        }
    }
}

/// 3 dB Rice factor as a linear power ratio.
pub fn rice_3db() -> f64 {
    10f64.powf(0.3)
}

fn default_paths() -> usize {
    6
}

/// One period: fixed AP/user counts and one channel distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodSpec {
    pub aps: usize,
    pub users: usize,
    pub channel_model: ChannelModel,
    /// Linear LoS-to-scatter power ratio; only read by the Rician model.
    #[serde(default)]
    pub rice_factor: f64,
    #[serde(default = "default_paths")]
    pub paths: usize,
    pub sample_count: usize,
    #[serde(default)]
    pub test_count: usize,
}

impl PeriodSpec {
    pub fn new(aps: usize, users: usize, model: ChannelModel, sample_count: usize, test_count: usize) -> Self {
        Self {
            aps,
            users,
            channel_model: model,
            rice_factor: if model == ChannelModel::Rician { rice_3db() } else { 0.0 },
            paths: default_paths(),
            sample_count,
            test_count,
        }
    }

    /// Rice factor the generator actually uses (Rayleigh forces zero).
    pub fn effective_rice(&self) -> f64 {
        match self.channel_model {
            ChannelModel::Rayleigh => 0.0,
            _ => self.rice_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.aps == 0 || self.users == 0 {
            return Err(Error::Config("AP and user counts must be >= 1".into()));
        }
        if !(self.rice_factor >= 0.0) {
            return Err(Error::Config("rice factor must be >= 0".into()));
        }
        if self.paths == 0 {
            return Err(Error::Config("multipath model needs at least one path".into()));
        }
        Ok(())
    }
}

fn default_alpha() -> f64 {
    3.76
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub periods: Vec<PeriodSpec>,
    /// Side of the square deployment area in meters.
    pub area_side: f64,
    /// Antennas per AP.
    pub ap_antennas: usize,
    /// Antennas per user.
    pub user_antennas: usize,
    /// Per-AP power budget in watts.
    pub p_max: f64,
    /// Receiver noise power in watts.
    pub noise_power: f64,
    #[serde(default = "default_alpha")]
    pub pathloss_exponent: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            periods: Vec::new(),
            area_side: 500.0,
            ap_antennas: 2,
            user_antennas: 2,
            p_max: 1.0,
            noise_power: 1.0,
            pathloss_exponent: default_alpha(),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ap_antennas == 0 || self.user_antennas == 0 {
            return Err(Error::Config("antenna counts must be >= 1".into()));
        }
        if !(self.p_max > 0.0) || !(self.noise_power > 0.0) || !(self.area_side > 0.0) {
            return Err(Error::Config("p_max, noise_power and area_side must be > 0".into()));
        }
        self.periods.iter().try_for_each(PeriodSpec::validate)
    }

    /// Channel-model class labels in order of first appearance among the
    /// periods that carry training samples.
    pub fn class_labels(&self) -> Vec<ChannelModel> {
        let mut labels = Vec::new();
        for p in self.periods.iter().filter(|p| p.sample_count > 0) {
            if !labels.contains(&p.channel_model) {
                labels.push(p.channel_model);
            }
        }
        labels
    }
}

/// One channel realization of a period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsiSample {
    /// `(I*N) x (Q*M)`; block `(i, q)` is AP `q`'s channel to user `i`.
    pub h: TensorC,
    pub aps: usize,
    pub users: usize,
    pub ap_antennas: usize,
    pub user_antennas: usize,
    pub period_index: usize,
    pub label: usize,
    pub noise_power: f64,
}

impl CsiSample {
    pub fn new(h: TensorC, aps: usize, users: usize, ap_antennas: usize, user_antennas: usize) -> Result<Self> {
        if h.shape() != [users * user_antennas, aps * ap_antennas] {
            return Err(Error::shape(format!(
                "channel shape {:?} does not match {users}x{user_antennas} by {aps}x{ap_antennas}",
                h.shape()
            )));
        }
        Ok(Self {
            h,
            aps,
            users,
            ap_antennas,
            user_antennas,
            period_index: 0,
            label: 0,
            noise_power: 1.0,
        })
    }

    pub fn with_noise(mut self, noise_power: f64) -> Self {
        self.noise_power = noise_power;
        self
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = label;
        self
    }
}
