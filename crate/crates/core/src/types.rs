//! Shared domain types: channels, icons, labels, session layout and epochs.

use crate::error::{Error, Result};
use crate::Real;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Number of menu icons in the oddball task.
pub const N_ICONS: usize = 6;

/// Epoch window relative to stimulus onset, in milliseconds.
pub const EPOCH_WINDOW_MS: [f64; 2] = [-100.0, 700.0];

/// Samples per channel in one epoch (800 ms at 500 Hz).
pub const EPOCH_SAMPLES: usize = 400;

/// Samples before stimulus onset used for baseline correction (100 ms).
pub const BASELINE_SAMPLES: usize = 50;

/// Acquisition channels in fixed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Cz,
    Pz,
    Fp1,
}

impl Channel {
    /// Row index of this channel in sample matrices.
    pub fn index(self) -> usize {
        match self {
            Channel::Cz => 0,
            Channel::Pz => 1,
            Channel::Fp1 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Cz => "Cz",
            Channel::Pz => "Pz",
            Channel::Fp1 => "Fp1",
        }
    }
}

/// The fixed three-channel montage plus its reference site.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSet {
    pub channels: Vec<Channel>,
    /// Reference electrode site; informational only.
    pub reference: String,
}

impl Default for ChannelSet {
    fn default() -> Self {
        ChannelSet {
            channels: vec![Channel::Cz, Channel::Pz, Channel::Fp1],
            reference: "left earlobe".to_string(),
        }
    }
}

impl ChannelSet {
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// The sub-montage fed to the classifiers.
    pub fn model_channels() -> [Channel; 2] {
        [Channel::Cz, Channel::Pz]
    }
}

/// Icon colors; assigned once per session as a bijection onto the icons.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IconColor {
    Black,
    Green,
    Yellow,
    Magenta,
    Red,
    Blue,
}

pub const ALL_COLORS: [IconColor; N_ICONS] = [
    IconColor::Black,
    IconColor::Green,
    IconColor::Yellow,
    IconColor::Magenta,
    IconColor::Red,
    IconColor::Blue,
];

/// One of the six menu icons, identified by its index.
///
/// The color is session metadata and never enters the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IconId(pub u8);

impl IconId {
    pub fn new(index: u8) -> Result<Self> {
        if (index as usize) < N_ICONS {
            Ok(IconId(index))
        } else {
            Err(Error::invalid(format!("icon index {index} out of range 0..6")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = IconId> {
        (0..N_ICONS as u8).map(IconId)
    }
}

/// Whether a trial presented the attended icon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Target,
    NonTarget,
}

/// Label of a single trial: the flashed icon and whether it was the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialLabel {
    pub kind: LabelKind,
    pub icon: IconId,
}

impl TrialLabel {
    pub fn is_target(&self) -> bool {
        self.kind == LabelKind::Target
    }
}

/// Recording condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    InLab,
    InCar,
}

/// Declarative description of one oddball session.
///
/// Serializes to a versioned JSON document; see [`SessionSpec::to_json`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub schema_version: u32,
    pub condition: Condition,
    pub n_runs: u32,
    pub reps_per_icon: u32,
    pub isi_ms: u32,
    pub stim_ms: u32,
    /// Rest period between runs; only meaningful in the lab layout.
    pub rest_s: f64,
    pub sampling_rate_hz: u32,
    pub seed: u64,
    /// Bijection icon index -> color, fixed for the whole session.
    pub icon_colors: [IconColor; N_ICONS],
}

pub const SESSION_SCHEMA_VERSION: u32 = 1;

impl SessionSpec {
    /// Lab layout: 6 runs of 60 trials (10 presentations per icon).
    pub fn in_lab(seed: u64) -> Self {
        SessionSpec {
            schema_version: SESSION_SCHEMA_VERSION,
            condition: Condition::InLab,
            n_runs: 6,
            reps_per_icon: 10,
            isi_ms: 100,
            stim_ms: 700,
            rest_s: 30.0,
            sampling_rate_hz: 500,
            seed,
            icon_colors: shuffled_colors(seed),
        }
    }

    /// Car layout: short self-initiated runs of 18 trials (3 per icon).
    pub fn in_car(n_runs: u32, seed: u64) -> Self {
        SessionSpec {
            schema_version: SESSION_SCHEMA_VERSION,
            condition: Condition::InCar,
            n_runs,
            reps_per_icon: 3,
            isi_ms: 100,
            stim_ms: 700,
            rest_s: 0.0,
            sampling_rate_hz: 500,
            seed,
            icon_colors: shuffled_colors(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SESSION_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported session schema version {}",
                self.schema_version
            )));
        }
        if self.sampling_rate_hz != 500 {
            return Err(Error::invalid("sampling_rate_hz must be 500"));
        }
        if self.isi_ms != 100 || self.stim_ms != 700 {
            return Err(Error::invalid("stimulus timing must be 700 ms + 100 ms ISI"));
        }
        match self.condition {
            Condition::InLab => {
                if self.n_runs != 6 || self.reps_per_icon != 10 {
                    return Err(Error::invalid(
                        "in-lab sessions have 6 runs of 10 repetitions per icon",
                    ));
                }
            }
            Condition::InCar => {
                if self.reps_per_icon != 3 {
                    return Err(Error::invalid("in-car runs have 3 repetitions per icon"));
                }
                if self.n_runs == 0 {
                    return Err(Error::invalid("n_runs must be at least 1"));
                }
            }
        }
        let mut seen = [false; N_ICONS];
        for c in &self.icon_colors {
            let i = ALL_COLORS.iter().position(|x| x == c).unwrap();
            if seen[i] {
                return Err(Error::invalid("icon_colors must be a bijection"));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// Trials per run.
    pub fn trials_per_run(&self) -> usize {
        N_ICONS * self.reps_per_icon as usize
    }

    /// Total nominal trials in the session.
    pub fn total_trials(&self) -> usize {
        self.n_runs as usize * self.trials_per_run()
    }

    /// Onset-to-onset spacing within a run, in seconds.
    pub fn trial_period_s(&self) -> f64 {
        (self.stim_ms + self.isi_ms) as f64 / 1000.0
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: SessionSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

fn shuffled_colors(seed: u64) -> [IconColor; N_ICONS] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f_6c6f_7273); // "colors"
    let mut colors = ALL_COLORS;
    colors.shuffle(&mut rng);
    colors
}

/// Epoch quality after the two-step rejection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityFlag {
    Kept,
    RejectedGap,
    RejectedAmplitude,
}

/// One baseline-corrected trial window.
///
/// `data` holds the three acquisition channels (order Cz, Pz, Fp1), 400
/// samples each, covering [-100, 700] ms around stimulus onset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    pub subject: String,
    pub session: String,
    pub run: u32,
    pub trial_index: u32,
    pub label: TrialLabel,
    /// Stimulus-onset timestamp in seconds from stream start.
    pub t0: f64,
    pub data: Vec<Vec<Real>>,
    pub quality: QualityFlag,
}

impl Epoch {
    pub fn channel(&self, ch: Channel) -> &[Real] {
        &self.data[ch.index()]
    }

    /// Time of sample `i` relative to stimulus onset, in milliseconds.
    pub fn sample_time_ms(i: usize) -> f64 {
        (i as f64 - BASELINE_SAMPLES as f64) * 2.0
    }

    /// Globally unique trial identifier, used for leakage checks.
    pub fn trial_uid(&self) -> String {
        format!("{}/{}/{}/{}", self.subject, self.session, self.run, self.trial_index)
    }
}

/// Block-randomized stimulus order: `n_blocks` blocks of six presentations,
/// each block a fresh permutation of all six icons.
pub fn block_randomized_order(n_blocks: u32, seed: u64) -> Result<Vec<IconId>> {
    if n_blocks < 1 {
        return Err(Error::invalid("n_blocks must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(n_blocks as usize * N_ICONS);
    let mut block: Vec<IconId> = IconId::all().collect();
    for _ in 0..n_blocks {
        block.shuffle(&mut rng);
        order.extend_from_slice(&block);
    }
    Ok(order)
}
