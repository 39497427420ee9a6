//! Per-epoch feature extraction: five windowed means and seventeen
//! morphological descriptors per channel (Cz, then Pz) — 44 values total,
//! in a fixed order with stable names.
//!
//! All analysis-window features are computed over [200, 600) ms relative to
//! stimulus onset. A window sample at index `i` of the epoch has time
//! `(i - 50) * 2` ms, so the analysis window maps to samples 150..350.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{Channel, Epoch, IconId, LabelKind, TrialLabel, EPOCH_SAMPLES};
use crate::Real;
use std::io::{BufRead, Write};

/// Analysis window in ms relative to stimulus onset, end-exclusive.
pub const ANALYSIS_WINDOW_MS: [f64; 2] = [200.0, 600.0];
/// Epoch sample range covered by the analysis window.
pub const ANALYSIS_RANGE: std::ops::Range<usize> = 150..350;
/// Windowed-mean width in ms.
pub const MEAN_WINDOW_MS: f64 = 80.0;
pub const N_MEAN_WINDOWS: usize = 5;
pub const N_MORPH: usize = 17;
pub const N_FEATURES: usize = 2 * (N_MEAN_WINDOWS + N_MORPH);

const SAMPLE_DT_MS: f64 = 2.0;

/// Short codes of the morphological features, in output order.
pub const MORPH_CODES: [&str; N_MORPH] = [
    "lat", "amp", "lar", "aamp", "alar", "par", "nar", "tar", "atar", "taar", "aass", "pp",
    "ppt", "pps", "zc", "zcd", "ssa",
];

const FEATURE_CHANNELS: [Channel; 2] = [Channel::Cz, Channel::Pz];

/// The 44 feature names: for each channel, `<ch>_wm1..wm5` then the
/// morphological codes, e.g. `cz_wm1 .. cz_ssa, pz_wm1 .. pz_ssa`.
pub fn feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(N_FEATURES);
    for ch in FEATURE_CHANNELS {
        let prefix = match ch {
            Channel::Cz => "cz",
            Channel::Pz => "pz",
            Channel::Fp1 => unreachable!(),
        };
        for w in 1..=N_MEAN_WINDOWS {
            names.push(format!("{prefix}_wm{w}"));
        }
        for code in MORPH_CODES {
            names.push(format!("{prefix}_{code}"));
        }
    }
    names
}

/// Means of the analysis window split into five consecutive 80 ms windows.
pub fn windowed_means<S: Scalar>(channel: &[S]) -> [S; N_MEAN_WINDOWS] {
    assert_eq!(channel.len(), EPOCH_SAMPLES, "expected a full epoch channel");
    let window = &channel[ANALYSIS_RANGE];
    let per = window.len() / N_MEAN_WINDOWS;
    let mut out = [S::zero(); N_MEAN_WINDOWS];
    for (w, chunk) in window.chunks_exact(per).enumerate() {
        let sum: S = chunk.iter().copied().sum();
        out[w] = sum / S::from_f(per as f64);
    }
    out
}

/// Count sign changes of a sequence. A pair counts when the product is
/// negative, or when the left element is exactly zero and the right one is
/// not — so a sampled zero on the grid still counts once.
fn sign_changes<S: Scalar>(xs: &[S]) -> usize {
    xs.windows(2)
        .filter(|p| {
            let (a, b) = (p[0], p[1]);
            a * b < S::zero() || (a == S::zero() && b != S::zero())
        })
        .count()
}

/// The seventeen morphological descriptors of one analysis window.
///
/// `t0_ms` is the time of the first window sample; `dt_ms` the sample step.
/// Ratios with a zero denominator (flat or symmetric windows) fall back to
/// zero rather than propagating infinities.
pub fn morphological<S: Scalar>(window: &[S], t0_ms: f64, dt_ms: f64) -> [S; N_MORPH] {
    assert!(window.len() >= 2, "window too short");
    let n = window.len();
    let t = |i: usize| S::from_f(t0_ms + dt_ms * i as f64);
    let dt = S::from_f(dt_ms);

    let mut i_max = 0;
    let mut i_min = 0;
    let mut i_absmax = 0;
    for i in 1..n {
        if window[i] > window[i_max] {
            i_max = i;
        }
        if window[i] < window[i_min] {
            i_min = i;
        }
        if window[i].abs() > window[i_absmax].abs() {
            i_absmax = i;
        }
    }
    let lat = t(i_max);
    let amp = window[i_max];
    let lar = if amp == S::zero() { S::zero() } else { lat / amp };
    let aamp = window[i_absmax].abs();
    let alar = lar.abs();

    let mut par = S::zero();
    let mut nar = S::zero();
    let mut taar = S::zero();
    for &v in window {
        if v > S::zero() {
            par += v;
        } else {
            nar += v;
        }
        taar += v.abs();
    }
    par *= dt;
    nar *= dt;
    taar *= dt;
    let tar = par + nar;
    let atar = tar.abs();

    let abs_slope_sum: S = window.windows(2).map(|p| (p[1] - p[0]).abs()).sum();
    let aass = abs_slope_sum / (S::from_f((n - 1) as f64) * dt);

    let pp = window[i_max] - window[i_min];
    let ppt = t(i_max) - t(i_min);
    let pps = if ppt == S::zero() { S::zero() } else { pp / ppt };

    let zc = sign_changes(window);
    let window_s = (n as f64) * dt_ms / 1000.0;
    let zcd = S::from_f(zc as f64 / window_s);
    let diffs: Vec<S> = window.windows(2).map(|p| p[1] - p[0]).collect();
    let ssa = sign_changes(&diffs);

    [
        lat,
        amp,
        lar,
        aamp,
        alar,
        par,
        nar,
        tar,
        atar,
        taar,
        aass,
        pp,
        ppt,
        pps,
        S::from_f(zc as f64),
        zcd,
        S::from_f(ssa as f64),
    ]
}

/// One epoch's feature row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub trial_uid: String,
    pub subject: String,
    pub session: String,
    pub run: u32,
    pub trial_index: u32,
    pub label: TrialLabel,
    pub values: Vec<Real>,
}

/// Extract all 44 features of one epoch, channel-major (Cz block, Pz block).
pub fn extract_features(epoch: &Epoch) -> FeatureVector {
    let mut values = Vec::with_capacity(N_FEATURES);
    for ch in FEATURE_CHANNELS {
        let channel = epoch.channel(ch);
        values.extend_from_slice(&windowed_means(channel));
        let window = &channel[ANALYSIS_RANGE];
        values.extend_from_slice(&morphological(
            window,
            ANALYSIS_WINDOW_MS[0],
            SAMPLE_DT_MS,
        ));
    }
    FeatureVector {
        trial_uid: epoch.trial_uid(),
        subject: epoch.subject.clone(),
        session: epoch.session.clone(),
        run: epoch.run,
        trial_index: epoch.trial_index,
        label: epoch.label,
        values,
    }
}

pub fn extract_all(epochs: &[Epoch]) -> Vec<FeatureVector> {
    epochs.iter().map(extract_features).collect()
}

/// Write feature rows as CSV. Values use the shortest round-trip decimal
/// form, so reading the file back reproduces identical bits.
pub fn write_features_csv<W: Write>(out: &mut W, rows: &[FeatureVector]) -> Result<()> {
    write!(out, "trial_uid,subject,session,run,trial_index,icon,is_target")?;
    for name in feature_names() {
        write!(out, ",{name}")?;
    }
    writeln!(out)?;
    for r in rows {
        write!(
            out,
            "{},{},{},{},{},{},{}",
            r.trial_uid,
            r.subject,
            r.session,
            r.run,
            r.trial_index,
            r.label.icon.0,
            u8::from(r.label.is_target())
        )?;
        for v in &r.values {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_features_csv<R: BufRead>(input: R) -> Result<Vec<FeatureVector>> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(0, "empty feature file"))??;
    let expected = 7 + N_FEATURES;
    if header.split(',').count() != expected {
        return Err(Error::format(0, "unexpected feature column count"));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected {
            return Err(Error::format(
                lineno as u64 + 2,
                format!("expected {expected} fields, found {}", fields.len()),
            ));
        }
        let parse_err = |what: &str| Error::format(lineno as u64 + 2, format!("bad {what}"));
        let values: Vec<Real> = fields[7..]
            .iter()
            .map(|f| f.parse::<Real>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err("feature value"))?;
        rows.push(FeatureVector {
            trial_uid: fields[0].to_string(),
            subject: fields[1].to_string(),
            session: fields[2].to_string(),
            run: fields[3].parse().map_err(|_| parse_err("run"))?,
            trial_index: fields[4].parse().map_err(|_| parse_err("trial_index"))?,
            label: TrialLabel {
                kind: if fields[6] == "1" {
                    LabelKind::Target
                } else {
                    LabelKind::NonTarget
                },
                icon: IconId(fields[5].parse().map_err(|_| parse_err("icon"))?),
            },
            values,
        });
    }
    Ok(rows)
}
