//! Signal-quality and statistical analyses: trial RMS, Welch PSD, ERP peak
//! statistics, Welch's t-test, Bonferroni correction, one-way ANOVA and
//! Pearson correlation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{Channel, Epoch, BASELINE_SAMPLES, EPOCH_SAMPLES};
use crate::Real;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};
use std::collections::BTreeMap;

/// ERP analysis window after stimulus onset, in milliseconds.
pub const ERP_WINDOW_MS: [f64; 2] = [250.0, 530.0];

/// Result of a statistical test.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StatResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Degrees of freedom (Welch–Satterthwaite for the t-test).
    pub dof: f64,
    /// Whether `p_value` already includes a multiple-comparison correction.
    pub corrected: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64], m: f64) -> f64 {
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Median of a slice; the two middle values are averaged for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Welch's two-sample t-test for unequal variances.
pub fn welch_ttest<S: Scalar>(a: &[S], b: &[S]) -> Result<StatResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("welch_ttest needs at least 2 samples per group"));
    }
    let a: Vec<f64> = a.iter().map(|x| x.to_f()).collect();
    let b: Vec<f64> = b.iter().map(|x| x.to_f()).collect();
    let (ma, mb) = (mean(&a), mean(&b));
    let (va, vb) = (sample_variance(&a, ma), sample_variance(&b, mb));
    if va == 0.0 && vb == 0.0 {
        return Err(Error::DegenerateInput("zero variance in both groups".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2
        / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::invalid(format!("t distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(StatResult { statistic: t, p_value: p.clamp(0.0, 1.0), dof, corrected: false })
}

/// Bonferroni correction: multiply by `m` and clamp to 1.
pub fn bonferroni(p_values: &[f64], m: usize) -> Vec<f64> {
    p_values.iter().map(|p| (p * m as f64).min(1.0)).collect()
}

/// One-way ANOVA across `groups`.
pub fn anova_oneway(groups: &[&[f64]]) -> Result<StatResult> {
    if groups.len() < 2 {
        return Err(Error::invalid("anova needs at least 2 groups"));
    }
    for g in groups {
        if g.len() < 2 {
            return Err(Error::invalid("each anova group needs at least 2 samples"));
        }
    }
    let n_total: usize = groups.iter().map(|g| g.len()).sum();
    let grand: f64 = groups.iter().flat_map(|g| g.iter()).sum::<f64>() / n_total as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let mg = mean(g);
        ss_between += g.len() as f64 * (mg - grand) * (mg - grand);
        ss_within += g.iter().map(|x| (x - mg) * (x - mg)).sum::<f64>();
    }
    if ss_within == 0.0 && ss_between == 0.0 {
        return Err(Error::DegenerateInput("zero variance in all groups".into()));
    }
    let df_between = (groups.len() - 1) as f64;
    let df_within = (n_total - groups.len()) as f64;
    let f = (ss_between / df_between) / (ss_within / df_within);
    let dist = FisherSnedecor::new(df_between, df_within)
        .map_err(|e| Error::invalid(format!("F distribution: {e}")))?;
    let p = 1.0 - dist.cdf(f);
    Ok(StatResult { statistic: f, p_value: p.clamp(0.0, 1.0), dof: df_between, corrected: false })
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("pearson needs two equal-length series, n >= 2"));
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("constant series in pearson".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

// ---------------------------------------------------------------------------
// Welch power spectral density
// ---------------------------------------------------------------------------

/// Segmentation parameters for [`welch_psd`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct WelchParams {
    pub segment_len: usize,
    pub overlap: usize,
    pub nfft: usize,
}

impl Default for WelchParams {
    fn default() -> Self {
        WelchParams { segment_len: 256, overlap: 200, nfft: 1024 }
    }
}

/// Welch averaged periodogram with a periodic Hann window, per-segment
/// constant detrend and one-sided density scaling.
///
/// Returns (frequencies in Hz, power in (input units)^2 / Hz).
pub fn welch_psd<S>(signal: &[S], fs: f64, params: WelchParams) -> Result<(Vec<f64>, Vec<S>)>
where
    S: Scalar + rustfft::FftNum,
{
    let seg = params.segment_len;
    if signal.len() < seg {
        return Err(Error::invalid(format!(
            "signal length {} shorter than segment length {seg}",
            signal.len()
        )));
    }
    if params.overlap >= seg || params.nfft < seg {
        return Err(Error::invalid("need overlap < segment_len <= nfft"));
    }
    let step = seg - params.overlap;
    let nfft = params.nfft;

    let window: Vec<S> = (0..seg)
        .map(|n| {
            S::from_f(0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / seg as f64).cos()))
        })
        .collect();
    let win_norm: S = window.iter().map(|w| *w * *w).sum();

    let mut planner = rustfft::FftPlanner::<S>::new();
    let fft = planner.plan_fft_forward(nfft);
    let mut buf = vec![rustfft::num_complex::Complex::new(S::zero(), S::zero()); nfft];

    let n_bins = nfft / 2 + 1;
    let mut acc = vec![S::zero(); n_bins];
    let mut n_segments = 0usize;
    let mut start = 0usize;
    while start + seg <= signal.len() {
        let chunk = &signal[start..start + seg];
        let seg_mean = chunk.iter().copied().sum::<S>() / S::from_f(seg as f64);
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = if i < seg { (chunk[i] - seg_mean) * window[i] } else { S::zero() };
            *slot = rustfft::num_complex::Complex::new(v, S::zero());
        }
        fft.process(&mut buf);
        for (k, slot) in acc.iter_mut().enumerate() {
            *slot += buf[k].norm_sqr();
        }
        n_segments += 1;
        start += step;
    }

    let scale = S::from_f(1.0 / (fs * n_segments as f64)) / win_norm;
    let two = S::from_f(2.0);
    let power: Vec<S> = acc
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let one_sided = if k == 0 || k == nfft / 2 { S::one() } else { two };
            *p * scale * one_sided
        })
        .collect();
    let freqs: Vec<f64> = (0..n_bins).map(|k| k as f64 * fs / nfft as f64).collect();
    Ok((freqs, power))
}

/// Mean PSD power over a frequency band (inclusive bounds).
pub fn band_power(freqs: &[f64], power: &[f64], lo_hz: f64, hi_hz: f64) -> f64 {
    let vals: Vec<f64> = freqs
        .iter()
        .zip(power)
        .filter(|(f, _)| **f >= lo_hz && **f <= hi_hz)
        .map(|(_, p)| *p)
        .collect();
    mean(&vals)
}

// ---------------------------------------------------------------------------
// Trial RMS
// ---------------------------------------------------------------------------

/// Which part of the epoch the RMS is computed over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmsSegment {
    /// First 100 ms (pre-stimulus baseline).
    Baseline,
    /// The full 800 ms epoch.
    Whole,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RmsSummary {
    pub segment: RmsSegment,
    /// Permutation-averaged RMS per subject.
    pub per_subject: BTreeMap<String, f64>,
    pub grand_average: f64,
    /// Set when a subject had fewer epochs than `n_draws` and trials were
    /// drawn with replacement.
    pub sampled_with_replacement: bool,
}

fn rms(xs: &[Real]) -> f64 {
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Grand-average trial RMS over channels Cz and Pz.
///
/// For each subject, `n_perm` permutations each draw `n_draws` trials; the
/// per-trial channel-averaged RMS is averaged within the draw, then across
/// permutations, then across subjects.
pub fn trial_rms<R: Rng>(
    epochs: &[Epoch],
    segment: RmsSegment,
    n_draws: usize,
    n_perm: usize,
    rng: &mut R,
) -> Result<RmsSummary> {
    if epochs.is_empty() {
        return Err(Error::invalid("trial_rms needs at least one epoch"));
    }
    let range = match segment {
        RmsSegment::Baseline => 0..BASELINE_SAMPLES,
        RmsSegment::Whole => 0..EPOCH_SAMPLES,
    };

    let mut by_subject: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for e in epochs {
        let cz = rms(&e.channel(Channel::Cz)[range.clone()]);
        let pz = rms(&e.channel(Channel::Pz)[range.clone()]);
        by_subject.entry(e.subject.clone()).or_default().push(0.5 * (cz + pz));
    }

    let mut per_subject = BTreeMap::new();
    let mut with_replacement = false;
    for (subject, trial_rms) in &by_subject {
        let mut perm_means = Vec::with_capacity(n_perm);
        for _ in 0..n_perm {
            let draw_mean = if trial_rms.len() >= n_draws {
                let sampled: Vec<f64> = trial_rms
                    .choose_multiple(rng, n_draws)
                    .copied()
                    .collect();
                mean(&sampled)
            } else {
                with_replacement = true;
                let sum: f64 = (0..n_draws)
                    .map(|_| trial_rms[rng.gen_range(0..trial_rms.len())])
                    .sum();
                sum / n_draws as f64
            };
            perm_means.push(draw_mean);
        }
        per_subject.insert(subject.clone(), mean(&perm_means));
    }
    let grand = mean(&per_subject.values().copied().collect::<Vec<_>>());
    Ok(RmsSummary {
        segment,
        per_subject,
        grand_average: grand,
        sampled_with_replacement: with_replacement,
    })
}

// ---------------------------------------------------------------------------
// ERP peak statistics
// ---------------------------------------------------------------------------

/// Per-trial ERP shape statistics in the [250, 530] ms window.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ChannelErpStats {
    /// Maximum amplitude in the window, µV.
    pub peak_amp_uv: f64,
    /// Maximum minus minimum in the window, µV.
    pub p2p_uv: f64,
    /// Time of the maximum, ms from stimulus onset.
    pub peak_latency_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialErpStats {
    pub subject: String,
    pub is_target: bool,
    pub cz: ChannelErpStats,
    pub pz: ChannelErpStats,
}

impl TrialErpStats {
    /// Channel-averaged statistics (mean of Cz and Pz), the per-trial values
    /// entering the subject medians.
    pub fn channel_mean(&self) -> ChannelErpStats {
        ChannelErpStats {
            peak_amp_uv: 0.5 * (self.cz.peak_amp_uv + self.pz.peak_amp_uv),
            p2p_uv: 0.5 * (self.cz.p2p_uv + self.pz.p2p_uv),
            peak_latency_ms: 0.5 * (self.cz.peak_latency_ms + self.pz.peak_latency_ms),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MedianErpStats {
    pub peak_amp_uv: f64,
    pub p2p_uv: f64,
    pub peak_latency_ms: f64,
    pub n_trials: usize,
}

/// Target vs non-target comparison for one subject.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubjectErpSummary {
    pub subject: String,
    pub target: MedianErpStats,
    pub non_target: MedianErpStats,
    /// Welch's t-test on per-trial peak amplitude, target vs non-target.
    pub peak_test: StatResult,
    /// Welch's t-test on per-trial peak-to-peak amplitude.
    pub p2p_test: StatResult,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErpStatsReport {
    pub per_trial: Vec<TrialErpStats>,
    pub per_subject: Vec<SubjectErpSummary>,
    /// Median of subject medians, target trials.
    pub grand_target: MedianErpStats,
    /// Median of subject medians, non-target trials.
    pub grand_non_target: MedianErpStats,
    /// Bonferroni-corrected p-values of target vs non-target waveform bins,
    /// pooled over subjects; `(bin_start_ms, p_corrected)` per 10 ms bin.
    pub waveform_bins: Vec<(f64, f64)>,
}

fn channel_stats(data: &[Real]) -> ChannelErpStats {
    let lo = BASELINE_SAMPLES + (ERP_WINDOW_MS[0] / 2.0) as usize;
    let hi = BASELINE_SAMPLES + (ERP_WINDOW_MS[1] / 2.0) as usize;
    let window = &data[lo..=hi];
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    let mut argmax = 0usize;
    for (i, &v) in window.iter().enumerate() {
        if v > max {
            max = v;
            argmax = i;
        }
        if v < min {
            min = v;
        }
    }
    ChannelErpStats {
        peak_amp_uv: max,
        p2p_uv: max - min,
        peak_latency_ms: Epoch::sample_time_ms(lo + argmax),
    }
}

/// Per-sample waveform used for grand averages.
pub type Waveform = Vec<f64>;

/// Median waveform across a set of single-channel traces.
pub fn median_waveform(traces: &[&[Real]]) -> Waveform {
    if traces.is_empty() {
        return Vec::new();
    }
    let n = traces[0].len();
    (0..n)
        .map(|i| median(&traces.iter().map(|t| t[i]).collect::<Vec<f64>>()))
        .collect()
}

/// ERP shape statistics and target/non-target comparisons for a set of
/// baseline-corrected epochs.
pub fn erp_stats(epochs: &[Epoch]) -> Result<ErpStatsReport> {
    if epochs.is_empty() {
        return Err(Error::invalid("erp_stats needs at least one epoch"));
    }
    let per_trial: Vec<TrialErpStats> = epochs
        .iter()
        .map(|e| TrialErpStats {
            subject: e.subject.clone(),
            is_target: e.label.is_target(),
            cz: channel_stats(e.channel(Channel::Cz)),
            pz: channel_stats(e.channel(Channel::Pz)),
        })
        .collect();

    let mut subjects: Vec<String> = per_trial.iter().map(|t| t.subject.clone()).collect();
    subjects.sort();
    subjects.dedup();

    let median_stats = |stats: &[ChannelErpStats]| MedianErpStats {
        peak_amp_uv: median(&stats.iter().map(|s| s.peak_amp_uv).collect::<Vec<_>>()),
        p2p_uv: median(&stats.iter().map(|s| s.p2p_uv).collect::<Vec<_>>()),
        peak_latency_ms: median(&stats.iter().map(|s| s.peak_latency_ms).collect::<Vec<_>>()),
        n_trials: stats.len(),
    };

    let mut per_subject = Vec::new();
    for subject in &subjects {
        let tgt: Vec<ChannelErpStats> = per_trial
            .iter()
            .filter(|t| &t.subject == subject && t.is_target)
            .map(|t| t.channel_mean())
            .collect();
        let non: Vec<ChannelErpStats> = per_trial
            .iter()
            .filter(|t| &t.subject == subject && !t.is_target)
            .map(|t| t.channel_mean())
            .collect();
        if tgt.len() < 2 || non.len() < 2 {
            continue;
        }
        let peak_test = welch_ttest(
            &tgt.iter().map(|s| s.peak_amp_uv).collect::<Vec<_>>(),
            &non.iter().map(|s| s.peak_amp_uv).collect::<Vec<_>>(),
        )?;
        let p2p_test = welch_ttest(
            &tgt.iter().map(|s| s.p2p_uv).collect::<Vec<_>>(),
            &non.iter().map(|s| s.p2p_uv).collect::<Vec<_>>(),
        )?;
        per_subject.push(SubjectErpSummary {
            subject: subject.clone(),
            target: median_stats(&tgt),
            non_target: median_stats(&non),
            peak_test,
            p2p_test,
        });
    }

    let grand = |pick: fn(&SubjectErpSummary) -> MedianErpStats| {
        let stats: Vec<MedianErpStats> = per_subject.iter().map(pick).collect();
        MedianErpStats {
            peak_amp_uv: median(&stats.iter().map(|s| s.peak_amp_uv).collect::<Vec<_>>()),
            p2p_uv: median(&stats.iter().map(|s| s.p2p_uv).collect::<Vec<_>>()),
            peak_latency_ms: median(
                &stats.iter().map(|s| s.peak_latency_ms).collect::<Vec<_>>(),
            ),
            n_trials: stats.iter().map(|s| s.n_trials).sum(),
        }
    };
    let grand_target = grand(|s| s.target);
    let grand_non_target = grand(|s| s.non_target);

    // Target vs non-target waveform comparison on channel-averaged 10 ms
    // bin means, Bonferroni-corrected over the 70 bins in [0, 700] ms.
    let bin_ms = 10.0;
    let n_bins = 70;
    let bin_means = |e: &Epoch, bin: usize| -> f64 {
        let start = BASELINE_SAMPLES + bin * 5;
        let cz = &e.channel(Channel::Cz)[start..start + 5];
        let pz = &e.channel(Channel::Pz)[start..start + 5];
        (cz.iter().sum::<f64>() + pz.iter().sum::<f64>()) / 10.0
    };
    let mut raw_p = Vec::with_capacity(n_bins);
    for bin in 0..n_bins {
        let tgt: Vec<f64> = epochs
            .iter()
            .filter(|e| e.label.is_target())
            .map(|e| bin_means(e, bin))
            .collect();
        let non: Vec<f64> = epochs
            .iter()
            .filter(|e| !e.label.is_target())
            .map(|e| bin_means(e, bin))
            .collect();
        let p = if tgt.len() >= 2 && non.len() >= 2 {
            welch_ttest(&tgt, &non).map(|r| r.p_value).unwrap_or(1.0)
        } else {
            1.0
        };
        raw_p.push(p);
    }
    let corrected = bonferroni(&raw_p, n_bins);
    let waveform_bins = corrected
        .into_iter()
        .enumerate()
        .map(|(i, p)| (i as f64 * bin_ms, p))
        .collect();

    Ok(ErpStatsReport {
        per_trial,
        per_subject,
        grand_target,
        grand_non_target,
        waveform_bins,
    })
}
