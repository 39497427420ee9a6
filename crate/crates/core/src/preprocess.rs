//! Band-pass filtering, run-segmented epoch extraction with baseline
//! correction, and the two-step trial rejection (gaps, then amplitude).
//!
//! Filtering is zero-phase: the Butterworth band-pass runs forward and
//! backward over odd-symmetric padded segments with steady-state initial
//! conditions, so ERP latencies are preserved. The same per-run segmentation
//! is used by the offline pipeline and the online simulator, which makes
//! their outputs identical by construction.

use crate::error::{Error, Result};
use crate::stream::{GapEvent, MarkerEvent, Recording, StreamPacket};
use crate::types::{
    Channel, Epoch, QualityFlag, BASELINE_SAMPLES, EPOCH_SAMPLES, EPOCH_WINDOW_MS,
};
use crate::{Real, SAMPLING_RATE_HZ};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One second-order section, `a0` normalized to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

/// Band-pass design: Butterworth high-pass and low-pass cascades of
/// `order_per_pass`, run forward-backward for zero phase.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FilterSpec {
    pub band_hz: [f64; 2],
    pub order_per_pass: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec { band_hz: [0.1, 30.0], order_per_pass: 4 }
    }
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    LowPass,
    HighPass,
}

/// One RBJ-cookbook section of a Butterworth cascade at quality factor `q`.
fn butterworth_section(kind: Kind, f0: f64, fs: f64, q: f64) -> Biquad {
    let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
    let (cw, sw) = (w0.cos(), w0.sin());
    let alpha = sw / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b1, b2) = match kind {
        Kind::LowPass => ((1.0 - cw) / 2.0, 1.0 - cw, (1.0 - cw) / 2.0),
        Kind::HighPass => ((1.0 + cw) / 2.0, -(1.0 + cw), (1.0 + cw) / 2.0),
    };
    Biquad {
        b0: b0 / a0,
        b1: b1 / a0,
        b2: b2 / a0,
        a1: -2.0 * cw / a0,
        a2: (1.0 - alpha) / a0,
    }
}

/// Quality factors of an even-order Butterworth cascade.
fn butterworth_qs(order: usize) -> Vec<f64> {
    (0..order / 2)
        .map(|k| {
            let theta = std::f64::consts::PI * (2 * k + 1) as f64 / (2 * order) as f64;
            1.0 / (2.0 * theta.cos())
        })
        .collect()
}

/// Design the band-pass as high-pass sections followed by low-pass sections.
pub fn design_bandpass(spec: &FilterSpec, fs: f64) -> Result<Vec<Biquad>> {
    let [lo, hi] = spec.band_hz;
    if !(lo > 0.0 && hi > lo && hi < fs / 2.0) {
        return Err(Error::invalid(format!(
            "band [{lo}, {hi}] Hz must satisfy 0 < low < high < fs/2"
        )));
    }
    if spec.order_per_pass == 0 || spec.order_per_pass % 2 != 0 {
        return Err(Error::invalid("order_per_pass must be a positive even number"));
    }
    let mut sos = Vec::new();
    for q in butterworth_qs(spec.order_per_pass) {
        sos.push(butterworth_section(Kind::HighPass, lo, fs, q));
    }
    for q in butterworth_qs(spec.order_per_pass) {
        sos.push(butterworth_section(Kind::LowPass, hi, fs, q));
    }
    Ok(sos)
}

/// Steady-state filter state per section for a unit-step input, with the
/// input of each section scaled by the DC gain of the preceding ones.
fn steady_state(sos: &[Biquad]) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    let mut zis = Vec::with_capacity(sos.len());
    for s in sos {
        let g = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
        zis.push([scale * (g - s.b0), scale * (s.b2 - s.a2 * g)]);
        scale *= g;
    }
    zis
}

/// Direct-form-II-transposed cascade over `x` in place, initial conditions
/// scaled by `x0`.
fn sosfilt_inplace(sos: &[Biquad], zi: &[[f64; 2]], x0: f64, x: &mut [f64]) {
    for (s, z) in sos.iter().zip(zi) {
        let (mut z1, mut z2) = (z[0] * x0, z[1] * x0);
        for v in x.iter_mut() {
            let input = *v;
            let y = s.b0 * input + z1;
            z1 = s.b1 * input - s.a1 * y + z2;
            z2 = s.b2 * input - s.a2 * y;
            *v = y;
        }
    }
}

/// Zero-phase filtering: odd-symmetric padding, forward pass, backward pass.
pub fn sosfiltfilt(sos: &[Biquad], x: &[Real]) -> Result<Vec<Real>> {
    let padlen = 3 * (2 * sos.len() + 1);
    if x.len() <= padlen {
        return Err(Error::invalid(format!(
            "signal length {} must exceed pad length {padlen}",
            x.len()
        )));
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * padlen);
    for i in (1..=padlen).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in (n - padlen - 1..n - 1).rev() {
        ext.push(2.0 * x[n - 1] - x[i]);
    }

    let zi = steady_state(sos);
    let first = ext[0];
    sosfilt_inplace(sos, &zi, first, &mut ext);
    ext.reverse();
    let first = ext[0];
    sosfilt_inplace(sos, &zi, first, &mut ext);
    ext.reverse();
    Ok(ext[padlen..padlen + n].to_vec())
}

/// Zero-phase band-pass of one channel. Needs at least one second of data.
pub fn bandpass(signal: &[Real], spec: &FilterSpec, fs: f64) -> Result<Vec<Real>> {
    if (signal.len() as f64) < fs {
        return Err(Error::invalid("bandpass needs at least 1 s of data"));
    }
    let sos = design_bandpass(spec, fs)?;
    sosfiltfilt(&sos, signal)
}

// ---------------------------------------------------------------------------
// Epoching and rejection
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub filter: FilterSpec,
    /// Constant shift applied to nominal marker onsets to align epochs to
    /// the true display time; the per-trial delay jitter is irreducible.
    pub delay_correction_ms: f64,
    /// Padding around each run's marker span kept for filter warm-up.
    pub segment_pad_s: f64,
    /// Channels inspected by the amplitude-rejection step.
    pub channels_for_step2: Vec<Channel>,
    /// A gap longer than this many samples rejects every epoch it overlaps.
    pub gap_threshold_samples: u32,
    pub amplitude_threshold_uv: f64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            filter: FilterSpec::default(),
            delay_correction_ms: 30.0,
            segment_pad_s: 1.0,
            channels_for_step2: vec![Channel::Cz, Channel::Pz, Channel::Fp1],
            gap_threshold_samples: 20,
            amplitude_threshold_uv: 100.0,
        }
    }
}

impl PreprocessOptions {
    pub fn delay_correction_samples(&self) -> i64 {
        (self.delay_correction_ms * SAMPLING_RATE_HZ / 1000.0).round() as i64
    }
}

/// First sample index of an epoch in stream coordinates.
pub fn epoch_start_index(nominal_onset_s: f64, opts: &PreprocessOptions) -> i64 {
    (nominal_onset_s * SAMPLING_RATE_HZ).round() as i64 + opts.delay_correction_samples()
        - BASELINE_SAMPLES as i64
}

/// Rejection-rate report matching the two-step procedure: step 2 is counted
/// as a percentage of the epochs remaining after step 1; the total as a
/// percentage of all epochs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RejectionReport {
    pub n_total: usize,
    pub n_rejected_gap: usize,
    pub n_rejected_amplitude: usize,
    pub channels_used: Vec<Channel>,
    pub step1_rate_pct: f64,
    pub step2_rate_pct: f64,
    pub total_rate_pct: f64,
}

impl RejectionReport {
    pub fn n_kept(&self) -> usize {
        self.n_total - self.n_rejected_gap - self.n_rejected_amplitude
    }

    fn from_counts(n_total: usize, gap: usize, amp: usize, channels: &[Channel]) -> Self {
        let pct = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                100.0 * num as f64 / den as f64
            }
        };
        RejectionReport {
            n_total,
            n_rejected_gap: gap,
            n_rejected_amplitude: amp,
            channels_used: channels.to_vec(),
            step1_rate_pct: pct(gap, n_total),
            step2_rate_pct: pct(amp, n_total - gap),
            total_rate_pct: pct(gap + amp, n_total),
        }
    }
}

/// Two-step rejection. Step 1 flags epochs overlapping any gap longer than
/// the threshold; step 2 flags remaining epochs whose selected channels
/// exceed the amplitude threshold anywhere. Flags are sticky, so the
/// operation is idempotent.
pub fn reject_trials(
    epochs: &mut [Epoch],
    gaps: &[GapEvent],
    opts: &PreprocessOptions,
) -> RejectionReport {
    let long_gaps: Vec<&GapEvent> = gaps
        .iter()
        .filter(|g| g.length_samples > opts.gap_threshold_samples)
        .collect();
    for e in epochs.iter_mut() {
        if e.quality != QualityFlag::Kept {
            continue;
        }
        let start = epoch_start_index(e.t0, opts);
        let end = start + EPOCH_SAMPLES as i64;
        let overlaps = long_gaps
            .iter()
            .any(|g| (g.start_index as i64) < end && start < g.end_index() as i64);
        if overlaps {
            e.quality = QualityFlag::RejectedGap;
        }
    }
    for e in epochs.iter_mut() {
        if e.quality != QualityFlag::Kept {
            continue;
        }
        let exceeded = opts.channels_for_step2.iter().any(|ch| {
            e.channel(*ch)
                .iter()
                .any(|v| v.abs() > opts.amplitude_threshold_uv)
        });
        if exceeded {
            e.quality = QualityFlag::RejectedAmplitude;
        }
    }
    let gap = epochs.iter().filter(|e| e.quality == QualityFlag::RejectedGap).count();
    let amp = epochs
        .iter()
        .filter(|e| e.quality == QualityFlag::RejectedAmplitude)
        .count();
    RejectionReport::from_counts(epochs.len(), gap, amp, &opts.channels_for_step2)
}

/// Build the contiguous sample array of one run segment from delivered
/// packets, linearly interpolating gap interiors from the flanking samples
/// available inside the segment. Works identically online and offline.
pub fn build_run_segment(
    packets: &[StreamPacket],
    gaps: &[GapEvent],
    seg_start: usize,
    seg_end: usize,
    n_channels: usize,
) -> Result<Vec<Vec<Real>>> {
    if seg_end <= seg_start {
        return Err(Error::invalid("empty run segment"));
    }
    let len = seg_end - seg_start;
    let mut channels = vec![vec![0.0f64; len]; n_channels];
    let mut covered = vec![false; len];
    for p in packets {
        let p_start = p.first_sample_index as usize;
        let p_end = p_start + p.n_samples();
        if p_end <= seg_start || p_start >= seg_end {
            continue;
        }
        let lo = p_start.max(seg_start);
        let hi = p_end.min(seg_end);
        for i in lo..hi {
            covered[i - seg_start] = true;
            for (c, ch) in p.samples.iter().enumerate() {
                channels[c][i - seg_start] = ch[i - p_start] as f64;
            }
        }
    }
    let mut in_gap = vec![false; len];
    for g in gaps {
        let g_start = g.start_index as usize;
        let g_end = g.end_index() as usize;
        if g_end <= seg_start || g_start >= seg_end {
            continue;
        }
        for i in g_start.max(seg_start)..g_end.min(seg_end) {
            in_gap[i - seg_start] = true;
        }
    }
    if let Some(i) = covered
        .iter()
        .zip(&in_gap)
        .position(|(c, g)| !c && !g)
    {
        return Err(Error::format(
            0,
            format!("segment sample {} neither delivered nor declared as gap", seg_start + i),
        ));
    }

    // interpolate maximal gap runs
    let mut i = 0;
    while i < len {
        if !in_gap[i] {
            i += 1;
            continue;
        }
        let run_start = i;
        while i < len && in_gap[i] {
            i += 1;
        }
        let run_end = i; // exclusive
        for ch in channels.iter_mut() {
            let left = if run_start > 0 { Some(ch[run_start - 1]) } else { None };
            let right = if run_end < len { Some(ch[run_end]) } else { None };
            let (a, b) = match (left, right) {
                (Some(a), Some(b)) => (a, b),
                (Some(a), None) => (a, a),
                (None, Some(b)) => (b, b),
                (None, None) => (0.0, 0.0),
            };
            let span = (run_end - run_start + 1) as f64;
            for (k, slot) in ch[run_start..run_end].iter_mut().enumerate() {
                *slot = a + (b - a) * (k + 1) as f64 / span;
            }
        }
    }
    Ok(channels)
}

/// Segment bounds of one run in stream coordinates, derived from nominal
/// marker onsets only (so the online path computes identical bounds).
pub fn run_segment_bounds(
    run_markers: &[&MarkerEvent],
    total_samples: usize,
    opts: &PreprocessOptions,
) -> (usize, usize) {
    let fs = SAMPLING_RATE_HZ;
    let first = run_markers.first().expect("non-empty run").nominal_onset_s;
    let last = run_markers.last().expect("non-empty run").nominal_onset_s;
    let start = ((first - opts.segment_pad_s) * fs).round().max(0.0) as usize;
    let end = (((last + EPOCH_WINDOW_MS[1] / 1000.0 + opts.segment_pad_s) * fs).round() as usize)
        .min(total_samples);
    (start, end)
}

/// Filter one run segment and cut baseline-corrected epochs. Markers whose
/// epoch would cross a segment edge are skipped and counted.
pub fn process_run(
    packets: &[StreamPacket],
    gaps: &[GapEvent],
    run_markers: &[&MarkerEvent],
    total_samples: usize,
    subject: &str,
    session_id: &str,
    opts: &PreprocessOptions,
) -> Result<(Vec<Epoch>, usize)> {
    if run_markers.is_empty() {
        return Ok((Vec::new(), 0));
    }
    let (seg_start, seg_end) = run_segment_bounds(run_markers, total_samples, opts);
    let raw = build_run_segment(packets, gaps, seg_start, seg_end, 3)?;
    let sos = design_bandpass(&opts.filter, SAMPLING_RATE_HZ)?;
    let mut filtered = Vec::with_capacity(raw.len());
    for ch in &raw {
        filtered.push(sosfiltfilt(&sos, ch)?);
    }

    let mut epochs = Vec::with_capacity(run_markers.len());
    let mut skipped = 0usize;
    for m in run_markers {
        let start = epoch_start_index(m.nominal_onset_s, opts);
        let end = start + EPOCH_SAMPLES as i64;
        if start < seg_start as i64 || end > seg_end as i64 {
            skipped += 1;
            log::warn!(
                "skipping edge epoch run {} trial {} (outside segment)",
                m.run,
                m.trial_index
            );
            continue;
        }
        let local = (start - seg_start as i64) as usize;
        let mut data: Vec<Vec<Real>> = filtered
            .iter()
            .map(|ch| ch[local..local + EPOCH_SAMPLES].to_vec())
            .collect();
        for ch in &mut data {
            let baseline = ch[..BASELINE_SAMPLES].iter().sum::<f64>() / BASELINE_SAMPLES as f64;
            for v in ch.iter_mut() {
                *v -= baseline;
            }
        }
        epochs.push(Epoch {
            subject: subject.to_string(),
            session: session_id.to_string(),
            run: m.run,
            trial_index: m.trial_index,
            label: m.label,
            t0: m.nominal_onset_s,
            data,
            quality: QualityFlag::Kept,
        });
    }
    Ok((epochs, skipped))
}

#[derive(Clone, Debug)]
pub struct PreprocessOutcome {
    /// All epochs in (run, trial) order with quality flags set.
    pub epochs: Vec<Epoch>,
    pub report: RejectionReport,
    pub skipped_edge: usize,
}

/// Full offline preprocessing of a recording: per-run segmentation,
/// filtering, epoching, and two-step rejection.
pub fn preprocess_recording(rec: &Recording, opts: &PreprocessOptions) -> Result<PreprocessOutcome> {
    let mut by_run: BTreeMap<u32, Vec<&MarkerEvent>> = BTreeMap::new();
    for m in &rec.markers {
        by_run.entry(m.run).or_default().push(m);
    }
    let total = rec.header.n_samples_total as usize;
    let mut epochs = Vec::new();
    let mut skipped_edge = 0;
    for run_markers in by_run.values() {
        let (mut run_epochs, skipped) = process_run(
            &rec.packets,
            &rec.gaps,
            run_markers,
            total,
            &rec.header.subject,
            &rec.header.session_id,
            opts,
        )?;
        skipped_edge += skipped;
        epochs.append(&mut run_epochs);
    }
    let report = reject_trials(&mut epochs, &rec.gaps, opts);
    Ok(PreprocessOutcome { epochs, report, skipped_edge })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{transmit, LossModel, RecordingHeader, DEFAULT_PACKET_SAMPLES};
    use crate::synth::{default_roster, generate_session, GenerationOptions};
    use crate::types::{Condition, IconId, LabelKind, SessionSpec, TrialLabel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Squared magnitude of one pass of the cascade at frequency `f`.
    fn magnitude(sos: &[Biquad], f: f64, fs: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f / fs;
        let z1 = rustfft::num_complex::Complex::new(w.cos(), -w.sin());
        let z2 = z1 * z1;
        let mut h = rustfft::num_complex::Complex::new(1.0, 0.0);
        for s in sos {
            let num = rustfft::num_complex::Complex::new(s.b0, 0.0) + z1 * s.b1 + z2 * s.b2;
            let den = rustfft::num_complex::Complex::new(1.0, 0.0) + z1 * s.a1 + z2 * s.a2;
            h *= num / den;
        }
        h.norm()
    }

    fn sine(f: f64, n: usize, fs: f64) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / fs).sin())
            .collect()
    }

    #[test]
    fn design_magnitude_contract() {
        let sos = design_bandpass(&FilterSpec::default(), 500.0).unwrap();
        assert_eq!(sos.len(), 4);
        // stop-band: at least 12 dB below passband at 0.05 and 60 Hz
        assert!(magnitude(&sos, 0.05, 500.0) < 0.25);
        assert!(magnitude(&sos, 60.0, 500.0) < 0.25);
        // passband ripple below 1 dB between 0.5 and 24 Hz
        let mut f = 0.5;
        while f <= 24.0 {
            let m = magnitude(&sos, f, 500.0);
            assert!((0.891..1.001).contains(&m), "|H({f})| = {m}");
            f += 0.5;
        }
    }

    #[test]
    fn ten_hz_sine_passes_with_zero_lag() {
        // the 0.1 Hz high-pass settles over seconds, so the gain is read far
        // from the edges where start-up transients have died out
        let fs = 500.0;
        let x = sine(10.0, 35_000, fs);
        let y = bandpass(&x, &FilterSpec::default(), fs).unwrap();
        let mid = &y[15_000..20_000];
        let amp = mid.iter().cloned().fold(f64::MIN, f64::max);
        assert!((0.99..=1.001).contains(&amp), "amplitude {amp}");
        // cross-correlation peak at zero lag
        let xc = |lag: i64| -> f64 {
            (15_000..20_000)
                .map(|i| x[i] * y[(i as i64 + lag) as usize])
                .sum()
        };
        let zero = xc(0);
        for lag in [-5i64, -3, -1, 1, 3, 5] {
            assert!(zero > xc(lag), "lag {lag} beats zero lag");
        }
    }

    #[test]
    fn fifty_hz_sine_is_attenuated() {
        let fs = 500.0;
        let x = sine(50.0, 5000, fs);
        let y = bandpass(&x, &FilterSpec::default(), fs).unwrap();
        let amp = y[1000..4000].iter().cloned().fold(f64::MIN, f64::max);
        assert!(amp < 0.25, "amplitude {amp}");
    }

    #[test]
    fn dc_offset_is_removed() {
        let fs = 500.0;
        let x = vec![100.0; 5000];
        let y = bandpass(&x, &FilterSpec::default(), fs).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!(mean.abs() < 5.0, "mean {mean}");
    }

    #[test]
    fn filtfilt_impulse_response_is_symmetric() {
        // an impulse far from both edges: the two filter passes cancel each
        // other's phase, so the response is even around the impulse
        let mut x = vec![0.0; 40_001];
        x[20_000] = 1.0;
        let y = bandpass(&x, &FilterSpec::default(), 500.0).unwrap();
        for k in 1..500 {
            assert!(
                (y[20_000 + k] - y[20_000 - k]).abs() < 1e-9,
                "asymmetry at ±{k}"
            );
        }
    }

    #[test]
    fn too_short_input_rejected() {
        let x = vec![0.0; 400];
        assert!(bandpass(&x, &FilterSpec::default(), 500.0).is_err());
    }

    fn marker(run: u32, trial: u32, t: f64, target: bool) -> MarkerEvent {
        MarkerEvent {
            run,
            trial_index: trial,
            label: TrialLabel {
                kind: if target { LabelKind::Target } else { LabelKind::NonTarget },
                icon: IconId((trial % 6) as u8),
            },
            nominal_onset_s: t,
            display_onset_s: t + 0.030,
        }
    }

    fn packets_of(channels: &[Vec<f32>]) -> Vec<StreamPacket> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        transmit(channels, DEFAULT_PACKET_SAMPLES, &LossModel::none(), &mut rng)
            .unwrap()
            .0
    }

    #[test]
    fn epoch_index_arithmetic() {
        let opts = PreprocessOptions {
            filter: FilterSpec { band_hz: [1e-5, 249.0], order_per_pass: 2 },
            ..PreprocessOptions::default()
        };
        // marker at t=10 s, 30 ms correction: window starts at sample
        // 5000 + 15 - 50; onsets round to the nearest sample
        assert_eq!(opts.delay_correction_samples(), 15);
        assert_eq!(epoch_start_index(10.0, &opts), 4965);
        assert_eq!(epoch_start_index(10.0007, &opts), 4965);
        assert_eq!(epoch_start_index(10.0013, &opts), 4966);

        // ramp stream through a near-transparent filter: baseline-corrected
        // values identify the source indices
        let n = 10_000;
        let channels: Vec<Vec<f32>> = (0..3).map(|_| (0..n).map(|i| i as f32).collect()).collect();
        let packets = packets_of(&channels);
        let m = marker(0, 0, 10.0, true);
        let (epochs, skipped) =
            process_run(&packets, &[], &[&m], n, "s", "ses", &opts).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(epochs.len(), 1);
        let e = &epochs[0];
        assert_eq!(e.data[0].len(), 400);
        // baseline mean sits 24.5 ramp-units above epoch start
        assert!((e.data[0][0] - (-24.5)).abs() < 0.1, "got {}", e.data[0][0]);
        assert!((e.data[0][399] - 374.5).abs() < 0.1, "got {}", e.data[0][399]);
    }

    #[test]
    fn constant_stream_baselines_to_zero() {
        let n = 5000;
        let channels: Vec<Vec<f32>> = (0..3).map(|_| vec![5.0f32; n]).collect();
        let packets = packets_of(&channels);
        let m = marker(0, 0, 4.0, false);
        let opts = PreprocessOptions::default();
        let (epochs, _) = process_run(&packets, &[], &[&m], n, "s", "ses", &opts).unwrap();
        for ch in &epochs[0].data {
            for v in ch {
                assert!(v.abs() < 1e-6, "residual {v}");
            }
        }
        let baseline: f64 = epochs[0].data[0][..BASELINE_SAMPLES].iter().sum::<f64>()
            / BASELINE_SAMPLES as f64;
        assert!(baseline.abs() < 1e-9);
    }

    #[test]
    fn synthetic_target_epoch_recovers_subject_peak() {
        // a quiet zero-jitter subject: the epoch window-max should sit near
        // the generative peak amplitude
        let mut s = default_roster()[5].clone(); // canonical, 8.7 µV, 450 ms
        s.noise_rms_uv = 0.8;
        s.latency_jitter_ms_sd = 0.0;
        s.amplitude_jitter_frac = 0.0;
        s.blink_rate_hz = 0.0;
        let spec = SessionSpec::in_car(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (channels, markers) =
            generate_session(&spec, &s, &GenerationOptions::default(), &mut rng).unwrap();
        let wire: Vec<Vec<f32>> = channels
            .iter()
            .map(|ch| ch.iter().map(|v| *v as f32).collect())
            .collect();
        let packets = packets_of(&wire);
        let opts = PreprocessOptions::default();
        let refs: Vec<&MarkerEvent> = markers.iter().filter(|m| m.run == 0).collect();
        let (epochs, _) =
            process_run(&packets, &[], &refs, channels[0].len(), "s", "ses", &opts).unwrap();
        let targets: Vec<&Epoch> = epochs.iter().filter(|e| e.label.is_target()).collect();
        assert_eq!(targets.len(), 3);
        for e in targets {
            let max = e.channel(Channel::Pz)[175..=315]
                .iter()
                .cloned()
                .fold(f64::MIN, f64::max);
            assert!((max - 8.7).abs() < 1.5, "window max {max}");
        }
    }

    fn flat_epoch(trial: u32, t0: f64) -> Epoch {
        Epoch {
            subject: "s".into(),
            session: "ses".into(),
            run: 0,
            trial_index: trial,
            label: TrialLabel { kind: LabelKind::NonTarget, icon: IconId(0) },
            t0,
            data: vec![vec![0.0; EPOCH_SAMPLES]; 3],
            quality: QualityFlag::Kept,
        }
    }

    #[test]
    fn gap_threshold_is_exclusive_at_twenty() {
        let opts = PreprocessOptions::default();
        // epoch at t0=2 s covers samples [965, 1365)
        let mut epochs = vec![flat_epoch(0, 2.0)];
        let short_gap = GapEvent { start_index: 1000, length_samples: 20 };
        let report = reject_trials(&mut epochs, &[short_gap], &opts);
        assert_eq!(report.n_rejected_gap, 0);
        assert_eq!(epochs[0].quality, QualityFlag::Kept);

        let long_gap = GapEvent { start_index: 1000, length_samples: 21 };
        let report = reject_trials(&mut epochs, &[long_gap], &opts);
        assert_eq!(report.n_rejected_gap, 1);
        assert_eq!(epochs[0].quality, QualityFlag::RejectedGap);
    }

    #[test]
    fn gap_outside_epoch_does_not_reject() {
        let opts = PreprocessOptions::default();
        let mut epochs = vec![flat_epoch(0, 2.0)];
        let gap = GapEvent { start_index: 5000, length_samples: 100 };
        let report = reject_trials(&mut epochs, &[gap], &opts);
        assert_eq!(report.n_rejected_gap, 0);
    }

    #[test]
    fn amplitude_rejection_depends_on_channel_subset() {
        let opts3 = PreprocessOptions::default();
        let opts2 = PreprocessOptions {
            channels_for_step2: vec![Channel::Cz, Channel::Pz],
            ..PreprocessOptions::default()
        };
        let mut e = flat_epoch(0, 2.0);
        e.data[Channel::Fp1.index()][100] = 100.1;
        let mut with_fp1 = vec![e.clone()];
        let r3 = reject_trials(&mut with_fp1, &[], &opts3);
        assert_eq!(r3.n_rejected_amplitude, 1);
        let mut without_fp1 = vec![e];
        let r2 = reject_trials(&mut without_fp1, &[], &opts2);
        assert_eq!(r2.n_rejected_amplitude, 0);
        // the threshold itself is not an exceedance
        let mut at_threshold = vec![flat_epoch(1, 2.0)];
        at_threshold[0].data[0][7] = 100.0;
        let r = reject_trials(&mut at_threshold, &[], &opts3);
        assert_eq!(r.n_rejected_amplitude, 0);
    }

    #[test]
    fn rejection_is_idempotent_and_rates_follow_the_two_step_rule() {
        let opts = PreprocessOptions::default();
        let mut epochs: Vec<Epoch> = (0..10)
            .map(|i| flat_epoch(i, 2.0 + i as f64 * 0.8))
            .collect();
        // two gap rejections (epochs 0 and 1), two amplitude rejections
        let gaps = vec![
            GapEvent { start_index: epoch_start_index(2.0, &opts) as u64 + 10, length_samples: 30 },
            GapEvent { start_index: epoch_start_index(2.8, &opts) as u64 + 10, length_samples: 30 },
        ];
        epochs[2].data[0][0] = 150.0;
        epochs[3].data[2][399] = -150.0;
        let report = reject_trials(&mut epochs, &gaps, &opts);
        assert_eq!(report.n_rejected_gap, 2);
        assert_eq!(report.n_rejected_amplitude, 2);
        assert!((report.step1_rate_pct - 20.0).abs() < 1e-12);
        assert!((report.step2_rate_pct - 25.0).abs() < 1e-12);
        assert!((report.total_rate_pct - 40.0).abs() < 1e-12);
        assert_eq!(report.n_kept(), 6);

        // idempotence: re-running on the kept subset removes nothing
        let mut kept: Vec<Epoch> = epochs
            .iter()
            .filter(|e| e.quality == QualityFlag::Kept)
            .cloned()
            .collect();
        let again = reject_trials(&mut kept, &gaps, &opts);
        assert_eq!(again.n_rejected_gap + again.n_rejected_amplitude, 0);
    }

    #[test]
    fn narrower_channel_subset_never_rejects_more() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        use rand::Rng;
        let opts3 = PreprocessOptions::default();
        let opts2 = PreprocessOptions {
            channels_for_step2: vec![Channel::Cz, Channel::Pz],
            ..PreprocessOptions::default()
        };
        for _ in 0..50 {
            let mut e = flat_epoch(0, 2.0);
            for ch in &mut e.data {
                for v in ch.iter_mut() {
                    *v = rng.gen_range(-130.0..130.0);
                }
            }
            let mut a = vec![e.clone()];
            let mut b = vec![e];
            let r3 = reject_trials(&mut a, &[], &opts3);
            let r2 = reject_trials(&mut b, &[], &opts2);
            assert!(r2.n_rejected_amplitude <= r3.n_rejected_amplitude);
        }
    }

    #[test]
    fn build_run_segment_interpolates_and_validates() {
        let n = 500;
        let channels: Vec<Vec<f32>> = (0..3).map(|_| (0..n).map(|i| i as f32).collect()).collect();
        let mut packets = packets_of(&channels);
        let dropped = packets.remove(6); // samples 150..175
        let gaps = vec![GapEvent {
            start_index: dropped.first_sample_index,
            length_samples: dropped.n_samples() as u32,
        }];
        let seg = build_run_segment(&packets, &gaps, 100, 400, 3).unwrap();
        for (c, ch) in seg.iter().enumerate() {
            assert_eq!(ch.len(), 300);
            for (i, v) in ch.iter().enumerate() {
                assert!(
                    (*v - (100 + i) as f64).abs() < 1e-4,
                    "channel {c} sample {i}: {v}"
                );
            }
        }
        // a hole that is neither delivered nor declared fails
        let e = build_run_segment(&packets, &[], 100, 400, 3);
        assert!(e.is_err());
    }

    #[test]
    fn preprocess_recording_counts_epochs() {
        let s = default_roster()[5].clone();
        let spec = SessionSpec::in_car(3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (channels, markers) =
            generate_session(&spec, &s, &GenerationOptions::default(), &mut rng).unwrap();
        let wire: Vec<Vec<f32>> = channels
            .iter()
            .map(|ch| ch.iter().map(|v| *v as f32).collect())
            .collect();
        let (packets, gaps) = transmit(
            &wire,
            DEFAULT_PACKET_SAMPLES,
            &LossModel::none(),
            &mut ChaCha8Rng::seed_from_u64(8),
        )
        .unwrap();
        let rec = Recording {
            header: RecordingHeader {
                schema_version: 1,
                kind: crate::stream::RECORDING_KIND.to_string(),
                subject: s.subject_id.clone(),
                session_id: "ses-car-01".into(),
                condition: Condition::InCar,
                channels: vec!["Cz".into(), "Pz".into(), "Fp1".into()],
                sampling_rate_hz: 500,
                seed: 7,
                session: spec,
                packet_samples: DEFAULT_PACKET_SAMPLES as u32,
                n_samples_total: channels[0].len() as u64,
            },
            packets,
            markers,
            gaps,
        };
        let out = preprocess_recording(&rec, &PreprocessOptions::default()).unwrap();
        assert_eq!(out.epochs.len() + out.skipped_edge, 54);
        assert_eq!(out.skipped_edge, 0);
        assert_eq!(out.report.n_total, 54);
        // (run, trial) order
        for pair in out.epochs.windows(2) {
            assert!(
                (pair[0].run, pair[0].trial_index) < (pair[1].run, pair[1].trial_index)
            );
        }
        // baseline invariant holds on every epoch
        for e in &out.epochs {
            for ch in &e.data {
                let b: f64 = ch[..BASELINE_SAMPLES].iter().sum::<f64>() / BASELINE_SAMPLES as f64;
                assert!(b.abs() < 1e-9);
            }
        }
    }
}
