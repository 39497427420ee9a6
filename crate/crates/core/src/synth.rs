//! Synthetic EEG generation: colored background noise with condition-
//! dependent spectra, per-subject ERP templates, ocular artifacts, and
//! whole-session assembly.

use crate::error::{Error, Result};
use crate::stream::{MarkerEvent, StimulusDelayModel};
use crate::types::{
    block_randomized_order, Condition, IconId, LabelKind, SessionSpec, TrialLabel,
    BASELINE_SAMPLES, EPOCH_SAMPLES, N_ICONS,
};
use crate::{Real, SAMPLING_RATE_HZ};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// ERP gain applied to channels [Cz, Pz]; the component is parietal-maximal
/// and absent from Fp1.
pub const ERP_CHANNEL_GAINS: [f64; 2] = [0.9, 1.0];
/// The negative dip precedes the positive peak by this much.
pub const N1_OFFSET_MS: f64 = 150.0;

/// Subject archetypes: frontal-artifact-dominated, clean responders, and
/// low/atypical responders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectGroup {
    OcularContaminated,
    CanonicalErp,
    Ambiguous,
}

/// Generative parameters of one synthetic subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectModel {
    pub subject_id: String,
    pub group: SubjectGroup,
    pub p300_peak_uv: f64,
    pub p300_latency_ms: f64,
    pub p300_width_ms: f64,
    /// Magnitude of the negative dip preceding the peak (positive number).
    pub n1_dip_uv: f64,
    /// Derived: `p300_peak_uv + n1_dip_uv`.
    pub peak_to_peak_uv: f64,
    pub noise_rms_uv: f64,
    pub alpha_power_gain: f64,
    pub theta_gain_in_car: f64,
    pub blink_rate_hz: f64,
    pub latency_jitter_ms_sd: f64,
    pub amplitude_jitter_frac: f64,
}

impl SubjectModel {
    pub fn validate(&self) -> Result<()> {
        if self.p300_peak_uv < 0.0 {
            return Err(Error::invalid("p300_peak_uv must be ≥ 0"));
        }
        if self.group == SubjectGroup::CanonicalErp
            && !(250.0..=530.0).contains(&self.p300_latency_ms)
        {
            return Err(Error::invalid(format!(
                "canonical subject {} needs latency in [250, 530] ms, got {}",
                self.subject_id, self.p300_latency_ms
            )));
        }
        if self.p300_width_ms <= 0.0 {
            return Err(Error::invalid("p300_width_ms must be > 0"));
        }
        for (name, v) in [
            ("n1_dip_uv", self.n1_dip_uv),
            ("noise_rms_uv", self.noise_rms_uv),
            ("alpha_power_gain", self.alpha_power_gain),
            ("theta_gain_in_car", self.theta_gain_in_car),
            ("blink_rate_hz", self.blink_rate_hz),
            ("latency_jitter_ms_sd", self.latency_jitter_ms_sd),
            ("amplitude_jitter_frac", self.amplitude_jitter_frac),
        ] {
            if v < 0.0 {
                return Err(Error::invalid(format!("{name} must be ≥ 0")));
            }
        }
        let p2p = self.p300_peak_uv + self.n1_dip_uv;
        if (self.peak_to_peak_uv - p2p).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "peak_to_peak_uv must equal p300_peak_uv + n1_dip_uv = {p2p}"
            )));
        }
        Ok(())
    }
}

/// Load a roster file (JSON array of subjects).
pub fn load_roster(path: &Path) -> Result<Vec<SubjectModel>> {
    let text = std::fs::read_to_string(path)?;
    let roster: Vec<SubjectModel> = serde_json::from_str(&text)?;
    for s in &roster {
        s.validate()?;
    }
    Ok(roster)
}

pub fn save_roster(path: &Path, roster: &[SubjectModel]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(roster)?)?;
    Ok(())
}

fn subject(
    id: &str,
    group: SubjectGroup,
    peak: f64,
    latency: f64,
    width: f64,
    dip: f64,
    noise: f64,
    blink: f64,
    lat_jit: f64,
    amp_jit: f64,
) -> SubjectModel {
    SubjectModel {
        subject_id: id.to_string(),
        group,
        p300_peak_uv: peak,
        p300_latency_ms: latency,
        p300_width_ms: width,
        n1_dip_uv: dip,
        peak_to_peak_uv: peak + dip,
        noise_rms_uv: noise,
        alpha_power_gain: 3.0,
        theta_gain_in_car: 3.0,
        blink_rate_hz: blink,
        latency_jitter_ms_sd: lat_jit,
        amplitude_jitter_frac: amp_jit,
    }
}

/// The default 10-subject roster: 2 frontal-artifact subjects, 5 clean
/// responders with graded amplitudes (larger responses come with earlier
/// peaks), 3 low/atypical responders.
pub fn default_roster() -> Vec<SubjectModel> {
    use SubjectGroup::*;
    vec![
        subject("s001", OcularContaminated, 8.0, 455.0, 55.0, 2.4, 9.5, 0.11, 25.0, 0.2),
        subject("s002", Ambiguous, 7.0, 465.0, 60.0, 2.0, 10.0, 0.06, 35.0, 0.3),
        subject("s003", CanonicalErp, 12.5, 420.0, 55.0, 3.5, 9.0, 0.05, 22.0, 0.2),
        subject("s004", CanonicalErp, 10.5, 435.0, 55.0, 3.0, 9.0, 0.06, 24.0, 0.2),
        subject("s005", Ambiguous, 7.2, 505.0, 65.0, 2.0, 9.8, 0.08, 35.0, 0.3),
        subject("s006", CanonicalErp, 8.7, 450.0, 55.0, 2.6, 9.0, 0.04, 25.0, 0.2),
        subject("s007", CanonicalErp, 6.5, 470.0, 55.0, 2.0, 9.0, 0.07, 26.0, 0.2),
        subject("s008", CanonicalErp, 5.7, 500.0, 55.0, 1.7, 9.0, 0.05, 28.0, 0.2),
        subject("s009", Ambiguous, 6.8, 480.0, 60.0, 2.0, 9.8, 0.07, 32.0, 0.3),
        subject("s010", OcularContaminated, 7.2, 460.0, 55.0, 2.2, 9.5, 0.12, 26.0, 0.2),
    ]
}

/// Spectral shape of the background noise for one condition.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub condition: Condition,
    pub pink_exponent: f64,
    pub alpha_center_hz: f64,
    pub alpha_gain: f64,
    pub theta_band_hz: [f64; 2],
    pub theta_gain: f64,
    pub broadband_rms_uv: f64,
}

impl NoiseProfile {
    /// Profile for a subject under a condition. The lab profile keeps the
    /// subject's full alpha peak; the car profile attenuates alpha, adds the
    /// theta band elevation, and raises broadband RMS by `in_car_rms_factor`.
    pub fn for_condition(
        condition: Condition,
        subject: &SubjectModel,
        in_car_rms_factor: f64,
    ) -> Self {
        match condition {
            Condition::InLab => NoiseProfile {
                condition,
                pink_exponent: 1.0,
                alpha_center_hz: 10.0,
                alpha_gain: subject.alpha_power_gain,
                theta_band_hz: [3.0, 6.3],
                theta_gain: 1.0,
                broadband_rms_uv: subject.noise_rms_uv,
            },
            Condition::InCar => NoiseProfile {
                condition,
                pink_exponent: 1.1,
                alpha_center_hz: 10.0,
                alpha_gain: 1.0 + 0.3 * (subject.alpha_power_gain - 1.0),
                theta_band_hz: [3.0, 6.3],
                theta_gain: subject.theta_gain_in_car,
                broadband_rms_uv: subject.noise_rms_uv * in_car_rms_factor,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.broadband_rms_uv <= 0.0 || self.pink_exponent < 0.0 {
            return Err(Error::invalid("noise profile needs rms > 0 and exponent ≥ 0"));
        }
        match self.condition {
            Condition::InLab if self.alpha_gain <= 1.0 => {
                Err(Error::invalid("lab noise profile needs alpha_gain > 1"))
            }
            Condition::InCar if self.theta_gain <= 1.0 => {
                Err(Error::invalid("car noise profile needs theta_gain > 1"))
            }
            _ => Ok(()),
        }
    }

    /// Relative power density at frequency `f` (arbitrary scale; the
    /// realization is RMS-normalized afterwards).
    fn power_at(&self, f: f64) -> f64 {
        if f <= 0.0 {
            return 0.0;
        }
        let gauss = |center: f64, sd: f64| {
            let d = (f - center) / sd;
            (-0.5 * d * d).exp()
        };
        let pink = 1.0 / f.max(0.5).powf(self.pink_exponent);
        let alpha = 1.0 + (self.alpha_gain - 1.0) * gauss(self.alpha_center_hz, 1.5);
        let theta_center = 0.5 * (self.theta_band_hz[0] + self.theta_band_hz[1]);
        let theta = 1.0 + (self.theta_gain - 1.0) * gauss(theta_center, 1.2);
        pink * alpha * theta
    }
}

/// Colored background noise, 3 channels × `n_samples`, each channel an
/// independent realization normalized to the profile RMS.
pub fn background_noise<R: Rng>(
    profile: &NoiseProfile,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Real>>> {
    if n_samples < 256 {
        return Err(Error::invalid("background_noise needs n_samples ≥ 256"));
    }
    profile.validate()?;
    let n = n_samples;
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n);
    let mut channels = Vec::with_capacity(3);
    for _ in 0..3 {
        let mut spectrum =
            vec![rustfft::num_complex::Complex::new(0.0f64, 0.0); n];
        for k in 1..=n / 2 {
            let f = k as f64 * SAMPLING_RATE_HZ / n as f64;
            let amp = profile.power_at(f).sqrt();
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            if n % 2 == 0 && k == n / 2 {
                spectrum[k] = rustfft::num_complex::Complex::new(amp * re, 0.0);
            } else {
                spectrum[k] = rustfft::num_complex::Complex::new(amp * re, amp * im);
                spectrum[n - k] = spectrum[k].conj();
            }
        }
        ifft.process(&mut spectrum);
        let mut x: Vec<f64> = spectrum.iter().map(|c| c.re / n as f64).collect();
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        if rms > 0.0 {
            let scale = profile.broadband_rms_uv / rms;
            for v in &mut x {
                *v *= scale;
            }
        }
        channels.push(x);
    }
    Ok(channels)
}

fn add_gaussian(ch: &mut [Real], center_sample: f64, sd_samples: f64, amp: f64) {
    if sd_samples <= 0.0 || amp == 0.0 {
        return;
    }
    let lo = ((center_sample - 5.0 * sd_samples).floor().max(0.0)) as usize;
    let hi = ((center_sample + 5.0 * sd_samples).ceil()).min((ch.len() - 1) as f64) as usize;
    for (i, v) in ch.iter_mut().enumerate().take(hi + 1).skip(lo) {
        let d = (i as f64 - center_sample) / sd_samples;
        *v += amp * (-0.5 * d * d).exp();
    }
}

fn scaled_normal<R: Rng>(rng: &mut R, sd: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * sd
}

/// Single-trial ERP waveform on [Cz, Pz] over the epoch window
/// [-100, 700] ms: a positive peak at the subject latency preceded by a
/// negative dip, with per-trial amplitude and latency jitter. Non-targets
/// receive the same shape attenuated by `non_target_gain`.
pub fn erp_template<R: Rng>(
    subject: &SubjectModel,
    label: TrialLabel,
    non_target_gain: f64,
    rng: &mut R,
) -> [Vec<Real>; 2] {
    let amp_scale = 1.0 + scaled_normal(rng, subject.amplitude_jitter_frac);
    let lat_shift = scaled_normal(rng, subject.latency_jitter_ms_sd);
    let label_gain = if label.is_target() { 1.0 } else { non_target_gain };

    let peak = (subject.p300_peak_uv * amp_scale).max(0.0) * label_gain;
    let dip = (subject.n1_dip_uv * amp_scale).max(0.0) * label_gain;
    let latency = subject.p300_latency_ms + lat_shift;
    let peak_center = latency / 2.0 + BASELINE_SAMPLES as f64;
    let dip_center = (latency - N1_OFFSET_MS) / 2.0 + BASELINE_SAMPLES as f64;
    let peak_sd = subject.p300_width_ms / 2.0;
    let dip_sd = 0.5 * subject.p300_width_ms / 2.0;

    let mut out = [vec![0.0; EPOCH_SAMPLES], vec![0.0; EPOCH_SAMPLES]];
    for (ch, gain) in out.iter_mut().zip(ERP_CHANNEL_GAINS) {
        add_gaussian(ch, peak_center, peak_sd, peak * gain);
        add_gaussian(ch, dip_center, dip_sd, -dip * gain);
    }
    out
}

/// Blink transient geometry (Fp1-dominant, biphasic).
const BLINK_MAIN_SD_MS: f64 = 60.0;
const BLINK_UNDERSHOOT_SD_MS: f64 = 90.0;
const BLINK_UNDERSHOOT_DELAY_MS: f64 = 140.0;
const BLINK_UNDERSHOOT_FRAC: f64 = -0.35;
const BLINK_CZPZ_SCALE: f64 = 0.1;

/// Target-locked slow ocular deflection for `OcularContaminated` subjects.
const OCULAR_AMP_UV: [f64; 3] = [13.0, 17.0, 55.0]; // Cz, Pz, Fp1
const OCULAR_DELAY_MS: f64 = 250.0;
const OCULAR_SD_MS: f64 = 140.0;

/// Insert blink transients at Poisson times, plus — for ocular-contaminated
/// subjects — a slow deflection locked to every target onset.
pub fn inject_artifacts<R: Rng>(
    channels: &mut [Vec<Real>],
    subject: &SubjectModel,
    markers: &[MarkerEvent],
    rng: &mut R,
) {
    let n = channels[0].len();
    let fs = SAMPLING_RATE_HZ;
    let duration_s = n as f64 / fs;
    let ms_to_samples = fs / 1000.0;

    if subject.blink_rate_hz > 0.0 {
        let mut t = 0.0f64;
        loop {
            let u: f64 = rng.gen();
            t += -(1.0 - u).ln() / subject.blink_rate_hz;
            if t >= duration_s {
                break;
            }
            let amp_fp1 = rng.gen_range(150.0..400.0);
            let center = t * fs;
            for (c, ch) in channels.iter_mut().enumerate() {
                let amp = if c == 2 { amp_fp1 } else { amp_fp1 * BLINK_CZPZ_SCALE };
                add_gaussian(ch, center, BLINK_MAIN_SD_MS * ms_to_samples, amp);
                add_gaussian(
                    ch,
                    center + BLINK_UNDERSHOOT_DELAY_MS * ms_to_samples,
                    BLINK_UNDERSHOOT_SD_MS * ms_to_samples,
                    amp * BLINK_UNDERSHOOT_FRAC,
                );
            }
        }
    }

    if subject.group == SubjectGroup::OcularContaminated {
        for m in markers.iter().filter(|m| m.label.is_target()) {
            let scale = 1.0 + scaled_normal(rng, 0.15);
            let center = m.display_onset_s * fs + OCULAR_DELAY_MS * ms_to_samples;
            for (c, ch) in channels.iter_mut().enumerate() {
                add_gaussian(
                    ch,
                    center,
                    OCULAR_SD_MS * ms_to_samples,
                    OCULAR_AMP_UV[c] * scale,
                );
            }
        }
    }
}

/// Knobs of session assembly that are not part of the session layout itself.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GenerationOptions {
    pub lead_in_s: f64,
    pub lead_out_s: f64,
    /// Self-initiated pause between car runs, drawn uniformly (seconds).
    pub in_car_gap_s: [f64; 2],
    /// ERP attenuation for non-target trials.
    pub non_target_gain: f64,
    /// Broadband RMS multiplier for the car condition.
    pub in_car_rms_factor: f64,
    pub delay: StimulusDelayModel,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions {
            lead_in_s: 2.0,
            lead_out_s: 2.0,
            in_car_gap_s: [2.0, 5.0],
            non_target_gain: 0.15,
            in_car_rms_factor: 1.25,
            delay: StimulusDelayModel::default(),
        }
    }
}

/// Generate one session: continuous 3-channel stream (µV, f64) plus the
/// marker list. Markers are spaced exactly 800 ms within a run; nominal
/// onsets sit on the sample grid, display onsets add the drawn delay.
pub fn generate_session<R: Rng>(
    spec: &SessionSpec,
    subject: &SubjectModel,
    options: &GenerationOptions,
    rng: &mut R,
) -> Result<(Vec<Vec<Real>>, Vec<MarkerEvent>)> {
    spec.validate()?;
    subject.validate()?;
    if !(0.0..=1.0).contains(&options.non_target_gain) {
        return Err(Error::invalid("non_target_gain must be in [0,1]"));
    }
    let fs = SAMPLING_RATE_HZ;
    let trial_samples = (spec.trial_period_s() * fs).round() as u64;

    // Lay out markers first; RNG order is runs → delays → noise → templates
    // → artifacts.
    let mut markers: Vec<MarkerEvent> = Vec::with_capacity(spec.total_trials());
    let mut cursor: u64 = (options.lead_in_s * fs).round() as u64;
    for run in 0..spec.n_runs {
        let order_seed: u64 = rng.gen();
        let order = block_randomized_order(spec.reps_per_icon, order_seed)?;
        let target = IconId(rng.gen_range(0..N_ICONS as u8));
        for (k, icon) in order.into_iter().enumerate() {
            let nominal_idx = cursor + k as u64 * trial_samples;
            let nominal_onset_s = nominal_idx as f64 / fs;
            let delay_ms = options.delay.draw(rng);
            markers.push(MarkerEvent {
                run,
                trial_index: (run as usize * spec.trials_per_run()) as u32 + k as u32,
                label: TrialLabel {
                    kind: if icon == target { LabelKind::Target } else { LabelKind::NonTarget },
                    icon,
                },
                nominal_onset_s,
                display_onset_s: nominal_onset_s + delay_ms / 1000.0,
            });
        }
        cursor += spec.trials_per_run() as u64 * trial_samples;
        if run + 1 < spec.n_runs {
            let pause_s = match spec.condition {
                Condition::InLab => spec.rest_s,
                Condition::InCar => rng.gen_range(options.in_car_gap_s[0]..options.in_car_gap_s[1]),
            };
            cursor += (pause_s * fs).round() as u64;
        }
    }
    let n_samples = (cursor + (options.lead_out_s * fs).round() as u64) as usize;

    let profile = NoiseProfile::for_condition(spec.condition, subject, options.in_car_rms_factor);
    let mut channels = background_noise(&profile, n_samples, rng)?;

    for m in &markers {
        let template = erp_template(subject, m.label, options.non_target_gain, rng);
        let onset_idx = (m.display_onset_s * fs).round() as i64;
        for (t_ch, ch_idx) in template.iter().zip([0usize, 1]) {
            let ch = &mut channels[ch_idx];
            for (j, &v) in t_ch.iter().enumerate() {
                let idx = onset_idx - BASELINE_SAMPLES as i64 + j as i64;
                if idx >= 0 && (idx as usize) < ch.len() {
                    ch[idx as usize] += v;
                }
            }
        }
    }

    inject_artifacts(&mut channels, subject, &markers, rng);
    Ok((channels, markers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quality::{band_power, welch_psd, welch_ttest, WelchParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_jitter_subject() -> SubjectModel {
        let s = subject("test", SubjectGroup::CanonicalErp, 8.7, 450.0, 55.0, 2.6, 9.0, 0.0, 0.0, 0.0);
        s.validate().unwrap();
        s
    }

    #[test]
    fn default_roster_is_valid() {
        let roster = default_roster();
        assert_eq!(roster.len(), 10);
        for s in &roster {
            s.validate().unwrap();
        }
        let count = |g| roster.iter().filter(|s| s.group == g).count();
        assert_eq!(count(SubjectGroup::OcularContaminated), 2);
        assert_eq!(count(SubjectGroup::CanonicalErp), 5);
        assert_eq!(count(SubjectGroup::Ambiguous), 3);
        let ids: std::collections::BTreeSet<_> =
            roster.iter().map(|s| s.subject_id.clone()).collect();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn roster_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roster.json");
        let roster = default_roster();
        save_roster(&path, &roster).unwrap();
        assert_eq!(load_roster(&path).unwrap(), roster);
    }

    #[test]
    fn invalid_subjects_rejected() {
        let mut s = zero_jitter_subject();
        s.p300_latency_ms = 600.0; // canonical subjects must peak in-window
        assert!(s.validate().is_err());
        let mut s = zero_jitter_subject();
        s.peak_to_peak_uv = 99.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_jitter_target_template_peaks_at_subject_amplitude() {
        let s = zero_jitter_subject();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let label = TrialLabel { kind: LabelKind::Target, icon: IconId(0) };
        let tpl = erp_template(&s, label, 0.15, &mut rng);
        // window [250, 530] ms = samples 175..=315; Pz carries unit gain
        let max = tpl[1][175..=315].iter().cloned().fold(f64::MIN, f64::max);
        assert!((max - 8.7).abs() < 1e-3, "max {max}");
        // Cz is scaled by 0.9
        let max_cz = tpl[0][175..=315].iter().cloned().fold(f64::MIN, f64::max);
        assert!((max_cz - 0.9 * 8.7).abs() < 1e-3);
    }

    #[test]
    fn non_target_template_is_attenuated() {
        let s = zero_jitter_subject();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = erp_template(&s, TrialLabel { kind: LabelKind::Target, icon: IconId(0) }, 0.15, &mut rng);
        let nt = erp_template(&s, TrialLabel { kind: LabelKind::NonTarget, icon: IconId(1) }, 0.15, &mut rng);
        let max_t = t[1].iter().cloned().fold(f64::MIN, f64::max);
        let max_nt = nt[1].iter().cloned().fold(f64::MIN, f64::max);
        assert!((max_nt - 0.15 * max_t).abs() < 1e-9);
    }

    #[test]
    fn template_separates_target_from_non_target_statistically() {
        let s = subject("mc", SubjectGroup::CanonicalErp, 8.7, 450.0, 55.0, 2.6, 9.0, 0.0, 25.0, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // mean amplitude in [400, 500] ms = samples 250..300 on Pz
        let window_mean = |tpl: &[Vec<Real>; 2]| {
            tpl[1][250..300].iter().sum::<f64>() / 50.0
        };
        let mut tgt = Vec::new();
        let mut non = Vec::new();
        for _ in 0..500 {
            let t = erp_template(&s, TrialLabel { kind: LabelKind::Target, icon: IconId(0) }, 0.15, &mut rng);
            tgt.push(window_mean(&t));
            let n = erp_template(&s, TrialLabel { kind: LabelKind::NonTarget, icon: IconId(1) }, 0.15, &mut rng);
            non.push(window_mean(&n));
        }
        let r = welch_ttest(&tgt, &non).unwrap();
        assert!(r.p_value < 0.05, "p = {}", r.p_value);
        assert!(r.statistic > 0.0);
    }

    #[test]
    fn noise_rms_matches_profile() {
        let s = zero_jitter_subject();
        let profile = NoiseProfile::for_condition(Condition::InLab, &s, 1.25);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let channels = background_noise(&profile, 50_000, &mut rng).unwrap();
        for ch in &channels {
            let rms = (ch.iter().map(|v| v * v).sum::<f64>() / ch.len() as f64).sqrt();
            assert!((rms - 9.0).abs() < 0.9, "rms {rms}");
        }
    }

    #[test]
    fn noise_rejects_short_lengths() {
        let s = zero_jitter_subject();
        let profile = NoiseProfile::for_condition(Condition::InLab, &s, 1.25);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(background_noise(&profile, 255, &mut rng).is_err());
    }

    #[test]
    fn lab_noise_shows_alpha_peak() {
        let s = zero_jitter_subject();
        let profile = NoiseProfile::for_condition(Condition::InLab, &s, 1.25);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let channels = background_noise(&profile, 100_000, &mut rng).unwrap();
        let (freqs, power) = welch_psd(&channels[0], 500.0, WelchParams::default()).unwrap();
        let alpha = band_power(&freqs, &power, 8.0, 12.0);
        let below = band_power(&freqs, &power, 4.0, 8.0);
        let above = band_power(&freqs, &power, 12.0, 16.0);
        assert!(alpha > below, "alpha {alpha} vs below {below}");
        assert!(alpha > above, "alpha {alpha} vs above {above}");
    }

    #[test]
    fn car_noise_elevates_theta_band() {
        let s = zero_jitter_subject();
        let lab = NoiseProfile::for_condition(Condition::InLab, &s, 1.25);
        let car = NoiseProfile::for_condition(Condition::InCar, &s, 1.25);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lab_ch = background_noise(&lab, 100_000, &mut rng).unwrap();
        let car_ch = background_noise(&car, 100_000, &mut rng).unwrap();
        let theta = |sig: &[f64]| {
            let (freqs, power) = welch_psd(sig, 500.0, WelchParams::default()).unwrap();
            band_power(&freqs, &power, 3.0, 6.3)
        };
        assert!(theta(&car_ch[0]) > theta(&lab_ch[0]));
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let s = zero_jitter_subject();
        let profile = NoiseProfile::for_condition(Condition::InLab, &s, 1.25);
        let a = background_noise(&profile, 1000, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = background_noise(&profile, 1000, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn artifacts_are_noop_for_clean_subject_without_blinks() {
        let s = zero_jitter_subject(); // blink_rate 0, canonical
        let mut channels = vec![vec![0.0; 5000]; 3];
        let before = channels.clone();
        let markers = vec![MarkerEvent {
            run: 0,
            trial_index: 0,
            label: TrialLabel { kind: LabelKind::Target, icon: IconId(0) },
            nominal_onset_s: 2.0,
            display_onset_s: 2.03,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        inject_artifacts(&mut channels, &s, &markers, &mut rng);
        assert_eq!(channels, before);
    }

    #[test]
    fn blinks_dominate_fp1() {
        let mut s = zero_jitter_subject();
        s.blink_rate_hz = 2.0;
        let mut channels = vec![vec![0.0; 50_000]; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        inject_artifacts(&mut channels, &s, &[], &mut rng);
        let max = |c: usize| channels[c].iter().cloned().fold(f64::MIN, f64::max);
        assert!(max(2) > 140.0, "Fp1 max {}", max(2));
        assert!(max(0) < 0.25 * max(2), "Cz should carry ~0.1 of blink amplitude");
    }

    #[test]
    fn ocular_subject_gets_target_locked_deflection() {
        let mut s = zero_jitter_subject();
        s.group = SubjectGroup::OcularContaminated;
        let mut channels = vec![vec![0.0; 5000]; 3];
        let markers = vec![
            MarkerEvent {
                run: 0,
                trial_index: 0,
                label: TrialLabel { kind: LabelKind::Target, icon: IconId(0) },
                nominal_onset_s: 2.0,
                display_onset_s: 2.03,
            },
            MarkerEvent {
                run: 0,
                trial_index: 1,
                label: TrialLabel { kind: LabelKind::NonTarget, icon: IconId(1) },
                nominal_onset_s: 2.8,
                display_onset_s: 2.83,
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        inject_artifacts(&mut channels, &s, &markers, &mut rng);
        // deflection sits ~250 ms after the target display onset
        let idx = ((2.03 + 0.25) * 500.0) as usize;
        assert!(channels[2][idx] > 40.0, "Fp1 deflection {}", channels[2][idx]);
        assert!(channels[1][idx] > 15.0, "Pz deflection {}", channels[1][idx]);
        // non-target onset is unaffected (beyond the Gaussian tail)
        let nt_idx = ((2.83 + 0.25) * 500.0) as usize;
        assert!(channels[2][nt_idx] < 10.0);
    }

    #[test]
    fn lab_session_has_360_markers_with_exact_spacing() {
        let spec = SessionSpec::in_lab(11);
        let s = zero_jitter_subject();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (channels, markers) =
            generate_session(&spec, &s, &GenerationOptions::default(), &mut rng).unwrap();
        assert_eq!(markers.len(), 360);
        for run in 0..6 {
            let in_run: Vec<_> = markers.iter().filter(|m| m.run == run).collect();
            assert_eq!(in_run.len(), 60);
            for pair in in_run.windows(2) {
                let dt = pair[1].nominal_onset_s - pair[0].nominal_onset_s;
                assert!((dt - 0.8).abs() < 1e-9, "spacing {dt}");
            }
        }
        let n_targets = markers.iter().filter(|m| m.label.is_target()).count();
        assert_eq!(n_targets, 60); // exactly 1/6
        assert_eq!(channels.len(), 3);
        // 6 runs × 48 s + 5 rests × 30 s + 4 s lead = 442 s
        assert_eq!(channels[0].len(), 221_000);
    }

    #[test]
    fn car_session_counts() {
        let spec = SessionSpec::in_car(50, 13);
        let s = zero_jitter_subject();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (_, markers) =
            generate_session(&spec, &s, &GenerationOptions::default(), &mut rng).unwrap();
        assert_eq!(markers.len(), 900);
        assert_eq!(markers.iter().filter(|m| m.label.is_target()).count(), 150);
        for run in 0..50 {
            assert_eq!(markers.iter().filter(|m| m.run == run).count(), 18);
        }
    }

    #[test]
    fn sessions_are_deterministic() {
        let spec = SessionSpec::in_car(3, 17);
        let s = zero_jitter_subject();
        let opts = GenerationOptions::default();
        let a = generate_session(&spec, &s, &opts, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        let b = generate_session(&spec, &s, &opts, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn erp_injection_leaves_fp1_untouched() {
        let spec = SessionSpec::in_car(2, 19);
        let opts = GenerationOptions::default();
        let with_erp = subject("a", SubjectGroup::CanonicalErp, 9.0, 450.0, 55.0, 2.0, 9.0, 0.0, 20.0, 0.2);
        let mut without = with_erp.clone();
        without.p300_peak_uv = 0.0;
        without.n1_dip_uv = 0.0;
        without.peak_to_peak_uv = 0.0;
        let a = generate_session(&spec, &with_erp, &opts, &mut ChaCha8Rng::seed_from_u64(23)).unwrap();
        let b = generate_session(&spec, &without, &opts, &mut ChaCha8Rng::seed_from_u64(23)).unwrap();
        assert_eq!(a.0[2], b.0[2], "Fp1 must not carry the ERP");
        assert_ne!(a.0[1], b.0[1], "Pz must carry the ERP");
    }
}
