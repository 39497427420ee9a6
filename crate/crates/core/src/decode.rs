//! Six-way run decisions from trial-level target probabilities, plus an
//! online simulator that consumes a packet feed and emits a feedback event
//! per run.
//!
//! A run's decision averages the target probability of each icon's kept
//! trials; the icon with the highest mean wins, ties resolve to the lowest
//! icon index, and icons with no surviving trials are excluded via a
//! negative-infinity sentinel. The online path closes a run only once the
//! stream has covered the run's padded filter segment, then applies exactly
//! the offline preprocessing — so both paths yield identical decisions.

use crate::error::{Error, Result};
use crate::preprocess::{process_run, reject_trials, run_segment_bounds, PreprocessOptions};
use crate::stream::{FeedEvent, GapEvent, MarkerEvent, RecordingHeader, StreamPacket};
use crate::types::{Epoch, IconId, QualityFlag, N_ICONS};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

/// One scored trial: the flashed icon and the model's target probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialScore {
    pub trial_index: u32,
    pub icon: IconId,
    pub proba: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunDecision {
    pub run: u32,
    pub predicted: IconId,
    /// Mean probability per icon; icons without trials hold `-inf`.
    pub icon_scores: [f64; N_ICONS],
    pub n_trials: usize,
}

/// Average per-icon probabilities and pick the winner (lowest index on
/// exact ties). A run where every icon lacks trials is undecidable.
pub fn aggregate_run(run: u32, scores: &[TrialScore]) -> Result<RunDecision> {
    let mut sums = [0.0f64; N_ICONS];
    let mut counts = [0usize; N_ICONS];
    for s in scores {
        let i = s.icon.0 as usize;
        if i >= N_ICONS {
            return Err(Error::invalid(format!("icon index {i} out of range")));
        }
        sums[i] += s.proba;
        counts[i] += 1;
    }
    let mut icon_scores = [f64::NEG_INFINITY; N_ICONS];
    for i in 0..N_ICONS {
        if counts[i] > 0 {
            icon_scores[i] = sums[i] / counts[i] as f64;
        }
    }
    let mut best = 0usize;
    for i in 1..N_ICONS {
        if icon_scores[i] > icon_scores[best] {
            best = i;
        }
    }
    if icon_scores[best] == f64::NEG_INFINITY {
        return Err(Error::RunUndecidable { run });
    }
    Ok(RunDecision {
        run,
        predicted: IconId(best as u8),
        icon_scores,
        n_trials: scores.len(),
    })
}

/// Keep only the first `n_reps` repetition blocks of a run. Trials are
/// numbered `run * trials_per_run + k`, and each block of six consecutive
/// trials flashes every icon once.
pub fn filter_repetitions(
    scores: &[TrialScore],
    trials_per_run: u32,
    n_reps: usize,
) -> Vec<TrialScore> {
    let limit = (n_reps as u32) * N_ICONS as u32;
    scores
        .iter()
        .filter(|s| s.trial_index % trials_per_run < limit)
        .copied()
        .collect()
}

/// Per-run outcome written by both the offline and the online decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub run: u32,
    /// Stream time at which the decision fired; absent offline.
    pub decided_at_s: Option<f64>,
    pub predicted: Option<u8>,
    pub true_target: Option<u8>,
    pub correct: Option<bool>,
    pub icon_scores: [Option<f64>; N_ICONS],
    pub n_kept: usize,
    pub n_rejected: usize,
}

impl FeedbackEvent {
    /// Equality modulo the timing field, for offline/online comparison.
    pub fn same_decision(&self, other: &FeedbackEvent) -> bool {
        self.run == other.run
            && self.predicted == other.predicted
            && self.true_target == other.true_target
            && self.correct == other.correct
            && self.icon_scores == other.icon_scores
            && self.n_kept == other.n_kept
            && self.n_rejected == other.n_rejected
    }
}

fn event_from_run<F>(
    run: u32,
    epochs: &mut Vec<Epoch>,
    gaps: &[GapEvent],
    true_target: Option<u8>,
    opts: &PreprocessOptions,
    score_fn: &mut F,
) -> Result<FeedbackEvent>
where
    F: FnMut(&[Epoch]) -> Result<Vec<f64>>,
{
    reject_trials(epochs, gaps, opts);
    let kept: Vec<Epoch> = epochs
        .iter()
        .filter(|e| e.quality == QualityFlag::Kept)
        .cloned()
        .collect();
    let probas = score_fn(&kept)?;
    if probas.len() != kept.len() {
        return Err(Error::invalid("scorer returned a mismatched number of probabilities"));
    }
    let scores: Vec<TrialScore> = kept
        .iter()
        .zip(&probas)
        .map(|(e, p)| TrialScore { trial_index: e.trial_index, icon: e.label.icon, proba: *p })
        .collect();
    let decision = match aggregate_run(run, &scores) {
        Ok(d) => Some(d),
        Err(Error::RunUndecidable { .. }) => None,
        Err(e) => return Err(e),
    };
    let predicted = decision.as_ref().map(|d| d.predicted.0);
    let icon_scores = match &decision {
        Some(d) => {
            let mut out = [None; N_ICONS];
            for i in 0..N_ICONS {
                if d.icon_scores[i] > f64::NEG_INFINITY {
                    out[i] = Some(d.icon_scores[i]);
                }
            }
            out
        }
        None => [None; N_ICONS],
    };
    Ok(FeedbackEvent {
        run,
        decided_at_s: None,
        predicted,
        true_target,
        correct: predicted.zip(true_target).map(|(p, t)| p == t),
        icon_scores,
        n_kept: kept.len(),
        n_rejected: epochs.len() - kept.len(),
    })
}

fn target_of(markers: &[&MarkerEvent]) -> Option<u8> {
    markers
        .iter()
        .find(|m| m.label.is_target())
        .map(|m| m.label.icon.0)
}

/// Offline decoding of preprocessed epochs (flags already set or not — the
/// rejection here is idempotent). Epochs of one run are scored together.
pub fn decide_session<F>(
    epochs: &[Epoch],
    gaps: &[GapEvent],
    opts: &PreprocessOptions,
    mut score_fn: F,
) -> Result<Vec<FeedbackEvent>>
where
    F: FnMut(&[Epoch]) -> Result<Vec<f64>>,
{
    let mut by_run: BTreeMap<u32, Vec<Epoch>> = BTreeMap::new();
    for e in epochs {
        by_run.entry(e.run).or_default().push(e.clone());
    }
    let mut events = Vec::with_capacity(by_run.len());
    for (run, mut run_epochs) in by_run {
        let truth = run_epochs
            .iter()
            .find(|e| e.label.is_target())
            .map(|e| e.label.icon.0);
        events.push(event_from_run(run, &mut run_epochs, gaps, truth, opts, &mut score_fn)?);
    }
    Ok(events)
}

/// Online decoding over a stream feed. Runs close as soon as the stream has
/// covered their padded segment (or at end of feed), are preprocessed with
/// the run-segment path, scored, and aggregated into feedback events.
pub fn online_session<I, F>(
    feed: I,
    header: &RecordingHeader,
    opts: &PreprocessOptions,
    mut score_fn: F,
) -> Result<Vec<FeedbackEvent>>
where
    I: IntoIterator<Item = FeedEvent>,
    F: FnMut(&[Epoch]) -> Result<Vec<f64>>,
{
    let trials_per_run = header.session.trials_per_run();
    let total = header.n_samples_total as usize;
    let mut packets: Vec<StreamPacket> = Vec::new();
    let mut gaps: Vec<GapEvent> = Vec::new();
    let mut markers: BTreeMap<u32, Vec<MarkerEvent>> = BTreeMap::new();
    let mut closed: std::collections::BTreeSet<u32> = Default::default();
    let mut cursor = 0u64;
    let mut events = Vec::new();

    let close_run = |run: u32,
                         run_markers: &[MarkerEvent],
                         packets: &[StreamPacket],
                         gaps: &[GapEvent],
                         at: Option<f64>,
                         score_fn: &mut F|
     -> Result<FeedbackEvent> {
        let mut refs: Vec<&MarkerEvent> = run_markers.iter().collect();
        refs.sort_by_key(|m| m.trial_index);
        let (mut epochs, _) = process_run(
            packets,
            gaps,
            &refs,
            total,
            &header.subject,
            &header.session_id,
            opts,
        )?;
        let truth = target_of(&refs);
        let mut ev = event_from_run(run, &mut epochs, gaps, truth, opts, score_fn)?;
        ev.decided_at_s = at;
        Ok(ev)
    };

    for event in feed {
        let now = event.time_s();
        match event {
            FeedEvent::Packet(p) => {
                cursor = cursor.max(p.first_sample_index + p.n_samples() as u64);
                packets.push(p);
            }
            FeedEvent::Gap(g) => {
                cursor = cursor.max(g.end_index());
                gaps.push(g);
            }
            FeedEvent::Marker(m) => {
                markers.entry(m.run).or_default().push(m);
            }
        }
        // close every pending run whose padded segment is fully covered
        let pending: Vec<u32> = markers
            .iter()
            .filter(|(run, ms)| !closed.contains(run) && ms.len() == trials_per_run)
            .map(|(run, _)| *run)
            .collect();
        for run in pending {
            let refs: Vec<&MarkerEvent> = markers[&run].iter().collect();
            let (_, seg_end) = run_segment_bounds(&refs, total, opts);
            if seg_end as u64 <= cursor {
                events.push(close_run(run, &markers[&run], &packets, &gaps, Some(now), &mut score_fn)?);
                closed.insert(run);
            }
        }
    }
    // feed exhausted: whatever is still pending closes on the final state
    let end_time = cursor as f64 / header.sampling_rate_hz as f64;
    for (run, ms) in &markers {
        if !closed.contains(run) {
            events.push(close_run(*run, ms, &packets, &gaps, Some(end_time), &mut score_fn)?);
        }
    }
    Ok(events)
}

/// Fraction of runs with a known target that were decided correctly;
/// undecidable runs count as wrong.
pub fn run_accuracy(events: &[FeedbackEvent]) -> f64 {
    let with_truth: Vec<&FeedbackEvent> =
        events.iter().filter(|e| e.true_target.is_some()).collect();
    if with_truth.is_empty() {
        return 0.0;
    }
    let correct = with_truth
        .iter()
        .filter(|e| e.correct == Some(true))
        .count();
    correct as f64 / with_truth.len() as f64
}

pub fn write_feedback_jsonl<W: Write>(out: &mut W, events: &[FeedbackEvent]) -> Result<()> {
    for e in events {
        let line = serde_json::to_string(e)?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_feedback_jsonl<R: BufRead>(input: R) -> Result<Vec<FeedbackEvent>> {
    let mut events = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line)?);
    }
    Ok(events)
}
