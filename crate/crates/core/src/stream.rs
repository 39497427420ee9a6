//! Simulated wireless acquisition chain and the ERPB recording container.
//!
//! The acquisition model packetizes a continuous 3-channel sample stream,
//! drops packets according to a bursty loss model, and timestamps stimulus
//! markers with a presentation delay drawn from a truncated normal
//! distribution. Recordings round-trip bit-exactly through the ERPB file
//! format.
//!
//! # ERPB file format
//!
//! All integers little-endian.
//!
//! ```text
//! magic "ERPB" | version u16
//! block*: type u8 | len u32 | payload[len] | crc32 u32
//! ```
//!
//! The CRC covers type, length and payload. Block types:
//!
//! * `0` — JSON header (first block of every file; `kind` discriminates
//!   recording vs. epochs files)
//! * `1` — sample block: start index `u64`, sample count `u32`, then
//!   channel-major `f32` samples (`n_channels × count`)
//! * `2` — marker: run `u32`, trial index `u32`, icon `u8`, is-target `u8`,
//!   nominal onset `f64` (s), display onset `f64` (s)
//! * `3` — gap: start index `u64`, length `u32`
//! * `4` — epoch: run `u32`, trial index `u32`, icon `u8`, is-target `u8`,
//!   quality `u8`, onset `f64` (s), channel count `u8`, sample count `u32`,
//!   then channel-major `f64` samples
//!
//! Unknown block types after the header are skipped, so readers keep working
//! when newer writers add block types. Blocks are written in stream-time
//! order, which makes as-fast-as-possible replay identical to file order.

use crate::error::{Error, Result};
use crate::types::{
    Channel, Condition, Epoch, IconId, LabelKind, QualityFlag, SessionSpec, TrialLabel,
};
use crate::{Real, Sample, SAMPLING_RATE_HZ};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"ERPB";
pub const FORMAT_VERSION: u16 = 1;
/// Default packet size: 25 samples = 50 ms at 500 Hz.
pub const DEFAULT_PACKET_SAMPLES: usize = 25;

pub const BLOCK_HEADER: u8 = 0;
pub const BLOCK_SAMPLES: u8 = 1;
pub const BLOCK_MARKER: u8 = 2;
pub const BLOCK_GAP: u8 = 3;
pub const BLOCK_EPOCH: u8 = 4;

/// One delivered packet of consecutive samples, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamPacket {
    pub first_sample_index: u64,
    /// `[channel][sample]`, µV.
    pub samples: Vec<Vec<Sample>>,
}

impl StreamPacket {
    pub fn n_samples(&self) -> usize {
        self.samples.first().map_or(0, |c| c.len())
    }

    pub fn onset_s(&self) -> f64 {
        self.first_sample_index as f64 / SAMPLING_RATE_HZ
    }
}

/// Stimulus marker. The display onset is the nominal onset plus the drawn
/// presentation delay; the nominal onset is what the presentation software
/// logged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerEvent {
    pub run: u32,
    pub trial_index: u32,
    pub label: TrialLabel,
    pub nominal_onset_s: f64,
    pub display_onset_s: f64,
}

impl MarkerEvent {
    /// Measured presentation delay for this trial.
    pub fn delay_ms(&self) -> f64 {
        (self.display_onset_s - self.nominal_onset_s) * 1000.0
    }
}

/// A contiguous range of samples lost in transmission. Gap samples are
/// absent from the packet stream, never zero-filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapEvent {
    pub start_index: u64,
    pub length_samples: u32,
}

impl GapEvent {
    pub fn end_index(&self) -> u64 {
        self.start_index + self.length_samples as u64
    }
}

/// Presentation delay between a nominal stimulus command and the on-screen
/// display, drawn per trial from a normal distribution truncated at ±3σ.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StimulusDelayModel {
    pub mean_ms: f64,
    pub sd_ms: f64,
}

impl Default for StimulusDelayModel {
    fn default() -> Self {
        StimulusDelayModel { mean_ms: 30.0, sd_ms: 2.7 }
    }
}

impl StimulusDelayModel {
    /// Draw one delay in milliseconds.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.sd_ms == 0.0 {
            return self.mean_ms;
        }
        let normal = Normal::new(self.mean_ms, self.sd_ms).expect("finite sd");
        loop {
            let d = normal.sample(rng);
            if (d - self.mean_ms).abs() <= 3.0 * self.sd_ms {
                return d;
            }
        }
    }
}

/// Bursty packet-loss model: an independent drop starts a burst which then
/// continues per packet with `burst_continue_prob`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossModel {
    pub packet_loss_prob: f64,
    pub burst_continue_prob: f64,
}

impl LossModel {
    pub fn none() -> Self {
        LossModel { packet_loss_prob: 0.0, burst_continue_prob: 0.0 }
    }

    /// Calibrated so the gap-rejection rate of a lab session lands near the
    /// reference 4.2% of trials.
    pub fn in_lab() -> Self {
        LossModel { packet_loss_prob: 0.0025, burst_continue_prob: 0.3 }
    }

    /// Calibrated so the gap-rejection rate of a car session lands near the
    /// reference 0.81% of trials.
    pub fn in_car() -> Self {
        LossModel { packet_loss_prob: 0.00048, burst_continue_prob: 0.3 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.packet_loss_prob) {
            return Err(Error::invalid("packet_loss_prob must be in [0,1)"));
        }
        if !(0.0..1.0).contains(&self.burst_continue_prob) {
            return Err(Error::invalid("burst_continue_prob must be in [0,1)"));
        }
        Ok(())
    }
}

/// Packetize a continuous stream and apply the loss model. Returns the
/// delivered packets (in index order) and the gap events describing exactly
/// the missing index ranges.
pub fn transmit<R: Rng>(
    channels: &[Vec<Sample>],
    packet_samples: usize,
    loss: &LossModel,
    rng: &mut R,
) -> Result<(Vec<StreamPacket>, Vec<GapEvent>)> {
    loss.validate()?;
    if channels.is_empty() || packet_samples == 0 {
        return Err(Error::invalid("transmit needs ≥1 channel and packet_samples ≥ 1"));
    }
    let n = channels[0].len();
    if channels.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("all channels must have equal length"));
    }

    let mut packets = Vec::new();
    let mut gaps: Vec<GapEvent> = Vec::new();
    let mut in_burst = false;
    let mut start = 0usize;
    while start < n {
        let end = (start + packet_samples).min(n);
        let dropped = if in_burst {
            rng.gen_bool(loss.burst_continue_prob)
        } else {
            loss.packet_loss_prob > 0.0 && rng.gen_bool(loss.packet_loss_prob)
        };
        if dropped {
            let len = (end - start) as u32;
            match gaps.last_mut() {
                Some(g) if g.end_index() == start as u64 => g.length_samples += len,
                _ => gaps.push(GapEvent { start_index: start as u64, length_samples: len }),
            }
            in_burst = true;
        } else {
            packets.push(StreamPacket {
                first_sample_index: start as u64,
                samples: channels.iter().map(|c| c[start..end].to_vec()).collect(),
            });
            in_burst = false;
        }
        start = end;
    }
    Ok((packets, gaps))
}

/// Simulate the acquisition of one generated session: packetize the channel
/// data under the loss model (seeded independently of generation) and wrap
/// the result in a recording ready to be written or replayed.
pub fn record_session(
    spec: &SessionSpec,
    subject: &str,
    session_id: &str,
    channels: &[Vec<Real>],
    markers: &[MarkerEvent],
    loss: &LossModel,
    seed: u64,
) -> Result<Recording> {
    let cast: Vec<Vec<Sample>> = channels
        .iter()
        .map(|c| c.iter().map(|v| *v as Sample).collect())
        .collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (packets, gaps) = transmit(&cast, DEFAULT_PACKET_SAMPLES, loss, &mut rng)?;
    let n_samples_total = channels.first().map_or(0, |c| c.len()) as u64;
    let header = RecordingHeader {
        schema_version: spec.schema_version,
        kind: RECORDING_KIND.to_string(),
        subject: subject.to_string(),
        session_id: session_id.to_string(),
        condition: spec.condition,
        channels: [Channel::Cz, Channel::Pz, Channel::Fp1]
            .iter()
            .map(|c| format!("{c:?}"))
            .collect(),
        sampling_rate_hz: spec.sampling_rate_hz,
        seed,
        session: spec.clone(),
        packet_samples: DEFAULT_PACKET_SAMPLES as u32,
        n_samples_total,
    };
    Ok(Recording { header, packets, markers: markers.to_vec(), gaps })
}

// ---------------------------------------------------------------------------
// Recording container
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingHeader {
    pub schema_version: u32,
    /// Discriminates file contents; `"erpb.recording"` here.
    pub kind: String,
    pub subject: String,
    pub session_id: String,
    pub condition: Condition,
    pub channels: Vec<String>,
    pub sampling_rate_hz: u32,
    pub seed: u64,
    pub session: SessionSpec,
    pub packet_samples: u32,
    /// Total stream length; delivered packets and gaps partition `[0, n)`.
    pub n_samples_total: u64,
}

pub const RECORDING_KIND: &str = "erpb.recording";
pub const EPOCHS_KIND: &str = "erpb.epochs";

#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub header: RecordingHeader,
    pub packets: Vec<StreamPacket>,
    pub markers: Vec<MarkerEvent>,
    pub gaps: Vec<GapEvent>,
}

impl Recording {
    pub fn duration_s(&self) -> f64 {
        self.header.n_samples_total as f64 / self.header.sampling_rate_hz as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochsHeader {
    pub schema_version: u32,
    /// `"erpb.epochs"`.
    pub kind: String,
    pub subject: String,
    pub session_id: String,
    pub condition: Condition,
    pub channels: Vec<String>,
    pub sampling_rate_hz: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochsFile {
    pub header: EpochsHeader,
    pub epochs: Vec<Epoch>,
}

fn crc_of(ty: u8, payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&[ty]);
    h.update(&(payload.len() as u32).to_le_bytes());
    h.update(payload);
    h.finalize()
}

fn write_block<W: Write>(w: &mut W, ty: u8, payload: &[u8]) -> Result<()> {
    w.write_all(&[ty])?;
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(payload)?;
    w.write_all(&crc_of(ty, payload).to_le_bytes())?;
    Ok(())
}

fn packet_payload(p: &StreamPacket) -> Vec<u8> {
    let n = p.n_samples();
    let mut buf = Vec::with_capacity(12 + p.samples.len() * n * 4);
    buf.extend_from_slice(&p.first_sample_index.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    for ch in &p.samples {
        for s in ch {
            buf.extend_from_slice(&s.to_le_bytes());
        }
    }
    buf
}

fn marker_payload(m: &MarkerEvent) -> Vec<u8> {
    let mut buf = Vec::with_capacity(26);
    buf.extend_from_slice(&m.run.to_le_bytes());
    buf.extend_from_slice(&m.trial_index.to_le_bytes());
    buf.push(m.label.icon.0);
    buf.push(matches!(m.label.kind, LabelKind::Target) as u8);
    buf.extend_from_slice(&m.nominal_onset_s.to_le_bytes());
    buf.extend_from_slice(&m.display_onset_s.to_le_bytes());
    buf
}

fn gap_payload(g: &GapEvent) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12);
    buf.extend_from_slice(&g.start_index.to_le_bytes());
    buf.extend_from_slice(&g.length_samples.to_le_bytes());
    buf
}

fn epoch_payload(e: &Epoch) -> Vec<u8> {
    let n = e.data.first().map_or(0, |c| c.len());
    let mut buf = Vec::with_capacity(24 + e.data.len() * n * 8);
    buf.extend_from_slice(&e.run.to_le_bytes());
    buf.extend_from_slice(&e.trial_index.to_le_bytes());
    buf.push(e.label.icon.0);
    buf.push(matches!(e.label.kind, LabelKind::Target) as u8);
    buf.push(match e.quality {
        QualityFlag::Kept => 0,
        QualityFlag::RejectedGap => 1,
        QualityFlag::RejectedAmplitude => 2,
    });
    buf.extend_from_slice(&e.t0.to_le_bytes());
    buf.push(e.data.len() as u8);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    for ch in &e.data {
        for s in ch {
            buf.extend_from_slice(&s.to_le_bytes());
        }
    }
    buf
}

/// Write a recording. Sample, gap and marker blocks are interleaved in
/// stream-time order so that replay at rate ∞ equals file order.
pub fn write_recording(path: &Path, rec: &Recording) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;

    let mut header = rec.header.clone();
    header.kind = RECORDING_KIND.to_string();
    write_block(&mut w, BLOCK_HEADER, serde_json::to_string(&header)?.as_bytes())?;

    // Merge the three event lists by stream position. Rank breaks ties:
    // gaps and packets (the sample axis) before markers.
    let fs = rec.header.sampling_rate_hz as f64;
    let mut events: Vec<(f64, u8, usize)> = Vec::new();
    for (i, p) in rec.packets.iter().enumerate() {
        events.push((p.first_sample_index as f64, 0, i));
    }
    for (i, g) in rec.gaps.iter().enumerate() {
        events.push((g.start_index as f64, 1, i));
    }
    for (i, m) in rec.markers.iter().enumerate() {
        events.push((m.display_onset_s * fs, 2, i));
    }
    events.sort_by(|a, b| {
        a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });

    for (_, rank, i) in events {
        match rank {
            0 => write_block(&mut w, BLOCK_SAMPLES, &packet_payload(&rec.packets[i]))?,
            1 => write_block(&mut w, BLOCK_GAP, &gap_payload(&rec.gaps[i]))?,
            _ => write_block(&mut w, BLOCK_MARKER, &marker_payload(&rec.markers[i]))?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Write an epochs file (block type 4 per epoch).
pub fn write_epochs(path: &Path, file: &EpochsFile) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let mut header = file.header.clone();
    header.kind = EPOCHS_KIND.to_string();
    write_block(&mut w, BLOCK_HEADER, serde_json::to_string(&header)?.as_bytes())?;
    for e in &file.epochs {
        write_block(&mut w, BLOCK_EPOCH, &epoch_payload(e))?;
    }
    w.flush()?;
    Ok(())
}

/// Byte reader with offset tracking for format diagnostics.
struct BlockReader {
    data: Vec<u8>,
    pos: usize,
}

impl BlockReader {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated file: expected {n} bytes for {what}"),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

struct RawBlock {
    ty: u8,
    offset: u64,
    payload: Vec<u8>,
}

fn read_blocks(path: &Path) -> Result<Vec<RawBlock>> {
    let mut data = Vec::new();
    BufReader::new(std::fs::File::open(path)?).read_to_end(&mut data)?;
    let mut r = BlockReader { data, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, not an ERPB file"));
    }
    let version = r.u16("version")?;
    if version > FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported format version {version}")));
    }
    let mut blocks = Vec::new();
    while !r.done() {
        let offset = r.pos as u64;
        let ty = r.u8("block type")?;
        let len = r.u32("block length")? as usize;
        let payload = r.take(len, "block payload")?.to_vec();
        let crc = r.u32("block checksum")?;
        if crc != crc_of(ty, &payload) {
            return Err(Error::format(
                offset,
                format!("checksum mismatch in block type {ty}"),
            ));
        }
        blocks.push(RawBlock { ty, offset, payload });
    }
    Ok(blocks)
}

struct PayloadReader<'a> {
    payload: &'a [u8],
    pos: usize,
    block_offset: u64,
}

impl<'a> PayloadReader<'a> {
    fn new(b: &'a RawBlock) -> Self {
        PayloadReader { payload: &b.payload, pos: 0, block_offset: b.offset }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.payload.len() {
            return Err(Error::format(
                self.block_offset,
                format!("short block payload: expected {n} bytes for {what}"),
            ));
        }
        let s = &self.payload[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn parse_label(icon: u8, is_target: u8, offset: u64) -> Result<TrialLabel> {
    let icon = IconId::new(icon).map_err(|_| Error::format(offset, "icon index out of range"))?;
    Ok(TrialLabel {
        kind: if is_target != 0 { LabelKind::Target } else { LabelKind::NonTarget },
        icon,
    })
}

fn header_block<T: for<'de> Deserialize<'de>>(blocks: &[RawBlock], want_kind: &str) -> Result<T> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::format(6, "empty file: no header block"))?;
    if first.ty != BLOCK_HEADER {
        return Err(Error::format(first.offset, "first block is not a header"));
    }
    let text = std::str::from_utf8(&first.payload)
        .map_err(|_| Error::format(first.offset, "header is not UTF-8"))?;
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::format(first.offset, format!("header JSON: {e}")))?;
    match value.get("kind").and_then(|k| k.as_str()) {
        Some(k) if k == want_kind => {}
        other => {
            return Err(Error::format(
                first.offset,
                format!("expected kind {want_kind:?}, found {other:?}"),
            ))
        }
    }
    serde_json::from_value(value)
        .map_err(|e| Error::format(first.offset, format!("header fields: {e}")))
}

pub fn read_recording(path: &Path) -> Result<Recording> {
    let blocks = read_blocks(path)?;
    let header: RecordingHeader = header_block(&blocks, RECORDING_KIND)?;
    let n_channels = header.channels.len();
    let mut packets = Vec::new();
    let mut markers = Vec::new();
    let mut gaps = Vec::new();
    for b in &blocks[1..] {
        let mut r = PayloadReader::new(b);
        match b.ty {
            BLOCK_SAMPLES => {
                let first = r.u64("packet start index")?;
                let n = r.u32("packet sample count")? as usize;
                let mut samples = Vec::with_capacity(n_channels);
                for _ in 0..n_channels {
                    let mut ch = Vec::with_capacity(n);
                    for _ in 0..n {
                        ch.push(r.f32("sample")?);
                    }
                    samples.push(ch);
                }
                packets.push(StreamPacket { first_sample_index: first, samples });
            }
            BLOCK_MARKER => {
                let run = r.u32("marker run")?;
                let trial_index = r.u32("marker trial index")?;
                let icon = r.u8("marker icon")?;
                let is_target = r.u8("marker target flag")?;
                let nominal_onset_s = r.f64("marker nominal onset")?;
                let display_onset_s = r.f64("marker display onset")?;
                markers.push(MarkerEvent {
                    run,
                    trial_index,
                    label: parse_label(icon, is_target, b.offset)?,
                    nominal_onset_s,
                    display_onset_s,
                });
            }
            BLOCK_GAP => {
                let start_index = r.u64("gap start")?;
                let length_samples = r.u32("gap length")?;
                gaps.push(GapEvent { start_index, length_samples });
            }
            _ => {} // unknown or out-of-place block: skip
        }
    }
    Ok(Recording { header, packets, markers, gaps })
}

pub fn read_epochs(path: &Path) -> Result<EpochsFile> {
    let blocks = read_blocks(path)?;
    let header: EpochsHeader = header_block(&blocks, EPOCHS_KIND)?;
    let mut epochs = Vec::new();
    for b in &blocks[1..] {
        if b.ty != BLOCK_EPOCH {
            continue;
        }
        let mut r = PayloadReader::new(b);
        let run = r.u32("epoch run")?;
        let trial_index = r.u32("epoch trial index")?;
        let icon = r.u8("epoch icon")?;
        let is_target = r.u8("epoch target flag")?;
        let quality = match r.u8("epoch quality")? {
            0 => QualityFlag::Kept,
            1 => QualityFlag::RejectedGap,
            2 => QualityFlag::RejectedAmplitude,
            q => return Err(Error::format(b.offset, format!("unknown quality flag {q}"))),
        };
        let t0 = r.f64("epoch onset")?;
        let n_channels = r.u8("epoch channel count")? as usize;
        let n = r.u32("epoch sample count")? as usize;
        let mut data = Vec::with_capacity(n_channels);
        for _ in 0..n_channels {
            let mut ch = Vec::with_capacity(n);
            for _ in 0..n {
                ch.push(r.f64("epoch sample")?);
            }
            data.push(ch);
        }
        epochs.push(Epoch {
            subject: header.subject.clone(),
            session: header.session_id.clone(),
            run,
            trial_index,
            label: parse_label(icon, is_target, b.offset)?,
            t0,
            data,
            quality,
        });
    }
    Ok(EpochsFile { header, epochs })
}

/// Dump delivered samples and markers as CSV for external inspection.
pub fn export_csv<W1: Write, W2: Write>(
    rec: &Recording,
    samples_out: &mut W1,
    markers_out: &mut W2,
) -> Result<()> {
    write!(samples_out, "sample_index,time_s")?;
    for ch in &rec.header.channels {
        write!(samples_out, ",{ch}_uv")?;
    }
    writeln!(samples_out)?;
    let fs = rec.header.sampling_rate_hz as f64;
    for p in &rec.packets {
        for i in 0..p.n_samples() {
            let idx = p.first_sample_index + i as u64;
            write!(samples_out, "{idx},{:.6}", idx as f64 / fs)?;
            for ch in &p.samples {
                write!(samples_out, ",{:.4}", ch[i])?;
            }
            writeln!(samples_out)?;
        }
    }
    writeln!(markers_out, "run,trial_index,icon,is_target,nominal_onset_s,display_onset_s")?;
    for m in &rec.markers {
        writeln!(
            markers_out,
            "{},{},{},{},{:.6},{:.6}",
            m.run,
            m.trial_index,
            m.label.icon.0,
            m.label.is_target() as u8,
            m.nominal_onset_s,
            m.display_onset_s
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reconstruction
// ---------------------------------------------------------------------------

/// Continuous stream rebuilt from delivered packets, with gap interiors
/// linearly interpolated between the flanking delivered samples. Gaps stay
/// listed so rejection can still see them.
#[derive(Clone, Debug)]
pub struct ReconstructedStream {
    pub n_samples: usize,
    /// `[channel][sample]`, f64 µV.
    pub channels: Vec<Vec<Real>>,
    pub gaps: Vec<GapEvent>,
}

/// Rebuild the continuous stream. Validates that packets and gaps exactly
/// partition `[0, n_samples_total)`.
pub fn reconstruct(rec: &Recording) -> Result<ReconstructedStream> {
    let n = rec.header.n_samples_total as usize;
    let n_channels = rec.header.channels.len();
    let mut channels = vec![vec![0.0f64; n]; n_channels];
    let mut covered = vec![false; n];

    let mut mark = |start: usize, len: usize, offset_desc: &str| -> Result<()> {
        if start + len > n {
            return Err(Error::format(0, format!("{offset_desc} outside stream range")));
        }
        for c in &mut covered[start..start + len] {
            if *c {
                return Err(Error::format(0, format!("{offset_desc} overlaps another range")));
            }
            *c = true;
        }
        Ok(())
    };

    for p in &rec.packets {
        let start = p.first_sample_index as usize;
        let len = p.n_samples();
        mark(start, len, "packet")?;
        for (c, ch) in p.samples.iter().enumerate() {
            for (i, &v) in ch.iter().enumerate() {
                channels[c][start + i] = v as f64;
            }
        }
    }
    let mut sorted_gaps = rec.gaps.clone();
    sorted_gaps.sort_by_key(|g| g.start_index);
    for g in &sorted_gaps {
        mark(g.start_index as usize, g.length_samples as usize, "gap")?;
    }
    if let Some(missing) = covered.iter().position(|c| !c) {
        return Err(Error::format(
            0,
            format!("sample index {missing} neither delivered nor declared as gap"),
        ));
    }

    for g in &sorted_gaps {
        let start = g.start_index as usize;
        let len = g.length_samples as usize;
        for ch in channels.iter_mut() {
            let left = if start > 0 { Some(ch[start - 1]) } else { None };
            let right = if start + len < n { Some(ch[start + len]) } else { None };
            let (a, b) = match (left, right) {
                (Some(a), Some(b)) => (a, b),
                (Some(a), None) => (a, a),
                (None, Some(b)) => (b, b),
                (None, None) => (0.0, 0.0),
            };
            for i in 0..len {
                let t = (i + 1) as f64 / (len + 1) as f64;
                ch[start + i] = a + (b - a) * t;
            }
        }
    }
    Ok(ReconstructedStream { n_samples: n, channels, gaps: sorted_gaps })
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

/// One event of a replayed recording, in stream-time order.
#[derive(Clone, Debug, PartialEq)]
pub enum FeedEvent {
    Packet(StreamPacket),
    Gap(GapEvent),
    Marker(MarkerEvent),
}

impl FeedEvent {
    /// Stream time of the event in seconds.
    pub fn time_s(&self) -> f64 {
        match self {
            FeedEvent::Packet(p) => p.onset_s(),
            FeedEvent::Gap(g) => g.start_index as f64 / SAMPLING_RATE_HZ,
            FeedEvent::Marker(m) => m.display_onset_s,
        }
    }
}

/// Iterator over a recording's events in time order, optionally paced to a
/// multiple of real time.
pub struct Replayer {
    events: std::vec::IntoIter<FeedEvent>,
    rate_multiplier: f64,
    started: std::time::Instant,
}

/// Replay a recording. `rate_multiplier` scales stream time to wall time;
/// `f64::INFINITY` yields events as fast as possible.
pub fn replay(rec: &Recording, rate_multiplier: f64) -> Result<Replayer> {
    if !(rate_multiplier > 0.0) {
        return Err(Error::invalid("rate_multiplier must be > 0"));
    }
    let fs = rec.header.sampling_rate_hz as f64;
    let mut keyed: Vec<(f64, u8, usize, FeedEvent)> = Vec::new();
    for (i, p) in rec.packets.iter().enumerate() {
        keyed.push((p.first_sample_index as f64, 0, i, FeedEvent::Packet(p.clone())));
    }
    for (i, g) in rec.gaps.iter().enumerate() {
        keyed.push((g.start_index as f64, 1, i, FeedEvent::Gap(*g)));
    }
    for (i, m) in rec.markers.iter().enumerate() {
        keyed.push((m.display_onset_s * fs, 2, i, FeedEvent::Marker(*m)));
    }
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let events: Vec<FeedEvent> = keyed.into_iter().map(|(_, _, _, e)| e).collect();
    Ok(Replayer {
        events: events.into_iter(),
        rate_multiplier,
        started: std::time::Instant::now(),
    })
}

impl Iterator for Replayer {
    type Item = FeedEvent;

    fn next(&mut self) -> Option<FeedEvent> {
        let event = self.events.next()?;
        if self.rate_multiplier.is_finite() {
            let due = std::time::Duration::from_secs_f64(
                event.time_s().max(0.0) / self.rate_multiplier,
            );
            let elapsed = self.started.elapsed();
            if due > elapsed {
                std::thread::sleep(due - elapsed);
            }
        }
        Some(event)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_header(n_samples: u64) -> RecordingHeader {
        RecordingHeader {
            schema_version: 1,
            kind: RECORDING_KIND.to_string(),
            subject: "s001".into(),
            session_id: "ses-lab-01".into(),
            condition: Condition::InLab,
            channels: vec!["Cz".into(), "Pz".into(), "Fp1".into()],
            sampling_rate_hz: 500,
            seed: 42,
            session: SessionSpec::in_lab(42),
            packet_samples: DEFAULT_PACKET_SAMPLES as u32,
            n_samples_total: n_samples,
        }
    }

    fn ramp_channels(n: usize) -> Vec<Vec<Sample>> {
        (0..3)
            .map(|c| (0..n).map(|i| (i as f32) + 1000.0 * c as f32).collect())
            .collect()
    }

    fn small_recording(seed: u64, loss: LossModel) -> Recording {
        let n = 1000;
        let channels = ramp_channels(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (packets, gaps) =
            transmit(&channels, DEFAULT_PACKET_SAMPLES, &loss, &mut rng).unwrap();
        let markers = vec![
            MarkerEvent {
                run: 0,
                trial_index: 0,
                label: TrialLabel { kind: LabelKind::Target, icon: IconId(2) },
                nominal_onset_s: 0.4,
                display_onset_s: 0.4302,
            },
            MarkerEvent {
                run: 0,
                trial_index: 1,
                label: TrialLabel { kind: LabelKind::NonTarget, icon: IconId(5) },
                nominal_onset_s: 1.2,
                display_onset_s: 1.2287,
            },
        ];
        Recording { header: test_header(n as u64), packets, markers, gaps }
    }

    #[test]
    fn delay_distribution_matches_model() {
        let model = StimulusDelayModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws: Vec<f64> = (0..10_000).map(|_| model.draw(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let sd = (draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / (draws.len() - 1) as f64)
            .sqrt();
        assert!((29.5..=30.5).contains(&mean), "mean {mean}");
        assert!((2.4..=3.0).contains(&sd), "sd {sd}");
        assert!(draws.iter().all(|d| (d - 30.0).abs() <= 3.0 * 2.7 + 1e-9));
    }

    #[test]
    fn transmit_without_loss_delivers_everything() {
        let channels = ramp_channels(260);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (packets, gaps) =
            transmit(&channels, DEFAULT_PACKET_SAMPLES, &LossModel::none(), &mut rng).unwrap();
        assert!(gaps.is_empty());
        let total: usize = packets.iter().map(|p| p.n_samples()).sum();
        assert_eq!(total, 260);
        // last packet is the 10-sample remainder
        assert_eq!(packets.last().unwrap().n_samples(), 10);
    }

    #[test]
    fn delivered_and_gaps_partition_the_range() {
        for seed in 0..20 {
            let channels = ramp_channels(2000);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let loss = LossModel { packet_loss_prob: 0.2, burst_continue_prob: 0.5 };
            let (packets, gaps) =
                transmit(&channels, DEFAULT_PACKET_SAMPLES, &loss, &mut rng).unwrap();
            let mut covered = vec![0u8; 2000];
            for p in &packets {
                for i in 0..p.n_samples() {
                    covered[p.first_sample_index as usize + i] += 1;
                }
            }
            for g in &gaps {
                for i in g.start_index..g.end_index() {
                    covered[i as usize] += 1;
                }
            }
            assert!(covered.iter().all(|&c| c == 1), "seed {seed}");
        }
    }

    #[test]
    fn recording_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ses.erpb");
        let rec = small_recording(3, LossModel { packet_loss_prob: 0.05, burst_continue_prob: 0.3 });
        write_recording(&path, &rec).unwrap();
        let back = read_recording(&path).unwrap();
        assert_eq!(rec, back);

        // identical bytes across rewrites
        let path2 = dir.path().join("ses2.erpb");
        write_recording(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_block_is_reported_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ses.erpb");
        write_recording(&path, &small_recording(4, LossModel::none())).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_recording(&path).unwrap_err();
        match err {
            Error::Format { offset, detail } => {
                assert!(offset > 0);
                assert!(detail.contains("checksum") || detail.contains("truncated"), "{detail}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ses.erpb");
        write_recording(&path, &small_recording(5, LossModel::none())).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(read_recording(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn unknown_block_types_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ses.erpb");
        let rec = small_recording(6, LossModel::none());
        write_recording(&path, &rec).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let payload = b"future data";
        bytes.push(9);
        bytes.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        bytes.extend_from_slice(payload);
        bytes.extend_from_slice(&crc_of(9, payload).to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let back = read_recording(&path).unwrap();
        assert_eq!(rec, back);
    }

    #[test]
    fn empty_session_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ses.erpb");
        let rec = Recording {
            header: test_header(0),
            packets: vec![],
            markers: vec![],
            gaps: vec![],
        };
        write_recording(&path, &rec).unwrap();
        let back = read_recording(&path).unwrap();
        assert_eq!(back.markers.len(), 0);
        assert_eq!(back.packets.len(), 0);
    }

    #[test]
    fn epochs_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("epochs.erpb");
        let header = EpochsHeader {
            schema_version: 1,
            kind: EPOCHS_KIND.to_string(),
            subject: "s001".into(),
            session_id: "ses-lab-01".into(),
            condition: Condition::InLab,
            channels: vec!["Cz".into(), "Pz".into(), "Fp1".into()],
            sampling_rate_hz: 500,
        };
        let epochs: Vec<Epoch> = (0..3)
            .map(|i| Epoch {
                subject: "s001".into(),
                session: "ses-lab-01".into(),
                run: 1,
                trial_index: i,
                label: TrialLabel {
                    kind: if i == 0 { LabelKind::Target } else { LabelKind::NonTarget },
                    icon: IconId((i % 6) as u8),
                },
                t0: 1.5 + i as f64,
                data: (0..3)
                    .map(|c| (0..400).map(|s| (c * 400 + s) as f64 * 0.25 - i as f64).collect())
                    .collect(),
                quality: QualityFlag::Kept,
            })
            .collect();
        let file = EpochsFile { header, epochs };
        write_epochs(&path, &file).unwrap();
        let back = read_epochs(&path).unwrap();
        assert_eq!(file, back);
    }

    #[test]
    fn reconstruct_interpolates_ramp_exactly() {
        // drop a packet in the middle of a linear ramp; interpolation must
        // restore the ramp exactly
        let n = 200;
        let channels = ramp_channels(n);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut packets, _) =
            transmit(&channels, DEFAULT_PACKET_SAMPLES, &LossModel::none(), &mut rng).unwrap();
        let dropped = packets.remove(3); // samples 75..100
        let gaps = vec![GapEvent {
            start_index: dropped.first_sample_index,
            length_samples: dropped.n_samples() as u32,
        }];
        let rec = Recording { header: test_header(n as u64), packets, markers: vec![], gaps };
        let rebuilt = reconstruct(&rec).unwrap();
        for c in 0..3 {
            for i in 0..n {
                let expected = i as f64 + 1000.0 * c as f64;
                assert!(
                    (rebuilt.channels[c][i] - expected).abs() < 1e-9,
                    "channel {c} sample {i}"
                );
            }
        }
        assert_eq!(rebuilt.gaps.len(), 1);
    }

    #[test]
    fn reconstruct_rejects_uncovered_ranges() {
        let mut rec = small_recording(8, LossModel::none());
        rec.packets.remove(2); // deliver neither packet nor gap for that range
        assert!(matches!(reconstruct(&rec), Err(Error::Format { .. })));
    }

    #[test]
    fn replay_fast_matches_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ses.erpb");
        let rec = small_recording(9, LossModel { packet_loss_prob: 0.1, burst_continue_prob: 0.2 });
        write_recording(&path, &rec).unwrap();
        let back = read_recording(&path).unwrap();
        let feed: Vec<FeedEvent> = replay(&back, f64::INFINITY).unwrap().collect();
        assert_eq!(feed.len(), back.packets.len() + back.markers.len() + back.gaps.len());
        for pair in feed.windows(2) {
            assert!(pair[0].time_s() <= pair[1].time_s() + 1e-9);
        }
        // file order: re-read raw blocks and compare the event sequence
        let blocks = read_blocks(&path).unwrap();
        let file_types: Vec<u8> = blocks[1..].iter().map(|b| b.ty).collect();
        let feed_types: Vec<u8> = feed
            .iter()
            .map(|e| match e {
                FeedEvent::Packet(_) => BLOCK_SAMPLES,
                FeedEvent::Gap(_) => BLOCK_GAP,
                FeedEvent::Marker(_) => BLOCK_MARKER,
            })
            .collect();
        assert_eq!(file_types, feed_types);
    }

    #[test]
    fn replay_at_unit_rate_takes_stream_time() {
        let n = 200; // 0.4 s at 500 Hz
        let channels = ramp_channels(n);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (packets, gaps) =
            transmit(&channels, DEFAULT_PACKET_SAMPLES, &LossModel::none(), &mut rng).unwrap();
        let rec = Recording { header: test_header(n as u64), packets, markers: vec![], gaps };
        let started = std::time::Instant::now();
        let feed: Vec<FeedEvent> = replay(&rec, 1.0).unwrap().collect();
        let elapsed = started.elapsed().as_secs_f64();
        // last event fires at 0.35 s (final packet onset)
        assert_eq!(feed.len(), 8);
        assert!((0.33..0.6).contains(&elapsed), "elapsed {elapsed}");
    }

    #[test]
    fn replay_rejects_bad_rate() {
        let rec = small_recording(10, LossModel::none());
        assert!(replay(&rec, 0.0).is_err());
        assert!(replay(&rec, -1.0).is_err());
    }
}
