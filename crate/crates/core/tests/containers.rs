//! Cross-module integrity of the recording and epochs containers: what the
//! acquisition chain writes must read back bit-identically, and the
//! reconstruction/replay views must agree with the packet inventory.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use erp_core::preprocess::{preprocess_recording, PreprocessOptions};
use erp_core::stream::{
    read_epochs, read_recording, record_session, reconstruct, replay, write_epochs,
    write_recording, EpochsFile, EpochsHeader, FeedEvent, LossModel, EPOCHS_KIND,
};
use erp_core::synth::{default_roster, generate_session, GenerationOptions};
use erp_core::types::SessionSpec;

fn lossy_recording(seed: u64) -> erp_core::stream::Recording {
    let spec = SessionSpec::in_car(4, seed);
    let subject = &default_roster()[2];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (channels, markers) =
        generate_session(&spec, subject, &GenerationOptions::default(), &mut rng).unwrap();
    record_session(&spec, &subject.subject_id, "car-01", &channels, &markers, &LossModel::in_car(), seed ^ 1)
        .unwrap()
}

#[test]
fn recording_file_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let rec = lossy_recording(11);
    assert!(!rec.gaps.is_empty(), "car loss model should drop packets");

    let first = dir.path().join("a.erpb");
    let second = dir.path().join("b.erpb");
    write_recording(&first, &rec).unwrap();
    let back = read_recording(&first).unwrap();
    assert_eq!(back, rec);

    // Writing the decoded copy must reproduce the file byte for byte.
    write_recording(&second, &back).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn epochs_file_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let rec = lossy_recording(12);
    let outcome = preprocess_recording(&rec, &PreprocessOptions::default()).unwrap();
    assert!(!outcome.epochs.is_empty());

    let file = EpochsFile {
        header: EpochsHeader {
            schema_version: rec.header.schema_version,
            kind: EPOCHS_KIND.to_string(),
            subject: rec.header.subject.clone(),
            session_id: rec.header.session_id.clone(),
            condition: rec.header.condition,
            channels: rec.header.channels.clone(),
            sampling_rate_hz: rec.header.sampling_rate_hz,
        },
        epochs: outcome.epochs,
    };
    let first = dir.path().join("a.epochs.erpb");
    let second = dir.path().join("b.epochs.erpb");
    write_epochs(&first, &file).unwrap();
    let back = read_epochs(&first).unwrap();
    assert_eq!(back, file);
    write_epochs(&second, &back).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn packets_and_gaps_partition_the_stream() {
    let rec = lossy_recording(13);
    let delivered: u64 = rec.packets.iter().map(|p| p.n_samples() as u64).sum();
    let lost: u64 = rec.gaps.iter().map(|g| u64::from(g.length_samples)).sum();
    assert_eq!(delivered + lost, rec.header.n_samples_total);

    let stream = reconstruct(&rec).unwrap();
    assert_eq!(stream.n_samples, rec.header.n_samples_total as usize);
    assert_eq!(stream.channels.len(), rec.header.channels.len());
    // Every delivered sample lands at its original index (reconstruction
    // widens the wire format to f64).
    for p in &rec.packets {
        let at = p.first_sample_index as usize;
        for (ch, payload) in p.samples.iter().enumerate() {
            for (k, v) in payload.iter().enumerate() {
                assert_eq!(stream.channels[ch][at + k], f64::from(*v));
            }
        }
    }
    assert_eq!(stream.gaps, rec.gaps);
}

#[test]
fn replay_emits_every_packet_and_marker_in_time_order() {
    let rec = lossy_recording(14);
    let mut n_packets = 0;
    let mut n_gaps = 0;
    let mut n_markers = 0;
    let mut last_t = f64::NEG_INFINITY;
    for event in replay(&rec, f64::INFINITY).unwrap() {
        let t = event.time_s();
        assert!(t >= last_t, "events must be non-decreasing in time");
        last_t = t;
        match event {
            FeedEvent::Packet(_) => n_packets += 1,
            FeedEvent::Gap(_) => n_gaps += 1,
            FeedEvent::Marker(_) => n_markers += 1,
        }
    }
    assert_eq!(n_packets, rec.packets.len());
    assert_eq!(n_gaps, rec.gaps.len());
    assert_eq!(n_markers, rec.markers.len());
}
