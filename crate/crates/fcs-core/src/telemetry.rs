//! Wire framing for the sensor link plus the smoothing/differentiation pass
//! used on decoded channel streams.
//!
//! Frames are fixed-size and little-endian throughout:
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic "FCS1"               |
//! | 4      | 2    | sequence number            |
//! | 6      | 4    | timestamp, ms              |
//! | 10     | 16   | 8 channel counts, u16 each |
//! | 26     | 2    | checksum                   |
//!
//! The checksum is the plain byte sum of offsets 0..26 mod 65536. Counts are
//! 10-bit (0..=1023); anything larger marks the frame corrupt.

use serde::{Deserialize, Serialize};

use crate::sensor::{SensorReading, RAIL_V};

pub const MAGIC: [u8; 4] = *b"FCS1";
pub const FRAME_LEN: usize = 28;
pub const FRAME_CHANNELS: usize = 8;
/// Highest valid channel count on the wire (10-bit link ADC).
pub const COUNT_MAX: u16 = 1023;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TelemetryError {
    #[error("frame needs {FRAME_LEN} bytes, got {0}")]
    ShortFrame(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("checksum mismatch: stored {stored:#06x}, computed {computed:#06x}")]
    ChecksumMismatch { stored: u16, computed: u16 },
    #[error("channel {channel} count {count} exceeds {COUNT_MAX}")]
    CountOutOfRange { channel: usize, count: u16 },
    #[error("smoothing window must be odd and nonzero, got {0}")]
    BadWindow(usize),
    #[error("timestamps and values differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("timestamps must be strictly increasing")]
    NonMonotonicTimestamps,
    #[error("bad trace shape: {0}")]
    TraceShape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub seq: u16,
    pub timestamp_ms: u32,
    pub counts: [u16; FRAME_CHANNELS],
}

pub fn counts_to_volts(count: u16) -> f64 {
    count as f64 * RAIL_V / COUNT_MAX as f64
}

pub fn volts_to_counts(volts: f64) -> u16 {
    (volts.clamp(0.0, RAIL_V) / RAIL_V * COUNT_MAX as f64).round() as u16
}

fn checksum(bytes: &[u8]) -> u16 {
    bytes.iter().map(|b| *b as u32).sum::<u32>() as u16
}

pub fn encode_frame(frame: &TelemetryFrame) -> [u8; FRAME_LEN] {
    let mut out = [0u8; FRAME_LEN];
    out[0..4].copy_from_slice(&MAGIC);
    out[4..6].copy_from_slice(&frame.seq.to_le_bytes());
    out[6..10].copy_from_slice(&frame.timestamp_ms.to_le_bytes());
    for (i, count) in frame.counts.iter().enumerate() {
        let at = 10 + 2 * i;
        out[at..at + 2].copy_from_slice(&count.to_le_bytes());
    }
    let sum = checksum(&out[..26]);
    out[26..28].copy_from_slice(&sum.to_le_bytes());
    out
}

pub fn decode_frame(bytes: &[u8]) -> Result<TelemetryFrame, TelemetryError> {
    if bytes.len() < FRAME_LEN {
        return Err(TelemetryError::ShortFrame(bytes.len()));
    }
    let bytes = &bytes[..FRAME_LEN];
    if bytes[0..4] != MAGIC {
        let mut got = [0u8; 4];
        got.copy_from_slice(&bytes[0..4]);
        return Err(TelemetryError::BadMagic(got));
    }
    let stored = u16::from_le_bytes([bytes[26], bytes[27]]);
    let computed = checksum(&bytes[..26]);
    if stored != computed {
        return Err(TelemetryError::ChecksumMismatch { stored, computed });
    }
    let seq = u16::from_le_bytes([bytes[4], bytes[5]]);
    let timestamp_ms = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]);
    let mut counts = [0u16; FRAME_CHANNELS];
    for (i, count) in counts.iter_mut().enumerate() {
        let at = 10 + 2 * i;
        *count = u16::from_le_bytes([bytes[at], bytes[at + 1]]);
        if *count > COUNT_MAX {
            return Err(TelemetryError::CountOutOfRange {
                channel: i,
                count: *count,
            });
        }
    }
    Ok(TelemetryFrame {
        seq,
        timestamp_ms,
        counts,
    })
}

/// Running counters for one decoded stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamStats {
    pub frames_decoded: u64,
    /// Bytes that never became part of a valid frame.
    pub skipped_bytes: u64,
    /// Frames lost between consecutive sequence numbers, wrap-aware.
    pub missed_frames: u64,
    /// Candidates with intact magic that failed checksum or range checks.
    pub corrupt_frames: u64,
}

/// Incremental frame extractor. Feed it arbitrary byte chunks; it yields every
/// decodable frame exactly once no matter how the stream is sliced, holding
/// partial tails across calls and resynchronizing on the magic after garbage.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    stats: StreamStats,
    last_seq: Option<u16>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> StreamStats {
        self.stats
    }

    /// Bytes currently held waiting for the rest of a frame.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }

    pub fn push_bytes(&mut self, bytes: &[u8]) -> Vec<TelemetryFrame> {
        self.buf.extend_from_slice(bytes);
        let mut out = Vec::new();
        loop {
            // A candidate is any position whose available bytes match a
            // prefix of the magic. A trailing "FC" must be held, not skipped,
            // or chunk boundaries would change what gets decoded.
            let candidate = (0..self.buf.len()).find(|&i| {
                let avail = (self.buf.len() - i).min(MAGIC.len());
                self.buf[i..i + avail] == MAGIC[..avail]
            });
            let Some(at) = candidate else {
                self.stats.skipped_bytes += self.buf.len() as u64;
                self.buf.clear();
                break;
            };
            if at > 0 {
                self.stats.skipped_bytes += at as u64;
                self.buf.drain(..at);
            }
            if self.buf.len() < FRAME_LEN {
                break;
            }
            match decode_frame(&self.buf[..FRAME_LEN]) {
                Ok(frame) => {
                    if let Some(last) = self.last_seq {
                        self.stats.missed_frames +=
                            frame.seq.wrapping_sub(last.wrapping_add(1)) as u64;
                    }
                    self.last_seq = Some(frame.seq);
                    self.stats.frames_decoded += 1;
                    self.buf.drain(..FRAME_LEN);
                    out.push(frame);
                }
                Err(_) => {
                    // Full magic but bad body: advance one byte and rescan so
                    // a frame that starts inside the damaged span still gets
                    // found.
                    self.stats.corrupt_frames += 1;
                    self.stats.skipped_bytes += 1;
                    self.buf.drain(..1);
                }
            }
        }
        out
    }
}

/// Assemble frames from per-channel traces taken at a common rate. Traces
/// must agree in length and timestamps; sequence numbers start at zero and
/// wrap with u16.
pub fn frames_from_traces(
    traces: &[Vec<SensorReading>],
) -> Result<Vec<TelemetryFrame>, TelemetryError> {
    if traces.len() != FRAME_CHANNELS {
        return Err(TelemetryError::TraceShape(format!(
            "need {} channel traces, got {}",
            FRAME_CHANNELS,
            traces.len()
        )));
    }
    let n = traces[0].len();
    if traces.iter().any(|t| t.len() != n) {
        return Err(TelemetryError::TraceShape("trace lengths differ".into()));
    }
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let t0 = traces[0][i].timestamp_ms;
        let mut counts = [0u16; FRAME_CHANNELS];
        for (ch, trace) in traces.iter().enumerate() {
            if (trace[i].timestamp_ms - t0).abs() > 0.5 {
                return Err(TelemetryError::TraceShape(format!(
                    "channel {ch} timestamp {} disagrees with {}",
                    trace[i].timestamp_ms, t0
                )));
            }
            counts[ch] = volts_to_counts(trace[i].voltage);
        }
        frames.push(TelemetryFrame {
            seq: (i % (u16::MAX as usize + 1)) as u16,
            timestamp_ms: t0.round() as u32,
            counts,
        });
    }
    Ok(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilteredSample {
    pub timestamp_ms: f64,
    pub filtered: f64,
    /// Time derivative of the filtered signal, units per second.
    pub derivative_per_s: f64,
}

/// Centered moving average (odd window, shrinking symmetrically near the
/// ends so it stays centered) followed by a finite-difference derivative:
/// central where both neighbors exist, one-sided at the ends. Keeping the
/// window centered means a linear signal passes through unchanged
/// everywhere, ends included.
pub fn filter_and_differentiate(
    timestamps_ms: &[f64],
    values: &[f64],
    window: usize,
) -> Result<Vec<FilteredSample>, TelemetryError> {
    if window == 0 || window % 2 == 0 {
        return Err(TelemetryError::BadWindow(window));
    }
    if timestamps_ms.len() != values.len() {
        return Err(TelemetryError::LengthMismatch(
            timestamps_ms.len(),
            values.len(),
        ));
    }
    if timestamps_ms.windows(2).any(|w| w[1] <= w[0]) {
        return Err(TelemetryError::NonMonotonicTimestamps);
    }
    let n = values.len();
    let half = window / 2;
    let filtered: Vec<f64> = (0..n)
        .map(|i| {
            let m = half.min(i).min(n - 1 - i);
            values[i - m..=i + m].iter().sum::<f64>() / (2 * m + 1) as f64
        })
        .collect();
    let out = (0..n)
        .map(|i| {
            let (j, k) = match i {
                0 => (0, 1.min(n - 1)),
                i if i == n - 1 => (n.saturating_sub(2), n - 1),
                i => (i - 1, i + 1),
            };
            let derivative_per_s = if k == j {
                0.0
            } else {
                (filtered[k] - filtered[j]) / ((timestamps_ms[k] - timestamps_ms[j]) / 1000.0)
            };
            FilteredSample {
                timestamp_ms: timestamps_ms[i],
                filtered: filtered[i],
                derivative_per_s,
            }
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_frame_encodes_to_frozen_bytes() {
        let frame = TelemetryFrame {
            seq: 0,
            timestamp_ms: 0,
            counts: [0; 8],
        };
        let bytes = encode_frame(&frame);
        let mut expected = [0u8; FRAME_LEN];
        expected[0..4].copy_from_slice(b"FCS1");
        // 0x46 + 0x43 + 0x53 + 0x31 = 269 = 0x010d, little-endian.
        expected[26] = 0x0d;
        expected[27] = 0x01;
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_preserves_fields() {
        let frame = TelemetryFrame {
            seq: 513,
            timestamp_ms: 123_456,
            counts: [0, 1, 511, 512, 1000, 1023, 7, 99],
        };
        assert_eq!(decode_frame(&encode_frame(&frame)).unwrap(), frame);
    }

    #[test]
    fn decode_rejects_short_input() {
        assert_eq!(
            decode_frame(&[0u8; 10]),
            Err(TelemetryError::ShortFrame(10))
        );
    }

    #[test]
    fn decode_rejects_bad_magic() {
        let mut bytes = encode_frame(&TelemetryFrame {
            seq: 0,
            timestamp_ms: 0,
            counts: [0; 8],
        });
        bytes[0] = b'X';
        assert!(matches!(
            decode_frame(&bytes),
            Err(TelemetryError::BadMagic(_))
        ));
    }

    #[test]
    fn decode_rejects_bad_checksum() {
        let mut bytes = encode_frame(&TelemetryFrame {
            seq: 0,
            timestamp_ms: 0,
            counts: [0; 8],
        });
        bytes[12] ^= 0x01;
        assert!(matches!(
            decode_frame(&bytes),
            Err(TelemetryError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn decode_rejects_count_over_ceiling() {
        let mut frame = TelemetryFrame {
            seq: 0,
            timestamp_ms: 0,
            counts: [0; 8],
        };
        frame.counts[3] = 1024;
        let mut bytes = [0u8; FRAME_LEN];
        bytes[0..4].copy_from_slice(&MAGIC);
        bytes[4..6].copy_from_slice(&frame.seq.to_le_bytes());
        bytes[6..10].copy_from_slice(&frame.timestamp_ms.to_le_bytes());
        for (i, c) in frame.counts.iter().enumerate() {
            bytes[10 + 2 * i..12 + 2 * i].copy_from_slice(&c.to_le_bytes());
        }
        let sum: u32 = bytes[..26].iter().map(|b| *b as u32).sum();
        bytes[26..28].copy_from_slice(&(sum as u16).to_le_bytes());
        assert_eq!(
            decode_frame(&bytes),
            Err(TelemetryError::CountOutOfRange {
                channel: 3,
                count: 1024
            })
        );
    }

    #[test]
    fn counts_volts_conversions() {
        assert_eq!(counts_to_volts(0), 0.0);
        assert_eq!(counts_to_volts(1023), 5.0);
        assert!((counts_to_volts(512) - 512.0 * 5.0 / 1023.0).abs() < 1e-15);
        assert_eq!(volts_to_counts(0.0), 0);
        assert_eq!(volts_to_counts(5.0), 1023);
        assert_eq!(volts_to_counts(6.0), 1023);
        assert_eq!(volts_to_counts(-1.0), 0);
        // Quantized voltages map back to their own code.
        for code in [0u16, 1, 511, 1022, 1023] {
            assert_eq!(volts_to_counts(counts_to_volts(code)), code);
        }
    }

    fn some_frames(n: usize, seed: u64) -> Vec<TelemetryFrame> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut counts = [0u16; 8];
                for c in counts.iter_mut() {
                    *c = rng.gen_range(0..=COUNT_MAX);
                }
                TelemetryFrame {
                    seq: (i % 65536) as u16,
                    timestamp_ms: (i * 10) as u32,
                    counts,
                }
            })
            .collect()
    }

    fn stream_of(frames: &[TelemetryFrame]) -> Vec<u8> {
        frames.iter().flat_map(|f| encode_frame(f)).collect()
    }

    #[test]
    fn decoder_handles_clean_stream_in_one_push()  {
        let frames = some_frames(40, 1);
        let mut dec = FrameDecoder::new();
        let got = dec.push_bytes(&stream_of(&frames));
        assert_eq!(got, frames);
        let stats = dec.stats();
        assert_eq!(stats.frames_decoded, 40);
        assert_eq!(stats.skipped_bytes, 0);
        assert_eq!(stats.missed_frames, 0);
        assert_eq!(stats.corrupt_frames, 0);
    }

    #[test]
    fn decoder_is_chunking_invariant() {
        let frames = some_frames(25, 2);
        let stream = stream_of(&frames);
        for chunk in [1usize, 3, 7, 27, 28, 29, 100] {
            let mut dec = FrameDecoder::new();
            let mut got = Vec::new();
            for piece in stream.chunks(chunk) {
                got.extend(dec.push_bytes(piece));
            }
            assert_eq!(got, frames, "chunk size {chunk}");
            assert_eq!(dec.stats().skipped_bytes, 0);
            assert_eq!(dec.pending(), 0);
        }
    }

    #[test]
    fn decoder_skips_leading_garbage() {
        let frames = some_frames(3, 3);
        let mut stream = vec![0xAAu8, 0x55, b'F', b'C', 0x00, 0x99];
        let garbage = stream.len() as u64;
        stream.extend(stream_of(&frames));
        let mut dec = FrameDecoder::new();
        let got = dec.push_bytes(&stream);
        assert_eq!(got, frames);
        assert_eq!(dec.stats().skipped_bytes, garbage);
    }

    #[test]
    fn decoder_survives_mid_stream_corruption() {
        let frames = some_frames(5, 4);
        let mut stream = stream_of(&frames);
        // Flip a payload byte inside frame 2.
        stream[2 * FRAME_LEN + 15] ^= 0xFF;
        let mut dec = FrameDecoder::new();
        let got = dec.push_bytes(&stream);
        assert_eq!(got.len(), 4);
        assert_eq!(got[0], frames[0]);
        assert_eq!(got[1], frames[1]);
        assert_eq!(got[2], frames[3]);
        assert_eq!(got[3], frames[4]);
        let stats = dec.stats();
        assert_eq!(stats.missed_frames, 1, "seq gap from the lost frame");
        assert_eq!(stats.skipped_bytes, FRAME_LEN as u64);
        assert!(stats.corrupt_frames >= 1);
    }

    #[test]
    fn decoder_holds_partial_tail() {
        let frames = some_frames(2, 5);
        let stream = stream_of(&frames);
        let mut dec = FrameDecoder::new();
        let first = dec.push_bytes(&stream[..FRAME_LEN + 10]);
        assert_eq!(first, vec![frames[0]]);
        assert_eq!(dec.pending(), 10);
        let second = dec.push_bytes(&stream[FRAME_LEN + 10..]);
        assert_eq!(second, vec![frames[1]]);
        assert_eq!(dec.pending(), 0);
    }

    #[test]
    fn decoder_counts_sequence_gaps() {
        let frames = some_frames(10, 6);
        let kept: Vec<TelemetryFrame> = frames
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 4 && *i != 5)
            .map(|(_, f)| *f)
            .collect();
        let mut dec = FrameDecoder::new();
        let got = dec.push_bytes(&stream_of(&kept));
        assert_eq!(got, kept);
        assert_eq!(dec.stats().missed_frames, 2);
    }

    #[test]
    fn decoder_seq_gap_is_wrap_aware() {
        let a = TelemetryFrame {
            seq: 65535,
            timestamp_ms: 0,
            counts: [0; 8],
        };
        let b = TelemetryFrame {
            seq: 1,
            timestamp_ms: 10,
            counts: [0; 8],
        };
        let mut dec = FrameDecoder::new();
        dec.push_bytes(&stream_of(&[a, b]));
        assert_eq!(dec.stats().missed_frames, 1, "seq 0 was lost across wrap");
    }

    #[test]
    fn filter_window_one_is_identity() {
        let t = [0.0, 10.0, 20.0, 30.0];
        let v = [1.0, 4.0, 9.0, 16.0];
        let out = filter_and_differentiate(&t, &v, 1).unwrap();
        for (s, x) in out.iter().zip(v.iter()) {
            assert_eq!(s.filtered, *x);
        }
    }

    #[test]
    fn filter_linear_signal_has_constant_derivative() {
        // 2 units per 10 ms = 200 per second; averaging and differencing are
        // both exact on a line, including the truncated ends.
        let t: Vec<f64> = (0..20).map(|i| i as f64 * 10.0).collect();
        let v: Vec<f64> = (0..20).map(|i| 3.0 + 2.0 * i as f64).collect();
        let out = filter_and_differentiate(&t, &v, 5).unwrap();
        for s in &out {
            assert!((s.derivative_per_s - 200.0).abs() < 1e-9, "{s:?}");
        }
        for (s, x) in out.iter().zip(v.iter()) {
            assert!((s.filtered - x).abs() < 1e-9);
        }
    }

    #[test]
    fn filter_rejects_bad_inputs() {
        let t = [0.0, 10.0];
        let v = [1.0, 2.0];
        assert_eq!(
            filter_and_differentiate(&t, &v, 2),
            Err(TelemetryError::BadWindow(2))
        );
        assert_eq!(
            filter_and_differentiate(&t, &v[..1], 1),
            Err(TelemetryError::LengthMismatch(2, 1))
        );
        assert_eq!(
            filter_and_differentiate(&[0.0, 0.0], &v, 1),
            Err(TelemetryError::NonMonotonicTimestamps)
        );
    }

    #[test]
    fn frames_from_traces_requires_eight_aligned_channels() {
        let mk = |ch: u8| {
            vec![
                SensorReading {
                    timestamp_ms: 0.0,
                    channel_id: ch,
                    voltage: 2.5,
                },
                SensorReading {
                    timestamp_ms: 10.0,
                    channel_id: ch,
                    voltage: 2.5,
                },
            ]
        };
        let traces: Vec<_> = (0..8).map(mk).collect();
        let frames = frames_from_traces(&traces).unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0].seq, 0);
        assert_eq!(frames[1].seq, 1);
        assert_eq!(frames[1].timestamp_ms, 10);
        assert_eq!(frames[0].counts[0], volts_to_counts(2.5));

        assert!(frames_from_traces(&traces[..7]).is_err());
        let mut ragged: Vec<_> = (0..8).map(mk).collect();
        ragged[3].pop();
        assert!(frames_from_traces(&ragged).is_err());
    }

    proptest! {
        #[test]
        fn any_frame_round_trips(
            seq in any::<u16>(),
            timestamp_ms in any::<u32>(),
            counts in prop::array::uniform8(0u16..=COUNT_MAX),
        ) {
            let frame = TelemetryFrame { seq, timestamp_ms, counts };
            prop_assert_eq!(decode_frame(&encode_frame(&frame)).unwrap(), frame);
        }

        #[test]
        fn random_slicing_never_changes_decoded_frames(
            n in 1usize..30,
            seed in any::<u64>(),
            cuts in prop::collection::vec(0usize..1000, 0..12),
        ) {
            let frames = some_frames(n, seed);
            let stream = stream_of(&frames);
            let mut bounds: Vec<usize> =
                cuts.into_iter().map(|c| c % (stream.len() + 1)).collect();
            bounds.push(0);
            bounds.push(stream.len());
            bounds.sort_unstable();
            let mut dec = FrameDecoder::new();
            let mut got = Vec::new();
            for w in bounds.windows(2) {
                got.extend(dec.push_bytes(&stream[w[0]..w[1]]));
            }
            prop_assert_eq!(got, frames);
            prop_assert_eq!(dec.stats().skipped_bytes, 0);
        }

        #[test]
        fn moving_average_stays_within_input_envelope(
            values in prop::collection::vec(-100.0..100.0f64, 2..40),
            window in (0usize..4).prop_map(|k| 2 * k + 1),
        ) {
            let t: Vec<f64> = (0..values.len()).map(|i| i as f64 * 10.0).collect();
            let out = filter_and_differentiate(&t, &values, window).unwrap();
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for s in out {
                prop_assert!(s.filtered >= lo - 1e-9 && s.filtered <= hi + 1e-9);
            }
        }
    }
}
