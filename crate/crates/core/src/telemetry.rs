//! Tray to server wire format.
//!
//! A tray reports one [`TelemetryFrame`] per sample: the raw 24-bit load-cell
//! reading, the calibrated weight, and every RFID tag the reader saw during
//! that sample. Frames travel as newline-delimited JSON records with a fixed
//! key order so a capture can be replayed or diffed with ordinary tools.
//!
//! ```text
//! {"schema":1,"tray_id":"T1","seq":7,"timestamp_ms":1704067200700,"weight_raw":665600,"weight_g":650.0,"tags":["C:A","U:alice"]}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

/// Version written into every frame record.
pub const FRAME_SCHEMA: u32 = 1;

/// Smallest reading a signed 24-bit ADC can produce.
pub const RAW_MIN: i64 = -(1 << 23);
/// Largest reading a signed 24-bit ADC can produce.
pub const RAW_MAX: i64 = (1 << 23) - 1;

/// Largest tolerated disagreement between the device's `weight_g` and the
/// value recomputed from `weight_raw` with the server calibration.
pub const CALIBRATION_MISMATCH_G: f64 = 0.01;

const CONTAINER_PREFIX: &str = "C:";
const BADGE_PREFIX: &str = "U:";

#[derive(Debug, Error, PartialEq)]
pub enum TelemetryError {
    #[error("raw reading {0} outside the 24-bit range [{RAW_MIN}, {RAW_MAX}]")]
    RawOutOfRange(i64),
    #[error("weight {0} g cannot be represented by the calibration")]
    Unrepresentable(f64),
    #[error("calibration scale must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("invalid tag id {0:?}: expected a `C:` or `U:` prefix and a non-empty name")]
    BadTag(String),
    #[error("tray id must be non-empty")]
    EmptyTrayId,
}

/// What a tag is attached to, taken from its one-character prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TagKind {
    Container,
    Badge,
}

/// An RFID tag identifier such as `C:ethanol-1` or `U:alice`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TagId(String);

impl TagId {
    pub fn parse(s: impl Into<String>) -> Result<Self, TelemetryError> {
        let s = s.into();
        let ok = [CONTAINER_PREFIX, BADGE_PREFIX]
            .iter()
            .any(|p| s.len() > p.len() && s.starts_with(p));
        if ok && !s.chars().any(char::is_control) {
            Ok(TagId(s))
        } else {
            Err(TelemetryError::BadTag(s))
        }
    }

    /// Container tag with the given name, e.g. `container("A")` is `C:A`.
    pub fn container(name: &str) -> Self {
        TagId(format!("{CONTAINER_PREFIX}{name}"))
    }

    pub fn badge(name: &str) -> Self {
        TagId(format!("{BADGE_PREFIX}{name}"))
    }

    pub fn kind(&self) -> TagKind {
        if self.0.starts_with(BADGE_PREFIX) {
            TagKind::Badge
        } else {
            TagKind::Container
        }
    }

    pub fn is_container(&self) -> bool {
        self.kind() == TagKind::Container
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for TagId {
    type Error = TelemetryError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        TagId::parse(s)
    }
}

impl From<TagId> for String {
    fn from(t: TagId) -> String {
        t.0
    }
}

impl fmt::Display for TagId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TrayId(String);

impl TrayId {
    pub fn new(s: impl Into<String>) -> Result<Self, TelemetryError> {
        let s = s.into();
        if s.is_empty() {
            Err(TelemetryError::EmptyTrayId)
        } else {
            Ok(TrayId(s))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for TrayId {
    type Error = TelemetryError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        TrayId::new(s)
    }
}

impl From<TrayId> for String {
    fn from(t: TrayId) -> String {
        t.0
    }
}

impl fmt::Display for TrayId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Affine map from ADC counts to grams.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCalibration")]
pub struct Calibration {
    pub tare_offset: i64,
    pub scale_g_per_count: f64,
}

#[derive(Deserialize)]
struct RawCalibration {
    tare_offset: i64,
    scale_g_per_count: f64,
}

impl TryFrom<RawCalibration> for Calibration {
    type Error = TelemetryError;
    fn try_from(r: RawCalibration) -> Result<Self, Self::Error> {
        Calibration::new(r.tare_offset, r.scale_g_per_count)
    }
}

impl Default for Calibration {
    /// 1/1024 g per count: binary-exact, and spans about 8 kg of load.
    fn default() -> Self {
        Calibration {
            tare_offset: 0,
            scale_g_per_count: 1.0 / 1024.0,
        }
    }
}

impl Calibration {
    pub fn new(tare_offset: i64, scale_g_per_count: f64) -> Result<Self, TelemetryError> {
        if !(scale_g_per_count.is_finite() && scale_g_per_count > 0.0) {
            return Err(TelemetryError::BadScale(scale_g_per_count));
        }
        Ok(Calibration {
            tare_offset,
            scale_g_per_count,
        })
    }

    pub fn to_grams(&self, raw: i64) -> Result<f64, TelemetryError> {
        raw_to_grams(raw, self)
    }

    /// Inverse of [`Calibration::to_grams`], rounded to the nearest count.
    pub fn to_raw(&self, grams: f64) -> Result<i32, TelemetryError> {
        if !grams.is_finite() {
            return Err(TelemetryError::Unrepresentable(grams));
        }
        let counts = (grams / self.scale_g_per_count).round() + self.tare_offset as f64;
        if counts < RAW_MIN as f64 || counts > RAW_MAX as f64 {
            return Err(TelemetryError::Unrepresentable(grams));
        }
        Ok(counts as i32)
    }

    /// Round-trips grams through the ADC quantization.
    pub fn quantize(&self, grams: f64) -> Result<(i32, f64), TelemetryError> {
        let raw = self.to_raw(grams)?;
        Ok((raw, self.to_grams(raw as i64)?))
    }
}

pub fn raw_to_grams(raw: i64, cal: &Calibration) -> Result<f64, TelemetryError> {
    if !(RAW_MIN..=RAW_MAX).contains(&raw) {
        return Err(TelemetryError::RawOutOfRange(raw));
    }
    Ok((raw - cal.tare_offset) as f64 * cal.scale_g_per_count)
}

/// One tray sample as sent over the wire.
#[derive(Clone, Debug, PartialEq)]
pub struct TelemetryFrame {
    pub tray_id: TrayId,
    pub seq: u64,
    pub timestamp_ms: i64,
    pub weight_raw: i32,
    pub weight_g: f64,
    pub tags: Vec<TagId>,
}

impl TelemetryFrame {
    pub fn container_tags(&self) -> impl Iterator<Item = &TagId> {
        self.tags.iter().filter(|t| t.is_container())
    }

    /// Difference between the carried grams and the grams recomputed under
    /// `cal`, when it exceeds [`CALIBRATION_MISMATCH_G`].
    pub fn calibration_mismatch(&self, cal: &Calibration) -> Option<f64> {
        let recomputed = cal.to_grams(self.weight_raw as i64).ok()?;
        let diff = self.weight_g - recomputed;
        (diff.abs() > CALIBRATION_MISMATCH_G).then_some(diff)
    }
}

#[derive(Serialize)]
struct WireFrame<'a> {
    schema: u32,
    tray_id: &'a str,
    seq: u64,
    timestamp_ms: i64,
    weight_raw: i32,
    weight_g: f64,
    tags: &'a [TagId],
}

/// Encodes a frame as one JSON line, without the trailing newline.
pub fn encode_frame(frame: &TelemetryFrame) -> String {
    let wire = WireFrame {
        schema: FRAME_SCHEMA,
        tray_id: frame.tray_id.as_str(),
        seq: frame.seq,
        timestamp_ms: frame.timestamp_ms,
        weight_raw: frame.weight_raw,
        weight_g: frame.weight_g,
        tags: &frame.tags,
    };
    // Every field is a plain string or number, so serialization cannot fail.
    serde_json::to_string(&wire).expect("frame serialization")
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{} at byte {offset}: {message}", field.map(|f| format!("field `{f}`")).unwrap_or_else(|| "frame".to_string()))]
pub struct DecodeError {
    pub field: Option<&'static str>,
    pub offset: usize,
    pub message: String,
}

impl DecodeError {
    fn at(field: Option<&'static str>, offset: usize, message: impl Into<String>) -> Self {
        DecodeError {
            field,
            offset,
            message: message.into(),
        }
    }
}

const FIELDS: [&str; 7] = [
    "schema",
    "tray_id",
    "seq",
    "timestamp_ms",
    "weight_raw",
    "weight_g",
    "tags",
];

/// Decodes one frame line. Errors name the offending field and the byte
/// offset of its value (or of the end of the record for missing fields).
pub fn decode_frame(line: &[u8]) -> Result<TelemetryFrame, DecodeError> {
    let text = std::str::from_utf8(line)
        .map_err(|e| DecodeError::at(None, e.valid_up_to(), "invalid UTF-8"))?;
    let text = text.trim_end_matches(['\n', '\r']);
    let map: BTreeMap<&str, &RawValue> = serde_json::from_str(text).map_err(|e| {
        DecodeError::at(None, e.column().saturating_sub(1), e.to_string())
    })?;

    let base = text.as_ptr() as usize;
    if let Some((key, raw)) = map.iter().find(|(k, _)| !FIELDS.contains(k)) {
        let off = raw.get().as_ptr() as usize - base;
        return Err(DecodeError::at(None, off, format!("unknown field `{key}`")));
    }

    fn field<'de, T: Deserialize<'de>>(
        map: &BTreeMap<&str, &'de RawValue>,
        name: &'static str,
        base: usize,
        end: usize,
    ) -> Result<(T, usize), DecodeError> {
        let raw = map
            .get(name)
            .ok_or_else(|| DecodeError::at(Some(name), end, "missing field"))?;
        let off = raw.get().as_ptr() as usize - base;
        serde_json::from_str(raw.get())
            .map(|v| (v, off))
            .map_err(|e| DecodeError::at(Some(name), off, e.to_string()))
    }

    let end = text.len();
    let (schema, off): (u32, _) = field(&map, "schema", base, end)?;
    if schema != FRAME_SCHEMA {
        return Err(DecodeError::at(
            Some("schema"),
            off,
            format!("unsupported schema {schema}"),
        ));
    }
    let (tray_id, _): (TrayId, _) = field(&map, "tray_id", base, end)?;
    let (seq, _): (u64, _) = field(&map, "seq", base, end)?;
    let (timestamp_ms, _): (i64, _) = field(&map, "timestamp_ms", base, end)?;
    let (weight_raw, off): (i64, _) = field(&map, "weight_raw", base, end)?;
    if !(RAW_MIN..=RAW_MAX).contains(&weight_raw) {
        return Err(DecodeError::at(
            Some("weight_raw"),
            off,
            TelemetryError::RawOutOfRange(weight_raw).to_string(),
        ));
    }
    let (weight_g, off): (f64, _) = field(&map, "weight_g", base, end)?;
    if !weight_g.is_finite() {
        return Err(DecodeError::at(Some("weight_g"), off, "not finite"));
    }
    let (tags, off): (Vec<TagId>, _) = field(&map, "tags", base, end)?;
    let mut seen = BTreeSet::new();
    if let Some(dup) = tags.iter().find(|t| !seen.insert(*t)) {
        return Err(DecodeError::at(
            Some("tags"),
            off,
            format!("duplicate tag {dup}"),
        ));
    }

    Ok(TelemetryFrame {
        tray_id,
        seq,
        timestamp_ms,
        weight_raw: weight_raw as i32,
        weight_g,
        tags,
    })
}

/// Integrity finding for one tray's frame sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StreamReport {
    /// Sequence numbers `first_missing..first_missing + lost` never arrived.
    Gap { first_missing: u64, lost: u64 },
    /// Frame at `index` does not advance past the highest seq seen before it.
    Disorder { index: usize, seq: u64, previous_max: u64 },
    /// Frame at `index` belongs to another tray.
    ForeignTray { index: usize, tray_id: TrayId },
}

/// Reports lost and out-of-order frames. Gaps are computed over the set of
/// sequence numbers that did arrive, so a late frame fills its gap instead of
/// being reported twice.
pub fn validate_stream(frames: &[TelemetryFrame]) -> Vec<StreamReport> {
    let mut reports = Vec::new();
    let Some(first) = frames.first() else {
        return reports;
    };
    let mut max_seq: Option<u64> = None;
    let mut arrived = BTreeSet::new();
    for (index, f) in frames.iter().enumerate() {
        if f.tray_id != first.tray_id {
            reports.push(StreamReport::ForeignTray {
                index,
                tray_id: f.tray_id.clone(),
            });
            continue;
        }
        if let Some(prev) = max_seq {
            if f.seq <= prev {
                reports.push(StreamReport::Disorder {
                    index,
                    seq: f.seq,
                    previous_max: prev,
                });
            }
        }
        max_seq = Some(max_seq.map_or(f.seq, |m| m.max(f.seq)));
        arrived.insert(f.seq);
    }
    let mut gaps = arrived
        .iter()
        .zip(arrived.iter().skip(1))
        .filter(|(a, b)| **b > **a + 1)
        .map(|(a, b)| StreamReport::Gap {
            first_missing: a + 1,
            lost: b - a - 1,
        })
        .collect();
    reports.append(&mut gaps);
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(seq: u64, tags: &[&str]) -> TelemetryFrame {
        TelemetryFrame {
            tray_id: TrayId::new("T1").unwrap(),
            seq,
            timestamp_ms: 1_704_067_200_000 + seq as i64 * 100,
            weight_raw: 665_600,
            weight_g: 650.0,
            tags: tags.iter().map(|t| TagId::parse(*t).unwrap()).collect(),
        }
    }

    #[test]
    fn tare_point_is_zero_grams() {
        let cal = Calibration::new(8_000_000, 0.001).unwrap();
        assert_eq!(raw_to_grams(8_000_000, &cal).unwrap(), 0.0);
    }

    #[test]
    fn raw_to_grams_arithmetic() {
        // 150,000 counts above tare at 1 mg/count.
        let cal = Calibration::new(1_000_000, 0.001).unwrap();
        let g = raw_to_grams(1_150_000, &cal).unwrap();
        assert!((g - 150.0).abs() < 1e-9, "{g}");
    }

    #[test]
    fn raw_outside_24_bits_is_rejected() {
        let cal = Calibration::default();
        assert_eq!(
            raw_to_grams(1 << 23, &cal),
            Err(TelemetryError::RawOutOfRange(1 << 23))
        );
        assert!(raw_to_grams(RAW_MAX, &cal).is_ok());
        assert!(raw_to_grams(RAW_MIN, &cal).is_ok());
        assert!(raw_to_grams(RAW_MIN - 1, &cal).is_err());
        // A mid-scale tare of 2^23 pushes 150 g above the signed range.
        let mid = Calibration::new(8_388_608, 0.001).unwrap();
        assert!(raw_to_grams(8_538_608, &mid).is_err());
    }

    #[test]
    fn non_positive_scale_is_rejected() {
        assert!(Calibration::new(0, 0.0).is_err());
        assert!(Calibration::new(0, -1.0).is_err());
        assert!(Calibration::new(0, f64::NAN).is_err());
    }

    #[test]
    fn quantize_is_exact_for_binary_scale() {
        let cal = Calibration::default();
        assert_eq!(cal.quantize(650.0).unwrap(), (665_600, 650.0));
    }

    #[test]
    fn tag_prefixes() {
        assert_eq!(TagId::parse("C:A").unwrap().kind(), TagKind::Container);
        assert_eq!(TagId::parse("U:bob").unwrap().kind(), TagKind::Badge);
        assert!(TagId::parse("X:A").is_err());
        assert!(TagId::parse("C:").is_err());
        assert!(TagId::parse("A").is_err());
    }

    #[test]
    fn empty_tag_list_is_explicit() {
        let line = encode_frame(&frame(1, &[]));
        assert!(line.contains(r#""tags":[]"#), "{line}");
        assert_eq!(decode_frame(line.as_bytes()).unwrap(), frame(1, &[]));
    }

    #[test]
    fn encoding_uses_canonical_key_order() {
        let line = encode_frame(&frame(7, &["C:A", "U:alice"]));
        assert_eq!(
            line,
            r#"{"schema":1,"tray_id":"T1","seq":7,"timestamp_ms":1704067200700,"weight_raw":665600,"weight_g":650.0,"tags":["C:A","U:alice"]}"#
        );
    }

    #[test]
    fn missing_seq_is_named() {
        let line = r#"{"schema":1,"tray_id":"T1","timestamp_ms":5,"weight_raw":0,"weight_g":0.0,"tags":[]}"#;
        let err = decode_frame(line.as_bytes()).unwrap_err();
        assert_eq!(err.field, Some("seq"));
        assert_eq!(err.offset, line.len());
        assert!(err.to_string().contains("seq"));
    }

    #[test]
    fn wrong_type_reports_value_offset() {
        let line = r#"{"schema":1,"tray_id":"T1","seq":"x","timestamp_ms":5,"weight_raw":0,"weight_g":0.0,"tags":[]}"#;
        let err = decode_frame(line.as_bytes()).unwrap_err();
        assert_eq!(err.field, Some("seq"));
        assert_eq!(err.offset, line.find(r#""x""#).unwrap());
    }

    #[test]
    fn syntax_error_reports_offset() {
        let err = decode_frame(br#"{"schema":1,"tray_id" "T1"}"#).unwrap_err();
        assert_eq!(err.field, None);
        assert!(err.offset > 0 && err.offset < 30, "{err}");
    }

    #[test]
    fn decode_rejects_bad_values() {
        let base = encode_frame(&frame(1, &["C:A"]));
        let dup = base.replace(r#"["C:A"]"#, r#"["C:A","C:A"]"#);
        assert_eq!(decode_frame(dup.as_bytes()).unwrap_err().field, Some("tags"));
        let big = base.replace("665600", "8388608");
        assert_eq!(
            decode_frame(big.as_bytes()).unwrap_err().field,
            Some("weight_raw")
        );
        let schema = base.replace(r#""schema":1"#, r#""schema":2"#);
        assert_eq!(
            decode_frame(schema.as_bytes()).unwrap_err().field,
            Some("schema")
        );
        let extra = base.replace(r#""seq":1"#, r#""seq":1,"rssi":4"#);
        assert!(decode_frame(extra.as_bytes()).is_err());
        let badtag = base.replace("C:A", "Z:A");
        assert_eq!(decode_frame(badtag.as_bytes()).unwrap_err().field, Some("tags"));
    }

    #[test]
    fn trailing_newline_is_accepted() {
        let mut line = encode_frame(&frame(3, &["C:A"]));
        line.push('\n');
        assert_eq!(decode_frame(line.as_bytes()).unwrap().seq, 3);
    }

    #[test]
    fn calibration_mismatch_flagged_above_threshold() {
        let cal = Calibration::default();
        let mut f = frame(1, &[]);
        assert_eq!(f.calibration_mismatch(&cal), None);
        f.weight_g = 650.02;
        assert!(f.calibration_mismatch(&cal).is_some());
        f.weight_g = 650.005;
        assert_eq!(f.calibration_mismatch(&cal), None);
    }

    fn seqs(s: &[u64]) -> Vec<TelemetryFrame> {
        s.iter().map(|&n| frame(n, &[])).collect()
    }

    #[test]
    fn contiguous_stream_is_clean() {
        assert!(validate_stream(&seqs(&[1, 2, 3])).is_empty());
    }

    #[test]
    fn gap_reports_lost_count() {
        assert_eq!(
            validate_stream(&seqs(&[1, 2, 5])),
            vec![StreamReport::Gap {
                first_missing: 3,
                lost: 2
            }]
        );
    }

    #[test]
    fn disorder_reported_at_index() {
        assert_eq!(
            validate_stream(&seqs(&[1, 3, 2])),
            vec![StreamReport::Disorder {
                index: 2,
                seq: 2,
                previous_max: 3
            }]
        );
    }

    #[test]
    fn duplicates_and_foreign_trays() {
        let mut frames = seqs(&[1, 2, 2]);
        let mut other = frame(3, &[]);
        other.tray_id = TrayId::new("T9").unwrap();
        frames.push(other);
        let r = validate_stream(&frames);
        assert!(r.contains(&StreamReport::Disorder {
            index: 2,
            seq: 2,
            previous_max: 2
        }));
        assert!(matches!(r.last(), Some(StreamReport::ForeignTray { index: 3, .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tag() -> impl Strategy<Value = TagId> {
            ("[CU]", "[A-Za-z0-9._-]{1,12}")
                .prop_map(|(p, n)| TagId::parse(format!("{p}:{n}")).unwrap())
        }

        prop_compose! {
            fn valid_frame()(
                tray in "[A-Za-z0-9-]{1,8}",
                seq in any::<u64>(),
                ts in any::<i64>(),
                raw in RAW_MIN..=RAW_MAX,
                w in any::<f64>().prop_filter("finite", |w| w.is_finite()),
                tags in proptest::collection::btree_set(tag(), 0..6),
            ) -> TelemetryFrame {
                TelemetryFrame {
                    tray_id: TrayId::new(tray).unwrap(),
                    seq,
                    timestamp_ms: ts,
                    weight_raw: raw as i32,
                    weight_g: w,
                    tags: tags.into_iter().collect(),
                }
            }
        }

        proptest! {
            #[test]
            fn encode_decode_round_trip(f in valid_frame()) {
                let line = encode_frame(&f);
                let back = decode_frame(line.as_bytes()).unwrap();
                prop_assert_eq!(back.weight_g.to_bits(), f.weight_g.to_bits());
                prop_assert_eq!(back, f);
            }

            #[test]
            fn raw_to_grams_is_affine(
                a in RAW_MIN..=RAW_MAX,
                b in RAW_MIN..=RAW_MAX,
                tare in -1_000_000i64..1_000_000,
                scale in 1e-4f64..1.0,
            ) {
                let cal = Calibration::new(tare, scale).unwrap();
                let lhs = raw_to_grams(a, &cal).unwrap() - raw_to_grams(b, &cal).unwrap();
                let rhs = (a - b) as f64 * scale;
                prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0));
            }
        }
    }
}
