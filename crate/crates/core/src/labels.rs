//! Interval-annotation CSVs and their conversion to per-segment labels.
//!
//! Annotations arrive as rows of (tmin, tier, text, tmax): `tier` names the
//! channel (CH1/CH2) and `text` is S for speech, N for non-speech. Cleaning
//! canonicalizes the messy tier spellings, strips stray non-ASCII characters,
//! drops inverted rows, and repairs overlaps within a tier. Times convert to
//! segment indices by truncation: index = floor(t / segment_duration).

use thiserror::Error;

/// Absorbs representation noise in times like 1.3000000000000001 before the
/// floor; far below any sane segment duration.
const FLOOR_GUARD: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("missing header column {0:?}")]
    MissingColumn(&'static str),
    #[error("row {row}: cannot parse {field} value {value:?} as seconds")]
    BadNumber {
        row: usize,
        field: &'static str,
        value: String,
    },
    #[error("row {row}: tier {tier:?} does not map to CH1 or CH2")]
    UnknownTier { row: usize, tier: String },
    #[error("label vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("expected binary label vectors")]
    NotBinary,
    #[error("segment duration must be positive")]
    BadDuration,
}

/// Channel a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Ch1,
    Ch2,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Ch1 => "CH1",
            Tier::Ch2 => "CH2",
        }
    }
}

/// One parsed annotation row. `tier` and `text` are raw until cleaned.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRow {
    pub tmin: f64,
    pub tier: String,
    pub text: String,
    pub tmax: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IntervalTable {
    pub rows: Vec<IntervalRow>,
}

/// Labeling scheme of a [`LabelVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelScheme {
    /// 0 = non-speech, 1 = own-channel speech.
    Binary,
    /// 0 = none, 1 = speaker 1, 2 = speaker 2, 3 = overlap.
    FourClass,
}

impl LabelScheme {
    pub fn n_classes(self) -> usize {
        match self {
            LabelScheme::Binary => 2,
            LabelScheme::FourClass => 4,
        }
    }
}

/// Per-segment class labels aligned to a segment matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector {
    pub classes: Vec<u8>,
    pub scheme: LabelScheme,
    pub segment_duration: f64,
}

impl LabelVector {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Result of [`clean_intervals`]: the repaired table plus repair counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanOutcome {
    pub table: IntervalTable,
    /// Rows discarded because tmin >= tmax (before or after clamping).
    pub dropped: usize,
    /// Rows whose tmin was clamped to the previous row's tmax.
    pub clamped: usize,
}

fn split_csv_line(line: &str) -> Vec<String> {
    line.split(',').map(|f| f.trim().to_string()).collect()
}

/// Parse an annotation CSV. The header must name tmin, tier, text and tmax
/// (any column order is accepted); extra columns are ignored.
pub fn parse_label_csv(text: &str) -> Result<IntervalTable, LabelError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = match lines.next() {
        Some(h) => split_csv_line(h),
        None => return Err(LabelError::MissingColumn("tmin")),
    };
    let find = |name: &'static str| -> Result<usize, LabelError> {
        header
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or(LabelError::MissingColumn(name))
    };
    let (c_tmin, c_tier, c_text, c_tmax) =
        (find("tmin")?, find("tier")?, find("text")?, find("tmax")?);

    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields = split_csv_line(line);
        let row = i + 2; // 1-based, counting the header
        let get = |col: usize, name: &'static str| -> Result<&String, LabelError> {
            fields.get(col).ok_or(LabelError::BadNumber {
                row,
                field: name,
                value: String::new(),
            })
        };
        let num = |col: usize, name: &'static str| -> Result<f64, LabelError> {
            let raw = get(col, name)?;
            raw.parse::<f64>().map_err(|_| LabelError::BadNumber {
                row,
                field: name,
                value: raw.clone(),
            })
        };
        rows.push(IntervalRow {
            tmin: num(c_tmin, "tmin")?,
            tier: get(c_tier, "tier")?.clone(),
            text: get(c_text, "text")?.clone(),
            tmax: num(c_tmax, "tmax")?,
        });
    }
    Ok(IntervalTable { rows })
}

fn canonical_tag(raw: &str) -> String {
    raw.chars()
        .filter(char::is_ascii)
        .collect::<String>()
        .trim()
        .to_ascii_uppercase()
}

fn map_tier(tag: &str) -> Option<Tier> {
    // Collapse inner whitespace so "CH 1" matches.
    let squashed: String = tag.chars().filter(|c| !c.is_whitespace()).collect();
    match squashed.as_str() {
        "CH1" | "CHANNEL1" | "SPEAKER1" => Some(Tier::Ch1),
        "CH2" | "CHANNEL2" | "SPEAKER2" => Some(Tier::Ch2),
        _ => None,
    }
}

/// Canonicalize tier/text tags, drop inverted rows, and clamp overlapping
/// rows within a tier to the previous row's tmax.
pub fn clean_intervals(table: &IntervalTable) -> Result<CleanOutcome, LabelError> {
    // Canonicalize first so sorting sees final tags.
    let mut rows: Vec<(usize, IntervalRow)> = Vec::with_capacity(table.rows.len());
    for (i, r) in table.rows.iter().enumerate() {
        let tier_tag = canonical_tag(&r.tier);
        let tier = map_tier(&tier_tag).ok_or_else(|| LabelError::UnknownTier {
            row: i + 2,
            tier: r.tier.clone(),
        })?;
        rows.push((
            i,
            IntervalRow {
                tmin: r.tmin,
                tier: tier.as_str().to_string(),
                text: canonical_tag(&r.text),
                tmax: r.tmax,
            },
        ));
    }
    rows.sort_by(|a, b| a.1.tmin.total_cmp(&b.1.tmin).then(a.0.cmp(&b.0)));

    let mut out = Vec::with_capacity(rows.len());
    let mut last_tmax = [f64::NEG_INFINITY; 2];
    let mut dropped = 0;
    let mut clamped = 0;
    for (_, mut row) in rows {
        let slot = if row.tier == "CH1" { 0 } else { 1 };
        if row.tmin < last_tmax[slot] {
            row.tmin = last_tmax[slot];
            clamped += 1;
        }
        if row.tmin >= row.tmax {
            log::warn!(
                "dropping interval [{}, {}) on {}: empty after cleaning",
                row.tmin,
                row.tmax,
                row.tier
            );
            dropped += 1;
            continue;
        }
        last_tmax[slot] = row.tmax;
        out.push(row);
    }
    // Clamping can move a row's tmin past rows of the other tier; restore the
    // global ordering (stable, so ties keep their relative order).
    out.sort_by(|a, b| a.tmin.total_cmp(&b.tmin));
    Ok(CleanOutcome {
        table: IntervalTable { rows: out },
        dropped,
        clamped,
    })
}

/// Truncating time-to-segment-index conversion: floor(t / segment_duration).
pub fn time_to_index(t: f64, segment_duration: f64) -> usize {
    let idx = ((t + FLOOR_GUARD) / segment_duration).floor();
    if idx < 0.0 {
        0
    } else {
        idx as usize
    }
}

/// Build the binary label vector for one tier from a cleaned table.
///
/// Every speech row sets indices [floor(tmin/d), floor(tmax/d)) to 1,
/// clipped to the vector bounds.
pub fn intervals_to_labels(
    table: &IntervalTable,
    tier: Tier,
    n_segments: usize,
    segment_duration: f64,
) -> Result<LabelVector, LabelError> {
    if segment_duration <= 0.0 {
        return Err(LabelError::BadDuration);
    }
    let mut classes = vec![0u8; n_segments];
    for row in &table.rows {
        if row.tier != tier.as_str() || row.text != "S" {
            continue;
        }
        let lo = time_to_index(row.tmin, segment_duration).min(n_segments);
        let hi = time_to_index(row.tmax, segment_duration).min(n_segments);
        for c in &mut classes[lo..hi] {
            *c = 1;
        }
    }
    Ok(LabelVector {
        classes,
        scheme: LabelScheme::Binary,
        segment_duration,
    })
}

/// Combine the two per-channel binary vectors into the 4-class scheme:
/// none / speaker 1 / speaker 2 / overlap.
pub fn merge_four_class(
    label_ch1: &LabelVector,
    label_ch2: &LabelVector,
) -> Result<LabelVector, LabelError> {
    if label_ch1.scheme != LabelScheme::Binary || label_ch2.scheme != LabelScheme::Binary {
        return Err(LabelError::NotBinary);
    }
    if label_ch1.len() != label_ch2.len() {
        return Err(LabelError::LengthMismatch(label_ch1.len(), label_ch2.len()));
    }
    if label_ch1
        .classes
        .iter()
        .chain(&label_ch2.classes)
        .any(|&c| c > 1)
    {
        return Err(LabelError::NotBinary);
    }
    let classes = label_ch1
        .classes
        .iter()
        .zip(&label_ch2.classes)
        .map(|(&a, &b)| a + 2 * b)
        .collect();
    Ok(LabelVector {
        classes,
        scheme: LabelScheme::FourClass,
        segment_duration: label_ch1.segment_duration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// A six-row annotation covering both channels.
    pub const SIX_ROW_CSV: &str = "\
tmin,tier,text,tmax
0,CH2,N,1.361079
0,CH1,N,4.550097
1.361079,CH2,S,4.996529
4.550097,CH1,S,5.541915
4.996529,CH2,N,5.547973
5.541915,CH1,N,8.183008
";

    #[test]
    fn header_only_gives_empty_table() {
        let t = parse_label_csv("tmin,tier,text,tmax\n").unwrap();
        assert!(t.rows.is_empty());
    }

    #[test]
    fn parses_known_row() {
        let t = parse_label_csv("tmin,tier,text,tmax\n4.550097,CH1,S,5.541915\n").unwrap();
        assert_eq!(
            t.rows[0],
            IntervalRow {
                tmin: 4.550097,
                tier: "CH1".into(),
                text: "S".into(),
                tmax: 5.541915,
            }
        );
    }

    #[test]
    fn header_columns_in_any_order_extra_ignored() {
        let t = parse_label_csv("text,TMAX,note,tier,tmin\nS,2.0,hello,CH2,1.0\n").unwrap();
        assert_eq!(t.rows[0].tmin, 1.0);
        assert_eq!(t.rows[0].tmax, 2.0);
        assert_eq!(t.rows[0].tier, "CH2");
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_label_csv("tmin,tier,tmax\n"),
            Err(LabelError::MissingColumn("text"))
        ));
        let err = parse_label_csv("tmin,tier,text,tmax\n0,CH1,N,1\nx,CH1,S,2\n").unwrap_err();
        match err {
            LabelError::BadNumber { row, field, value } => {
                assert_eq!(row, 3);
                assert_eq!(field, "tmin");
                assert_eq!(value, "x");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn cleaning_canonicalizes_messy_tags() {
        // " ch1 " plus a zero-width space inside the text tag.
        let t = parse_label_csv("tmin,tier,text,tmax\n0.5, ch1 ,S\u{200b},1.5\n").unwrap();
        let cleaned = clean_intervals(&t).unwrap();
        assert_eq!(cleaned.table.rows[0].tier, "CH1");
        assert_eq!(cleaned.table.rows[0].text, "S");
        assert_eq!(cleaned.dropped, 0);
    }

    #[test]
    fn cleaning_maps_aliases() {
        for alias in ["CH 1", "channel1", "Channel 1", "ch1"] {
            let t = IntervalTable {
                rows: vec![IntervalRow {
                    tmin: 0.0,
                    tier: alias.into(),
                    text: "s".into(),
                    tmax: 1.0,
                }],
            };
            assert_eq!(clean_intervals(&t).unwrap().table.rows[0].tier, "CH1");
        }
        let t = IntervalTable {
            rows: vec![IntervalRow {
                tmin: 0.0,
                tier: "left".into(),
                text: "S".into(),
                tmax: 1.0,
            }],
        };
        assert!(matches!(
            clean_intervals(&t),
            Err(LabelError::UnknownTier { .. })
        ));
    }

    #[test]
    fn clean_is_identity_on_clean_table() {
        let t = parse_label_csv(SIX_ROW_CSV).unwrap();
        let once = clean_intervals(&t).unwrap();
        assert_eq!(once.table, t);
        assert_eq!((once.dropped, once.clamped), (0, 0));
        let twice = clean_intervals(&once.table).unwrap();
        assert_eq!(twice.table, once.table);
    }

    #[test]
    fn inverted_row_dropped_with_warning_count() {
        let t = IntervalTable {
            rows: vec![IntervalRow {
                tmin: 5.0,
                tier: "CH1".into(),
                text: "S".into(),
                tmax: 4.0,
            }],
        };
        let out = clean_intervals(&t).unwrap();
        assert!(out.table.rows.is_empty());
        assert_eq!(out.dropped, 1);
    }

    #[test]
    fn overlap_clamped_to_previous_tmax() {
        let t = IntervalTable {
            rows: vec![
                IntervalRow {
                    tmin: 0.0,
                    tier: "CH1".into(),
                    text: "N".into(),
                    tmax: 4.6,
                },
                IntervalRow {
                    tmin: 4.5,
                    tier: "CH1".into(),
                    text: "S".into(),
                    tmax: 5.5,
                },
            ],
        };
        let out = clean_intervals(&t).unwrap();
        assert_eq!(out.table.rows[1].tmin, 4.6);
        assert_eq!(out.clamped, 1);
        assert_eq!(out.dropped, 0);
        // Other tiers are unaffected by CH1's extent.
        let t2 = IntervalTable {
            rows: vec![
                IntervalRow {
                    tmin: 0.0,
                    tier: "CH1".into(),
                    text: "N".into(),
                    tmax: 4.6,
                },
                IntervalRow {
                    tmin: 4.5,
                    tier: "CH2".into(),
                    text: "S".into(),
                    tmax: 5.5,
                },
            ],
        };
        assert_eq!(clean_intervals(&t2).unwrap().clamped, 0);
    }

    #[test]
    fn truncation_matches_decimal_string_oracle() {
        // Decimal-string truncation oracle: keep one digit after the point,
        // drop the rest, multiply by ten.
        fn truncate_oracle(s: &str) -> usize {
            let (int, frac) = s.split_once('.').unwrap_or((s, "0"));
            let first = frac.chars().next().unwrap_or('0');
            int.parse::<usize>().unwrap() * 10 + first.to_digit(10).unwrap() as usize
        }
        let cases = [
            ("1.361079", 13),
            ("4.550097", 45),
            ("4.996529", 49),
            ("5.541915", 55),
            ("5.547973", 55),
            ("8.183008", 81),
        ];
        for (s, want) in cases {
            assert_eq!(truncate_oracle(s), want, "oracle {s}");
            assert_eq!(time_to_index(s.parse().unwrap(), 0.1), want, "floor {s}");
        }
    }

    #[test]
    fn floor_guard_absorbs_representation_noise() {
        // 1.3 / 0.1 lands just under 13.0 in f64 without the guard.
        assert_eq!(time_to_index(1.3, 0.1), 13);
        assert_eq!(time_to_index(0.0, 0.1), 0);
    }

    #[test]
    fn speech_row_marks_half_open_range() {
        let t = clean_intervals(&parse_label_csv(SIX_ROW_CSV).unwrap())
            .unwrap()
            .table;
        let l = intervals_to_labels(&t, Tier::Ch1, 100, 0.1).unwrap();
        for (i, &c) in l.classes.iter().enumerate() {
            let want = u8::from((45..55).contains(&i));
            assert_eq!(c, want, "segment {i}");
        }
    }

    #[test]
    fn non_speech_rows_leave_zeros() {
        let t = parse_label_csv("tmin,tier,text,tmax\n0,CH1,N,3\n3,CH1,N,9\n").unwrap();
        let l = intervals_to_labels(&t, Tier::Ch1, 50, 0.1).unwrap();
        assert!(l.classes.iter().all(|&c| c == 0));
    }

    #[test]
    fn single_segment_interval() {
        let t = parse_label_csv("tmin,tier,text,tmax\n0.0,CH1,S,0.1\n").unwrap();
        let l = intervals_to_labels(&t, Tier::Ch1, 100, 0.1).unwrap();
        assert_eq!(l.classes[0], 1);
        assert!(l.classes[1..].iter().all(|&c| c == 0));
    }

    #[test]
    fn out_of_range_intervals_are_clipped() {
        let t = parse_label_csv("tmin,tier,text,tmax\n5.0,CH1,S,99.0\n").unwrap();
        let l = intervals_to_labels(&t, Tier::Ch1, 10, 0.1).unwrap();
        assert_eq!(l.len(), 10);
        assert!(l.classes.iter().all(|&c| c == 0), "clipped below range");
        let l = intervals_to_labels(&t, Tier::Ch1, 60, 0.1).unwrap();
        assert!(l.classes[50..60].iter().all(|&c| c == 1));
    }

    fn binary(v: &[u8]) -> LabelVector {
        LabelVector {
            classes: v.to_vec(),
            scheme: LabelScheme::Binary,
            segment_duration: 0.1,
        }
    }

    #[test]
    fn merge_covers_all_bit_pairs() {
        let a = binary(&[0, 1, 0, 1]);
        let b = binary(&[0, 0, 1, 1]);
        let m = merge_four_class(&a, &b).unwrap();
        assert_eq!(m.classes, vec![0, 1, 2, 3]);
        assert_eq!(m.scheme, LabelScheme::FourClass);
    }

    #[test]
    fn merge_examples_and_errors() {
        let m = merge_four_class(&binary(&[1, 0, 1]), &binary(&[0, 0, 1])).unwrap();
        assert_eq!(m.classes, vec![1, 0, 3]);
        assert!(merge_four_class(&binary(&[0]), &binary(&[0, 1])).is_err());
        let four = LabelVector {
            classes: vec![2],
            scheme: LabelScheme::Binary,
            segment_duration: 0.1,
        };
        assert!(matches!(
            merge_four_class(&four, &binary(&[0])),
            Err(LabelError::NotBinary)
        ));
    }

    proptest! {
        #[test]
        fn merge_restricted_to_silent_ch2_reproduces_ch1(
            bits in prop::collection::vec(0u8..2, 1..200)
        ) {
            let a = binary(&bits);
            let b = binary(&vec![0; bits.len()]);
            let m = merge_four_class(&a, &b).unwrap();
            prop_assert_eq!(m.classes, a.classes);
        }

        #[test]
        fn label_length_is_always_n_segments(
            intervals in prop::collection::vec((0.0f64..30.0, 0.01f64..5.0), 0..20),
            n in 0usize..400,
        ) {
            let rows = intervals.iter().map(|&(start, len)| IntervalRow {
                tmin: start,
                tier: "CH1".into(),
                text: "S".into(),
                tmax: start + len,
            }).collect();
            let cleaned = clean_intervals(&IntervalTable { rows }).unwrap();
            let l = intervals_to_labels(&cleaned.table, Tier::Ch1, n, 0.1).unwrap();
            prop_assert_eq!(l.len(), n);
        }

        #[test]
        fn clean_is_idempotent(
            intervals in prop::collection::vec(
                (0.0f64..20.0, -0.5f64..3.0, 0usize..2, 0usize..2), 0..25
            )
        ) {
            let rows = intervals.iter().map(|&(start, len, tier, text)| IntervalRow {
                tmin: start,
                tier: if tier == 0 { " ch1".into() } else { "CH 2".into() },
                text: if text == 0 { "s".into() } else { "N".into() },
                tmax: start + len,
            }).collect();
            let once = clean_intervals(&IntervalTable { rows }).unwrap();
            let twice = clean_intervals(&once.table).unwrap();
            prop_assert_eq!(&twice.table, &once.table);
            prop_assert_eq!((twice.dropped, twice.clamped), (0, 0));
        }
    }
}
