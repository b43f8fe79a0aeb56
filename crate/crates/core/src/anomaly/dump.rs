//! Score dump: CSV with one record per line.
//!
//! ```text
//! z_n,z_a,r_l,score,label
//! 0.93841,0.0412,0.0187,-0.87851,normal
//! ```
//!
//! Floats use the shortest representation that round-trips; the label column
//! is `normal`, `anomaly`, or empty.

use std::path::Path;

use super::AnomalyRecord;
use crate::error::{Error, Result};

pub const SCORE_DUMP_HEADER: &str = "z_n,z_a,r_l,score,label";

pub fn score_dump_string(records: &[AnomalyRecord]) -> String {
    let mut out = String::with_capacity(48 * (records.len() + 1));
    out.push_str(SCORE_DUMP_HEADER);
    out.push('\n');
    for r in records {
        let label = r.label.map(|l| l.as_str()).unwrap_or("");
        out.push_str(&format!("{},{},{},{},{}\n", r.z_n, r.z_a, r.r_l, r.score, label));
    }
    out
}

pub fn write_score_dump(path: &Path, records: &[AnomalyRecord]) -> Result<()> {
    crate::capsnet::write_atomic(path, score_dump_string(records).as_bytes())
}

pub fn parse_score_dump(text: &str) -> Result<Vec<AnomalyRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SCORE_DUMP_HEADER => {}
        _ => return Err(Error::Data(format!("score dump must start with header {SCORE_DUMP_HEADER:?}"))),
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::Data(format!("line {}: expected 5 columns, got {}", n + 1, cols.len())));
        }
        let num = |i: usize| {
            cols[i].trim().parse::<f64>().map_err(|e| Error::Data(format!("line {}: column {}: {e}", n + 1, i + 1)))
        };
        let label = match cols[4].trim() {
            "" => None,
            l => Some(l.parse()?),
        };
        out.push(AnomalyRecord { z_n: num(0)?, z_a: num(1)?, r_l: num(2)?, score: num(3)?, label });
    }
    Ok(out)
}

pub fn read_score_dump(path: &Path) -> Result<Vec<AnomalyRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_score_dump(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Label;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn dump_round_trips(rows in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0u8..3), 0..20)) {
            let records: Vec<AnomalyRecord> = rows
                .into_iter()
                .map(|(n, a, r, l)| {
                    let label = match l { 0 => None, 1 => Some(Label::Normal), _ => Some(Label::Anomaly) };
                    AnomalyRecord::new(n, a, r, label).unwrap()
                })
                .collect();
            let parsed = parse_score_dump(&score_dump_string(&records)).unwrap();
            prop_assert_eq!(parsed, records);
        }
    }

    #[test]
    fn malformed_dumps_are_rejected() {
        assert!(parse_score_dump("").is_err());
        assert!(parse_score_dump("a,b\n").is_err());
        assert!(parse_score_dump("z_n,z_a,r_l,score,label\n0.1,0.2\n").is_err());
        assert!(parse_score_dump("z_n,z_a,r_l,score,label\n0.1,0.2,0.3,x,normal\n").is_err());
        assert!(parse_score_dump("z_n,z_a,r_l,score,label\n0.1,0.2,0.3,0.4,weird\n").is_err());
    }
}
