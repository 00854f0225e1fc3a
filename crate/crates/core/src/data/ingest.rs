//! Event CSV ingestion and the canonical aligned CSV format.
//!
//! Event files have the columns `timestamp,kind,value,end_timestamp` with
//! integer epoch-minute timestamps. Dose preprocessing:
//!
//! - square-dual boluses are spread evenly over their delivery window,
//! - boluses landing on the same step are summed,
//! - basal rates (units/hour) become one dose per clock hour holding the
//!   insulin delivered during that hour, placed at the first active minute,
//! - overlapping basal rates resolve to the later row, and a temporary basal
//!   rate overrides the scheduled one while active,
//! - missing glucose is forward-filled and flagged in the observed mask.

use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{forward_fill, DoseSeries, PatientRecord, StaticFeatures, TimeGrid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Glucose,
    Cho,
    BolusNormal,
    BolusSquareDual,
    BasalRate,
    TempBasalRate,
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.trim() {
            "glucose" => Self::Glucose,
            "cho" => Self::Cho,
            "bolus_normal" => Self::BolusNormal,
            "bolus_square_dual" => Self::BolusSquareDual,
            "basal_rate" => Self::BasalRate,
            "temp_basal_rate" => Self::TempBasalRate,
            other => return Err(format!("unknown event kind `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawEvent {
    pub timestamp: i64,
    pub kind: EventKind,
    pub value: f64,
    pub end_timestamp: Option<i64>,
    /// Source line, for diagnostics.
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Defaults to the file stem when ingesting from a path.
    pub patient_id: Option<String>,
    /// Length of the basal accumulation block.
    pub basal_interval_minutes: u32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            patient_id: None,
            basal_interval_minutes: 60,
        }
    }
}

pub fn read_events<R: Read>(reader: R) -> Result<Vec<RawEvent>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut events = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let parse_err = |msg: String| Error::Parse { line, msg };
        if row.len() < 3 {
            return Err(parse_err(format!("expected at least 3 columns, got {}", row.len())));
        }
        let timestamp = row[0]
            .parse::<i64>()
            .map_err(|e| parse_err(format!("timestamp `{}`: {e}", &row[0])))?;
        let kind = row[1].parse::<EventKind>().map_err(parse_err)?;
        let value = row[2]
            .parse::<f64>()
            .map_err(|e| parse_err(format!("value `{}`: {e}", &row[2])))?;
        if !value.is_finite() {
            return Err(parse_err(format!("non-finite value `{}`", &row[2])));
        }
        let end_timestamp = match row.get(3) {
            None | Some("") => None,
            Some(s) => Some(
                s.parse::<i64>()
                    .map_err(|e| parse_err(format!("end_timestamp `{s}`: {e}")))?,
            ),
        };
        events.push(RawEvent {
            timestamp,
            kind,
            value,
            end_timestamp,
            line,
        });
    }
    Ok(events)
}

/// Smallest grid aligned to multiples of `step_minutes` that covers every event start.
pub fn covering_grid(events: &[RawEvent], step_minutes: u32) -> Result<TimeGrid> {
    let step = step_minutes as i64;
    if step <= 0 {
        return Err(Error::Validation("step_minutes must be positive".into()));
    }
    let lo = events.iter().map(|e| e.timestamp).min();
    let hi = events.iter().map(|e| e.timestamp).max();
    match (lo, hi) {
        (Some(lo), Some(hi)) => {
            let start = lo.div_euclid(step) * step;
            let n = ((hi - start) as f64 / step as f64).round() as usize + 1;
            TimeGrid::new(start, step_minutes, n)
        }
        _ => Err(Error::InsufficientData("no events".into())),
    }
}

pub fn ingest_events_csv(
    path: impl AsRef<Path>,
    grid: TimeGrid,
    rules: &PreprocessConfig,
) -> Result<PatientRecord> {
    let path = path.as_ref();
    let events = read_events(std::fs::File::open(path)?)?;
    let patient_id = rules.patient_id.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "patient".into())
    });
    ingest_events(&events, grid, rules, &patient_id)
}

pub fn ingest_events(
    events: &[RawEvent],
    grid: TimeGrid,
    rules: &PreprocessConfig,
    patient_id: &str,
) -> Result<PatientRecord> {
    let n = grid.n_steps;
    let step = grid.step_minutes as i64;
    let mut glucose: Vec<Option<f64>> = vec![None; n];
    let mut cho = vec![0.0; n];
    let mut doses = DoseSeries::zeros(n);

    let invalid = |e: &RawEvent, msg: &str| Error::Validation(format!("line {}: {msg}", e.line));

    let mut basal_rows = Vec::new();
    let mut temp_rows = Vec::new();
    for e in events {
        if e.value < 0.0 {
            return Err(invalid(e, "negative value"));
        }
        let idx = grid
            .snap(e.timestamp)
            .map_err(|err| invalid(e, &err.to_string()))?;
        match e.kind {
            EventKind::Glucose => glucose[idx] = Some(e.value),
            EventKind::Cho => cho[idx] += e.value,
            EventKind::BolusNormal => doses.bolus[idx] += e.value,
            EventKind::BolusSquareDual => {
                let end = e
                    .end_timestamp
                    .ok_or_else(|| invalid(e, "square-dual bolus without end_timestamp"))?;
                if end < e.timestamp {
                    return Err(invalid(e, "end_timestamp precedes timestamp"));
                }
                let span = (((end - e.timestamp) as f64) / step as f64).round().max(1.0) as usize;
                if idx + span > n {
                    return Err(invalid(e, "square-dual window extends beyond grid"));
                }
                let share = e.value / span as f64;
                for d in &mut doses.bolus[idx..idx + span] {
                    *d += share;
                }
            }
            EventKind::BasalRate => basal_rows.push(e),
            EventKind::TempBasalRate => {
                if e.end_timestamp.is_none() {
                    return Err(invalid(e, "temporary basal without end_timestamp"));
                }
                temp_rows.push(e)
            }
        }
    }

    materialize_basal(&grid, &basal_rows, &temp_rows, rules, &mut doses.basal)?;

    let (glucose, observed_mask) =
        forward_fill(&glucose).map_err(|e| Error::Validation(format!("{patient_id}: {e}")))?;
    PatientRecord::new(
        patient_id,
        grid,
        glucose,
        cho,
        doses,
        observed_mask,
        StaticFeatures::default(),
    )
}

/// Per-minute effective basal rate, then one accumulated dose per block.
fn materialize_basal(
    grid: &TimeGrid,
    basal: &[&RawEvent],
    temp: &[&RawEvent],
    rules: &PreprocessConfig,
    out: &mut [f64],
) -> Result<()> {
    if basal.is_empty() && temp.is_empty() {
        return Ok(());
    }
    let t0 = grid.start;
    let t_end = grid.end();
    let minutes = (t_end - t0) as usize;
    let mut rate: Vec<Option<f64>> = vec![None; minutes];

    let mut fill = |from: i64, to: i64, r: f64| {
        let a = (from.max(t0) - t0) as usize;
        let b = (to.min(t_end) - t0).max(0) as usize;
        for slot in rate.iter_mut().take(b).skip(a) {
            *slot = Some(r);
        }
    };

    // A scheduled rate without an explicit end runs until the next scheduled change.
    let mut starts: Vec<i64> = basal.iter().map(|e| e.timestamp).collect();
    starts.sort_unstable();
    for e in basal {
        let end = e.end_timestamp.unwrap_or_else(|| {
            starts
                .iter()
                .copied()
                .find(|&s| s > e.timestamp)
                .unwrap_or(t_end)
        });
        fill(e.timestamp, end, e.value);
    }
    for e in temp {
        fill(e.timestamp, e.end_timestamp.unwrap_or(e.timestamp), e.value);
    }

    let block = rules.basal_interval_minutes.max(1) as i64;
    let step = grid.step_minutes as i64;
    let mut block_start = t0.div_euclid(block) * block;
    while block_start < t_end {
        let a = (block_start.max(t0) - t0) as usize;
        let b = ((block_start + block).min(t_end) - t0) as usize;
        let mut total = 0.0;
        let mut first_active = None;
        for (m, r) in rate[a..b].iter().enumerate() {
            if let Some(r) = r {
                total += r / 60.0;
                first_active.get_or_insert(a + m);
            }
        }
        if let Some(m) = first_active {
            if total > 0.0 {
                out[m / step as usize] += total;
            }
        }
        block_start += block;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct AlignedRow {
    timestamp: i64,
    glucose: f64,
    cho: f64,
    bolus: f64,
    basal: f64,
    observed: u8,
}

pub fn write_aligned<W: Write>(record: &PatientRecord, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for i in 0..record.len() {
        w.serialize(AlignedRow {
            timestamp: record.grid.timestamp(i),
            glucose: record.glucose[i],
            cho: record.cho[i],
            bolus: record.doses.bolus[i],
            basal: record.doses.basal[i],
            observed: u8::from(record.observed_mask[i]),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `timestamp,glucose,cho,bolus,basal,observed`.
pub fn write_aligned_csv(record: &PatientRecord, path: impl AsRef<Path>) -> Result<()> {
    write_aligned(record, std::fs::File::create(path)?)
}

pub fn read_aligned<R: Read>(reader: R, patient_id: &str) -> Result<PatientRecord> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows: Vec<AlignedRow> = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        let row: AlignedRow = row.map_err(|e| Error::Parse {
            line: i + 2,
            msg: e.to_string(),
        })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData(format!("{patient_id}: no rows")));
    }
    let step = if rows.len() > 1 {
        rows[1].timestamp - rows[0].timestamp
    } else {
        super::DEFAULT_STEP_MINUTES as i64
    };
    if step <= 0 {
        return Err(Error::Validation(format!("{patient_id}: timestamps not increasing")));
    }
    for (i, w) in rows.windows(2).enumerate() {
        if w[1].timestamp - w[0].timestamp != step {
            return Err(Error::Parse {
                line: i + 3,
                msg: "timestamps are not evenly spaced".into(),
            });
        }
    }
    let grid = TimeGrid::new(rows[0].timestamp, step as u32, rows.len())?;
    PatientRecord::new(
        patient_id,
        grid,
        rows.iter().map(|r| r.glucose).collect(),
        rows.iter().map(|r| r.cho).collect(),
        DoseSeries {
            bolus: rows.iter().map(|r| r.bolus).collect(),
            basal: rows.iter().map(|r| r.basal).collect(),
        },
        rows.iter().map(|r| r.observed != 0).collect(),
        StaticFeatures::default(),
    )
}

pub fn read_aligned_csv(path: impl AsRef<Path>, patient_id: &str) -> Result<PatientRecord> {
    read_aligned(std::fs::File::open(path)?, patient_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HOUR: i64 = 60;

    fn ingest(csv_text: &str, grid: TimeGrid) -> Result<PatientRecord> {
        let events = read_events(csv_text.as_bytes())?;
        ingest_events(&events, grid, &PreprocessConfig::default(), "t")
    }

    #[test]
    fn square_dual_split_evenly() {
        let grid = TimeGrid::new(0, 5, 12).unwrap();
        let r = ingest(
            "timestamp,kind,value,end_timestamp\n0,glucose,100,\n0,bolus_square_dual,6,30\n",
            grid,
        )
        .unwrap();
        assert_eq!(&r.doses.bolus[..6], &[1.0; 6]);
        assert!(r.doses.bolus[6..].iter().all(|&d| d == 0.0));
    }

    #[test]
    fn same_minute_boluses_summed() {
        let grid = TimeGrid::new(0, 5, 4).unwrap();
        let r = ingest(
            "timestamp,kind,value,end_timestamp\n0,glucose,100,\n10,bolus_normal,2,\n10,bolus_normal,3,\n",
            grid,
        )
        .unwrap();
        assert_eq!(r.doses.bolus, vec![0.0, 0.0, 5.0, 0.0]);
    }

    #[test]
    fn temp_basal_supersedes() {
        // 10:00 to 12:00 on a grid starting at 10:00.
        let t10 = 10 * HOUR;
        let grid = TimeGrid::new(t10, 5, 24).unwrap();
        let text = format!(
            "timestamp,kind,value,end_timestamp\n{t10},glucose,120,\n{t10},basal_rate,1.2,{}\n{},temp_basal_rate,0.6,{}\n",
            t10 + 2 * HOUR,
            t10 + HOUR,
            t10 + 2 * HOUR
        );
        let r = ingest(&text, grid).unwrap();
        let mut expect = vec![0.0; 24];
        expect[0] = 1.2;
        expect[12] = 0.6;
        for (a, b) in r.doses.basal.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", r.doses.basal);
        }
    }

    #[test]
    fn later_basal_row_wins_on_overlap() {
        let grid = TimeGrid::new(0, 5, 12).unwrap();
        let r = ingest(
            "timestamp,kind,value,end_timestamp\n0,glucose,120,\n0,basal_rate,1.0,60\n0,basal_rate,2.0,60\n",
            grid,
        )
        .unwrap();
        assert!((r.doses.basal[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn partial_trailing_hour() {
        let grid = TimeGrid::new(0, 5, 24).unwrap();
        let r = ingest(
            "timestamp,kind,value,end_timestamp\n0,glucose,120,\n0,basal_rate,1.2,90\n",
            grid,
        )
        .unwrap();
        assert!((r.doses.basal[0] - 1.2).abs() < 1e-12);
        assert!((r.doses.basal[12] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn open_ended_basal_runs_to_next_change() {
        let grid = TimeGrid::new(0, 5, 24).unwrap();
        let r = ingest(
            "timestamp,kind,value,end_timestamp\n0,glucose,120,\n0,basal_rate,1.0,\n60,basal_rate,0.5,\n",
            grid,
        )
        .unwrap();
        assert!((r.doses.basal[0] - 1.0).abs() < 1e-12);
        assert!((r.doses.basal[12] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn missing_glucose_forward_filled() {
        let grid = TimeGrid::new(0, 5, 4).unwrap();
        let r = ingest(
            "timestamp,kind,value,end_timestamp\n0,glucose,100,\n15,glucose,90,\n",
            grid,
        )
        .unwrap();
        assert_eq!(r.glucose, vec![100.0, 100.0, 100.0, 90.0]);
        assert_eq!(r.observed_mask, vec![true, false, false, true]);
    }

    #[test]
    fn errors() {
        let grid = TimeGrid::new(0, 5, 4).unwrap();
        let err = ingest("timestamp,kind,value\n0,glucose,100\n5,glucose,abc\n", grid).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = ingest("timestamp,kind,value\n0,glucose,100\n5,bolus_normal,-1\n", grid).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let err = ingest("timestamp,kind,value\n0,glucose,100\n500,cho,10\n", grid).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let err = ingest("timestamp,kind,value\n0,walk,100\n", grid).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        // No glucose at the first step.
        assert!(ingest("timestamp,kind,value\n5,glucose,100\n", grid).is_err());
    }

    #[test]
    fn aligned_round_trip() {
        let grid = TimeGrid::new(0, 5, 4).unwrap();
        let r = ingest(
            "timestamp,kind,value,end_timestamp\n0,glucose,100.125,\n15,glucose,90,\n5,bolus_normal,0.1,\n10,cho,45\n",
            grid,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_aligned(&r, &mut buf).unwrap();
        let back = read_aligned(buf.as_slice(), "t").unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn covering_grid_spans_events() {
        let events = read_events("timestamp,kind,value\n7,glucose,1\n31,glucose,2\n".as_bytes()).unwrap();
        let g = covering_grid(&events, 5).unwrap();
        assert_eq!(g.start, 5);
        assert_eq!(g.snap(31).unwrap(), g.n_steps - 1);
    }
}
