use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use crate::data::{RawTrack, TrackPoint, SOURCE_DT};
use crate::{Error, Result};

const FEET_TO_METERS: f64 = 0.3048;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthUnit {
    Feet,
    Meters,
}

impl LengthUnit {
    fn to_meters(self, v: f64) -> f64 {
        match self {
            LengthUnit::Feet => v * FEET_TO_METERS,
            LengthUnit::Meters => v,
        }
    }
}

impl FromStr for LengthUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "feet" | "ft" => Ok(LengthUnit::Feet),
            "meters" | "m" => Ok(LengthUnit::Meters),
            other => Err(Error::usage(format!("unknown unit {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestReport {
    /// One track per vehicle, ordered by vehicle id.
    pub tracks: Vec<RawTrack>,
    /// Tracks dropped because their frames were not strictly increasing.
    pub rejected_tracks: usize,
}

/// Reads an NGSIM-style CSV with `Vehicle_ID`, `Frame_ID`, `Local_X` and
/// `Local_Y` columns (matched case-insensitively; other columns ignored).
pub fn ingest_csv(path: &Path, unit: LengthUnit) -> Result<IngestReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, path, unit)
}

/// [`ingest_csv`] over any reader; `path` only labels errors.
pub fn ingest_reader<R: Read>(reader: R, path: &Path, unit: LengthUnit) -> Result<IngestReport> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);

    let record_err = |line: u64, message: String| Error::Record {
        path: path.to_path_buf(),
        line,
        message,
    };

    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(record_err(1, e.to_string())),
    };
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(IngestReport::default());
    }
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| record_err(1, format!("missing column {name}")))
    };
    let (c_id, c_frame, c_x, c_y) = (
        column("Vehicle_ID")?,
        column("Frame_ID")?,
        column("Local_X")?,
        column("Local_Y")?,
    );

    // Vehicles whose frames went backwards keep being read (to consume
    // their rows) but are dropped at the end.
    let mut tracks: BTreeMap<i64, (Vec<TrackPoint>, bool)> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            record_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |idx: usize, name: &str| {
            record
                .get(idx)
                .ok_or_else(|| record_err(line, format!("missing {name}")))
        };
        let parse_int = |idx: usize, name: &str| -> Result<i64> {
            let raw = field(idx, name)?;
            raw.parse::<i64>()
                .or_else(|_| raw.parse::<f64>().map(|v| v as i64).map_err(|_| ()))
                .map_err(|_| record_err(line, format!("{name} {raw:?} is not an integer")))
        };
        let parse_float = |idx: usize, name: &str| -> Result<f64> {
            let raw = field(idx, name)?;
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| record_err(line, format!("{name} {raw:?} is not a finite number")))
        };

        let id = parse_int(c_id, "Vehicle_ID")?;
        let frame = parse_int(c_frame, "Frame_ID")?;
        let x = unit.to_meters(parse_float(c_x, "Local_X")?);
        let y = unit.to_meters(parse_float(c_y, "Local_Y")?);

        let (points, ok) = tracks.entry(id).or_insert_with(|| (Vec::new(), true));
        if let Some(last) = points.last() {
            if frame <= last.frame {
                *ok = false;
            }
        }
        points.push(TrackPoint {
            frame,
            x,
            y,
            t: frame as f64 * SOURCE_DT,
        });
    }

    let mut report = IngestReport::default();
    for (vehicle_id, (points, ok)) in tracks {
        if ok {
            report.tracks.push(RawTrack { vehicle_id, points });
        } else {
            report.rejected_tracks += 1;
        }
    }
    if report.rejected_tracks > 0 {
        log::warn!(
            "{}: rejected {} track(s) with non-increasing frames",
            path.display(),
            report.rejected_tracks
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ingest(text: &str, unit: LengthUnit) -> Result<IngestReport> {
        ingest_reader(text.as_bytes(), Path::new("test.csv"), unit)
    }

    #[test]
    fn converts_feet_to_meters() {
        let r = ingest("Vehicle_ID,Frame_ID,Local_X,Local_Y\n1,1,10,0\n", LengthUnit::Feet).unwrap();
        let p = r.tracks[0].points[0];
        assert!((p.x - 3.048).abs() < 1e-12);
        assert_eq!(p.y, 0.0);
        assert_eq!(r.rejected_tracks, 0);
    }

    #[test]
    fn empty_file_gives_no_tracks() {
        let r = ingest("", LengthUnit::Meters).unwrap();
        assert!(r.tracks.is_empty());
        assert_eq!(r.rejected_tracks, 0);
        let r = ingest("Vehicle_ID,Frame_ID,Local_X,Local_Y\n", LengthUnit::Meters).unwrap();
        assert!(r.tracks.is_empty());
    }

    #[test]
    fn repeated_frame_rejects_track() {
        let text = "vehicle_id,frame_id,local_x,local_y\n\
                    1,1,0,0\n1,2,0,1\n1,2,0,2\n1,3,0,3\n\
                    2,1,5,0\n2,2,5,1\n";
        let r = ingest(text, LengthUnit::Meters).unwrap();
        assert_eq!(r.rejected_tracks, 1);
        assert_eq!(r.tracks.len(), 1);
        assert_eq!(r.tracks[0].vehicle_id, 2);
    }

    #[test]
    fn headers_match_case_insensitively_and_extra_columns_are_ignored() {
        let text = "Global_Time,LOCAL_Y,Frame_Id,Lane_ID,local_x,VEHICLE_ID\n0,2,7,3,1,9\n";
        let r = ingest(text, LengthUnit::Meters).unwrap();
        let p = r.tracks[0].points[0];
        assert_eq!((r.tracks[0].vehicle_id, p.frame, p.x, p.y), (9, 7, 1.0, 2.0));
        assert!((p.t - 0.7).abs() < 1e-12);
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let text = "Vehicle_ID,Frame_ID,Local_X,Local_Y\n1,1,0,0\n1,2,abc,0\n";
        match ingest(text, LengthUnit::Meters) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected a record error, got {other:?}"),
        }
    }

    #[test]
    fn tracks_are_ordered_by_vehicle_id() {
        let text = "Vehicle_ID,Frame_ID,Local_X,Local_Y\n5,1,0,0\n2,1,0,0\n9,1,0,0\n";
        let ids: Vec<i64> = ingest(text, LengthUnit::Meters)
            .unwrap()
            .tracks
            .iter()
            .map(|t| t.vehicle_id)
            .collect();
        assert_eq!(ids, vec![2, 5, 9]);
    }
}
