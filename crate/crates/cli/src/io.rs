//! Dataset CSV formats.
//!
//! The native ("companion") format uses two files. A subjects file carries
//! one row per subject — `id,y_left,y_right,kind` plus one column per
//! time-fixed covariate — and a long file carries the piecewise-constant
//! trajectories, one row per segment: `id,start,end` plus one column per
//! time-varying covariate. Segment rows must tile `[0, …)` contiguously; the
//! final `end` only bounds its own segment (values extend rightwards), so it
//! carries no information beyond validation.
//!
//! The alternate ("status") format is the classic long layout in which a
//! per-segment status flag encodes the censoring kind: 0 on every row means
//! right censoring at the last `end`; the first 0→1 flip opens the
//! interval-censoring bracket `[start of that row, last end]` (left censoring
//! when the flip is on the first row); a final-row status of 2 marks an
//! exactly observed event at that row's `end`. Reversals (1 back to 0, or
//! anything after a 2) are rejected.
//!
//! Times and covariates are serialized with the shortest decimal string that
//! parses back to the identical float, so emit followed by ingest is the
//! identity; `inf` spells infinity.

use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ndarray::{Array1, Array2};

use aft_core::{CensoringKind, Dataset, StepTrajectory, SubjectRecord};

/// Covariate column names, preserved through fit artifacts so prediction
/// scenarios can address covariates by name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnNames {
    pub x: Vec<String>,
    pub z: Vec<String>,
}

/// A parsed dataset together with its covariate names.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub data: Dataset,
    pub columns: ColumnNames,
}

/// Shortest round-trip decimal form (`inf` for infinity).
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(field: &str, what: &str, at: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| anyhow!("{at}: {what} `{field}` is not a number"))
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))
}

// ---------------------------------------------------------------------------
// Companion format.
// ---------------------------------------------------------------------------

struct SubjectStub {
    id: String,
    y_left: f64,
    y_right: f64,
    kind: CensoringKind,
    x: Array1<f64>,
}

fn parse_kind(field: &str, at: &str) -> Result<CensoringKind> {
    match field.to_ascii_lowercase().as_str() {
        "event" => Ok(CensoringKind::Event),
        "left" => Ok(CensoringKind::Left),
        "interval" => Ok(CensoringKind::Interval),
        "right" => Ok(CensoringKind::Right),
        other => bail!("{at}: unknown censoring kind `{other}` (expected event, left, interval, or right)"),
    }
}

fn read_subjects(path: &Path) -> Result<(Vec<SubjectStub>, Vec<String>)> {
    let mut rdr = open_csv(path)?;
    let headers = rdr
        .headers()
        .with_context(|| format!("{}: missing header row", path.display()))?
        .clone();
    let fixed = ["id", "y_left", "y_right", "kind"];
    if headers.len() < fixed.len()
        || headers.iter().take(4).collect::<Vec<_>>() != fixed
    {
        bail!(
            "{}: subject files must start with columns id,y_left,y_right,kind",
            path.display()
        );
    }
    let x_names: Vec<String> = headers.iter().skip(4).map(str::to_owned).collect();

    let mut stubs = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2;
        let at = format!("{} line {line}", path.display());
        let record = record.with_context(|| at.clone())?;
        if record.len() != headers.len() {
            bail!("{at}: expected {} fields, found {}", headers.len(), record.len());
        }
        let id = record[0].to_owned();
        if id.is_empty() {
            bail!("{at}: empty id");
        }
        if let Some(prev) = seen.insert(id.clone(), line) {
            bail!("{at}: duplicate id `{id}` (first seen on line {prev})");
        }
        let at_id = format!("{at} (id `{id}`)");
        let y_left = parse_f64(&record[1], "y_left", &at_id)?;
        let y_right = parse_f64(&record[2], "y_right", &at_id)?;
        let kind = parse_kind(&record[3], &at_id)?;
        let mut x = Vec::with_capacity(x_names.len());
        for (j, name) in x_names.iter().enumerate() {
            let field = &record[4 + j];
            if field.is_empty() {
                bail!("{at_id}: missing value for time-fixed covariate `{name}`");
            }
            x.push(parse_f64(field, name, &at_id)?);
        }
        stubs.push(SubjectStub {
            id,
            y_left,
            y_right,
            kind,
            x: Array1::from(x),
        });
    }
    Ok((stubs, x_names))
}

struct Segment {
    start: f64,
    end: f64,
    values: Vec<Option<f64>>,
    line: usize,
}

fn read_segments(
    path: &Path,
    with_status: bool,
) -> Result<(HashMap<String, Vec<Segment>>, Vec<String>, Vec<String>, HashMap<String, Vec<u8>>)> {
    let mut rdr = open_csv(path)?;
    let headers = rdr
        .headers()
        .with_context(|| format!("{}: missing header row", path.display()))?
        .clone();
    let fixed: &[&str] = if with_status {
        &["id", "start", "end", "status"]
    } else {
        &["id", "start", "end"]
    };
    if headers.len() < fixed.len()
        || headers.iter().take(fixed.len()).collect::<Vec<_>>() != fixed
    {
        bail!(
            "{}: trajectory files must start with columns {}",
            path.display(),
            fixed.join(",")
        );
    }
    let z_names: Vec<String> = headers.iter().skip(fixed.len()).map(str::to_owned).collect();
    if !with_status && z_names.iter().any(|n| n == "status") {
        bail!(
            "{}: found a `status` column; status-coded files are read without --subjects",
            path.display()
        );
    }

    let mut segments: HashMap<String, Vec<Segment>> = HashMap::new();
    let mut statuses: HashMap<String, Vec<u8>> = HashMap::new();
    let mut order = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2;
        let at = format!("{} line {line}", path.display());
        let record = record.with_context(|| at.clone())?;
        if record.len() != headers.len() {
            bail!("{at}: expected {} fields, found {}", headers.len(), record.len());
        }
        let id = record[0].to_owned();
        if id.is_empty() {
            bail!("{at}: empty id");
        }
        let at_id = format!("{at} (id `{id}`)");
        let start = parse_f64(&record[1], "start", &at_id)?;
        let end = parse_f64(&record[2], "end", &at_id)?;
        let status = if with_status {
            match record[3].trim() {
                "0" => 0u8,
                "1" => 1,
                "2" => 2,
                other => bail!("{at_id}: unknown status code `{other}` (expected 0, 1, or 2)"),
            }
        } else {
            0
        };
        let mut values = Vec::with_capacity(z_names.len());
        for (j, _) in z_names.iter().enumerate() {
            let field = &record[fixed.len() + j];
            if field.is_empty() {
                values.push(None);
            } else {
                values.push(Some(parse_f64(field, &z_names[j], &at_id)?));
            }
        }
        if !segments.contains_key(&id) {
            order.push(id.clone());
        }
        segments.entry(id.clone()).or_default().push(Segment {
            start,
            end,
            values,
            line,
        });
        statuses.entry(id).or_default().push(status);
    }
    Ok((segments, z_names, order, statuses))
}

/// Sorts one subject's segments, checks that they tile [0, last end), fills
/// carried-forward covariate cells, and builds the trajectory.
fn build_trajectory(
    path: &Path,
    id: &str,
    segments: &mut [Segment],
    q: usize,
) -> Result<StepTrajectory> {
    segments.sort_by(|a, b| a.start.total_cmp(&b.start));
    let first = &segments[0];
    if first.start != 0.0 {
        bail!(
            "{} line {} (id `{id}`): first segment must start at 0, got {}",
            path.display(),
            first.line,
            first.start
        );
    }
    let mut times = Vec::with_capacity(segments.len());
    let mut values = Array2::zeros((segments.len(), q));
    let mut prev_end: Option<f64> = None;
    let mut carried: Vec<f64> = Vec::new();
    for (row, seg) in segments.iter().enumerate() {
        let at = format!("{} line {} (id `{id}`)", path.display(), seg.line);
        if !(seg.end > seg.start) {
            bail!("{at}: segment end {} must exceed start {}", seg.end, seg.start);
        }
        if let Some(prev) = prev_end {
            if seg.start != prev {
                bail!(
                    "{at}: segment starts at {} but the previous one ended at {prev} (segments must be contiguous and non-overlapping)",
                    seg.start
                );
            }
        }
        prev_end = Some(seg.end);
        times.push(seg.start);
        for j in 0..q {
            let v = match seg.values[j] {
                Some(v) => v,
                None if row > 0 => carried[j],
                None => bail!("{at}: first segment has no value to carry forward"),
            };
            values[(row, j)] = v;
        }
        carried = (0..q).map(|j| values[(row, j)]).collect();
    }
    StepTrajectory::new(times, values)
        .map_err(|e| anyhow!("{} (id `{id}`): {e}", path.display()))
}

fn constant_empty_trajectory() -> StepTrajectory {
    StepTrajectory::new(vec![0.0], Array2::zeros((1, 0))).expect("constant trajectory is valid")
}

/// Reads the companion format: a subjects file plus, when the model has
/// time-varying covariates, a long trajectory file.
pub fn ingest(subjects_path: &Path, long_path: Option<&Path>) -> Result<Ingested> {
    let (stubs, x_names) = read_subjects(subjects_path)?;
    if stubs.is_empty() {
        bail!("{}: no subjects", subjects_path.display());
    }

    let (mut segments, z_names) = match long_path {
        Some(path) => {
            let (segments, z_names, _, _) = read_segments(path, false)?;
            (segments, z_names)
        }
        None => (HashMap::new(), Vec::new()),
    };

    let q = z_names.len();
    let mut subjects = Vec::with_capacity(stubs.len());
    for stub in stubs {
        let z = match long_path {
            Some(path) => {
                let mut segs = segments.remove(&stub.id).ok_or_else(|| {
                    anyhow!(
                        "{}: subject `{}` has no trajectory rows",
                        path.display(),
                        stub.id
                    )
                })?;
                build_trajectory(path, &stub.id, &mut segs, q)?
            }
            None => constant_empty_trajectory(),
        };
        let record = SubjectRecord {
            id: stub.id,
            y_left: stub.y_left,
            y_right: stub.y_right,
            kind: stub.kind,
            x: stub.x,
            z,
        };
        record
            .validate()
            .map_err(|e| anyhow!("{}: subject `{}`: {e}", subjects_path.display(), record.id))?;
        subjects.push(record);
    }
    if let (Some(path), Some(extra)) = (long_path, segments.keys().next()) {
        bail!(
            "{}: trajectory rows for unknown subject `{extra}`",
            path.display()
        );
    }

    let data = Dataset::with_dims(subjects, x_names.len(), q)?;
    Ok(Ingested {
        data,
        columns: ColumnNames {
            x: x_names,
            z: z_names,
        },
    })
}

// ---------------------------------------------------------------------------
// Status-coded format.
// ---------------------------------------------------------------------------

/// Reads the status-coded long format (no subjects file, no time-fixed
/// covariates); kinds are inferred from the per-segment status flags.
pub fn ingest_status(long_path: &Path) -> Result<Ingested> {
    let (mut segments, z_names, order, statuses) = read_segments(long_path, true)?;
    if order.is_empty() {
        bail!("{}: no subjects", long_path.display());
    }
    let q = z_names.len();
    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut segs = segments.remove(&id).expect("grouped by id");
        // Sort the statuses with their segments.
        let mut idx: Vec<usize> = (0..segs.len()).collect();
        idx.sort_by(|&a, &b| segs[a].start.total_cmp(&segs[b].start));
        let status: Vec<u8> = idx.iter().map(|&k| statuses[&id][k]).collect();
        let z = build_trajectory(long_path, &id, &mut segs, q)?;
        let last_end = segs.last().expect("at least one segment").end;

        let flip = status.iter().position(|&s| s != 0);
        let (kind, y_left, y_right) = match flip {
            None => (CensoringKind::Right, last_end, f64::INFINITY),
            Some(k) if status[k] == 2 => {
                if k + 1 != status.len() {
                    bail!(
                        "{}: subject `{id}`: status 2 (exact event) must be on the final segment",
                        long_path.display()
                    );
                }
                (CensoringKind::Event, last_end, last_end)
            }
            Some(k) => {
                if status[k..].iter().any(|&s| s != 1) {
                    bail!(
                        "{}: subject `{id}`: status may not fall back to 0 (or jump to 2) once the event bracket has opened",
                        long_path.display()
                    );
                }
                let y_left = segs[k].start;
                if y_left == 0.0 {
                    (CensoringKind::Left, 0.0, last_end)
                } else {
                    (CensoringKind::Interval, y_left, last_end)
                }
            }
        };
        let record = SubjectRecord {
            id,
            y_left,
            y_right,
            kind,
            x: Array1::zeros(0),
            z,
        };
        record
            .validate()
            .map_err(|e| anyhow!("{}: subject `{}`: {e}", long_path.display(), record.id))?;
        subjects.push(record);
    }
    let data = Dataset::with_dims(subjects, 0, q)?;
    Ok(Ingested {
        data,
        columns: ColumnNames {
            x: Vec::new(),
            z: z_names,
        },
    })
}

// ---------------------------------------------------------------------------
// Emission.
// ---------------------------------------------------------------------------

/// Writes a dataset in the companion format. The trajectory file is written
/// whenever a path is given; each subject's final segment is closed at its
/// observed endpoint (or one unit past the last breakpoint when the endpoint
/// does not reach it).
pub fn emit(
    data: &Dataset,
    columns: &ColumnNames,
    subjects_path: &Path,
    long_path: Option<&Path>,
) -> Result<()> {
    if columns.x.len() != data.p() || columns.z.len() != data.q() {
        bail!(
            "column names ({}, {}) do not match dataset dimensions ({}, {})",
            columns.x.len(),
            columns.z.len(),
            data.p(),
            data.q()
        );
    }
    let mut w = csv::Writer::from_path(subjects_path)
        .with_context(|| format!("cannot write {}", subjects_path.display()))?;
    let mut header = vec!["id", "y_left", "y_right", "kind"];
    header.extend(columns.x.iter().map(String::as_str));
    w.write_record(&header)?;
    for s in data.subjects() {
        let kind = match s.kind {
            CensoringKind::Event => "event",
            CensoringKind::Left => "left",
            CensoringKind::Interval => "interval",
            CensoringKind::Right => "right",
        };
        let mut row = vec![
            s.id.clone(),
            fmt_f64(s.y_left),
            fmt_f64(s.y_right),
            kind.to_owned(),
        ];
        row.extend(s.x.iter().map(|&v| fmt_f64(v)));
        w.write_record(&row)?;
    }
    w.flush()?;

    let Some(long_path) = long_path else {
        return Ok(());
    };
    let mut w = csv::Writer::from_path(long_path)
        .with_context(|| format!("cannot write {}", long_path.display()))?;
    let mut header = vec!["id", "start", "end"];
    header.extend(columns.z.iter().map(String::as_str));
    w.write_record(&header)?;
    for s in data.subjects() {
        let times = s.z.times();
        let anchor = if s.y_right.is_finite() { s.y_right } else { s.y_left };
        for (row, &start) in times.iter().enumerate() {
            let end = match times.get(row + 1) {
                Some(&next) => next,
                None if anchor > start => anchor,
                None => start + 1.0,
            };
            let mut rec = vec![s.id.clone(), fmt_f64(start), fmt_f64(end)];
            rec.extend((0..data.q()).map(|j| fmt_f64(s.z.values()[(row, j)])));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Prediction scenarios.
// ---------------------------------------------------------------------------

/// One survival-curve request: covariate values plus a binary trajectory.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub x: Array1<f64>,
    pub z: StepTrajectory,
    pub tau: f64,
}

/// Reads a scenario file: `name,traj,tau` plus one column per fitted
/// time-fixed covariate (matched by name, any order). `traj` encodes a
/// single binary time-varying covariate as its value before and after the
/// change point `tau` — `00`, `01`, `10`, or `11`.
pub fn read_scenarios(path: &Path, x_columns: &[String], q: usize) -> Result<Vec<Scenario>> {
    if q > 1 {
        bail!("prediction scenarios support at most one time-varying covariate, the fit has {q}");
    }
    let mut rdr = open_csv(path)?;
    let headers = rdr
        .headers()
        .with_context(|| format!("{}: missing header row", path.display()))?
        .clone();
    let mut name_col = None;
    let mut traj_col = None;
    let mut tau_col = None;
    let mut x_cols: Vec<Option<usize>> = vec![None; x_columns.len()];
    for (i, h) in headers.iter().enumerate() {
        match h {
            "name" => name_col = Some(i),
            "traj" => traj_col = Some(i),
            "tau" => tau_col = Some(i),
            other => {
                let Some(j) = x_columns.iter().position(|c| c == other) else {
                    bail!(
                        "{}: scenario column `{other}` does not match any fitted covariate (expected {})",
                        path.display(),
                        x_columns.join(", ")
                    );
                };
                x_cols[j] = Some(i);
            }
        }
    }
    let name_col = name_col
        .ok_or_else(|| anyhow!("{}: scenario files need a `name` column", path.display()))?;
    for (j, col) in x_cols.iter().enumerate() {
        if col.is_none() {
            bail!(
                "{}: scenario file is missing fitted covariate column `{}`",
                path.display(),
                x_columns[j]
            );
        }
    }
    if q == 1 && traj_col.is_none() {
        bail!("{}: scenario files need a `traj` column for the time-varying covariate", path.display());
    }

    let mut out: Vec<Scenario> = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2;
        let at = format!("{} line {line}", path.display());
        let record = record.with_context(|| at.clone())?;
        let name = record[name_col].to_owned();
        if name.is_empty() {
            bail!("{at}: empty scenario name");
        }
        if out.iter().any(|s| s.name == name) {
            bail!("{at}: duplicate scenario name `{name}`");
        }
        let mut x = Array1::zeros(x_columns.len());
        for (j, col) in x_cols.iter().enumerate() {
            x[j] = parse_f64(&record[col.expect("checked")], &x_columns[j], &at)?;
        }
        let tau = match tau_col {
            Some(i) if !record[i].is_empty() => {
                let t = parse_f64(&record[i], "tau", &at)?;
                if !(t >= 0.0) {
                    bail!("{at}: tau must be nonnegative, got {t}");
                }
                t
            }
            _ => 0.0,
        };
        let z = if q == 0 {
            constant_empty_trajectory()
        } else {
            let traj = &record[traj_col.expect("checked")];
            let (a, b) = match traj {
                "00" => (0.0, 0.0),
                "01" => (0.0, 1.0),
                "10" => (1.0, 0.0),
                "11" => (1.0, 1.0),
                other => bail!("{at}: unknown trajectory spec `{other}` (expected 00, 01, 10, or 11)"),
            };
            if a == b || tau == 0.0 {
                StepTrajectory::new(vec![0.0], Array2::from_shape_vec((1, 1), vec![if tau == 0.0 { b } else { a }])?)?
            } else {
                StepTrajectory::new(
                    vec![0.0, tau],
                    Array2::from_shape_vec((2, 1), vec![a, b])?,
                )?
            }
        };
        out.push(Scenario { name, x, z, tau });
    }
    if out.is_empty() {
        bail!("{}: no scenarios", path.display());
    }
    Ok(out)
}

/// Writes one CSV table; every cell is already formatted.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::TempDir;

    fn write_file(dir: &TempDir, name: &str, content: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    #[test]
    fn status_format_reads_a_right_censored_subject() {
        let dir = TempDir::new().unwrap();
        let long = write_file(
            &dir,
            "long.csv",
            "id,start,end,status,z1\n1,0,0.4,0,0\n1,0.4,1.3,0,1\n",
        );
        let ing = ingest_status(&long).unwrap();
        assert_eq!(ing.data.len(), 1);
        let s = &ing.data.subjects()[0];
        assert_eq!(s.kind, CensoringKind::Right);
        assert_eq!(s.y_left, 1.3);
        assert!(s.y_right.is_infinite());
        assert_eq!(s.z.times(), &[0.0, 0.4]);
        assert_eq!(s.z.value_at(0.0)[0], 0.0);
        assert_eq!(s.z.value_at(0.5)[0], 1.0);
        assert!(ing.columns.x.is_empty());
        assert_eq!(ing.columns.z, vec!["z1".to_owned()]);
    }

    #[test]
    fn status_format_reads_an_interval_censored_subject() {
        let dir = TempDir::new().unwrap();
        let long = write_file(
            &dir,
            "long.csv",
            "id,start,end,status,z1\n2,0,0.5,0,0\n2,0.5,0.9,1,1\n2,0.9,2,1,1\n",
        );
        let ing = ingest_status(&long).unwrap();
        let s = &ing.data.subjects()[0];
        assert_eq!(s.kind, CensoringKind::Interval);
        assert_eq!(s.y_left, 0.5);
        assert_eq!(s.y_right, 2.0);
    }

    #[test]
    fn status_format_reads_left_censoring_and_exact_events() {
        let dir = TempDir::new().unwrap();
        let long = write_file(
            &dir,
            "long.csv",
            "id,start,end,status,z1\na,0,0.8,1,0\nb,0,0.6,0,1\nb,0.6,1.1,2,0\n",
        );
        let ing = ingest_status(&long).unwrap();
        let a = &ing.data.subjects()[0];
        assert_eq!(a.kind, CensoringKind::Left);
        assert_eq!((a.y_left, a.y_right), (0.0, 0.8));
        let b = &ing.data.subjects()[1];
        assert_eq!(b.kind, CensoringKind::Event);
        assert_eq!((b.y_left, b.y_right), (1.1, 1.1));
    }

    #[test]
    fn status_reversal_is_rejected() {
        let dir = TempDir::new().unwrap();
        let long = write_file(
            &dir,
            "long.csv",
            "id,start,end,status,z1\n1,0,0.5,1,0\n1,0.5,1,0,0\n",
        );
        let err = ingest_status(&long).unwrap_err().to_string();
        assert!(err.contains("fall back"), "unexpected message: {err}");
    }

    #[test]
    fn companion_round_trip_is_identity() {
        let dir = TempDir::new().unwrap();
        let subjects = write_file(
            &dir,
            "subjects.csv",
            "id,y_left,y_right,kind,age,treat\n\
             s0,0.25,0.25,event,0.5,1\n\
             s1,1.75,inf,right,-0.25,0\n\
             s2,0,0.5,left,0.125,1\n\
             s3,0.5,1.5,interval,0.75,0\n",
        );
        let long = write_file(
            &dir,
            "long.csv",
            "id,start,end,z1\ns0,0,0.25,0\n\
             s1,0,0.7,1\ns1,0.7,1.75,0\n\
             s2,0,0.5,1\n\
             s3,0,0.4,0\ns3,0.4,1.1,1\ns3,1.1,1.5,0\n",
        );
        let ing = ingest(&subjects, Some(&long)).unwrap();
        assert_eq!(ing.data.p(), 2);
        assert_eq!(ing.data.q(), 1);

        let out_s = dir.path().join("out_subjects.csv");
        let out_l = dir.path().join("out_long.csv");
        emit(&ing.data, &ing.columns, &out_s, Some(&out_l)).unwrap();
        let again = ingest(&out_s, Some(&out_l)).unwrap();
        assert_eq!(ing.data, again.data);
        assert_eq!(ing.columns, again.columns);
    }

    #[test]
    fn missing_z_cells_carry_forward() {
        let dir = TempDir::new().unwrap();
        let subjects = write_file(
            &dir,
            "subjects.csv",
            "id,y_left,y_right,kind\ns0,1,inf,right\n",
        );
        let long = write_file(
            &dir,
            "long.csv",
            "id,start,end,z1,z2\ns0,0,0.5,1,4\ns0,0.5,1,,8\n",
        );
        let ing = ingest(&subjects, Some(&long)).unwrap();
        let z = &ing.data.subjects()[0].z;
        assert_eq!(z.value_at(0.75).to_vec(), vec![1.0, 8.0]);
    }

    #[test]
    fn missing_first_z_cell_is_an_error() {
        let dir = TempDir::new().unwrap();
        let subjects = write_file(
            &dir,
            "subjects.csv",
            "id,y_left,y_right,kind\ns0,1,inf,right\n",
        );
        let long = write_file(&dir, "long.csv", "id,start,end,z1\ns0,0,0.5,\n");
        let err = ingest(&subjects, Some(&long)).unwrap_err().to_string();
        assert!(err.contains("carry forward"), "unexpected message: {err}");
    }

    #[test]
    fn non_contiguous_segments_are_rejected_with_row_context() {
        let dir = TempDir::new().unwrap();
        let subjects = write_file(
            &dir,
            "subjects.csv",
            "id,y_left,y_right,kind\ns0,2,inf,right\n",
        );
        let long = write_file(
            &dir,
            "long.csv",
            "id,start,end,z1\ns0,0,0.5,1\ns0,0.6,2,0\n",
        );
        let err = ingest(&subjects, Some(&long)).unwrap_err().to_string();
        assert!(err.contains("line 3"), "unexpected message: {err}");
        assert!(err.contains("contiguous"), "unexpected message: {err}");
    }

    #[test]
    fn empty_subject_file_is_an_error() {
        let dir = TempDir::new().unwrap();
        let subjects = write_file(&dir, "subjects.csv", "id,y_left,y_right,kind\n");
        let err = ingest(&subjects, None).unwrap_err().to_string();
        assert!(err.contains("no subjects"), "unexpected message: {err}");
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let dir = TempDir::new().unwrap();
        let subjects = write_file(
            &dir,
            "subjects.csv",
            "id,y_left,y_right,kind\ns0,1,inf,censored\n",
        );
        let err = ingest(&subjects, None).unwrap_err().to_string();
        assert!(err.contains("unknown censoring kind"), "unexpected message: {err}");
    }

    #[test]
    fn scenario_file_builds_change_point_trajectories() {
        let dir = TempDir::new().unwrap();
        let path = write_file(
            &dir,
            "scenarios.csv",
            "name,age,traj,tau\nnever,0.5,00,\nlate,0.5,01,1.5\n",
        );
        let sc = read_scenarios(&path, &["age".to_owned()], 1).unwrap();
        assert_eq!(sc.len(), 2);
        assert_eq!(sc[0].z.times(), &[0.0]);
        assert_eq!(sc[1].z.times(), &[0.0, 1.5]);
        assert_eq!(sc[1].z.value_at(1.0)[0], 0.0);
        assert_eq!(sc[1].z.value_at(1.5)[0], 1.0);
        assert_eq!(sc[1].x[0], 0.5);
    }

    #[test]
    fn scenario_with_unknown_covariate_names_it() {
        let dir = TempDir::new().unwrap();
        let path = write_file(&dir, "scenarios.csv", "name,agee,traj,tau\nb,1,00,0\n");
        let err = read_scenarios(&path, &["age".to_owned()], 1)
            .unwrap_err()
            .to_string();
        assert!(err.contains("`agee`"), "unexpected message: {err}");
    }
}
