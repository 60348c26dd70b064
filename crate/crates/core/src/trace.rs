//! Trace container and the CSV / JSON-lines trace formats.
//!
//! CSV: `arrival_s,input_tokens,output_tokens,class`, header optional,
//! `output_tokens` may be empty. JSON lines: one object per line with keys
//! `arrival_s`, `input_tokens`, `output_tokens` (optional), `class`, and an
//! optional integer `id`.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::workload::{sample_output_len, LengthDist, Request, RequestId, TaskClass, WorkloadError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    JsonLines,
    Csv,
}

impl TraceFormat {
    /// `.jsonl` / `.json` / `.ndjson` select JSON lines; anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if matches!(ext.to_ascii_lowercase().as_str(), "jsonl" | "json" | "ndjson") => {
                TraceFormat::JsonLines
            }
            _ => TraceFormat::Csv,
        }
    }
}

/// Requests ordered by `(arrival_time, id)` with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    requests: Vec<Request>,
}

impl Trace {
    /// Sorts by `(arrival_time, id)` and rejects duplicate ids or
    /// non-finite / negative arrival times.
    pub fn new(mut requests: Vec<Request>) -> Result<Self, WorkloadError> {
        let mut seen = HashSet::with_capacity(requests.len());
        for r in &requests {
            if !(r.arrival_time.is_finite() && r.arrival_time >= 0.0) {
                return Err(WorkloadError::config(
                    "arrival_s",
                    format!("request {} has invalid arrival time {}", r.id, r.arrival_time),
                ));
            }
            if !seen.insert(r.id) {
                return Err(WorkloadError::config("id", format!("duplicate request id {}", r.id)));
            }
        }
        requests.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time).then(a.id.cmp(&b.id)));
        Ok(Trace { requests })
    }

    pub(crate) fn from_sorted_unchecked(requests: Vec<Request>) -> Self {
        Trace { requests }
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Request> {
        self.requests.iter()
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }

    pub fn into_requests(self) -> Vec<Request> {
        self.requests
    }

    /// Attach default SLO targets to online requests that carry none.
    pub fn apply_online_slo(&mut self, ttft: Option<f64>, e2e: Option<f64>) {
        for r in self.requests.iter_mut().filter(|r| r.class == TaskClass::Online) {
            r.slo_ttft = r.slo_ttft.or(ttft);
            r.slo_e2e = r.slo_e2e.or(e2e);
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<RequestId>,
    arrival_s: f64,
    input_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output_tokens: Option<u32>,
    class: String,
}

struct RawRecord {
    line: u64,
    id: Option<RequestId>,
    arrival: f64,
    input: u32,
    output: Option<u32>,
    class: TaskClass,
}

fn parse_err(line: u64, message: impl Into<String>) -> WorkloadError {
    WorkloadError::Parse {
        line,
        message: message.into(),
    }
}

fn check_record(rec: RawRecord) -> Result<RawRecord, WorkloadError> {
    if !(rec.arrival.is_finite() && rec.arrival >= 0.0) {
        return Err(parse_err(
            rec.line,
            format!("arrival_s must be a non-negative number, got {}", rec.arrival),
        ));
    }
    if rec.input == 0 {
        return Err(parse_err(rec.line, "input_tokens must be >= 1"));
    }
    if rec.output == Some(0) {
        return Err(parse_err(rec.line, "output_tokens must be >= 1"));
    }
    Ok(rec)
}

fn parse_csv<R: Read>(src: R) -> Result<Vec<RawRecord>, WorkloadError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(src);
    let mut out = Vec::new();
    for (i, result) in reader.records().enumerate() {
        let record = result.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(i as u64 + 1);
        if i == 0 && record.get(0) == Some("arrival_s") {
            continue;
        }
        if record.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, found {}", record.len())));
        }
        let arrival: f64 = record[0]
            .parse()
            .map_err(|_| parse_err(line, format!("arrival_s `{}` is not a number", &record[0])))?;
        let input: u32 = record[1]
            .parse()
            .map_err(|_| parse_err(line, format!("input_tokens `{}` is not an integer", &record[1])))?;
        let output = if record[2].is_empty() {
            None
        } else {
            Some(
                record[2]
                    .parse::<u32>()
                    .map_err(|_| parse_err(line, format!("output_tokens `{}` is not an integer", &record[2])))?,
            )
        };
        let class = TaskClass::parse(&record[3])
            .ok_or_else(|| parse_err(line, format!("class `{}` is not online/offline", &record[3])))?;
        out.push(check_record(RawRecord {
            line,
            id: None,
            arrival,
            input,
            output,
            class,
        })?);
    }
    Ok(out)
}

fn parse_jsonl<R: Read>(src: R) -> Result<Vec<RawRecord>, WorkloadError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(src).lines().enumerate() {
        let lineno = i as u64 + 1;
        let line = line.map_err(|e| WorkloadError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let class = TaskClass::parse(&rec.class)
            .ok_or_else(|| parse_err(lineno, format!("class `{}` is not online/offline", rec.class)))?;
        out.push(check_record(RawRecord {
            line: lineno,
            id: rec.id,
            arrival: rec.arrival_s,
            input: rec.input_tokens,
            output: rec.output_tokens,
            class,
        })?);
    }
    Ok(out)
}

/// Parse a trace. Records without an id take their 0-based position in the
/// file; records without an output length draw one from `output_dist`
/// (seeded by `seed`, in file order). An empty stream yields an empty trace.
pub fn load_trace<R: Read>(
    src: R,
    format: TraceFormat,
    output_dist: &LengthDist,
    seed: u64,
) -> Result<Trace, WorkloadError> {
    let raw = match format {
        TraceFormat::Csv => parse_csv(src)?,
        TraceFormat::JsonLines => parse_jsonl(src)?,
    };
    if raw.iter().any(|r| r.output.is_none()) {
        output_dist.validate("output")?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(raw.len());
    let mut requests = Vec::with_capacity(raw.len());
    for (pos, r) in raw.into_iter().enumerate() {
        let id = r.id.unwrap_or(pos as RequestId);
        if !seen.insert(id) {
            return Err(parse_err(r.line, format!("duplicate request id {id}")));
        }
        let output = match r.output {
            Some(o) => o,
            None => sample_output_len(output_dist, &mut rng),
        };
        requests.push(Request::new(id, r.arrival, r.input, output, r.class));
    }
    Trace::new(requests)
}

/// Write a trace. Output lengths are always written so the file replays
/// exactly; JSON lines also carry ids.
pub fn write_trace<W: Write>(trace: &Trace, format: TraceFormat, mut out: W) -> Result<(), WorkloadError> {
    let io = |e: std::io::Error| WorkloadError::Io(e.to_string());
    match format {
        TraceFormat::Csv => {
            writeln!(out, "arrival_s,input_tokens,output_tokens,class").map_err(io)?;
            for r in trace.iter() {
                writeln!(
                    out,
                    "{},{},{},{}",
                    r.arrival_time,
                    r.input_len,
                    r.output_len,
                    r.class.as_str()
                )
                .map_err(io)?;
            }
        }
        TraceFormat::JsonLines => {
            for r in trace.iter() {
                let rec = JsonRecord {
                    id: Some(r.id),
                    arrival_s: r.arrival_time,
                    input_tokens: r.input_len,
                    output_tokens: Some(r.output_len),
                    class: r.class.as_str().to_string(),
                };
                let line = serde_json::to_string(&rec).map_err(|e| WorkloadError::Io(e.to_string()))?;
                writeln!(out, "{line}").map_err(io)?;
            }
        }
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str, format: TraceFormat) -> Result<Trace, WorkloadError> {
        load_trace(text.as_bytes(), format, &LengthDist::Constant { value: 7 }, 0)
    }

    #[test]
    fn single_csv_line() {
        let t = load("0.5,128,32,online\n", TraceFormat::Csv).unwrap();
        assert_eq!(t.len(), 1);
        let r = &t.requests()[0];
        assert_eq!(
            (r.arrival_time, r.input_len, r.output_len, r.class),
            (0.5, 128, 32, TaskClass::Online)
        );
        assert_eq!(r.id, 0);
    }

    #[test]
    fn csv_sorted_by_arrival() {
        let t = load(
            "arrival_s,input_tokens,output_tokens,class\n2.0,10,1,offline\n1.0,20,1,online\n",
            TraceFormat::Csv,
        )
        .unwrap();
        let arrivals: Vec<f64> = t.iter().map(|r| r.arrival_time).collect();
        assert_eq!(arrivals, vec![1.0, 2.0]);
        // ids follow file order, not arrival order
        assert_eq!(t.requests()[0].id, 1);
    }

    #[test]
    fn malformed_line_cites_line_number() {
        match load("x,128,32,online\n", TraceFormat::Csv) {
            Err(WorkloadError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match load("1.0,1,1,online\n2.0,abc,1,online\n", TraceFormat::Csv) {
            Err(WorkloadError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match load(
            "{\"arrival_s\": 1.0, \"input_tokens\": 3, \"class\": \"online\"}\n{bad}\n",
            TraceFormat::JsonLines,
        ) {
            Err(WorkloadError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_stream_is_empty_trace() {
        assert!(load("", TraceFormat::Csv).unwrap().is_empty());
        assert!(load("", TraceFormat::JsonLines).unwrap().is_empty());
    }

    #[test]
    fn missing_output_is_sampled() {
        let t = load("0.0,10,,online\n", TraceFormat::Csv).unwrap();
        assert_eq!(t.requests()[0].output_len, 7);
        let t = load(
            "{\"arrival_s\": 0.0, \"input_tokens\": 10, \"class\": \"offline\"}",
            TraceFormat::JsonLines,
        )
        .unwrap();
        assert_eq!(t.requests()[0].output_len, 7);
        assert_eq!(t.requests()[0].class, TaskClass::Offline);
    }

    #[test]
    fn jsonl_rejects_unknown_keys_and_duplicate_ids() {
        assert!(load(
            "{\"arrival_s\": 0.0, \"input_tokens\": 1, \"class\": \"online\", \"foo\": 1}",
            TraceFormat::JsonLines
        )
        .is_err());
        let dup = "{\"id\": 3, \"arrival_s\": 0.0, \"input_tokens\": 1, \"class\": \"online\"}\n{\"id\": 3, \"arrival_s\": 1.0, \"input_tokens\": 1, \"class\": \"online\"}\n";
        assert!(matches!(
            load(dup, TraceFormat::JsonLines),
            Err(WorkloadError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(TraceFormat::from_path(Path::new("a.jsonl")), TraceFormat::JsonLines);
        assert_eq!(TraceFormat::from_path(Path::new("a.csv")), TraceFormat::Csv);
        assert_eq!(TraceFormat::from_path(Path::new("a")), TraceFormat::Csv);
    }
}
