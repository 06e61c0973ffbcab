//! Recording ingestion, per-recording inference and vote aggregation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::array::{run_program, Program, Tracepoint};
use crate::error::{Error, Result};
use crate::quant::{quantize_shaped, BitWidth};
use crate::signal::filter::{Bandpass, FilterConfig};

pub const RECORDING_LEN: usize = 512;
pub const SAMPLE_RATE_HZ: f64 = 250.0;
pub const VOTES_PER_DIAGNOSIS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Recording {
    samples: Vec<i16>,
}

impl Recording {
    pub fn new(samples: Vec<i16>) -> Result<Self> {
        if samples.len() != RECORDING_LEN {
            return Err(Error::shape(format!(
                "recording has {} samples, expected {RECORDING_LEN}",
                samples.len()
            )));
        }
        Ok(Recording { samples })
    }

    pub fn samples(&self) -> &[i16] {
        &self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        SAMPLE_RATE_HZ
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| s as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Class {
    #[serde(rename = "VA")]
    Va,
    #[serde(rename = "non-VA")]
    NonVa,
}

impl Class {
    /// Output-logit index of the class.
    pub fn index(self) -> usize {
        match self {
            Class::Va => 0,
            Class::NonVa => 1,
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Class::Va => "VA",
            Class::NonVa => "non-VA",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordingResult {
    pub logits: Vec<i32>,
    pub class: Class,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inference {
    pub result: RecordingResult,
    pub trace: Vec<Tracepoint>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub verdict: Class,
    pub votes_va: usize,
    pub votes_nonva: usize,
    pub per_recording: Vec<RecordingResult>,
}

/// Class of the largest logit; ties go to VA.
pub fn classify(logits: &[i32]) -> Class {
    match logits {
        [va, non, ..] if non > va => Class::NonVa,
        _ => Class::Va,
    }
}

pub fn preprocess(rec: &Recording, filter: &Bandpass) -> Vec<f64> {
    filter.apply(&rec.to_f64())
}

pub fn infer(rec: &Recording, prog: &Program) -> Result<Inference> {
    let filter = Bandpass::design(SAMPLE_RATE_HZ, &FilterConfig::default())?;
    infer_with(rec, prog, &filter)
}

pub fn infer_with(rec: &Recording, prog: &Program, filter: &Bandpass) -> Result<Inference> {
    if prog.input_shape != [1, RECORDING_LEN] {
        return Err(Error::invalid(format!(
            "program input {:?} is not a 1x{RECORDING_LEN} recording",
            prog.input_shape
        )));
    }
    let out_len: usize = prog.output_shape().iter().product();
    if out_len != 2 {
        return Err(Error::invalid(format!("program emits {out_len} logits, expected 2")));
    }
    let x = preprocess(rec, filter);
    let q = quantize_shaped(&x, vec![1, RECORDING_LEN], BitWidth::B8, prog.input_scale_exp)?;
    let (out, trace) = run_program(prog, &q)?;
    let logits: Vec<i32> = out.data().iter().map(|&v| v as i32).collect();
    Ok(Inference {
        result: RecordingResult {
            class: classify(&logits),
            logits,
        },
        trace,
    })
}

/// Majority vote over exactly `n` classes; an exact tie is VA.
pub fn diagnose(results: &[Class], n: usize) -> Result<Diagnosis> {
    if results.is_empty() || n == 0 {
        return Err(Error::EmptyVote);
    }
    if results.len() != n {
        return Err(Error::VoteCount {
            expected: n,
            got: results.len(),
        });
    }
    let votes_va = results.iter().filter(|&&c| c == Class::Va).count();
    let votes_nonva = results.len() - votes_va;
    Ok(Diagnosis {
        verdict: if votes_va >= votes_nonva { Class::Va } else { Class::NonVa },
        votes_va,
        votes_nonva,
        per_recording: Vec::new(),
    })
}

/// Infers every recording on worker threads and groups consecutive results
/// into diagnoses of `VOTES_PER_DIAGNOSIS`.
pub fn diagnose_recordings(
    recs: &[Recording],
    prog: &Program,
    filter: &Bandpass,
) -> Result<(Vec<Diagnosis>, Vec<Inference>)> {
    if recs.is_empty() {
        return Err(Error::EmptyVote);
    }
    if !recs.len().is_multiple_of(VOTES_PER_DIAGNOSIS) {
        return Err(Error::VoteCount {
            expected: recs.len().div_ceil(VOTES_PER_DIAGNOSIS) * VOTES_PER_DIAGNOSIS,
            got: recs.len(),
        });
    }
    let inferences = infer_all(recs, prog, filter)?;
    let mut diagnoses = Vec::with_capacity(recs.len() / VOTES_PER_DIAGNOSIS);
    for chunk in inferences.chunks(VOTES_PER_DIAGNOSIS) {
        let classes: Vec<Class> = chunk.iter().map(|i| i.result.class).collect();
        let mut d = diagnose(&classes, VOTES_PER_DIAGNOSIS)?;
        d.per_recording = chunk.iter().map(|i| i.result.clone()).collect();
        diagnoses.push(d);
    }
    Ok((diagnoses, inferences))
}

/// Results come back in input order regardless of scheduling.
pub fn infer_all(recs: &[Recording], prog: &Program, filter: &Bandpass) -> Result<Vec<Inference>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(recs.len()).max(1);
    let per = recs.len().div_ceil(workers);
    let chunks: Vec<Result<Vec<Inference>>> = std::thread::scope(|s| {
        let handles: Vec<_> = recs
            .chunks(per.max(1))
            .map(|chunk| s.spawn(move || chunk.iter().map(|r| infer_with(r, prog, filter)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("inference worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(recs.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// One integer sample per line, recordings separated by blank lines.
pub fn parse_csv(text: &str) -> Result<Vec<Recording>> {
    let mut recs = Vec::new();
    let mut cur: Vec<i16> = Vec::new();
    let mut start = 1;
    let flush = |cur: &mut Vec<i16>, start: usize, recs: &mut Vec<Recording>| -> Result<()> {
        if cur.is_empty() {
            return Ok(());
        }
        if cur.len() != RECORDING_LEN {
            return Err(Error::format(
                format!("line {start}"),
                format!("recording has {} samples, expected {RECORDING_LEN}", cur.len()),
            ));
        }
        recs.push(Recording::new(std::mem::take(cur))?);
        Ok(())
    };
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let t = line.trim();
        if t.is_empty() {
            flush(&mut cur, start, &mut recs)?;
            continue;
        }
        if cur.is_empty() {
            start = lineno;
        }
        let v: i16 = t
            .parse()
            .map_err(|_| Error::format(format!("line {lineno}"), format!("`{t}` is not a 16-bit integer sample")))?;
        cur.push(v);
    }
    flush(&mut cur, start, &mut recs)?;
    Ok(recs)
}

pub fn to_csv(recs: &[Recording]) -> String {
    let mut s = String::new();
    for (i, r) in recs.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        for v in r.samples() {
            s.push_str(&v.to_string());
            s.push('\n');
        }
    }
    s
}

/// Little-endian int16 samples, a multiple of 512 per file.
pub fn parse_bin(bytes: &[u8]) -> Result<Vec<Recording>> {
    let rec_bytes = 2 * RECORDING_LEN;
    if !bytes.len().is_multiple_of(rec_bytes) {
        let whole = bytes.len() / rec_bytes * rec_bytes;
        return Err(Error::format(
            format!("byte offset {whole}"),
            format!("{} trailing bytes do not form a {RECORDING_LEN}-sample recording", bytes.len() - whole),
        ));
    }
    bytes
        .chunks(rec_bytes)
        .map(|c| Recording::new(c.chunks(2).map(|p| i16::from_le_bytes([p[0], p[1]])).collect()))
        .collect()
}

pub fn to_bin(recs: &[Recording]) -> Vec<u8> {
    recs.iter().flat_map(|r| r.samples().iter().flat_map(|v| v.to_le_bytes())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vote_examples() {
        let d = diagnose(&[Class::Va; 6], 6).unwrap();
        assert_eq!((d.verdict, d.votes_va, d.votes_nonva), (Class::Va, 6, 0));
        let v = [Class::Va, Class::NonVa, Class::NonVa, Class::Va, Class::NonVa, Class::NonVa];
        assert_eq!(diagnose(&v, 6).unwrap().verdict, Class::NonVa);
        let tie = [Class::Va, Class::Va, Class::Va, Class::NonVa, Class::NonVa, Class::NonVa];
        assert_eq!(diagnose(&tie, 6).unwrap().verdict, Class::Va);
        assert_eq!(diagnose(&[], 6), Err(Error::EmptyVote));
        assert!(matches!(diagnose(&[Class::Va; 5], 6), Err(Error::VoteCount { expected: 6, got: 5 })));
    }

    #[test]
    fn classify_tie_is_va() {
        assert_eq!(classify(&[0, 0]), Class::Va);
        assert_eq!(classify(&[-3, 2]), Class::NonVa);
        assert_eq!(classify(&[5, 2]), Class::Va);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let recs: Vec<Recording> = (0..2)
            .map(|k| Recording::new((0..512).map(|i| (i as i16 - 256) * (k + 1)).collect()).unwrap())
            .collect();
        let text = to_csv(&recs);
        assert_eq!(parse_csv(&text).unwrap(), recs);
        assert_eq!(parse_bin(&to_bin(&recs)).unwrap(), recs);

        let bad = text.replacen("\n-255\n", "\nabc\n", 1);
        let e = parse_csv(&bad).unwrap_err();
        assert_eq!(e, Error::format("line 2", "`abc` is not a 16-bit integer sample"));
        let short: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        match parse_csv(&short).unwrap_err() {
            Error::Format { location, .. } => assert_eq!(location, "line 1"),
            e => panic!("{e}"),
        }
        match parse_bin(&[0u8; 1025]).unwrap_err() {
            Error::Format { location, .. } => assert_eq!(location, "byte offset 1024"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn recording_length_is_enforced() {
        assert!(Recording::new(vec![0; 511]).is_err());
        assert_eq!(Recording::new(vec![0; 512]).unwrap().sample_rate(), 250.0);
    }
}
