//! Per-bin validation loss records and their CSV form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_BINS: usize = 4;

pub const TRACE_HEADER: [&str; 6] = [
    "step",
    "bin",
    "mean_loss",
    "token_count",
    "realized_k",
    "realized_pairs",
];

/// Mask-ratio bin: `[0, .25)`, `[.25, .5)`, `[.5, .75)`, `[.75, 1]`.
pub fn bin_of_ratio(r: f64) -> usize {
    ((r * N_BINS as f64).floor() as usize).min(N_BINS - 1)
}

/// Inclusive range of masked-position counts whose ratio `n / len` falls in `bin`,
/// excluding zero.
pub fn mask_counts_in_bin(bin: usize, len: usize) -> (usize, usize) {
    assert!(bin < N_BINS && len >= N_BINS);
    let lo = (bin * len).div_ceil(N_BINS).max(1);
    let hi = if bin + 1 == N_BINS {
        len
    } else {
        ((bin + 1) * len).div_ceil(N_BINS) - 1
    };
    (lo, hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub bin: usize,
    pub mean_loss: f64,
    pub token_count: u64,
    /// Routed pairs per token per MoE layer during the evaluation.
    pub realized_k: f64,
    pub realized_pairs: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<LossRecord>,
}

impl LossTrace {
    pub fn new(records: Vec<LossRecord>) -> Result<Self> {
        let trace = Self { records };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        let mut last: [Option<u64>; N_BINS] = [None; N_BINS];
        for r in &self.records {
            if r.bin >= N_BINS {
                return Err(Error::input(format!("bin {} out of range", r.bin)));
            }
            if let Some(prev) = last[r.bin] {
                if r.step <= prev {
                    return Err(Error::input(format!(
                        "steps not increasing in bin {}: {} after {prev}",
                        r.bin, r.step
                    )));
                }
            }
            last[r.bin] = Some(r.step);
        }
        Ok(())
    }

    pub fn push(&mut self, record: LossRecord) -> Result<()> {
        self.records.push(record);
        if let Err(e) = self.validate() {
            self.records.pop();
            return Err(e);
        }
        Ok(())
    }

    /// `(step, loss)` series of one bin.
    pub fn series(&self, bin: usize) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter(|r| r.bin == bin)
            .map(|r| (r.step, r.mean_loss))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(TRACE_HEADER).map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.bin.to_string(),
                r.mean_loss.to_string(),
                r.token_count.to_string(),
                r.realized_k.to_string(),
                r.realized_pairs.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers().map_err(csv_err)?.clone();
        if header.iter().map(str::trim).ne(TRACE_HEADER) {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {}", TRACE_HEADER.join(",")),
            });
        }
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(csv_err)?;
            let line = row.position().map_or(0, |p| p.line());
            let field = |i: usize| row.get(i).unwrap_or("").trim();
            let bad = |what: &str| Error::Parse {
                line,
                message: format!("bad {what} '{}'", field(TRACE_HEADER.iter().position(|h| *h == what).unwrap())),
            };
            let rec = LossRecord {
                step: field(0).parse().map_err(|_| bad("step"))?,
                bin: field(1).parse().map_err(|_| bad("bin"))?,
                mean_loss: field(2).parse().map_err(|_| bad("mean_loss"))?,
                token_count: field(3).parse().map_err(|_| bad("token_count"))?,
                realized_k: field(4).parse().map_err(|_| bad("realized_k"))?,
                realized_pairs: field(5).parse().map_err(|_| bad("realized_pairs"))?,
            };
            if rec.bin >= N_BINS {
                return Err(Error::Parse {
                    line,
                    message: format!("bin {} out of range", rec.bin),
                });
            }
            records.push(rec);
        }
        let trace = Self { records };
        trace.validate()?;
        Ok(trace)
    }
}

pub(crate) fn csv_err(err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        message: err.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins() {
        assert_eq!(bin_of_ratio(0.0), 0);
        assert_eq!(bin_of_ratio(0.25), 1);
        assert_eq!(bin_of_ratio(0.7499), 2);
        assert_eq!(bin_of_ratio(1.0), 3);
        assert_eq!(mask_counts_in_bin(0, 64), (1, 15));
        assert_eq!(mask_counts_in_bin(1, 64), (16, 31));
        assert_eq!(mask_counts_in_bin(3, 64), (48, 64));
        for len in [4usize, 10, 13, 64] {
            for b in 0..N_BINS {
                let (lo, hi) = mask_counts_in_bin(b, len);
                for n in lo..=hi {
                    assert_eq!(bin_of_ratio(n as f64 / len as f64), b, "len {len} n {n}");
                }
            }
        }
    }

    #[test]
    fn csv_roundtrip_and_line_numbers() {
        let trace = LossTrace::new(vec![
            LossRecord { step: 10, bin: 0, mean_loss: 1.25, token_count: 40, realized_k: 2.0, realized_pairs: 80 },
            LossRecord { step: 10, bin: 3, mean_loss: 0.1 + 0.2, token_count: 9, realized_k: 2.5, realized_pairs: 20 },
        ])
        .unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        assert_eq!(LossTrace::read_csv(buf.as_slice()).unwrap(), trace);

        let bad = "step,bin,mean_loss,token_count,realized_k,realized_pairs\n1,0,2.0,3,1,1\n2,0,oops,3,1,1\n";
        match LossTrace::read_csv(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_increasing_steps_rejected() {
        let r = |step| LossRecord { step, bin: 1, mean_loss: 1.0, token_count: 1, realized_k: 1.0, realized_pairs: 1 };
        assert!(LossTrace::new(vec![r(5), r(5)]).is_err());
    }
}
