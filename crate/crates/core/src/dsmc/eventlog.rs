//! Event log: the complete collision tree of a run.
//!
//! Text format, one record per line:
//!
//! ```text
//! dsmcsg-eventlog v1
//! header {json}
//! initial <N>
//! <v_1>
//! ...
//! step <sigma> <truncated 0|1> <N_c>
//! <i> <j> <xi> <eta> <extra>
//! ...
//! end
//! ```
//!
//! Floats are printed in shortest round-trip form, so reading a log back gives
//! bit-identical values. For background interactions `j` is
//! [`BACKGROUND_PARTNER`].

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Acceptance, Admissibility, SigmaPolicy};
use crate::error::{Error, Result};
use crate::gpc::RandomParamSpec;
use crate::models::{ModelSpec, PairDraw};

const MAGIC: &str = "dsmcsg-eventlog v1";

/// Partner index recorded for interactions with the background.
pub const BACKGROUND_PARTNER: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub seed: u64,
    pub model: ModelSpec,
    pub n_particles: usize,
    pub dt: f64,
    pub n_steps: usize,
    pub acceptance: Acceptance,
    pub sigma_policy: SigmaPolicy,
    #[serde(default)]
    pub admissibility: Admissibility,
    pub param_spec: RandomParamSpec,
    pub orders: Vec<usize>,
    pub nq: Vec<usize>,
    /// Scalar initial states; the initial expansions are constant in `z`.
    #[serde(skip)]
    pub initial: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub i: u32,
    pub j: u32,
    pub draw: PairDraw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Kernel bound used for acceptance.
    pub sigma: f64,
    /// Whether `Σ` was capped at `1/Δt`.
    pub truncated: bool,
    pub events: Vec<Event>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventLog {
    pub header: LogHeader,
    pub steps: Vec<StepRecord>,
}

impl EventLog {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        let json = serde_json::to_string(&self.header)
            .map_err(|e| Error::numerical("event log header", e.to_string()))?;
        writeln!(w, "header {json}")?;
        writeln!(w, "initial {}", self.header.initial.len())?;
        for v in &self.header.initial {
            writeln!(w, "{v}")?;
        }
        for s in &self.steps {
            writeln!(w, "step {} {} {}", s.sigma, u8::from(s.truncated), s.events.len())?;
            for e in &s.events {
                writeln!(w, "{} {} {} {} {}", e.i, e.j, e.draw.xi, e.draw.eta, e.draw.extra)?;
            }
        }
        writeln!(w, "end")?;
        w.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n, l)),
                Some((_, Err(e))) => Err(Error::Io(e)),
                None => Err(Error::Replay(format!("log is truncated: expected {what}"))),
            }
        };
        let (n, magic) = next("the format line")?;
        if magic.trim() != MAGIC {
            return Err(fmt_err(n, format!("expected '{MAGIC}', found '{magic}'")));
        }
        let (n, line) = next("the header")?;
        let json = line
            .strip_prefix("header ")
            .ok_or_else(|| fmt_err(n, "expected 'header {json}'"))?;
        let mut header: LogHeader =
            serde_json::from_str(json).map_err(|e| fmt_err(n, format!("bad header: {e}")))?;
        let (n, line) = next("the initial-state count")?;
        let count: usize = line
            .strip_prefix("initial ")
            .ok_or_else(|| fmt_err(n, "expected 'initial <N>'"))
            .and_then(|s| parse(s.trim(), n))?;
        if count != header.n_particles {
            return Err(fmt_err(
                n,
                format!("{count} initial states for {} particles", header.n_particles),
            ));
        }
        header.initial.reserve(count);
        for _ in 0..count {
            let (n, line) = next("an initial state")?;
            header.initial.push(parse(line.trim(), n)?);
        }
        let mut steps = Vec::with_capacity(header.n_steps);
        loop {
            let (n, line) = next("a step record or 'end'")?;
            if line.trim() == "end" {
                break;
            }
            let rest = line
                .strip_prefix("step ")
                .ok_or_else(|| fmt_err(n, "expected 'step <sigma> <truncated> <count>'"))?;
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() != 3 {
                return Err(fmt_err(n, "step record needs three fields"));
            }
            let sigma: f64 = parse(f[0], n)?;
            let truncated = match f[1] {
                "0" => false,
                "1" => true,
                other => return Err(fmt_err(n, format!("truncated flag must be 0 or 1, got {other}"))),
            };
            let nc: usize = parse(f[2], n)?;
            let mut events = Vec::with_capacity(nc);
            for _ in 0..nc {
                let (n, line) = next("a collision event")?;
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() != 5 {
                    return Err(fmt_err(n, "event needs five fields: i j xi eta extra"));
                }
                events.push(Event {
                    i: parse(f[0], n)?,
                    j: parse(f[1], n)?,
                    draw: PairDraw {
                        xi: parse(f[2], n)?,
                        eta: parse(f[3], n)?,
                        extra: parse(f[4], n)?,
                    },
                });
            }
            steps.push(StepRecord {
                sigma,
                truncated,
                events,
            });
        }
        if steps.len() != header.n_steps {
            return Err(Error::Replay(format!(
                "log is incomplete: {} of {} steps recorded",
                steps.len(),
                header.n_steps
            )));
        }
        Ok(EventLog { header, steps })
    }
}

fn fmt_err(line: usize, message: impl Into<String>) -> Error {
    Error::LogFormat {
        line,
        message: message.into(),
    }
}

fn parse<T: std::str::FromStr>(s: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse()
        .map_err(|e: T::Err| fmt_err(line, format!("cannot parse '{s}': {e}")))
}
