//! Session recordings: newline-delimited JSON, one entry per applied input
//! or broadcast state, stamped with the tick it belongs to.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use shapectl::{Error, Result};

use crate::host::{SessionHost, TickOutput};
use crate::wire::{parse_client, Body, ClientInput, WireMessage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    In,
    Out,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    pub tick: u64,
    pub dir: Direction,
    pub msg: WireMessage,
}

/// Collects entries in memory; the server flushes them to disk on shutdown.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Recording {
    pub entries: Vec<RecordEntry>,
    out_seq: u64,
}

impl Recording {
    pub fn input(&mut self, tick: u64, input: &ClientInput, msg: WireMessage) {
        debug_assert_eq!(input.seq, msg.seq);
        self.entries.push(RecordEntry {
            tick,
            dir: Direction::In,
            msg,
        });
    }

    /// Records a broadcast state under the recording's own sequence.
    pub fn output(&mut self, out: &TickOutput) {
        self.out_seq += 1;
        self.entries.push(RecordEntry {
            tick: out.tick,
            dir: Direction::Out,
            msg: WireMessage {
                seq: self.out_seq,
                t: out.t_ms,
                body: Body::State(out.state.clone()),
            },
        });
    }

    pub fn states(&self) -> Vec<&WireMessage> {
        self.entries.iter().filter(|e| e.dir == Direction::Out).map(|e| &e.msg).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut rec = Recording::default();
        for (i, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: RecordEntry = serde_json::from_str(&line)
                .map_err(|err| Error::InvalidInput(format!("recording line {}: {err}", i + 1)))?;
            if e.dir == Direction::Out {
                rec.out_seq = e.msg.seq;
            }
            rec.entries.push(e);
        }
        Ok(rec)
    }

    /// Inputs grouped by the tick at which they were applied.
    pub fn inputs(&self) -> Result<Vec<(u64, ClientInput, WireMessage)>> {
        self.entries
            .iter()
            .filter(|e| e.dir == Direction::In)
            .map(|e| {
                let text = serde_json::to_string(&e.msg)?;
                let input = parse_client(&text).map_err(|f| Error::InvalidInput(f.message))?;
                Ok((e.tick, input, e.msg.clone()))
            })
            .collect()
    }

    /// Last tick covered by the recording.
    pub fn last_tick(&self) -> Option<u64> {
        self.entries.iter().map(|e| e.tick).max()
    }
}

/// Feeds a recording's inputs into `host` at their ticks and records what
/// the host broadcasts, through the recording's last tick.
pub fn replay(host: &mut SessionHost<'_>, recording: &Recording) -> Result<Recording> {
    let inputs = recording.inputs()?;
    let last = recording.last_tick().unwrap_or(0);
    let mut out = Recording::default();
    let mut next = inputs.iter().peekable();
    while host.tick_index() <= last {
        let tick = host.tick_index();
        while let Some((_, input, msg)) = next.next_if(|(t, _, _)| *t == tick) {
            host.apply(input);
            out.input(tick, input, msg.clone());
        }
        let result = host.tick();
        if result.broadcast {
            out.output(&result);
        }
    }
    Ok(out)
}
