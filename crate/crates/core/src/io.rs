//! CSV import and export of vote logs, worlds, classifier outputs and gold
//! sets.

use std::fmt::Display;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::aggregation::VoteRecord;
use crate::ensemble::OutputTable;
use crate::error::{Error, Result};
use crate::gate::{GoldEntry, GoldSet};
use crate::prob::{FilterSpec, VoteLabel};
use crate::sim::{MachinePool, WorldTruth};

pub const VOTE_HEADER: [&str; 4] = ["item_id", "filter_id", "worker_id", "label"];
pub const WORLD_HEADER: [&str; 3] = ["item_id", "filter_id", "truth"];
pub const POOL_HEADER: [&str; 4] = ["classifier_id", "item_id", "filter_id", "label"];
pub const GOLD_HEADER: [&str; 3] = ["item_id", "filter_id", "label"];

struct Rows<R: Read> {
    path: PathBuf,
    reader: csv::Reader<R>,
}

impl<R: Read> Rows<R> {
    fn new(path: &Path, source: R, header: &[&str]) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let path = path.to_path_buf();
        let found = reader.headers().map_err(|e| parse_err(&path, 1, e))?.clone();
        if found.is_empty() {
            return Err(Error::Parse {
                path,
                line: 1,
                message: format!("missing header, expected {}", header.join(",")),
            });
        }
        if found.iter().collect::<Vec<_>>() != header {
            return Err(Error::Parse {
                path,
                line: 1,
                message: format!("expected header {}, got {}", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
            });
        }
        Ok(Rows { path, reader })
    }

    /// Calls `each(line, fields)` for every data row.
    fn for_each(mut self, mut each: impl FnMut(&Path, u64, &csv::StringRecord) -> Result<()>) -> Result<()> {
        let mut record = csv::StringRecord::new();
        loop {
            match self.reader.read_record(&mut record) {
                Ok(false) => return Ok(()),
                Ok(true) => {
                    let line = record.position().map_or(0, |p| p.line());
                    each(&self.path, line, &record)?;
                }
                Err(e) => {
                    let line = e.position().map_or(0, |p| p.line());
                    return Err(parse_err(&self.path, line, e));
                }
            }
        }
    }
}

fn parse_err(path: &Path, line: u64, e: impl Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn field<T: FromStr>(path: &Path, line: u64, record: &csv::StringRecord, k: usize, name: &str) -> Result<T>
where
    T::Err: Display,
{
    let raw = record.get(k).unwrap_or("");
    raw.parse()
        .map_err(|e| parse_err(path, line, format!("column {name}: cannot parse {raw:?}: {e}")))
}

fn parse_bool(path: &Path, line: u64, raw: &str) -> Result<bool> {
    match raw {
        "true" | "TRUE" | "1" => Ok(true),
        "false" | "FALSE" | "0" => Ok(false),
        other => Err(parse_err(path, line, format!("column truth: expected true or false, got {other:?}"))),
    }
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => parse_err(path, 0, format!("{other:?}")),
    }
}

pub fn parse_votes<R: Read>(path: &Path, source: R) -> Result<Vec<VoteRecord>> {
    let mut votes = Vec::new();
    Rows::new(path, source, &VOTE_HEADER)?.for_each(|p, line, r| {
        votes.push(VoteRecord {
            item_id: field(p, line, r, 0, "item_id")?,
            filter_id: field(p, line, r, 1, "filter_id")?,
            worker_id: field(p, line, r, 2, "worker_id")?,
            label: field(p, line, r, 3, "label")?,
        });
        Ok(())
    })?;
    Ok(votes)
}

pub fn read_votes(path: &Path) -> Result<Vec<VoteRecord>> {
    parse_votes(path, open(path)?)
}

pub fn write_votes_to<W: Write>(path: &Path, sink: W, votes: &[VoteRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let run = |w: &mut csv::Writer<W>| -> csv::Result<()> {
        w.write_record(VOTE_HEADER)?;
        for v in votes {
            w.write_record([
                v.item_id.to_string(),
                v.filter_id.to_string(),
                v.worker_id.to_string(),
                v.label.as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    run(&mut w).map_err(|e| csv_err(path, e))
}

pub fn write_votes(path: &Path, votes: &[VoteRecord]) -> Result<()> {
    write_votes_to(path, create(path)?, votes)
}

/// Reads a truth table. The grid must be complete; each filter's power is set
/// to its observed apply rate and its difficulty to 0.
pub fn parse_world<R: Read>(path: &Path, source: R) -> Result<WorldTruth> {
    let mut cells = Vec::new();
    Rows::new(path, source, &WORLD_HEADER)?.for_each(|p, line, r| {
        let item: usize = field(p, line, r, 0, "item_id")?;
        let filter: usize = field(p, line, r, 1, "filter_id")?;
        let truth = parse_bool(p, line, r.get(2).unwrap_or(""))?;
        cells.push((item, filter, truth, line));
        Ok(())
    })?;
    if cells.is_empty() {
        return Err(Error::Empty("world"));
    }
    let n_items = cells.iter().map(|c| c.0).max().unwrap_or(0) + 1;
    let n_filters = cells.iter().map(|c| c.1).max().unwrap_or(0) + 1;
    let mut grid: Vec<Option<bool>> = vec![None; n_items * n_filters];
    for &(i, f, t, line) in &cells {
        let slot = &mut grid[i * n_filters + f];
        if slot.is_some() {
            return Err(parse_err(path, line, format!("duplicate cell for item {i}, filter {f}")));
        }
        *slot = Some(t);
    }
    if let Some(k) = grid.iter().position(Option::is_none) {
        return Err(Error::Coverage(format!(
            "{}: no truth for item {}, filter {}",
            path.display(),
            k / n_filters,
            k % n_filters
        )));
    }
    let truth: Vec<bool> = grid.into_iter().map(|t| t.unwrap_or(false)).collect();
    let filters = (0..n_filters)
        .map(|f| {
            let rate = (0..n_items).filter(|&i| truth[i * n_filters + f]).count() as f64 / n_items as f64;
            FilterSpec::new(f, rate, 0.0)
        })
        .collect::<Result<Vec<_>>>()?;
    WorldTruth::from_truth(filters, truth, 0)
}

pub fn read_world(path: &Path) -> Result<WorldTruth> {
    parse_world(path, open(path)?)
}

pub fn write_world(path: &Path, world: &WorldTruth) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let run = |w: &mut csv::Writer<std::fs::File>| -> csv::Result<()> {
        w.write_record(WORLD_HEADER)?;
        for i in 0..world.n_items {
            for f in 0..world.n_filters() {
                w.write_record([i.to_string(), f.to_string(), world.applies(i, f).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    };
    run(&mut w).map_err(|e| csv_err(path, e))
}

/// Reads classifier outputs. Duplicate cells are rejected.
pub fn parse_outputs<R: Read>(path: &Path, source: R) -> Result<OutputTable> {
    let mut table = OutputTable::default();
    Rows::new(path, source, &POOL_HEADER)?.for_each(|p, line, r| {
        let c: usize = field(p, line, r, 0, "classifier_id")?;
        let i: usize = field(p, line, r, 1, "item_id")?;
        let f: usize = field(p, line, r, 2, "filter_id")?;
        let label: VoteLabel = field(p, line, r, 3, "label")?;
        if table.insert(c, i, f, label).is_some() {
            return Err(parse_err(p, line, format!("duplicate output for classifier {c}, item {i}, filter {f}")));
        }
        Ok(())
    })?;
    Ok(table)
}

pub fn read_outputs(path: &Path) -> Result<OutputTable> {
    parse_outputs(path, open(path)?)
}

pub fn write_pool(path: &Path, pool: &MachinePool) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let run = |w: &mut csv::Writer<std::fs::File>| -> csv::Result<()> {
        w.write_record(POOL_HEADER)?;
        for c in 0..pool.accuracies.len() {
            for i in 0..pool.n_items() {
                for f in 0..pool.n_filters() {
                    w.write_record([
                        c.to_string(),
                        i.to_string(),
                        f.to_string(),
                        pool.output(c, i, f).as_str().to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    };
    run(&mut w).map_err(|e| csv_err(path, e))
}

/// Gold entries with the line each came from.
pub fn parse_gold_rows<R: Read>(path: &Path, source: R) -> Result<Vec<(GoldEntry, u64)>> {
    let mut rows: Vec<(GoldEntry, u64)> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    Rows::new(path, source, &GOLD_HEADER)?.for_each(|p, line, r| {
        let e = GoldEntry {
            item_id: field(p, line, r, 0, "item_id")?,
            filter_id: field(p, line, r, 1, "filter_id")?,
            label: field(p, line, r, 2, "label")?,
        };
        if !seen.insert((e.item_id, e.filter_id)) {
            return Err(parse_err(
                p,
                line,
                format!("duplicate gold entry for item {}, filter {}", e.item_id, e.filter_id),
            ));
        }
        rows.push((e, line));
        Ok(())
    })?;
    Ok(rows)
}

pub fn parse_gold<R: Read>(path: &Path, source: R, expert_cost: f64) -> Result<GoldSet> {
    let rows = parse_gold_rows(path, source)?;
    GoldSet::new(rows.into_iter().map(|(e, _)| e).collect(), expert_cost)
}

pub fn read_gold(path: &Path, expert_cost: f64) -> Result<GoldSet> {
    parse_gold(path, open(path)?, expert_cost)
}

pub fn write_gold(path: &Path, gold: &GoldSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let run = |w: &mut csv::Writer<std::fs::File>| -> csv::Result<()> {
        w.write_record(GOLD_HEADER)?;
        for e in gold.entries() {
            w.write_record([e.item_id.to_string(), e.filter_id.to_string(), e.label.as_str().to_string()])?;
        }
        w.flush()?;
        Ok(())
    };
    run(&mut w).map_err(|e| csv_err(path, e))
}
