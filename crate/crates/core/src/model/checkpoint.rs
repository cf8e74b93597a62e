//! Plain-text checkpoints.
//!
//! ```text
//! msis-checkpoint 1
//! seed <u64>
//! arch <architecture as one JSON line>
//! param <name> <rows> <cols> <values...>
//! ```
//!
//! Values use the shortest representation that round-trips exactly.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Architecture;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor2D};

const MAGIC: &str = "msis-checkpoint 1";

pub fn write_checkpoint<W: Write>(
    mut w: W,
    arch: &Architecture,
    params: &ParamStore<f64>,
) -> Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "seed {}", params.seed())?;
    writeln!(w, "arch {}", serde_json::to_string(arch)?)?;
    for (name, t) in params.iter() {
        write!(w, "param {name} {} {}", t.rows(), t.cols())?;
        for v in t.data() {
            write!(w, " {v:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    arch: &Architecture,
    params: &ParamStore<f64>,
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_checkpoint(&mut w, arch, params)?;
    w.flush()?;
    Ok(())
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::Checkpoint(format!("line {line}: {}", msg.into()))
}

/// Reads a checkpoint and checks it against the parameters `arch` would
/// initialize: every name must be present once with the same shape.
pub fn read_checkpoint<R: Read>(r: R) -> Result<(Architecture, ParamStore<f64>)> {
    let mut lines = BufReader::new(r).lines();
    let mut next = |n: usize| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| bad(n, "unexpected end of file"))
    };
    if next(1)?.trim_end() != MAGIC {
        return Err(bad(1, "not a checkpoint"));
    }
    let seed_line = next(2)?;
    let seed = seed_line
        .strip_prefix("seed ")
        .and_then(|s| s.trim().parse::<u64>().ok())
        .ok_or_else(|| bad(2, "expected `seed <u64>`"))?;
    let arch_line = next(3)?;
    let arch: Architecture = serde_json::from_str(
        arch_line
            .strip_prefix("arch ")
            .ok_or_else(|| bad(3, "expected `arch <json>`"))?,
    )
    .map_err(|e| bad(3, e.to_string()))?;
    let template = arch.init_params::<f64>(seed)?;

    let mut store = ParamStore::new(seed);
    let mut n = 3;
    loop {
        n += 1;
        let line = match next(n) {
            Ok(l) => l,
            Err(Error::Checkpoint(_)) => break,
            Err(e) => return Err(e),
        };
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_ascii_whitespace();
        if parts.next() != Some("param") {
            return Err(bad(n, "expected `param`"));
        }
        let name = parts.next().ok_or_else(|| bad(n, "missing name"))?;
        let mut dim = || -> Result<usize> {
            parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(n, "bad shape"))
        };
        let (rows, cols) = (dim()?, dim()?);
        let values = parts
            .map(|s| s.parse::<f64>().map_err(|_| bad(n, format!("bad value `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != rows * cols {
            return Err(bad(n, format!("{name}: {} values for {rows}×{cols}", values.len())));
        }
        match template.get(name) {
            None => return Err(bad(n, format!("unexpected parameter `{name}`"))),
            Some(t) if t.shape() != (rows, cols) => {
                return Err(bad(
                    n,
                    format!("{name}: shape {rows}×{cols}, architecture needs {:?}", t.shape()),
                ))
            }
            Some(_) => {}
        }
        store
            .insert(name, Tensor2D::from_vec(rows, cols, values)?)
            .map_err(|e| bad(n, e.to_string()))?;
    }
    if let Some(missing) = template.names().find(|k| !store.contains(k)) {
        return Err(Error::Checkpoint(format!("missing parameter `{missing}`")));
    }
    Ok((arch, store))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Architecture, ParamStore<f64>)> {
    read_checkpoint(fs::File::open(path)?)
}
