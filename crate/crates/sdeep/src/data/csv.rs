//! Flat-file format for labeled pixel time series.
//!
//! One row per pixel:
//!
//! ```text
//! pixel_id,object_id,label,c0_t0,...,c0_t{T-1},c1_t0,...,c{C-1}_t{T-1}
//! ```
//!
//! Cell columns are channel-major and must advance strictly in that order.
//! An empty cell field is a masked (cloud-covered) observation. Values are
//! written with 17 significant digits, so a write/read cycle reproduces
//! every `f64` bit for bit. Errors carry 1-based line numbers.

use super::{DataError, Dataset, Pixel};

/// Renders the dataset; masked cells become empty fields.
pub fn write_csv(dataset: &Dataset) -> String {
    let (c_len, t_len) = (dataset.num_channels(), dataset.num_timesteps);
    let mut out = String::from("pixel_id,object_id,label");
    for c in 0..c_len {
        for t in 0..t_len {
            out.push_str(&format!(",c{c}_t{t}"));
        }
    }
    out.push('\n');
    for p in &dataset.pixels {
        out.push_str(&format!("{},{},{}", p.pixel_id, p.object_id, p.label));
        for cell in &p.values {
            match cell {
                Some(v) => out.push_str(&format!(",{v:.16e}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

fn err(line: usize, msg: impl Into<String>) -> DataError {
    DataError::Csv {
        line,
        msg: msg.into(),
    }
}

/// Parses a cell column name of the form `c{channel}_t{timestep}`.
fn parse_cell_column(name: &str, line: usize) -> Result<(usize, usize), DataError> {
    let bad = || err(line, format!("malformed cell column name {name:?}"));
    let rest = name.strip_prefix('c').ok_or_else(bad)?;
    let (c, t) = rest.split_once("_t").ok_or_else(bad)?;
    Ok((
        c.parse().map_err(|_| bad())?,
        t.parse().map_err(|_| bad())?,
    ))
}

/// Parses a dataset written by [`write_csv`]. Channel names default to
/// `c0..c{C-1}`; callers with richer metadata can rename afterwards.
pub fn read_csv(text: &str) -> Result<Dataset, DataError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "empty input, expected a header line"))?;
    let header = header.trim_end_matches('\r');
    let mut columns = header.split(',');
    for expected in ["pixel_id", "object_id", "label"] {
        let got = columns.next().unwrap_or("");
        if got != expected {
            return Err(err(1, format!("expected column {expected:?}, found {got:?}")));
        }
    }
    let cells: Vec<(usize, usize)> = columns
        .map(|name| parse_cell_column(name, 1))
        .collect::<Result<_, _>>()?;
    if cells.is_empty() {
        return Err(err(1, "no cell columns"));
    }
    let t_len = cells.iter().take_while(|&&(c, _)| c == 0).count();
    if t_len == 0 || cells.len() % t_len != 0 {
        return Err(err(1, "cell columns are not channel-major"));
    }
    let c_len = cells.len() / t_len;
    for (i, &(c, t)) in cells.iter().enumerate() {
        if (c, t) != (i / t_len, i % t_len) {
            return Err(err(
                1,
                format!(
                    "cell columns must advance channel-major; found c{c}_t{t} at position {i}"
                ),
            ));
        }
    }

    let mut pixels = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, raw) in lines {
        let line = idx + 1; // enumerate is 0-based, error lines are 1-based
        let row = raw.trim_end_matches('\r');
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 3 + cells.len() {
            return Err(err(
                line,
                format!("expected {} fields, found {}", 3 + cells.len(), fields.len()),
            ));
        }
        let pixel_id: u64 = fields[0]
            .parse()
            .map_err(|_| err(line, format!("bad pixel_id {:?}", fields[0])))?;
        if !seen.insert(pixel_id) {
            return Err(err(line, format!("duplicate pixel_id {pixel_id}")));
        }
        let object_id: u64 = fields[1]
            .parse()
            .map_err(|_| err(line, format!("bad object_id {:?}", fields[1])))?;
        let label: usize = fields[2]
            .parse()
            .map_err(|_| err(line, format!("bad label {:?}", fields[2])))?;
        let mut values = Vec::with_capacity(cells.len());
        for (k, field) in fields[3..].iter().enumerate() {
            if field.is_empty() {
                values.push(None);
                continue;
            }
            let v: f64 = field.parse().map_err(|_| {
                let (c, t) = cells[k];
                err(line, format!("bad value {field:?} in c{c}_t{t}"))
            })?;
            if !v.is_finite() {
                let (c, t) = cells[k];
                return Err(err(line, format!("non-finite value in c{c}_t{t}")));
            }
            values.push(Some(v));
        }
        pixels.push(Pixel {
            pixel_id,
            object_id,
            label,
            values,
        });
    }

    Ok(Dataset {
        channel_names: (0..c_len).map(|c| format!("c{c}")).collect(),
        num_timesteps: t_len,
        pixels,
    })
}
