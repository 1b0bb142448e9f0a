use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::forecaster::Forecaster;
use super::ModelConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const HEADER: &str = "irrcast-checkpoint v1";

fn parse_err(row: usize, message: impl Into<String>) -> Error {
    Error::Parse { row, message: message.into() }
}

/// Writes the configuration echo and every parameter as
/// `param <name> <dims>` followed by one line of values.
pub fn save_checkpoint(model: &Forecaster, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{HEADER}")?;
    let config = serde_json::to_string(&model.config).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    writeln!(w, "config {config}")?;
    writeln!(w, "n_vars {}", model.n_vars)?;
    match model.ncde().and_then(|pe| pe.table()) {
        Some(t) => writeln!(w, "ncde_table {:.16e}", t.resolution)?,
        None => writeln!(w, "ncde_table none")?,
    }
    for (_, p) in model.store.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        writeln!(w, "param {} {}", p.name, dims.join(","))?;
        let vals: Vec<String> = p.value.data().iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}", vals.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds the model from its configuration and overwrites every parameter,
/// validating names and shapes.
pub fn load_checkpoint(path: &Path) -> Result<Forecaster> {
    let mut lines = BufReader::new(fs::File::open(path)?).lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, l)) => Ok((i, l?)),
            None => Err(parse_err(0, format!("unexpected end of file, expected {what}"))),
        }
    };
    let (i, header) = next("header")?;
    if header != HEADER {
        return Err(parse_err(i, format!("bad header `{header}`")));
    }
    let (i, line) = next("config")?;
    let json = line.strip_prefix("config ").ok_or_else(|| parse_err(i, "expected config line"))?;
    let config: ModelConfig = serde_json::from_str(json).map_err(|e| parse_err(i, e.to_string()))?;
    let (i, line) = next("n_vars")?;
    let n_vars: usize = line
        .strip_prefix("n_vars ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| parse_err(i, "expected n_vars line"))?;
    let (i, line) = next("ncde_table")?;
    let table = match line.strip_prefix("ncde_table ") {
        Some("none") => None,
        Some(v) => Some(v.parse::<f64>().map_err(|e| parse_err(i, e.to_string()))?),
        None => return Err(parse_err(i, "expected ncde_table line")),
    };
    let label_len = config.label_len;
    let mut model = Forecaster::new(config, n_vars, label_len, 0)?;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let (i, line) = next("param")?;
        let mut parts = line.split(' ');
        let (tag, name, dims) = (parts.next(), parts.next(), parts.next());
        let expected = model.store.get(id).name.clone();
        if tag != Some("param") || name != Some(expected.as_str()) {
            return Err(parse_err(i, format!("expected parameter `{expected}`")));
        }
        let shape = dims
            .unwrap_or("")
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(i, e.to_string()))?;
        let (i, line) = next("values")?;
        let data = line
            .split(' ')
            .filter(|s| !s.is_empty())
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(i, e.to_string()))?;
        let value = Tensor::from_vec(&shape, data).map_err(|e| parse_err(i, e.to_string()))?;
        model.store.set_value(id, value)?;
    }
    if let Some((i, _)) = lines.next() {
        return Err(parse_err(i, "trailing content after the last parameter"));
    }
    if let Some(res) = table {
        let (pe, store) = model
            .ncde_mut()
            .ok_or_else(|| Error::InvalidConfig("checkpoint has a table but no ncde embedding".into()))?;
        pe.freeze(store, res)?;
    }
    Ok(model)
}
