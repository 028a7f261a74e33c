//! File formats.
//!
//! Dataset table (CSV): `patient_id,group,t,D,x0,...,x{d-1}`, one row per
//! patient and bin, bins `0..T` in order; an empty feature cell is missing.
//! Truth sidecar (JSON): canonical name to value map plus the structured
//! parameters. Draws table (CSV): `chain,draw,accept_stat,divergent,
//! tree_depth` followed by one column per canonical parameter name.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, GroupId, PatientRecord};
use crate::sampler::PosteriorDraws;
use crate::simulate::Truth;

const DATASET_KEYS: [&str; 4] = ["patient_id", "group", "t", "D"];
const DRAW_KEYS: [&str; 5] = ["chain", "draw", "accept_stat", "divergent", "tree_depth"];

pub fn write_dataset_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = DATASET_KEYS.iter().map(|s| s.to_string()).collect();
    header.extend((0..data.d).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for p in &data.patients {
        for (t, (&v, row)) in p.visits.iter().zip(&p.features).enumerate() {
            let mut rec = vec![p.patient_id.clone(), p.group.index.to_string(), t.to_string(), u8::from(v).to_string()];
            rec.extend(row.iter().map(|x| x.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(s: &str, what: &str, line: u64) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Data(format!("line {line}: cannot parse {what} from '{s}'")))
}

/// Reads a dataset table. `delta` defaults to `1 / max_horizon` and
/// `n_groups` to one more than the largest group index.
pub fn read_dataset_csv(path: &Path, delta: Option<f64>, n_groups: Option<usize>) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header = r.headers()?.clone();
    if header.len() < 5 || header.iter().take(4).ne(DATASET_KEYS) {
        return Err(Error::Data(format!(
            "dataset header must start with {} and have at least one feature column",
            DATASET_KEYS.join(",")
        )));
    }
    let d = header.len() - 4;
    let mut patients: Vec<PatientRecord> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[0].to_string();
        let group: usize = parse(&rec[1], "group", line)?;
        let t: usize = parse(&rec[2], "t", line)?;
        let visit = match rec[3].trim() {
            "1" => true,
            "0" => false,
            other => return Err(Error::Data(format!("line {line}: D must be 0 or 1, found '{other}'"))),
        };
        let row = (0..d)
            .map(|j| {
                let cell = rec[4 + j].trim();
                if cell.is_empty() {
                    Ok(None)
                } else {
                    parse::<f64>(cell, "feature", line).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let k = *index.entry(id.clone()).or_insert_with(|| {
            patients.push(PatientRecord {
                patient_id: id.clone(),
                group: GroupId::new(group),
                visits: Vec::new(),
                features: Vec::new(),
            });
            patients.len() - 1
        });
        let p = &mut patients[k];
        if p.group.index != group {
            return Err(Error::Data(format!("line {line}: patient {id} changes group")));
        }
        if t != p.visits.len() {
            return Err(Error::Data(format!(
                "line {line}: patient {id} expected bin {}, found {t}",
                p.visits.len()
            )));
        }
        p.visits.push(visit);
        p.features.push(row);
    }
    let max_h = patients.iter().map(|p| p.horizon()).max().unwrap_or(0);
    if max_h == 0 {
        return Err(Error::Data("dataset has no rows".into()));
    }
    let data = Dataset {
        n_groups: n_groups.unwrap_or_else(|| patients.iter().map(|p| p.group.index + 1).max().unwrap_or(1)),
        patients,
        d,
        delta: delta.unwrap_or(1.0 / max_h as f64),
    };
    data.validate()?;
    Ok(data)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TruthFile {
    values: BTreeMap<String, f64>,
    truth: Truth,
}

pub fn write_truth_json(truth: &Truth, path: &Path) -> Result<()> {
    let file = TruthFile {
        values: truth.named_values(),
        truth: truth.clone(),
    };
    write_json(&file, path)
}

pub fn read_truth_json(path: &Path) -> Result<Truth> {
    let file: TruthFile = read_json(path)?;
    if file.truth.patient_ids.len() != file.truth.params.latents.len() {
        return Err(Error::Data("truth file: patient ids and latents differ in length".into()));
    }
    Ok(file.truth)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(toml::from_str(&text)?)
}

pub fn write_draws_csv(draws: &PosteriorDraws, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<&str> = DRAW_KEYS.iter().copied().chain(draws.names.iter().map(String::as_str)).collect();
    w.write_record(&header)?;
    let mut within = vec![0usize; draws.n_chains.max(1)];
    for (i, row) in draws.values.iter().enumerate() {
        let c = draws.chain_ids[i];
        let mut rec = vec![
            c.to_string(),
            within[c].to_string(),
            draws.accept_stats[i].to_string(),
            u8::from(draws.divergences[i]).to_string(),
            draws.tree_depths[i].to_string(),
        ];
        within[c] += 1;
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_draws_csv(path: &Path) -> Result<PosteriorDraws> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header = r.headers()?.clone();
    if header.len() < DRAW_KEYS.len() || header.iter().take(DRAW_KEYS.len()).ne(DRAW_KEYS) {
        return Err(Error::Data(format!("draws header must start with {}", DRAW_KEYS.join(","))));
    }
    let names: Vec<String> = header.iter().skip(DRAW_KEYS.len()).map(str::to_string).collect();
    let mut draws = PosteriorDraws::new(names, 0);
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let chain: usize = parse(&rec[0], "chain", line)?;
        let accept: f64 = parse(&rec[2], "accept_stat", line)?;
        let divergent = parse::<u8>(&rec[3], "divergent", line)? != 0;
        let depth: usize = parse(&rec[4], "tree_depth", line)?;
        let values = rec
            .iter()
            .skip(DRAW_KEYS.len())
            .map(|v| parse::<f64>(v, "value", line))
            .collect::<Result<Vec<_>>>()?;
        draws.push_row(chain, values, accept, divergent, depth);
    }
    Ok(draws)
}
