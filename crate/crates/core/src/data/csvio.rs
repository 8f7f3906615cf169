use std::fs::File;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{LabelRow, PriceRow, QuarterRow, RawData};
use crate::error::{Error, Result};

/// File locations of one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelPaths {
    pub fundamental: PathBuf,
    pub market: PathBuf,
    pub pricing: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub auxiliary: Option<PathBuf>,
}

impl ChannelPaths {
    /// Standard file names inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        let aux = dir.join("auxiliary.csv");
        Self {
            fundamental: dir.join("fundamental.csv"),
            market: dir.join("market.csv"),
            pricing: dir.join("pricing.csv"),
            labels: dir.join("labels.csv"),
            auxiliary: aux.exists().then_some(aux),
        }
    }
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => parse_err(path, line, format!("{other:?}")),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

fn parse_date(path: &Path, line: u64, s: &str) -> Result<NaiveDate> {
    s.parse().map_err(|_| parse_err(path, line, format!("invalid date `{s}`")))
}

fn parse_num(path: &Path, line: u64, s: &str) -> Result<f64> {
    let v: f64 = s.parse().map_err(|_| parse_err(path, line, format!("invalid number `{s}`")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite number `{s}`")));
    }
    Ok(v)
}

fn check_header(path: &Path, rdr: &mut csv::Reader<File>, first: &[&str], prefix: Option<&str>) -> Result<usize> {
    let h = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    for (i, name) in first.iter().enumerate() {
        if h.get(i) != Some(*name) {
            return Err(parse_err(path, 1, format!("column {} must be `{name}`, found {:?}", i + 1, h.get(i))));
        }
    }
    let rest = h.len() - first.len();
    match prefix {
        Some(p) => {
            for (j, name) in h.iter().skip(first.len()).enumerate() {
                if name != format!("{p}{:03}", j + 1) {
                    return Err(parse_err(path, 1, format!("feature column `{name}` should be `{p}{:03}`", j + 1)));
                }
            }
            if rest == 0 {
                return Err(parse_err(path, 1, "no feature columns"));
            }
        }
        None if rest != 0 => return Err(parse_err(path, 1, format!("unexpected extra columns ({rest})"))),
        None => {}
    }
    Ok(rest)
}

fn read_quarters(path: &Path, prefix: &str) -> Result<Vec<QuarterRow>> {
    let mut rdr = reader(path)?;
    let f = check_header(path, &mut rdr, &["firm_id", "report_date"], Some(prefix))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != f + 2 {
            return Err(parse_err(path, line, format!("expected {} fields, found {}", f + 2, rec.len())));
        }
        let date = parse_date(path, line, &rec[1])?;
        let values = (0..f)
            .map(|j| match &rec[j + 2] {
                "" => Ok(None),
                s => parse_num(path, line, s).map(Some),
            })
            .collect::<Result<_>>()?;
        rows.push(QuarterRow { firm_id: rec[0].to_string(), date, values });
    }
    Ok(rows)
}

fn read_prices(path: &Path) -> Result<Vec<PriceRow>> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &["firm_id", "trade_date", "high", "low", "close"], None)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 5 {
            return Err(parse_err(path, line, format!("expected 5 fields, found {}", rec.len())));
        }
        let date = parse_date(path, line, &rec[1])?;
        let mut px = [0.0; 3];
        for (k, v) in px.iter_mut().enumerate() {
            *v = parse_num(path, line, &rec[k + 2])?;
            if *v <= 0.0 {
                return Err(parse_err(path, line, "prices must be positive"));
            }
        }
        rows.push(PriceRow { firm_id: rec[0].to_string(), date, high: px[0], low: px[1], close: px[2] });
    }
    Ok(rows)
}

fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &["firm_id", "default_date"], None)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(parse_err(path, line, format!("expected 2 fields, found {}", rec.len())));
        }
        let default_date = match &rec[1] {
            "" => None,
            s => Some(parse_date(path, line, s)?),
        };
        rows.push(LabelRow { firm_id: rec[0].to_string(), default_date });
    }
    Ok(rows)
}

/// Read every channel file plus labels.
pub fn load_channels(paths: &ChannelPaths) -> Result<RawData> {
    Ok(RawData {
        fundamental: read_quarters(&paths.fundamental, "f_")?,
        market: read_quarters(&paths.market, "m_")?,
        pricing: read_prices(&paths.pricing)?,
        auxiliary: paths.auxiliary.as_deref().map(|p| read_quarters(p, "a_")).transpose()?,
        labels: read_labels(&paths.labels)?,
    })
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_quarters(path: &Path, prefix: &str, rows: &[QuarterRow]) -> Result<()> {
    let f = rows.first().map_or(0, |r| r.values.len());
    let mut w = writer(path)?;
    let mut header = vec!["firm_id".to_string(), "report_date".to_string()];
    header.extend((1..=f).map(|j| format!("{prefix}{j:03}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let mut rec = Vec::with_capacity(f + 2);
    for r in rows {
        rec.clear();
        rec.push(r.firm_id.clone());
        rec.push(r.date.to_string());
        rec.extend(r.values.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write the standard file set into `dir` and return the paths.
pub fn write_channels(raw: &RawData, dir: &Path) -> Result<ChannelPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = ChannelPaths::in_dir(dir);
    write_quarters(&paths.fundamental, "f_", &raw.fundamental)?;
    write_quarters(&paths.market, "m_", &raw.market)?;
    if let Some(aux) = &raw.auxiliary {
        let p = dir.join("auxiliary.csv");
        write_quarters(&p, "a_", aux)?;
        paths.auxiliary = Some(p);
    }

    let mut w = writer(&paths.pricing)?;
    w.write_record(["firm_id", "trade_date", "high", "low", "close"]).map_err(|e| csv_err(&paths.pricing, e))?;
    for p in &raw.pricing {
        w.write_record([p.firm_id.clone(), p.date.to_string(), p.high.to_string(), p.low.to_string(), p.close.to_string()])
            .map_err(|e| csv_err(&paths.pricing, e))?;
    }
    w.flush().map_err(|e| Error::io(&paths.pricing, e))?;

    let mut w = writer(&paths.labels)?;
    w.write_record(["firm_id", "default_date"]).map_err(|e| csv_err(&paths.labels, e))?;
    for l in &raw.labels {
        w.write_record([l.firm_id.clone(), l.default_date.map(|d| d.to_string()).unwrap_or_default()])
            .map_err(|e| csv_err(&paths.labels, e))?;
    }
    w.flush().map_err(|e| Error::io(&paths.labels, e))?;
    Ok(paths)
}
