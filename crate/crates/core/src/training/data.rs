use std::fs;
use std::io::{self, Read};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Class index per row, each below `num_classes`.
    Classes { labels: Vec<usize>, num_classes: usize },
    /// Target vector per row.
    Values(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Vec<Vec<f64>>, targets: Targets) -> Result<Self> {
        let n = inputs.len();
        let m = match &targets {
            Targets::Classes { labels, num_classes } => {
                if let Some((row, l)) = labels.iter().enumerate().find(|(_, l)| **l >= *num_classes) {
                    return Err(Error::Dataset(format!(
                        "row {row}: label {l} outside 0..{num_classes}"
                    )));
                }
                labels.len()
            }
            Targets::Values(v) => v.len(),
        };
        if n != m {
            return Err(Error::Dataset(format!("{n} input rows but {m} targets")));
        }
        if let Some(d) = inputs.first().map(Vec::len) {
            if let Some(row) = inputs.iter().position(|r| r.len() != d) {
                return Err(Error::Dataset(format!(
                    "row {row} has {} features, expected {d}",
                    inputs[row].len()
                )));
            }
        }
        Ok(Dataset {
            name: name.into(),
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Values(_) => None,
        }
    }

    /// Target vector for row `i` on a net with `n_out` outputs. Classes are
    /// one-hot, or the bare label when there is a single output.
    pub fn target_vector(&self, i: usize, n_out: usize) -> Vec<f64> {
        match &self.targets {
            Targets::Classes { labels, .. } if n_out == 1 => vec![labels[i] as f64],
            Targets::Classes { labels, .. } => {
                let mut t = vec![0.0; n_out];
                if labels[i] < n_out {
                    t[labels[i]] = 1.0;
                }
                t
            }
            Targets::Values(v) => v[i].clone(),
        }
    }

    /// Rows `idx`, in the given order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let inputs = idx.iter().map(|&i| self.inputs[i].clone()).collect();
        let targets = match &self.targets {
            Targets::Classes { labels, num_classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i].clone()).collect()),
        };
        Dataset {
            name: self.name.clone(),
            inputs,
            targets,
        }
    }
}

/// Two rings around the origin: radius 1 (class 0, `n/2` points) and radius
/// 0.5 (class 1, the rest), angles uniform, radii perturbed by `N(0, noise²)`.
pub fn make_concentric_circles(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Dataset(format!("need at least 2 points, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Dataset(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n_outer = n / 2;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (radius, label) = if i < n_outer { (1.0, 0) } else { (0.5, 1) };
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let r = radius + noise * normal.sample(&mut rng);
        inputs.push(vec![r * theta.cos(), r * theta.sin()]);
        labels.push(label);
    }
    Dataset::new(
        "circles",
        inputs,
        Targets::Classes {
            labels,
            num_classes: 2,
        },
    )
}

/// Keeps `round(fraction·n_c)` rows of each class `c`, chosen at random,
/// in their original order.
pub fn stratified_subsample(data: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    let Targets::Classes { labels, num_classes } = &data.targets else {
        return Err(Error::Dataset("stratified sampling needs class labels".into()));
    };
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Dataset(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for c in 0..*num_classes {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if rows.is_empty() {
            continue;
        }
        let k = (fraction * rows.len() as f64).round() as usize;
        if k == 0 {
            return Err(Error::Dataset(format!(
                "fraction {fraction} keeps no rows of class {c} ({} rows)",
                rows.len()
            )));
        }
        keep.extend(index::sample(&mut rng, rows.len(), k).into_iter().map(|j| rows[j]));
    }
    keep.sort_unstable();
    Ok(data.select(&keep))
}

/// A parsed IDX file: dimensions and raw unsigned bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses the IDX layout: two zero bytes, type code `0x08` (unsigned byte),
/// number of dimensions, then big-endian `u32` sizes and the data.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let err = |offset: usize, message: String| Error::Idx {
        offset: offset as u64,
        message,
    };
    if bytes.len() < 4 {
        return Err(err(bytes.len(), "file shorter than the 4-byte magic".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(0, format!("magic must start with two zero bytes, got {:#04x} {:#04x}", bytes[0], bytes[1])));
    }
    if bytes[2] != 0x08 {
        return Err(err(2, format!("unsupported element type {:#04x} (only 0x08 unsigned byte)", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(err(3, "zero dimensions".into()));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(err(bytes.len(), format!("truncated header: {ndim} dimensions need {header} bytes")));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|k| {
            let o = 4 + 4 * k;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| err(4, "dimension product overflows".into()))?;
    let have = bytes.len() - header;
    if have != count {
        return Err(err(
            header + have.min(count),
            format!("expected {count} data bytes after the header, found {have}"),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_idx(&bytes)
}

/// An image IDX file (`n × ...`) and a label IDX file (`n`), pixels scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if lab.dims.len() != 1 {
        return Err(Error::Dataset(format!("label file has {} dimensions, expected 1", lab.dims.len())));
    }
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(Error::Dataset(format!("{n} images but {} labels", lab.dims[0])));
    }
    let row = if n == 0 { 0 } else { img.data.len() / n };
    let inputs = img
        .data
        .chunks(row.max(1))
        .take(n)
        .map(|c| c.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    let name = images
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(
        name,
        inputs,
        Targets::Classes {
            labels: lab.data.iter().map(|&b| b as usize).collect(),
            num_classes,
        },
    )
}

/// How to read a CSV file with a header row: `label_column` holds the target
/// and every other column is a feature.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub label_column: String,
    /// Class count for integer labels; `None` reads the label as a real target.
    pub num_classes: Option<usize>,
}

impl CsvSchema {
    pub fn classes(label_column: &str, num_classes: usize) -> Self {
        CsvSchema {
            label_column: label_column.into(),
            num_classes: Some(num_classes),
        }
    }

    pub fn regression(label_column: &str) -> Self {
        CsvSchema {
            label_column: label_column.into(),
            num_classes: None,
        }
    }
}

pub fn read_csv<R: io::Read>(reader: R, schema: &CsvSchema, name: &str) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| Error::Dataset(format!("no column named '{}'", schema.label_column)))?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::CsvRow { line, message };
        let mut row = Vec::with_capacity(rec.len().saturating_sub(1));
        for (k, field) in rec.iter().enumerate() {
            if k == label_idx {
                match schema.num_classes {
                    Some(_) => labels.push(field.trim().parse::<usize>().map_err(|_| {
                        bad(format!("label '{field}' is not a class index"))
                    })?),
                    None => values.push(vec![field.trim().parse::<f64>().map_err(|_| {
                        bad(format!("target '{field}' is not a number"))
                    })?]),
                }
            } else {
                row.push(field.trim().parse::<f64>().map_err(|_| {
                    bad(format!("column '{}': '{field}' is not a number", &headers[k]))
                })?);
            }
        }
        inputs.push(row);
    }
    let targets = match schema.num_classes {
        Some(num_classes) => Targets::Classes { labels, num_classes },
        None => Targets::Values(values),
    };
    Dataset::new(name, inputs, targets)
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    read_csv(fs::File::open(path)?, schema, &name)
}

/// Header `x0,...,x{d-1},label`; reals written with full precision.
pub fn write_csv<W: io::Write>(data: &Dataset, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..data.num_features()).map(|k| format!("x{k}")).collect();
    header.push("label".into());
    wr.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.inputs[i].iter().map(|x| format!("{x:?}")).collect();
        match &data.targets {
            Targets::Classes { labels, .. } => rec.push(labels[i].to_string()),
            Targets::Values(v) => {
                if v[i].len() != 1 {
                    return Err(Error::Dataset("CSV export supports one target column".into()));
                }
                rec.push(format!("{:?}", v[i][0]));
            }
        }
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(dims: &[u32], data: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 0x08, dims.len() as u8];
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(data);
        b
    }

    #[test]
    fn circles_on_radii_without_noise() {
        let d = make_concentric_circles(4, 0.0, 1).unwrap();
        let labels = d.labels().unwrap();
        for (x, &l) in d.inputs.iter().zip(labels) {
            let r = x[0].hypot(x[1]);
            let want = if l == 0 { 1.0 } else { 0.5 };
            assert!((r - want).abs() < 1e-15);
        }
    }

    #[test]
    fn circles_are_balanced_and_seeded() {
        let d = make_concentric_circles(501, 0.05, 3).unwrap();
        let ones = d.labels().unwrap().iter().filter(|&&l| l == 1).count();
        assert!((ones as i64 - (501 - ones) as i64).abs() <= 1);
        assert_eq!(d, make_concentric_circles(501, 0.05, 3).unwrap());
        assert_ne!(d, make_concentric_circles(501, 0.05, 4).unwrap());
        assert!(make_concentric_circles(1, 0.0, 0).is_err());
    }

    fn blocks(classes: usize, per: usize) -> Dataset {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for i in 0..per {
                inputs.push(vec![(c * per + i) as f64]);
                labels.push(c);
            }
        }
        Dataset::new("blocks", inputs, Targets::Classes { labels, num_classes: classes }).unwrap()
    }

    #[test]
    fn stratified_examples() {
        let d = blocks(3, 7);
        assert_eq!(stratified_subsample(&d, 1.0, 0).unwrap(), d);
        let s = stratified_subsample(&blocks(10, 100), 0.01, 5).unwrap();
        assert_eq!(s.len(), 10);
        let big = stratified_subsample(&blocks(10, 6000), 0.01, 5).unwrap();
        assert_eq!(big.len(), 600);
        for c in 0..10 {
            assert_eq!(big.labels().unwrap().iter().filter(|&&l| l == c).count(), 60);
        }
        assert!(big.inputs.windows(2).all(|w| w[0][0] < w[1][0]));
        assert!(stratified_subsample(&blocks(2, 10), 0.01, 0).is_err());
        assert_eq!(stratified_subsample(&d, 0.5, 9).unwrap(), stratified_subsample(&d, 0.5, 9).unwrap());
    }

    #[test]
    fn idx_round_values() {
        let a = parse_idx(&idx_bytes(&[2, 2], &[0, 255, 51, 102])).unwrap();
        assert_eq!(a.dims, vec![2, 2]);
        assert_eq!(a.data, vec![0, 255, 51, 102]);
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let mut b = idx_bytes(&[2, 2], &[0, 1, 2, 3]);
        b[2] = 0x0d;
        assert!(matches!(parse_idx(&b), Err(Error::Idx { offset: 2, .. })));
        let b = idx_bytes(&[2, 2], &[0, 1, 2]);
        assert!(matches!(parse_idx(&b), Err(Error::Idx { offset: 15, .. })));
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(Error::Idx { offset: 3, .. })));
    }

    #[test]
    fn idx_dataset_is_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        fs::write(&img, idx_bytes(&[2, 1, 2], &[0, 255, 51, 102])).unwrap();
        fs::write(&lab, idx_bytes(&[2], &[1, 0])).unwrap();
        let d = load_idx(&img, &lab, 2).unwrap();
        assert_eq!(d.inputs, vec![vec![0.0, 1.0], vec![0.2, 0.4]]);
        assert_eq!(d.labels().unwrap(), &[1, 0]);
    }

    #[test]
    fn csv_reading() {
        let text = "a,b,y\n1,2,0\n3,4,1\n5,6,1\n";
        let d = read_csv(text.as_bytes(), &CsvSchema::classes("y", 2), "t").unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.inputs[1], vec![3.0, 4.0]);
        let err = read_csv("a,y\n1,0\nx,1\n".as_bytes(), &CsvSchema::classes("y", 2), "t").unwrap_err();
        assert!(matches!(err, Error::CsvRow { line: 3, .. }), "{err:?}");
        assert!(read_csv(text.as_bytes(), &CsvSchema::classes("label", 2), "t").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let d = make_concentric_circles(20, 0.1, 2).unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &CsvSchema::classes("label", 2), "circles").unwrap();
        assert_eq!(back, d);
        let r = Dataset::new("r", vec![vec![0.1], vec![0.2]], Targets::Values(vec![vec![1.5], vec![-0.3]])).unwrap();
        let mut buf = Vec::new();
        write_csv(&r, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &CsvSchema::regression("label"), "r").unwrap();
        assert_eq!(back, r);
    }
}
