//! File formats: model configs, headerless CSV data, and JSON artifacts with
//! floats written at 17 significant digits so every value reads back
//! bit-for-bit.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{ClipBounds, Dataset, ExpFamModel, ModelId, ModelSpec, Record};
use crate::linalg::Matrix;
use crate::privacy::ReleasedStatistic;

/// serde_json formatter that prints floats in full round-trip precision.
#[derive(Debug, Clone, Copy, Default)]
pub struct RoundTripFormatter;

impl serde_json::ser::Formatter for RoundTripFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        writer.write_all(fmt_f64(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        write!(writer, "{value:.8e}")
    }
}

/// A finite float as 17 significant digits in scientific notation.
pub fn fmt_f64(value: f64) -> String {
    format!("{value:.16e}")
}

pub fn to_json_string<S: Serialize + ?Sized>(value: &S) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, RoundTripFormatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> Result<()> {
    let mut text = to_json_string(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_release(path: &Path) -> Result<ReleasedStatistic<f64>> {
    let rel: ReleasedStatistic<f64> = read_json(path)?;
    rel.validate()?;
    Ok(rel)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(rename = "B_X", default, skip_serializing_if = "Option::is_none")]
    pub b_x: Option<f64>,
    #[serde(rename = "B_Y", default, skip_serializing_if = "Option::is_none")]
    pub b_y: Option<f64>,
}

/// On-disk model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub model_id: ModelId,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma0_sq: Option<f64>,
    pub clip: ClipConfig,
    /// Relative paths resolve against the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design_csv: Option<String>,
}

impl ModelConfig {
    pub fn spec(&self) -> Result<ModelSpec<f64>> {
        let c = &self.clip;
        let missing = |what: &str| Error::InvalidConfig(format!("{} needs clip.{what}", self.model_id));
        let clip = match self.model_id {
            ModelId::GaussianMean => ClipBounds::gaussian(c.b.ok_or_else(|| missing("B"))?),
            ModelId::Logistic => ClipBounds::logistic(c.b_x.or(c.b).ok_or_else(|| missing("B_X"))?),
            ModelId::Poisson => ClipBounds::poisson(c.b_x.ok_or_else(|| missing("B_X"))?, c.b_y.ok_or_else(|| missing("B_Y"))?),
        };
        let spec = ModelSpec {
            id: self.model_id,
            d: self.d,
            sigma0_sq: self.sigma0_sq.unwrap_or(1.0),
            clip,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A parsed model config plus where its design lives.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub spec: ModelSpec<f64>,
    pub design_path: Option<PathBuf>,
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ModelConfig = read_json(path)?;
        let spec = cfg.spec()?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let design_path = cfg.design_csv.map(|p| base.join(p));
        Ok(Self { spec, design_path })
    }

    /// Builds the model, reading the public design for regression families.
    pub fn model(&self) -> Result<ExpFamModel<f64>> {
        if !self.spec.id.is_regression() {
            return self.spec.bind(None);
        }
        let path = self
            .design_path
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig(format!("{} model config needs design_csv", self.spec.id)))?;
        self.spec.bind(Some(read_design_csv(path, self.spec.d)?))
    }

    /// Builds the model over the covariates of a dataset.
    pub fn model_for_data(&self, data: &Dataset<f64>) -> Result<ExpFamModel<f64>> {
        if !self.spec.id.is_regression() {
            return self.spec.bind(None);
        }
        let design = data
            .design()
            .ok_or_else(|| Error::Schema("regression data needs covariates".into()))?;
        self.spec.bind(Some(design))
    }
}

fn csv_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, field)| {
                field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Schema(format!("row {}, column {}: {field:?} is not a finite number", i + 1, j + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(rows)
}

fn check_width(rows: &[Vec<f64>], width: usize) -> Result<()> {
    match rows.iter().position(|r| r.len() != width) {
        Some(i) => Err(Error::Schema(format!(
            "row {} has {} columns, expected {width}",
            i + 1,
            rows[i].len()
        ))),
        None => Ok(()),
    }
}

/// Headerless rows of `d` floats.
pub fn read_design_csv(path: &Path, d: usize) -> Result<Matrix<f64>> {
    let rows = csv_rows(path)?;
    check_width(&rows, d)?;
    Ok(Matrix::from_rows(&rows).expect("checked width"))
}

/// Headerless data: one column for `gaussian_mean`, otherwise `d` feature
/// columns followed by the response.
pub fn read_dataset_csv(path: &Path, spec: &ModelSpec<f64>) -> Result<Dataset<f64>> {
    let rows = csv_rows(path)?;
    if !spec.id.is_regression() {
        check_width(&rows, 1)?;
        return Ok(Dataset::new(rows.into_iter().map(|r| Record::Scalar(r[0])).collect()));
    }
    check_width(&rows, spec.d + 1)?;
    let mut records = Vec::with_capacity(rows.len());
    for (i, mut r) in rows.into_iter().enumerate() {
        let y = r.pop().expect("width checked");
        let ok = match spec.id {
            ModelId::Logistic => y == 0.0 || y == 1.0,
            _ => y >= 0.0,
        };
        if !ok {
            return Err(Error::Schema(format!("row {}: response {y} invalid for {}", i + 1, spec.id)));
        }
        records.push(Record::Labeled { x: r, y });
    }
    Ok(Dataset::new(records))
}

fn write_rows<'a, I: IntoIterator<Item = Vec<f64>>>(path: &'a Path, rows: I) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in rows {
        w.write_record(row.iter().map(|&v| fmt_f64(v)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_csv(path: &Path, data: &Dataset<f64>) -> Result<()> {
    write_rows(
        path,
        data.records().iter().map(|r| match r {
            Record::Scalar(x) => vec![*x],
            Record::Labeled { x, y } => {
                let mut row = x.clone();
                row.push(*y);
                row
            }
        }),
    )
}

pub fn write_design_csv(path: &Path, design: &Matrix<f64>) -> Result<()> {
    write_rows(path, design.row_iter().map(<[f64]>::to_vec))
}

/// JSON written next to a synthetic CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSidecar {
    pub source_theta: Vec<f64>,
    pub n_syn: usize,
    pub seed: u64,
    pub model_id: ModelId,
}

/// `data.csv` → `data.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::privacy::{release, PrivacyBudget};
    use crate::rng::SeededRng;

    #[test]
    fn floats_round_trip_exactly() {
        let values = vec![0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0];
        let text = to_json_string(&values).unwrap();
        let back: Vec<f64> = serde_json::from_str(&text).unwrap();
        for (a, b) in values.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(text.contains("3.3333333333333331e-1"));
    }

    #[test]
    fn release_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ExpFamModel::gaussian_mean(1.0, 1.0).unwrap();
        let rel = release(&[0.25], &m, 100, PrivacyBudget::new(1.0, 1e-4).unwrap(), &mut SeededRng::new(5)).unwrap();
        let p = dir.path().join("rel.json");
        write_json(&p, &rel).unwrap();
        assert_eq!(read_release(&p).unwrap(), rel);
    }

    #[test]
    fn model_config_parsing() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x.csv"), "1,0\n0,2\n5,0\n").unwrap();
        let cfg = dir.path().join("m.json");
        fs::write(&cfg, r#"{"model_id":"poisson","d":2,"clip":{"B_X":3,"B_Y":20},"design_csv":"x.csv"}"#).unwrap();
        let mf = ModelFile::load(&cfg).unwrap();
        assert_eq!(mf.spec.clip.b, 60.0);
        let m = mf.model().unwrap();
        assert_eq!(m.design().unwrap().row(2), &[3.0, 0.0]);

        fs::write(&cfg, r#"{"model_id":"poisson","d":2,"clip":{"B_X":3}}"#).unwrap();
        assert_eq!(ModelFile::load(&cfg).unwrap_err().code(), "invalid_config");
        fs::write(&cfg, r#"{"model_id":"gaussian_mean","d":1,"sigma0_sq":2,"clip":{"B":4}}"#).unwrap();
        assert_eq!(ModelFile::load(&cfg).unwrap().model().unwrap().sigma0_sq(), 2.0);
    }

    #[test]
    fn dataset_csv_schema_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let spec = ModelSpec {
            id: ModelId::Logistic,
            d: 2,
            sigma0_sq: 1.0,
            clip: ClipBounds::logistic(3.0),
        };
        fs::write(&p, "0.5,1.5,1\n-1,2,0\n").unwrap();
        let d = read_dataset_csv(&p, &spec).unwrap();
        assert_eq!(d.n(), 2);
        write_dataset_csv(&p, &d).unwrap();
        assert_eq!(read_dataset_csv(&p, &spec).unwrap(), d);

        fs::write(&p, "0.5,1.5\n").unwrap();
        assert_eq!(read_dataset_csv(&p, &spec).unwrap_err().code(), "schema_mismatch");
        fs::write(&p, "0.5,1.5,0.3\n").unwrap();
        assert_eq!(read_dataset_csv(&p, &spec).unwrap_err().code(), "schema_mismatch");
        fs::write(&p, "a,b,1\n").unwrap();
        assert_eq!(read_dataset_csv(&p, &spec).unwrap_err().code(), "schema_mismatch");
        fs::write(&p, "").unwrap();
        assert_eq!(read_dataset_csv(&p, &spec).unwrap_err().code(), "empty_dataset");
    }
}
