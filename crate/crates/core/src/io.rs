//! JSON documents and atomic file output.
//!
//! Every document carries a `format` tag, a `version`, and a `units` table.
//! Floats are written in shortest round-trip form; non-finite values become `null`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DOCUMENT_VERSION: u32 = 1;

/// Serde adapter writing non-finite floats as `null` and reading `null` as NaN.
pub mod nullable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Envelope shared by all JSON outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document<T> {
    pub format: String,
    pub version: u32,
    pub units: serde_json::Map<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
    pub data: T,
}

impl<T> Document<T> {
    pub fn new(format: &str, units: &[(&str, &str)], data: T) -> Self {
        Self {
            format: format.to_string(),
            version: DOCUMENT_VERSION,
            units: units
                .iter()
                .map(|(k, v)| (k.to_string(), serde_json::Value::String(v.to_string())))
                .collect(),
            provenance: None,
            data,
        }
    }

    pub fn with_provenance(mut self, p: serde_json::Value) -> Self {
        self.provenance = Some(p);
        self
    }
}

pub const HISTOGRAM_FORMAT: &str = "biphoton-histogram";
pub const RECONSTRUCTION_FORMAT: &str = "biphoton-reconstruction";
pub const FIT_FORMAT: &str = "biphoton-fit";
pub const MANIFEST_FORMAT: &str = "biphoton-manifest";

pub const HISTOGRAM_UNITS: &[(&str, &str)] = &[
    ("bin_width", "s"),
    ("tau_min", "s"),
    ("tau_max", "s"),
    ("acquisition_time", "s"),
    ("counts", "coincidences"),
    ("singles_a", "clicks"),
    ("singles_b", "clicks"),
    ("setting", "rad"),
    ("expected", "coincidences"),
];

pub const RECONSTRUCTION_UNITS: &[(&str, &str)] = &[
    ("tau", "s"),
    ("bin_width", "s"),
    ("y", "relative (normalized coincidence rate)"),
    ("re_psi", "relative"),
    ("im_psi", "relative"),
    ("gamma", "relative"),
];

pub const FIT_UNITS: &[(&str, &str)] = &[
    ("amplitude", "relative"),
    ("tau_offset", "s"),
    ("corr_time", "s"),
    ("fwhm", "s"),
    ("phase", "rad"),
    ("phi", "rad"),
];

/// Writes `bytes` to `path` through a temporary file in the same directory and a rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Reads a document and checks its format tag.
pub fn read_document<T: DeserializeOwned>(path: impl AsRef<Path>, format: &str) -> Result<Document<T>> {
    let doc: Document<T> = read_json(&path)?;
    if doc.format != format {
        return Err(Error::Mismatch(format!(
            "{} holds a {:?} document, expected {format:?}",
            path.as_ref().display(),
            doc.format
        )));
    }
    if doc.version != DOCUMENT_VERSION {
        return Err(Error::Mismatch(format!("unsupported document version {}", doc.version)));
    }
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlate::CoincidenceHistogram;

    #[derive(Serialize, Deserialize)]
    struct F(#[serde(with = "nullable")] f64);

    #[test]
    fn non_finite_becomes_null() {
        assert_eq!(serde_json::to_string(&F(f64::INFINITY)).unwrap(), "null");
        assert!(serde_json::from_str::<F>("null").unwrap().0.is_nan());
        assert_eq!(serde_json::from_str::<F>("0.1").unwrap().0, 0.1);
    }

    #[test]
    fn floats_round_trip_losslessly() {
        let h = CoincidenceHistogram {
            bin_width: 4e-9,
            tau_min: -2e-7,
            tau_max: 2e-7,
            counts: vec![1; 100],
            acquisition_time: 1.0 / 3.0,
            singles_a: 7,
            singles_b: 9,
            setting: Some(crate::model::AnalyzerSetting::reconstruction(1)),
            expected: Some(vec![std::f64::consts::PI; 100]),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.json");
        write_json(&p, &Document::new(HISTOGRAM_FORMAT, HISTOGRAM_UNITS, h.clone())).unwrap();
        let back: Document<CoincidenceHistogram> = read_document(&p, HISTOGRAM_FORMAT).unwrap();
        assert_eq!(back.data, h);
        assert!(read_document::<CoincidenceHistogram>(&p, FIT_FORMAT).is_err());
        assert!(fs::read_dir(dir.path()).unwrap().count() == 1);
    }
}
