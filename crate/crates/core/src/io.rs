//! On-disk formats: GRIDv1 rasters and dataset manifests.
//!
//! A raster file is one ASCII header line
//! `GRIDv1 <channels> <height> <width> <f32|i32>` followed by little-endian
//! values, channel-major planes of row-major pixels.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ClassCatalog, ClassSet, GridImage, LabelMap, PartialDataset, Sample, Split};

pub const GRID_MAGIC: &str = "GRIDv1";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    I32,
}

impl Dtype {
    fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::I32 => "i32",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridHeader {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub dtype: Dtype,
}

fn header_line(h: &GridHeader) -> String {
    format!(
        "{GRID_MAGIC} {} {} {} {}\n",
        h.channels,
        h.height,
        h.width,
        h.dtype.as_str()
    )
}

pub fn encode_image(img: &GridImage) -> Vec<u8> {
    let h = GridHeader {
        channels: img.channels(),
        height: img.height(),
        width: img.width(),
        dtype: Dtype::F32,
    };
    let mut out = header_line(&h).into_bytes();
    out.reserve(img.values().len() * 4);
    for &v in img.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn encode_labels(label: &LabelMap) -> Vec<u8> {
    let h = GridHeader {
        channels: 1,
        height: label.height(),
        width: label.width(),
        dtype: Dtype::I32,
    };
    let mut out = header_line(&h).into_bytes();
    out.reserve(label.pixels() * 4);
    for &l in label.labels() {
        out.extend_from_slice(&(l as i32).to_le_bytes());
    }
    out
}

fn parse_header(path: &Path, line: &str) -> Result<GridHeader> {
    let parts: Vec<&str> = line.trim_end().split(' ').collect();
    if parts.len() != 5 || parts[0] != GRID_MAGIC {
        return Err(Error::format(path, format!("bad header {line:?}")));
    }
    let dim = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::format(path, format!("bad dimension {s:?}")))
    };
    let dtype = match parts[4] {
        "f32" => Dtype::F32,
        "i32" => Dtype::I32,
        other => return Err(Error::format(path, format!("unknown dtype {other:?}"))),
    };
    Ok(GridHeader {
        channels: dim(parts[1])?,
        height: dim(parts[2])?,
        width: dim(parts[3])?,
        dtype,
    })
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(GridHeader, Vec<[u8; 4]>)> {
    let mut reader = BufReader::new(bytes);
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let header = parse_header(path, &line)?;
    let mut body = Vec::new();
    reader
        .read_to_end(&mut body)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let n = header.channels * header.height * header.width;
    if body.len() != n * 4 {
        return Err(Error::format(
            path,
            format!("expected {} payload bytes, found {}", n * 4, body.len()),
        ));
    }
    let words = body
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect();
    Ok((header, words))
}

pub fn decode_image(path: &Path, bytes: &[u8]) -> Result<GridImage> {
    let (h, words) = decode(path, bytes)?;
    if h.dtype != Dtype::F32 {
        return Err(Error::format(path, "image raster must be f32"));
    }
    let values = words.into_iter().map(|w| f32::from_le_bytes(w) as f64).collect();
    GridImage::new(h.channels, h.height, h.width, values)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn decode_labels(path: &Path, bytes: &[u8]) -> Result<LabelMap> {
    let (h, words) = decode(path, bytes)?;
    if h.dtype != Dtype::I32 || h.channels != 1 {
        return Err(Error::format(path, "label raster must be single-channel i32"));
    }
    let labels = words
        .into_iter()
        .map(|w| {
            let v = i32::from_le_bytes(w);
            u8::try_from(v).map_err(|_| Error::format(path, format!("label {v} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(h.height, h.width, labels).map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_image(path: &Path, img: &GridImage) -> Result<()> {
    write_bytes(path, &encode_image(img))
}

pub fn read_image(path: &Path) -> Result<GridImage> {
    decode_image(path, &read_bytes(path)?)
}

pub fn write_labels(path: &Path, label: &LabelMap) -> Result<()> {
    write_bytes(path, &encode_labels(label))
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    decode_labels(path, &read_bytes(path)?)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub annotated: ClassSet,
    pub split: Split,
    pub samples: Vec<SampleEntry>,
}

/// Dataset manifest. Raster paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub catalog: ClassCatalog,
    pub datasets: Vec<DatasetEntry>,
}

impl Manifest {
    pub fn parse(path: &Path, text: &str) -> Result<Manifest> {
        let m: Manifest =
            serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported manifest schema_version {}", m.schema_version),
            ));
        }
        let all = m.catalog.all_classes();
        for d in &m.datasets {
            if d.annotated.is_empty() || !d.annotated.is_subset(&all) {
                return Err(Error::format(
                    path,
                    format!("dataset {}: annotated {} not within catalog", d.name, d.annotated),
                ));
            }
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        Manifest::parse(path, &read_text(path)?)
    }

    /// Load every referenced raster and validate the datasets.
    pub fn load_datasets(&self, base: &Path) -> Result<Vec<PartialDataset>> {
        self.datasets
            .iter()
            .map(|d| {
                let samples = d
                    .samples
                    .iter()
                    .map(|s| {
                        let image = read_image(&base.join(&s.image))?;
                        let label = read_labels(&base.join(&s.label))?;
                        let mut sample = Sample::new(s.id.clone(), image, label)?;
                        if let Some(o) = &s.oracle {
                            sample = sample.with_oracle(read_labels(&base.join(o))?)?;
                        }
                        Ok(sample)
                    })
                    .collect::<Result<Vec<_>>>()?;
                PartialDataset::new(d.name.clone(), d.annotated.clone(), d.split, samples)
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

/// Load a manifest file and its datasets.
pub fn load_manifest(path: &Path) -> Result<(ClassCatalog, Vec<PartialDataset>)> {
    let m = Manifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let datasets = m.load_datasets(base)?;
    Ok((m.catalog, datasets))
}

/// Load several manifests that must share one catalog.
pub fn load_manifests(paths: &[PathBuf]) -> Result<(ClassCatalog, Vec<PartialDataset>)> {
    let mut catalog: Option<ClassCatalog> = None;
    let mut all = Vec::new();
    for p in paths {
        let (c, ds) = load_manifest(p)?;
        match &catalog {
            Some(existing) if *existing != c => {
                return Err(Error::CatalogMismatch {
                    expected: existing.names().to_vec(),
                    found: c.names().to_vec(),
                })
            }
            Some(_) => {}
            None => catalog = Some(c),
        }
        all.extend(ds);
    }
    let catalog = catalog.ok_or_else(|| Error::Invalid("no manifests given".into()))?;
    Ok((catalog, all))
}

/// Write `datasets` under `dir` and a manifest `dir/<name>.json` describing them.
pub fn save_manifest(
    dir: &Path,
    name: &str,
    catalog: &ClassCatalog,
    datasets: &[PartialDataset],
) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(datasets.len());
    for d in datasets {
        let sub = PathBuf::from(&d.name).join(d.split.to_string());
        let mut samples = Vec::with_capacity(d.samples.len());
        for s in &d.samples {
            let image = sub.join(format!("{}.image.grid", s.id));
            let label = sub.join(format!("{}.label.grid", s.id));
            write_image(&dir.join(&image), &s.image)?;
            write_labels(&dir.join(&label), &s.label)?;
            let oracle = match &s.oracle {
                Some(o) => {
                    let p = sub.join(format!("{}.oracle.grid", s.id));
                    write_labels(&dir.join(&p), o)?;
                    Some(p)
                }
                None => None,
            };
            samples.push(SampleEntry {
                id: s.id.clone(),
                image,
                label,
                oracle,
            });
        }
        entries.push(DatasetEntry {
            name: d.name.clone(),
            annotated: d.annotated.clone(),
            split: d.split,
            samples,
        });
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        catalog: catalog.clone(),
        datasets: entries,
    };
    let path = dir.join(format!("{name}.json"));
    write_text(&path, &manifest.to_json())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_header_is_exact() {
        let img = GridImage::new(1, 1, 2, vec![1.0, -2.5]).unwrap();
        let bytes = encode_image(&img);
        let header = b"GRIDv1 1 1 2 f32\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..header.len() + 4], &1.0f32.to_le_bytes());
        let back = decode_image(Path::new("x"), &bytes).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn label_raster_uses_i32() {
        let l = LabelMap::new(2, 1, vec![0, 3]).unwrap();
        let bytes = encode_labels(&l);
        assert!(bytes.starts_with(b"GRIDv1 1 2 1 i32\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &3i32.to_le_bytes());
        assert_eq!(decode_labels(Path::new("x"), &bytes).unwrap(), l);
    }

    #[test]
    fn malformed_rasters_are_rejected() {
        let p = Path::new("x");
        assert!(decode_image(p, b"GRIDv2 1 1 1 f32\n\0\0\0\0").is_err());
        assert!(decode_image(p, b"GRIDv1 1 1 2 f32\n\0\0\0\0").is_err());
        assert!(decode_image(p, b"GRIDv1 1 1 1 i32\n\0\0\0\0").is_err());
        assert!(decode_labels(p, b"GRIDv1 1 1 1 i32\n\xff\xff\xff\xff").is_err());
        let nan = [b"GRIDv1 1 1 1 f32\n".as_slice(), &f32::NAN.to_le_bytes()].concat();
        assert!(decode_image(p, &nan).is_err());
    }

    #[test]
    fn manifest_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let catalog = ClassCatalog::new(vec!["a".into(), "b".into()]).unwrap();
        let img = GridImage::new(1, 2, 2, vec![0.0, 0.5, 1.0, 1.5]).unwrap();
        let lab = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let oracle = LabelMap::new(2, 2, vec![2, 1, 1, 0]).unwrap();
        let s = Sample::new("s0", img, lab).unwrap().with_oracle(oracle).unwrap();
        let ds = PartialDataset::new("d1", ClassSet::from_iter([1]), Split::Train, vec![s]).unwrap();
        let path = save_manifest(dir.path(), "d1", &catalog, std::slice::from_ref(&ds)).unwrap();
        let (c, back) = load_manifest(&path).unwrap();
        assert_eq!(c, catalog);
        assert_eq!(back, vec![ds]);
    }

    #[test]
    fn manifest_rejects_classes_outside_catalog() {
        let text = r#"{"schema_version":1,"catalog":["a"],"datasets":[
            {"name":"d","annotated":[2],"split":"train","samples":[]}]}"#;
        assert!(Manifest::parse(Path::new("m.json"), text).is_err());
        let bad_version = r#"{"schema_version":9,"catalog":["a"],"datasets":[]}"#;
        assert!(Manifest::parse(Path::new("m.json"), bad_version).is_err());
    }
}
