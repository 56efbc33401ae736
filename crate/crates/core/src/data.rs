//! Dataset entities, CSV manifests and cross-reference validation.
//!
//! A dataset directory holds:
//!
//! | file               | contents                                              |
//! |--------------------|-------------------------------------------------------|
//! | `classes.csv`      | `class_id,name,venomous`                              |
//! | `observations.csv` | `observation_id,image_index,class_id,location_code`   |
//! | `locations.csv`    | `location_code,meta_index`                            |
//! | `metadata.vgf`     | one metadata feature row per location                |
//! | `logits.vgf`       | image-model scores, one row per image (optional)      |
//! | `embeddings.vgf`   | image penultimate features, one row per image (optional) |
//!
//! At least one of `logits.vgf` / `embeddings.vgf` must exist.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{read_feature_matrix, write_feature_matrix, FeatureMatrix};

pub const CLASSES_FILE: &str = "classes.csv";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const LOCATIONS_FILE: &str = "locations.csv";
pub const METADATA_FILE: &str = "metadata.vgf";
pub const LOGITS_FILE: &str = "logits.vgf";
pub const EMBEDDINGS_FILE: &str = "embeddings.vgf";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassEntry {
    pub name: String,
    pub venomous: bool,
}

/// Classes indexed by contiguous id `0..C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTable {
    entries: Vec<ClassEntry>,
}

impl ClassTable {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::arg("no classes"));
        }
        Ok(ClassTable { entries })
    }

    /// Convenience constructor with generated names.
    pub fn from_flags(venomous: &[bool]) -> Result<Self> {
        Self::new(
            venomous
                .iter()
                .enumerate()
                .map(|(i, &v)| ClassEntry {
                    name: format!("class_{i}"),
                    venomous: v,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].name
    }

    pub fn is_venomous(&self, id: usize) -> bool {
        self.entries[id].venomous
    }

    pub fn venomous_flags(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.venomous).collect()
    }

    pub fn venomous_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_venomous(i)).collect()
    }

    /// Cost-sensitive operations need both statuses present.
    pub fn require_both_statuses(&self) -> Result<()> {
        let v = self.entries.iter().filter(|e| e.venomous).count();
        if v == 0 || v == self.len() {
            return Err(Error::arg(
                "class table needs at least one venomous and one harmless class",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub observation_id: String,
    pub image_index: usize,
    pub class_id: Option<usize>,
    pub location_code: String,
}

/// One row per image, in file order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ObservationTable {
    pub rows: Vec<Observation>,
}

/// Rows belonging to one observation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationGroup {
    pub observation_id: String,
    pub rows: Vec<usize>,
}

impl ObservationTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Groups sorted by observation id; row indices keep file order.
    pub fn groups(&self) -> Vec<ObservationGroup> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            map.entry(r.observation_id.as_str()).or_default().push(i);
        }
        map.into_iter()
            .map(|(id, rows)| ObservationGroup {
                observation_id: id.to_string(),
                rows,
            })
            .collect()
    }

    /// Label per row; errors if any row is unlabeled.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.rows
            .iter()
            .map(|r| {
                r.class_id.ok_or_else(|| {
                    Error::arg(format!("observation {} has no class label", r.observation_id))
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LocationTable {
    entries: BTreeMap<String, usize>,
}

impl LocationTable {
    pub fn new(entries: BTreeMap<String, usize>) -> Self {
        LocationTable { entries }
    }

    pub fn get(&self, code: &str) -> Option<usize> {
        self.entries.get(code).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.entries.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub classes: ClassTable,
    pub observations: ObservationTable,
    pub logits: Option<FeatureMatrix>,
    pub embeddings: Option<FeatureMatrix>,
    pub metadata: FeatureMatrix,
    pub locations: LocationTable,
}

impl DatasetBundle {
    /// Number of image rows every image-indexed matrix must cover.
    fn image_rows(&self) -> Option<usize> {
        [self.logits.as_ref(), self.embeddings.as_ref()]
            .into_iter()
            .flatten()
            .map(FeatureMatrix::rows)
            .min()
    }

    pub fn logits(&self) -> Result<&FeatureMatrix> {
        self.logits.as_ref().ok_or_else(|| Error::arg("dataset has no logits.vgf"))
    }

    pub fn embeddings(&self) -> Result<&FeatureMatrix> {
        self.embeddings
            .as_ref()
            .ok_or_else(|| Error::arg("dataset has no embeddings.vgf"))
    }

    /// Metadata feature row for an observation row; `None` if dangling.
    pub fn metadata_for(&self, row: usize) -> Option<&[f64]> {
        let code = &self.observations.rows[row].location_code;
        let idx = self.locations.get(code)?;
        (idx < self.metadata.rows()).then(|| self.metadata.row(idx))
    }
}

fn header_check(path: &Path, rdr: &mut csv::Reader<fs::File>, expected: &[&str]) -> Result<()> {
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?;
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::parse(
            path,
            1,
            format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn record_line(rec: &csv::StringRecord, fallback: usize) -> usize {
    rec.position().map_or(fallback, |p| p.line() as usize)
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim() {
        "1" | "true" | "True" | "TRUE" => Some(true),
        "0" | "false" | "False" | "FALSE" => Some(false),
        _ => None,
    }
}

pub fn parse_classes_csv(path: impl AsRef<Path>) -> Result<ClassTable> {
    let path = path.as_ref();
    let mut rdr = open_csv(path)?;
    header_check(path, &mut rdr, &["class_id", "name", "venomous"])?;
    let mut seen: HashMap<usize, (usize, ClassEntry)> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, i + 2, e.to_string()))?;
        let line = record_line(&rec, i + 2);
        let id: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line, format!("bad class_id `{}`", &rec[0])))?;
        let venomous = parse_bool(&rec[2])
            .ok_or_else(|| Error::parse(path, line, format!("bad venomous flag `{}`", &rec[2])))?;
        let entry = ClassEntry {
            name: rec[1].to_string(),
            venomous,
        };
        if seen.insert(id, (line, entry)).is_some() {
            return Err(Error::parse(path, line, format!("duplicate class id {id}")));
        }
    }
    if seen.is_empty() {
        return Err(Error::parse(path, 1, "no classes"));
    }
    let n = seen.len();
    if let Some((&id, &(line, _))) = seen.iter().filter(|(&id, _)| id >= n).min_by_key(|(_, (l, _))| *l) {
        return Err(Error::parse(
            path,
            line,
            format!("non-contiguous class ids: {id} with {n} classes"),
        ));
    }
    let mut entries: Vec<(usize, ClassEntry)> = seen.into_iter().map(|(id, (_, e))| (id, e)).collect();
    entries.sort_by_key(|(id, _)| *id);
    ClassTable::new(entries.into_iter().map(|(_, e)| e).collect())
}

pub fn parse_observations_csv(
    path: impl AsRef<Path>,
    classes: &ClassTable,
    allow_unlabeled: bool,
) -> Result<ObservationTable> {
    let path = path.as_ref();
    let mut rdr = open_csv(path)?;
    header_check(
        path,
        &mut rdr,
        &["observation_id", "image_index", "class_id", "location_code"],
    )?;
    let mut rows = Vec::new();
    let mut images = HashSet::new();
    let mut group_label: HashMap<String, Option<usize>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, i + 2, e.to_string()))?;
        let line = record_line(&rec, i + 2);
        let observation_id = rec[0].trim().to_string();
        if observation_id.is_empty() {
            return Err(Error::parse(path, line, "empty observation_id"));
        }
        let image_index: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line, format!("bad image_index `{}`", &rec[1])))?;
        if !images.insert(image_index) {
            return Err(Error::parse(path, line, format!("duplicate image_index {image_index}")));
        }
        let raw = rec[2].trim();
        let class_id = if raw.is_empty() {
            if !allow_unlabeled {
                return Err(Error::parse(path, line, "missing class_id"));
            }
            None
        } else {
            let id: usize = raw
                .parse()
                .map_err(|_| Error::parse(path, line, format!("bad class_id `{raw}`")))?;
            if id >= classes.len() {
                return Err(Error::parse(
                    path,
                    line,
                    format!("unknown class_id {id} (observation {observation_id}, {} classes)", classes.len()),
                ));
            }
            Some(id)
        };
        match group_label.get(&observation_id) {
            Some(prev) if *prev != class_id => {
                return Err(Error::parse(
                    path,
                    line,
                    format!("observation {observation_id} has conflicting labels"),
                ))
            }
            Some(_) => {}
            None => {
                group_label.insert(observation_id.clone(), class_id);
            }
        }
        rows.push(Observation {
            observation_id,
            image_index,
            class_id,
            location_code: rec[3].trim().to_string(),
        });
    }
    Ok(ObservationTable { rows })
}

pub fn parse_locations_csv(path: impl AsRef<Path>) -> Result<LocationTable> {
    let path = path.as_ref();
    let mut rdr = open_csv(path)?;
    header_check(path, &mut rdr, &["location_code", "meta_index"])?;
    let mut entries = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, i + 2, e.to_string()))?;
        let line = record_line(&rec, i + 2);
        let code = rec[0].trim().to_string();
        let idx: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line, format!("bad meta_index `{}`", &rec[1])))?;
        if entries.insert(code.clone(), idx).is_some() {
            return Err(Error::parse(path, line, format!("duplicate location code `{code}`")));
        }
    }
    Ok(LocationTable { entries })
}

/// Loads a dataset directory. Call [`validate_bundle`] before use.
pub fn load_bundle(dir: impl AsRef<Path>, allow_unlabeled: bool) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    let classes = parse_classes_csv(dir.join(CLASSES_FILE))?;
    let observations = parse_observations_csv(dir.join(OBSERVATIONS_FILE), &classes, allow_unlabeled)?;
    let locations = parse_locations_csv(dir.join(LOCATIONS_FILE))?;
    let metadata = read_feature_matrix(dir.join(METADATA_FILE))?;
    let optional = |name: &str| -> Result<Option<FeatureMatrix>> {
        let p = dir.join(name);
        if p.exists() {
            read_feature_matrix(p).map(Some)
        } else {
            Ok(None)
        }
    };
    let logits = optional(LOGITS_FILE)?;
    let embeddings = optional(EMBEDDINGS_FILE)?;
    if logits.is_none() && embeddings.is_none() {
        return Err(Error::arg(format!(
            "{}: neither {LOGITS_FILE} nor {EMBEDDINGS_FILE} present",
            dir.display()
        )));
    }
    Ok(DatasetBundle {
        classes,
        observations,
        logits,
        embeddings,
        metadata,
        locations,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, 0, format!("{other:?}")),
    }
}

/// Writes a bundle in the directory layout read by [`load_bundle`].
pub fn write_bundle(bundle: &DatasetBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let p = dir.join(CLASSES_FILE);
    let mut w = csv::Writer::from_path(&p).map_err(|e| csv_err(&p, e))?;
    w.write_record(["class_id", "name", "venomous"]).map_err(|e| csv_err(&p, e))?;
    for (i, c) in bundle.classes.entries().iter().enumerate() {
        w.write_record([i.to_string(), c.name.clone(), u8::from(c.venomous).to_string()])
            .map_err(|e| csv_err(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let p = dir.join(OBSERVATIONS_FILE);
    let mut w = csv::Writer::from_path(&p).map_err(|e| csv_err(&p, e))?;
    w.write_record(["observation_id", "image_index", "class_id", "location_code"])
        .map_err(|e| csv_err(&p, e))?;
    for r in &bundle.observations.rows {
        w.write_record([
            r.observation_id.clone(),
            r.image_index.to_string(),
            r.class_id.map(|c| c.to_string()).unwrap_or_default(),
            r.location_code.clone(),
        ])
        .map_err(|e| csv_err(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let p = dir.join(LOCATIONS_FILE);
    let mut w = csv::Writer::from_path(&p).map_err(|e| csv_err(&p, e))?;
    w.write_record(["location_code", "meta_index"]).map_err(|e| csv_err(&p, e))?;
    for (code, idx) in bundle.locations.iter() {
        w.write_record([code.to_string(), idx.to_string()])
            .map_err(|e| csv_err(&p, e))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    write_feature_matrix(&bundle.metadata, dir.join(METADATA_FILE))?;
    if let Some(m) = &bundle.logits {
        write_feature_matrix(m, dir.join(LOGITS_FILE))?;
    }
    if let Some(m) = &bundle.embeddings {
        write_feature_matrix(m, dir.join(EMBEDDINGS_FILE))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationMode {
    Strict,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DroppedRow {
    /// Row position in the input observation table.
    pub row: usize,
    pub observation_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub dropped: Vec<DroppedRow>,
}

impl ValidationReport {
    pub fn count(&self) -> usize {
        self.dropped.len()
    }
}

/// Checks every observation row resolves to an image row and a metadata row.
///
/// Drop mode removes unresolved rows (and reports them); strict mode fails
/// on the first batch of offenders. Shape mismatches between matrices and
/// the class table are errors in both modes.
pub fn validate_bundle(
    bundle: DatasetBundle,
    mode: ValidationMode,
) -> Result<(DatasetBundle, ValidationReport)> {
    if let Some(l) = &bundle.logits {
        if l.dims() != bundle.classes.len() {
            return Err(Error::arg(format!(
                "logits have {} columns but there are {} classes",
                l.dims(),
                bundle.classes.len()
            )));
        }
    }
    let image_rows = bundle.image_rows().unwrap_or(0);
    let meta_rows = bundle.metadata.rows();

    let mut keep = Vec::with_capacity(bundle.observations.len());
    let mut dropped = Vec::new();
    for (i, r) in bundle.observations.rows.iter().enumerate() {
        let reason = if r.image_index >= image_rows {
            Some(format!("image_index {} out of range ({image_rows} image rows)", r.image_index))
        } else {
            match bundle.locations.get(&r.location_code) {
                None => Some(format!("unknown location code `{}`", r.location_code)),
                Some(idx) if idx >= meta_rows => Some(format!(
                    "location `{}` maps to metadata row {idx} ({meta_rows} rows)",
                    r.location_code
                )),
                Some(_) => None,
            }
        };
        match reason {
            Some(reason) => dropped.push(DroppedRow {
                row: i,
                observation_id: r.observation_id.clone(),
                reason,
            }),
            None => keep.push(r.clone()),
        }
    }

    if mode == ValidationMode::Strict && !dropped.is_empty() {
        return Err(Error::validation(
            dropped
                .iter()
                .map(|d| format!("row {} ({}): {}", d.row, d.observation_id, d.reason))
                .collect(),
        ));
    }
    for d in &dropped {
        log::warn!("dropping observation row {} ({}): {}", d.row, d.observation_id, d.reason);
    }
    let bundle = DatasetBundle {
        observations: ObservationTable { rows: keep },
        ..bundle
    };
    Ok((bundle, ValidationReport { dropped }))
}
