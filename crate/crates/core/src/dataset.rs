//! Ingestion and indexing of hierarchical longitudinal data and per-patient
//! event data.
//!
//! Canonical ordering: patients follow the event table, clusters follow
//! first appearance within their patient, and observations are sorted by
//! time with ties kept in input order.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HierarchyMode {
    /// Clusters (e.g. lesions) nested within patients.
    #[serde(rename = "below")]
    ClusterBelowPatient,
    /// One trajectory per patient.
    #[serde(rename = "none")]
    PatientOnly,
    /// Patients nested within groups (e.g. clinics or trials).
    #[serde(rename = "above")]
    ClusterAbovePatient,
}

impl HierarchyMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "below" => Ok(Self::ClusterBelowPatient),
            "none" => Ok(Self::PatientOnly),
            "above" => Ok(Self::ClusterAbovePatient),
            other => Err(Error::Spec(format!(
                "unknown hierarchy mode `{other}` (expected below, none or above)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::ClusterBelowPatient => "below",
            Self::PatientOnly => "none",
            Self::ClusterAbovePatient => "above",
        }
    }
}

/// What to do with longitudinal observations recorded after the patient's
/// event or censoring time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowPolicy {
    #[default]
    Reject,
    Truncate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalColumns {
    pub id: String,
    pub cluster: String,
    pub time: String,
    pub value: String,
}

impl Default for LongitudinalColumns {
    fn default() -> Self {
        Self {
            id: "id".into(),
            cluster: "cluster".into(),
            time: "time".into(),
            value: "value".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventColumns {
    pub id: String,
    pub time: String,
    pub status: String,
    pub group: String,
}

impl Default for EventColumns {
    fn default() -> Self {
        Self {
            id: "id".into(),
            time: "time".into(),
            status: "status".into(),
            group: "group".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalRecord {
    pub patient_id: String,
    pub cluster_id: Option<String>,
    pub time: f64,
    pub value: f64,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LongitudinalTable {
    pub covariate_names: Vec<String>,
    pub records: Vec<LongitudinalRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub patient_id: String,
    pub event_time: f64,
    pub status: bool,
    pub covariates: Vec<f64>,
    pub group_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventTable {
    pub covariate_names: Vec<String>,
    pub records: Vec<EventRecord>,
}

struct Header {
    names: Vec<String>,
}

impl Header {
    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|h| h == name)
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.position(name).ok_or_else(|| Error::Schema(name.to_string()))
    }
}

fn read_rows<R: Read>(reader: R, what: &str) -> Result<(Header, Vec<csv::StringRecord>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let names: Vec<String> = match rdr.headers() {
        Ok(h) => h.iter().map(|s| s.trim().to_string()).collect(),
        Err(e) => return Err(e.into()),
    };
    if names.iter().all(|n| n.is_empty()) {
        return Err(Error::EmptyInput(format!("{what} file has no header")));
    }
    let rows = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!("{what} file has no data rows")));
    }
    Ok((Header { names }, rows))
}

fn parse_real(row: &csv::StringRecord, idx: usize, line: usize, column: &str) -> Result<f64> {
    let raw = row.get(idx).unwrap_or("").trim();
    let v: f64 = raw.parse().map_err(|_| Error::Parse {
        row: line,
        column: column.to_string(),
        message: format!("`{raw}` is not a real number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row: line,
            column: column.to_string(),
            message: format!("`{raw}` is not finite"),
        });
    }
    Ok(v)
}

fn parse_id(row: &csv::StringRecord, idx: usize, line: usize, column: &str) -> Result<String> {
    let id = row.get(idx).unwrap_or("").trim().to_string();
    if id.is_empty() {
        return Err(Error::Parse {
            row: line,
            column: column.to_string(),
            message: "empty identifier".into(),
        });
    }
    Ok(id)
}

pub fn load_longitudinal(path: impl AsRef<Path>, cols: &LongitudinalColumns) -> Result<LongitudinalTable> {
    read_longitudinal(File::open(path)?, cols)
}

/// Parse a longitudinal table. Row numbers in errors count data rows from 1.
pub fn read_longitudinal<R: Read>(reader: R, cols: &LongitudinalColumns) -> Result<LongitudinalTable> {
    let (header, rows) = read_rows(reader, "longitudinal")?;
    let id = header.require(&cols.id)?;
    let time = header.require(&cols.time)?;
    let value = header.require(&cols.value)?;
    let cluster = header.position(&cols.cluster);
    let reserved = [Some(id), Some(time), Some(value), cluster];
    let cov_idx: Vec<usize> = (0..header.names.len())
        .filter(|i| !reserved.contains(&Some(*i)))
        .collect();
    let covariate_names = cov_idx.iter().map(|&i| header.names[i].clone()).collect();

    let mut records = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let line = r + 1;
        let t = parse_real(row, time, line, &cols.time)?;
        if t < 0.0 {
            return Err(Error::Parse {
                row: line,
                column: cols.time.clone(),
                message: format!("negative time {t}"),
            });
        }
        records.push(LongitudinalRecord {
            patient_id: parse_id(row, id, line, &cols.id)?,
            cluster_id: match cluster {
                Some(c) => Some(parse_id(row, c, line, &cols.cluster)?),
                None => None,
            },
            time: t,
            value: parse_real(row, value, line, &cols.value)?,
            covariates: cov_idx
                .iter()
                .map(|&i| parse_real(row, i, line, &header.names[i]))
                .collect::<Result<_>>()?,
        });
    }
    Ok(LongitudinalTable {
        covariate_names,
        records,
    })
}

pub fn load_event(path: impl AsRef<Path>, cols: &EventColumns) -> Result<EventTable> {
    read_event(File::open(path)?, cols)
}

pub fn read_event<R: Read>(reader: R, cols: &EventColumns) -> Result<EventTable> {
    let (header, rows) = read_rows(reader, "event")?;
    let id = header.require(&cols.id)?;
    let time = header.require(&cols.time)?;
    let status = header.require(&cols.status)?;
    let group = header.position(&cols.group);
    let reserved = [Some(id), Some(time), Some(status), group];
    let cov_idx: Vec<usize> = (0..header.names.len())
        .filter(|i| !reserved.contains(&Some(*i)))
        .collect();
    let covariate_names = cov_idx.iter().map(|&i| header.names[i].clone()).collect();

    let mut seen = HashMap::new();
    let mut records = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let line = r + 1;
        let pid = parse_id(row, id, line, &cols.id)?;
        if seen.insert(pid.clone(), line).is_some() {
            return Err(Error::DuplicateKey(pid));
        }
        let t = parse_real(row, time, line, &cols.time)?;
        if t <= 0.0 {
            return Err(Error::Domain(format!(
                "event time {t} for patient `{pid}` (row {line}) must be positive"
            )));
        }
        let s = parse_real(row, status, line, &cols.status)?;
        let status = if s == 0.0 {
            false
        } else if s == 1.0 {
            true
        } else {
            return Err(Error::Domain(format!(
                "status {s} for patient `{pid}` (row {line}) must be 0 or 1"
            )));
        };
        records.push(EventRecord {
            patient_id: pid,
            event_time: t,
            status,
            covariates: cov_idx
                .iter()
                .map(|&i| parse_real(row, i, line, &header.names[i]))
                .collect::<Result<_>>()?,
            group_id: match group {
                Some(g) => Some(parse_id(row, g, line, &cols.group)?),
                None => None,
            },
        });
    }
    Ok(EventTable {
        covariate_names,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub value: f64,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: String,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub id: String,
    pub event_time: f64,
    pub status: bool,
    pub covariates: Vec<f64>,
    /// Index into [`Dataset::groups`] in cluster-above-patient mode.
    pub group: Option<usize>,
    pub clusters: Vec<Cluster>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    mode: HierarchyMode,
    long_covariates: Vec<String>,
    event_covariates: Vec<String>,
    patients: Vec<Patient>,
    groups: Vec<String>,
    cluster_offsets: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub patients: usize,
    pub clusters: usize,
    pub observations: usize,
}

pub fn build_dataset(
    long: &LongitudinalTable,
    event: &EventTable,
    mode: HierarchyMode,
    policy: WindowPolicy,
) -> Result<Dataset> {
    if long.records.is_empty() {
        return Err(Error::EmptyInput("longitudinal table is empty".into()));
    }
    if event.records.is_empty() {
        return Err(Error::EmptyInput("event table is empty".into()));
    }
    let mut patient_index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<String> = Vec::new();
    let mut group_index: HashMap<String, usize> = HashMap::new();
    let mut patients: Vec<Patient> = Vec::with_capacity(event.records.len());
    for rec in &event.records {
        if patient_index.insert(&rec.patient_id, patients.len()).is_some() {
            return Err(Error::DuplicateKey(rec.patient_id.clone()));
        }
        let group = if mode == HierarchyMode::ClusterAbovePatient {
            let gid = rec.group_id.clone().ok_or_else(|| {
                Error::Schema("group (required in cluster-above-patient mode)".into())
            })?;
            let next = groups.len();
            let g = *group_index.entry(gid.clone()).or_insert(next);
            if g == next {
                groups.push(gid);
            }
            Some(g)
        } else {
            None
        };
        patients.push(Patient {
            id: rec.patient_id.clone(),
            event_time: rec.event_time,
            status: rec.status,
            covariates: rec.covariates.clone(),
            group,
            clusters: Vec::new(),
        });
    }

    // cluster id -> owning patient, and (patient, cluster) -> position
    let mut cluster_owner: HashMap<&str, usize> = HashMap::new();
    let mut cluster_pos: Vec<HashMap<String, usize>> = vec![HashMap::new(); patients.len()];
    for (r, rec) in long.records.iter().enumerate() {
        let line = r + 1;
        let &i = patient_index.get(rec.patient_id.as_str()).ok_or_else(|| {
            Error::Orphan(format!(
                "longitudinal patient `{}` (row {line}) is absent from the event table",
                rec.patient_id
            ))
        })?;
        let cid = match mode {
            HierarchyMode::ClusterBelowPatient => {
                let cid = rec
                    .cluster_id
                    .as_deref()
                    .ok_or_else(|| Error::Schema("cluster (required in cluster-below-patient mode)".into()))?;
                match cluster_owner.get(cid) {
                    Some(&owner) if owner != i => {
                        return Err(Error::NestingViolation(format!(
                            "cluster `{cid}` appears under patients `{}` and `{}`",
                            patients[owner].id, patients[i].id
                        )));
                    }
                    Some(_) => {}
                    None => {
                        cluster_owner.insert(cid, i);
                    }
                }
                cid.to_string()
            }
            _ => String::new(),
        };
        let patient = &mut patients[i];
        if rec.time > patient.event_time {
            match policy {
                WindowPolicy::Reject => {
                    return Err(Error::OutOfWindow(format!(
                        "patient `{}` has an observation at time {} after its event time {} (row {line})",
                        patient.id, rec.time, patient.event_time
                    )));
                }
                WindowPolicy::Truncate => continue,
            }
        }
        let next = patient.clusters.len();
        let j = *cluster_pos[i].entry(cid.clone()).or_insert(next);
        if j == next {
            patient.clusters.push(Cluster {
                id: cid,
                observations: Vec::new(),
            });
        }
        patient.clusters[j].observations.push(Observation {
            time: rec.time,
            value: rec.value,
            covariates: rec.covariates.clone(),
        });
    }

    let mut cluster_offsets = Vec::with_capacity(patients.len());
    let mut offset = 0;
    for p in patients.iter_mut() {
        if p.clusters.is_empty() {
            return Err(Error::Orphan(format!(
                "patient `{}` has no longitudinal records",
                p.id
            )));
        }
        for c in p.clusters.iter_mut() {
            c.observations.sort_by(|a, b| a.time.total_cmp(&b.time));
        }
        cluster_offsets.push(offset);
        offset += p.clusters.len();
    }

    Ok(Dataset {
        mode,
        long_covariates: long.covariate_names.clone(),
        event_covariates: event.covariate_names.clone(),
        patients,
        groups,
        cluster_offsets,
    })
}

impl Dataset {
    pub fn mode(&self) -> HierarchyMode {
        self.mode
    }

    pub fn patients(&self) -> &[Patient] {
        &self.patients
    }

    pub fn patient(&self, i: usize) -> Result<&Patient> {
        self.patients
            .get(i)
            .ok_or_else(|| Error::Index(format!("patient index {i} out of range (N = {})", self.patients.len())))
    }

    pub fn cluster(&self, i: usize, j: usize) -> Result<&Cluster> {
        let p = self.patient(i)?;
        p.clusters.get(j).ok_or_else(|| {
            Error::Index(format!(
                "cluster index {j} out of range for patient `{}` (J = {})",
                p.id,
                p.clusters.len()
            ))
        })
    }

    pub fn patient_index(&self, id: &str) -> Option<usize> {
        self.patients.iter().position(|p| p.id == id)
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn long_covariates(&self) -> &[String] {
        &self.long_covariates
    }

    pub fn event_covariates(&self) -> &[String] {
        &self.event_covariates
    }

    /// Global index of cluster `(i, j)` across all patients.
    pub fn cluster_index(&self, i: usize, j: usize) -> usize {
        self.cluster_offsets[i] + j
    }

    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.patients.iter().map(|p| p.clusters.len()).sum()
    }

    pub fn n_observations(&self) -> usize {
        self.patients
            .iter()
            .flat_map(|p| &p.clusters)
            .map(|c| c.observations.len())
            .sum()
    }

    pub fn counts(&self) -> Counts {
        Counts {
            patients: self.n_patients(),
            clusters: self.n_clusters(),
            observations: self.n_observations(),
        }
    }

    pub fn cluster_counts(&self) -> Vec<usize> {
        self.patients.iter().map(|p| p.clusters.len()).collect()
    }

    pub fn event_fraction(&self) -> f64 {
        self.patients.iter().filter(|p| p.status).count() as f64 / self.patients.len() as f64
    }

    /// Largest event or censoring time.
    pub fn max_event_time(&self) -> f64 {
        self.patients.iter().map(|p| p.event_time).fold(0.0, f64::max)
    }

    /// Every longitudinal time, pooled over patients and clusters.
    pub fn pooled_times(&self) -> Vec<f64> {
        self.patients
            .iter()
            .flat_map(|p| &p.clusters)
            .flat_map(|c| c.observations.iter().map(|o| o.time))
            .collect()
    }

    /// Order-free view: every longitudinal row as
    /// `(patient, cluster, time, value, covariates)` sorted lexicographically.
    pub fn canonical_rows(&self) -> Vec<(String, String, f64, f64, Vec<f64>)> {
        let mut rows: Vec<_> = self
            .patients
            .iter()
            .flat_map(|p| {
                p.clusters.iter().flat_map(move |c| {
                    c.observations
                        .iter()
                        .map(move |o| (p.id.clone(), c.id.clone(), o.time, o.value, o.covariates.clone()))
                })
            })
            .collect();
        rows.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.total_cmp(&b.2))
                .then_with(|| a.3.total_cmp(&b.3))
                .then_with(|| {
                    a.4.iter()
                        .zip(&b.4)
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
        });
        rows
    }

    /// Patients keyed by id, for order-free comparison of the event side.
    pub fn canonical_patients(&self) -> BTreeMap<String, (f64, bool, Vec<f64>, Option<String>)> {
        self.patients
            .iter()
            .map(|p| {
                (
                    p.id.clone(),
                    (
                        p.event_time,
                        p.status,
                        p.covariates.clone(),
                        p.group.map(|g| self.groups[g].clone()),
                    ),
                )
            })
            .collect()
    }

    pub fn write_longitudinal<W: Write>(&self, writer: W, cols: &LongitudinalColumns) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let with_cluster = self.mode == HierarchyMode::ClusterBelowPatient;
        let mut header = vec![cols.id.clone()];
        if with_cluster {
            header.push(cols.cluster.clone());
        }
        header.push(cols.time.clone());
        header.push(cols.value.clone());
        header.extend(self.long_covariates.iter().cloned());
        w.write_record(&header)?;
        for p in &self.patients {
            for c in &p.clusters {
                for o in &c.observations {
                    let mut row = vec![p.id.clone()];
                    if with_cluster {
                        row.push(c.id.clone());
                    }
                    row.push(o.time.to_string());
                    row.push(o.value.to_string());
                    row.extend(o.covariates.iter().map(|v| v.to_string()));
                    w.write_record(&row)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_event<W: Write>(&self, writer: W, cols: &EventColumns) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let with_group = self.mode == HierarchyMode::ClusterAbovePatient;
        let mut header = vec![cols.id.clone(), cols.time.clone(), cols.status.clone()];
        if with_group {
            header.push(cols.group.clone());
        }
        header.extend(self.event_covariates.iter().cloned());
        w.write_record(&header)?;
        for p in &self.patients {
            let mut row = vec![
                p.id.clone(),
                p.event_time.to_string(),
                if p.status { "1".into() } else { "0".into() },
            ];
            if with_group {
                row.push(p.group.map(|g| self.groups[g].clone()).unwrap_or_default());
            }
            row.extend(p.covariates.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn export_csv(
        &self,
        long_path: impl AsRef<Path>,
        event_path: impl AsRef<Path>,
        long_cols: &LongitudinalColumns,
        event_cols: &EventColumns,
    ) -> Result<()> {
        self.write_longitudinal(File::create(long_path)?, long_cols)?;
        self.write_event(File::create(event_path)?, event_cols)?;
        Ok(())
    }
}
