//! Semisupervised matching datasets.
//!
//! A [`SemiDataset`] holds five blocks of observations:
//!
//! * expert pairs (training controls and treatments matched by a domain expert),
//! * unpaired training controls and unpaired training treatments,
//! * object-set controls and object-set treatments, the units a final matching is produced for.
//!
//! Pairings never cross blocks: training units pair only with training units and object
//! units only with object units. The CSV loader enforces this by rejecting `pair_id` on
//! object rows.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScotomaError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Control,
    Treatment,
}

impl Group {
    fn code(self) -> &'static str {
        match self {
            Group::Control => "c",
            Group::Treatment => "t",
        }
    }

    fn parse(s: &str) -> Option<Group> {
        match s.trim() {
            "c" | "control" => Some(Group::Control),
            "t" | "treatment" => Some(Group::Treatment),
            _ => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub id: String,
    pub group: Group,
    pub x: Vec<f64>,
}

impl Observation {
    pub fn new(id: impl Into<String>, group: Group, x: Vec<f64>) -> Self {
        Observation {
            id: id.into(),
            group,
            x,
        }
    }

    pub fn control(id: impl Into<String>, x: Vec<f64>) -> Self {
        Self::new(id, Group::Control, x)
    }

    pub fn treatment(id: impl Into<String>, x: Vec<f64>) -> Self {
        Self::new(id, Group::Treatment, x)
    }
}

/// One expert-matched (control, treatment) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPair {
    pub pair_id: String,
    pub control: Observation,
    pub treatment: Observation,
}

/// Block sizes of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub paired: usize,
    pub unpaired_control: usize,
    pub unpaired_treatment: usize,
    pub object_control: usize,
    pub object_treatment: usize,
    pub p: usize,
}

impl Dims {
    pub fn n_observations(&self) -> usize {
        2 * self.paired
            + self.unpaired_control
            + self.unpaired_treatment
            + self.object_control
            + self.object_treatment
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiDataset {
    paired: Vec<ExpertPair>,
    unpaired_control: Vec<Observation>,
    unpaired_treatment: Vec<Observation>,
    object_control: Vec<Observation>,
    object_treatment: Vec<Observation>,
    p: usize,
}

impl SemiDataset {
    /// Builds and validates a dataset.
    ///
    /// Checks that every observation is finite, has the same width, sits in a block of
    /// the right group, and that ids are unique across all five blocks.
    pub fn new(
        paired: Vec<ExpertPair>,
        unpaired_control: Vec<Observation>,
        unpaired_treatment: Vec<Observation>,
        object_control: Vec<Observation>,
        object_treatment: Vec<Observation>,
    ) -> Result<Self> {
        let d = SemiDataset {
            paired,
            unpaired_control,
            unpaired_treatment,
            object_control,
            object_treatment,
            p: 0,
        };
        let first = d
            .observations()
            .next()
            .ok_or_else(|| ScotomaError::Data("no observations".into()))?;
        let p = first.x.len();
        if p == 0 {
            return Err(ScotomaError::Data("observations have no covariates".into()));
        }

        let mut seen = HashSet::new();
        for obs in d.observations() {
            if obs.x.len() != p {
                return Err(ScotomaError::Data(format!(
                    "ragged width: observation {} has {} covariates, expected {p}",
                    obs.id,
                    obs.x.len()
                )));
            }
            if let Some(k) = obs.x.iter().position(|v| !v.is_finite()) {
                return Err(ScotomaError::Data(format!(
                    "observation {} has a non-finite value in covariate {}",
                    obs.id,
                    k + 1
                )));
            }
            if !seen.insert(obs.id.as_str()) {
                return Err(ScotomaError::Data(format!("duplicate id {}", obs.id)));
            }
        }

        let check_group = |obs: &Observation, want: Group, block: &str| -> Result<()> {
            if obs.group != want {
                return Err(ScotomaError::Data(format!(
                    "observation {} in {block} block has group {}",
                    obs.id, obs.group
                )));
            }
            Ok(())
        };
        for pair in &d.paired {
            check_group(&pair.control, Group::Control, "paired control")?;
            check_group(&pair.treatment, Group::Treatment, "paired treatment")?;
        }
        for o in &d.unpaired_control {
            check_group(o, Group::Control, "unpaired control")?;
        }
        for o in &d.unpaired_treatment {
            check_group(o, Group::Treatment, "unpaired treatment")?;
        }
        for o in &d.object_control {
            check_group(o, Group::Control, "object control")?;
        }
        for o in &d.object_treatment {
            check_group(o, Group::Treatment, "object treatment")?;
        }

        Ok(SemiDataset { p, ..d })
    }

    pub fn paired(&self) -> &[ExpertPair] {
        &self.paired
    }

    pub fn unpaired_control(&self) -> &[Observation] {
        &self.unpaired_control
    }

    pub fn unpaired_treatment(&self) -> &[Observation] {
        &self.unpaired_treatment
    }

    pub fn object_control(&self) -> &[Observation] {
        &self.object_control
    }

    pub fn object_treatment(&self) -> &[Observation] {
        &self.object_treatment
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn dims(&self) -> Dims {
        Dims {
            paired: self.paired.len(),
            unpaired_control: self.unpaired_control.len(),
            unpaired_treatment: self.unpaired_treatment.len(),
            object_control: self.object_control.len(),
            object_treatment: self.object_treatment.len(),
            p: self.p,
        }
    }

    /// All observations in block order: paired (control, treatment interleaved per
    /// pair), unpaired controls, unpaired treatments, object controls, object treatments.
    pub fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.paired
            .iter()
            .flat_map(|pr| [&pr.control, &pr.treatment])
            .chain(self.unpaired_control.iter())
            .chain(self.unpaired_treatment.iter())
            .chain(self.object_control.iter())
            .chain(self.object_treatment.iter())
    }

    fn map_x(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> SemiDataset {
        let mut g = |o: &Observation| Observation {
            id: o.id.clone(),
            group: o.group,
            x: f(&o.x),
        };
        SemiDataset {
            paired: self
                .paired
                .iter()
                .map(|pr| ExpertPair {
                    pair_id: pr.pair_id.clone(),
                    control: g(&pr.control),
                    treatment: g(&pr.treatment),
                })
                .collect(),
            unpaired_control: self.unpaired_control.iter().map(&mut g).collect(),
            unpaired_treatment: self.unpaired_treatment.iter().map(&mut g).collect(),
            object_control: self.object_control.iter().map(&mut g).collect(),
            object_treatment: self.object_treatment.iter().map(&mut g).collect(),
            p: self.p,
        }
    }
}

/// Column mapping for CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub id: String,
    pub group: String,
    pub pair_id: String,
    pub role: String,
    /// Explicit covariate columns. When absent, the columns `x1..xp` are used and
    /// must be contiguous.
    pub covariates: Option<Vec<String>>,
    pub ignore_columns: Vec<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            id: "id".into(),
            group: "group".into(),
            pair_id: "pair_id".into(),
            role: "role".into(),
            covariates: None,
            ignore_columns: Vec::new(),
        }
    }
}

fn covariate_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix('x')?;
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) || rest.starts_with('0') {
        return None;
    }
    rest.parse().ok()
}

struct Layout {
    id: usize,
    group: usize,
    pair_id: usize,
    role: usize,
    covariates: Vec<usize>,
}

fn resolve_layout(headers: &csv::StringRecord, schema: &CsvSchema) -> Result<Layout> {
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    let find = |col: &str| -> Result<usize> {
        names
            .iter()
            .position(|h| *h == col)
            .ok_or_else(|| ScotomaError::Data(format!("missing column {col}")))
    };
    let id = find(&schema.id)?;
    let group = find(&schema.group)?;
    let pair_id = find(&schema.pair_id)?;
    let role = find(&schema.role)?;

    let covariate_names: Vec<String> = match &schema.covariates {
        Some(cols) => cols.clone(),
        None => {
            let mut idx: Vec<usize> = names.iter().filter_map(|h| covariate_index(h)).collect();
            idx.sort_unstable();
            let max = idx.last().copied().unwrap_or(0);
            for k in 1..=max {
                if idx.binary_search(&k).is_err() {
                    return Err(ScotomaError::Data(format!("missing covariate column x{k}")));
                }
            }
            (1..=max).map(|k| format!("x{k}")).collect()
        }
    };
    if covariate_names.is_empty() {
        return Err(ScotomaError::Data("no covariate columns".into()));
    }
    let mut covariates = Vec::with_capacity(covariate_names.len());
    for c in &covariate_names {
        let pos = names
            .iter()
            .position(|h| h == c)
            .ok_or_else(|| ScotomaError::Data(format!("missing covariate column {c}")))?;
        covariates.push(pos);
    }

    for (k, h) in names.iter().enumerate() {
        let known = [id, group, pair_id, role].contains(&k) || covariates.contains(&k);
        if !known && !schema.ignore_columns.iter().any(|ic| ic == h) {
            return Err(ScotomaError::Data(format!("unexpected column {h}")));
        }
    }
    Ok(Layout {
        id,
        group,
        pair_id,
        role,
        covariates,
    })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    Train,
    Object,
}

struct Row {
    obs: Observation,
    pair_id: Option<String>,
    role: Role,
}

/// Loads a dataset from CSV.
pub fn load_dataset(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<SemiDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset(file, schema)
}

/// Reads a dataset from any CSV source. See [`load_dataset`].
pub fn read_dataset<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<SemiDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let layout = resolve_layout(&headers, schema)?;

    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = line + 2;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let id = field(layout.id).to_string();
        if id.is_empty() {
            return Err(ScotomaError::Data(format!("line {line}: empty id")));
        }
        let group = Group::parse(field(layout.group)).ok_or_else(|| {
            ScotomaError::Data(format!(
                "line {line}: group must be c or t, got {:?}",
                field(layout.group)
            ))
        })?;
        let role = match field(layout.role) {
            "train" => Role::Train,
            "object" => Role::Object,
            other => {
                return Err(ScotomaError::Data(format!(
                    "line {line}: role must be train or object, got {other:?}"
                )))
            }
        };
        let pair_id = Some(field(layout.pair_id).to_string()).filter(|s| !s.is_empty());
        let mut x = Vec::with_capacity(layout.covariates.len());
        for &c in &layout.covariates {
            let raw = field(c);
            let v: f64 = raw.parse().map_err(|_| {
                ScotomaError::Data(format!(
                    "line {line}: non-numeric value {raw:?} in column {}",
                    &headers[c]
                ))
            })?;
            x.push(v);
        }
        rows.push(Row {
            obs: Observation { id, group, x },
            pair_id,
            role,
        });
    }
    if rows.is_empty() {
        return Err(ScotomaError::Data("no observations".into()));
    }
    assemble(rows)
}

fn assemble(rows: Vec<Row>) -> Result<SemiDataset> {
    let mut pair_order: Vec<String> = Vec::new();
    let mut members: HashMap<String, Vec<usize>> = HashMap::new();
    for (k, row) in rows.iter().enumerate() {
        if let Some(pid) = &row.pair_id {
            if row.role == Role::Object {
                return Err(ScotomaError::Data(format!(
                    "pair_id {pid} on object row {}: object units cannot carry training pairs",
                    row.obs.id
                )));
            }
            members
                .entry(pid.clone())
                .or_insert_with(|| {
                    pair_order.push(pid.clone());
                    Vec::new()
                })
                .push(k);
        }
    }

    let mut slots: Vec<Option<Row>> = rows.into_iter().map(Some).collect();
    let mut paired = Vec::with_capacity(pair_order.len());
    for pid in &pair_order {
        let idx = &members[pid];
        if idx.len() != 2 {
            return Err(ScotomaError::Data(format!(
                "pair_id {pid} has {} members, expected 2",
                idx.len()
            )));
        }
        let a = slots[idx[0]].take().expect("row used once");
        let b = slots[idx[1]].take().expect("row used once");
        let (control, treatment) = match (a.obs.group, b.obs.group) {
            (Group::Control, Group::Treatment) => (a.obs, b.obs),
            (Group::Treatment, Group::Control) => (b.obs, a.obs),
            _ => {
                return Err(ScotomaError::Data(format!(
                    "same-group pair: pair_id {pid} joins two {} rows",
                    a.obs.group
                )))
            }
        };
        paired.push(ExpertPair {
            pair_id: pid.clone(),
            control,
            treatment,
        });
    }

    let mut uc = Vec::new();
    let mut ut = Vec::new();
    let mut oc = Vec::new();
    let mut ot = Vec::new();
    for row in slots.into_iter().flatten() {
        match (row.role, row.obs.group) {
            (Role::Train, Group::Control) => uc.push(row.obs),
            (Role::Train, Group::Treatment) => ut.push(row.obs),
            (Role::Object, Group::Control) => oc.push(row.obs),
            (Role::Object, Group::Treatment) => ot.push(row.obs),
        }
    }
    SemiDataset::new(paired, uc, ut, oc, ot)
}

/// Writes a dataset in the layout read by [`load_dataset`] with the default schema.
pub fn write_dataset(d: &SemiDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_dataset_to(d, file)
}

pub fn write_dataset_to<W: std::io::Write>(d: &SemiDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![
        "id".to_string(),
        "group".into(),
        "pair_id".into(),
        "role".into(),
    ];
    header.extend((1..=d.p).map(|k| format!("x{k}")));
    wtr.write_record(&header)?;

    let mut write = |o: &Observation, pair_id: &str, role: &str| -> Result<()> {
        let mut rec = vec![
            o.id.clone(),
            o.group.code().to_string(),
            pair_id.to_string(),
            role.to_string(),
        ];
        rec.extend(o.x.iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
        Ok(())
    };
    for pr in &d.paired {
        write(&pr.control, &pr.pair_id, "train")?;
        write(&pr.treatment, &pr.pair_id, "train")?;
    }
    for o in d.unpaired_control.iter().chain(&d.unpaired_treatment) {
        write(o, "", "train")?;
    }
    for o in d.object_control.iter().chain(&d.object_treatment) {
        write(o, "", "object")?;
    }
    wtr.flush()?;
    Ok(())
}

/// Per-coordinate affine map fitted by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationState {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl StandardizationState {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Centres and scales every coordinate with statistics pooled over all five blocks.
///
/// Uses the population (divide-by-n) standard deviation.
pub fn standardize(d: &SemiDataset) -> Result<(SemiDataset, StandardizationState)> {
    let p = d.p;
    let n = d.observations().count() as f64;
    let mut mean = vec![0.0; p];
    for o in d.observations() {
        for (m, v) in mean.iter_mut().zip(&o.x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; p];
    for o in d.observations() {
        for ((s, v), m) in var.iter_mut().zip(&o.x).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let mut scale = Vec::with_capacity(p);
    for (k, s) in var.iter().enumerate() {
        let sd = (s / n).sqrt();
        // relative floor so a constant column with rounding noise still counts as constant
        if !(sd > 1e-12 * mean[k].abs().max(1e-300)) {
            return Err(ScotomaError::Data(format!(
                "covariate x{} has zero variance",
                k + 1
            )));
        }
        scale.push(sd);
    }
    let state = StandardizationState { mean, scale };
    Ok((d.map_x(|x| state.apply(x)), state))
}
