//! Patients, risk-factor schema, outcome labels and the cohort manifest.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{FormError, Result};

/// Risk-factor groups. `Multiple` extends `Base`; the densitometric groups
/// (`Abmd`, `Frax`, `Tbs`) are Base plus one extra measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RfGroup {
    Base,
    Multiple,
    Abmd,
    Frax,
    Tbs,
}

impl std::str::FromStr for RfGroup {
    type Err = FormError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(RfGroup::Base),
            "multiple" => Ok(RfGroup::Multiple),
            "abmd" => Ok(RfGroup::Abmd),
            "frax" => Ok(RfGroup::Frax),
            "tbs" => Ok(RfGroup::Tbs),
            other => Err(FormError::Validation(format!("unknown risk-factor group `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RfKind {
    Continuous,
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRiskFactor", into = "RawRiskFactor")]
pub struct RiskFactor {
    pub name: String,
    pub kind: RfKind,
    pub groups: Vec<RfGroup>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum KindTag {
    Continuous,
    Categorical,
}

/// On-disk form of a schema entry.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRiskFactor {
    name: String,
    kind: KindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    levels: Option<Vec<String>>,
    groups: Vec<RfGroup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    std: Option<f64>,
}

impl TryFrom<RawRiskFactor> for RiskFactor {
    type Error = String;

    fn try_from(r: RawRiskFactor) -> std::result::Result<Self, String> {
        let kind = match (r.kind, r.levels) {
            (KindTag::Continuous, None) => RfKind::Continuous,
            (KindTag::Categorical, Some(levels)) => RfKind::Categorical { levels },
            (KindTag::Continuous, Some(_)) => return Err(format!("continuous `{}` cannot have levels", r.name)),
            (KindTag::Categorical, None) => return Err(format!("categorical `{}` needs levels", r.name)),
        };
        Ok(RiskFactor { name: r.name, kind, groups: r.groups, mean: r.mean, std: r.std })
    }
}

impl From<RiskFactor> for RawRiskFactor {
    fn from(f: RiskFactor) -> Self {
        let (kind, levels) = match f.kind {
            RfKind::Continuous => (KindTag::Continuous, None),
            RfKind::Categorical { levels } => (KindTag::Categorical, Some(levels)),
        };
        RawRiskFactor { name: f.name, kind, levels, groups: f.groups, mean: f.mean, std: f.std }
    }
}

impl RiskFactor {
    pub fn continuous(name: &str, groups: &[RfGroup]) -> Self {
        RiskFactor { name: name.into(), kind: RfKind::Continuous, groups: groups.to_vec(), mean: None, std: None }
    }

    pub fn categorical(name: &str, levels: &[&str], groups: &[RfGroup]) -> Self {
        RiskFactor {
            name: name.into(),
            kind: RfKind::Categorical { levels: levels.iter().map(|s| s.to_string()).collect() },
            groups: groups.to_vec(),
            mean: None,
            std: None,
        }
    }

    /// Encoded width: 1 for continuous, one slot per level for categorical.
    pub fn width(&self) -> usize {
        match &self.kind {
            RfKind::Continuous => 1,
            RfKind::Categorical { levels } => levels.len(),
        }
    }

    pub fn in_group(&self, g: RfGroup) -> bool {
        self.groups.contains(&g)
    }
}

/// Ordered risk-factor entries. Order fixes the encoded layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskFactorSchema {
    #[serde(rename = "factor")]
    pub entries: Vec<RiskFactor>,
}

impl RiskFactorSchema {
    pub fn new(entries: Vec<RiskFactor>) -> Result<Self> {
        let s = RiskFactorSchema { entries };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(FormError::Config(format!("duplicate risk factor `{}`", e.name)));
            }
            if let RfKind::Categorical { levels } = &e.kind {
                if levels.len() < 2 {
                    return Err(FormError::Config(format!("categorical `{}` needs at least two levels", e.name)));
                }
            }
            if e.in_group(RfGroup::Base) && !e.in_group(RfGroup::Multiple) {
                return Err(FormError::Config(format!("`{}` is in Base but not Multiple; Multiple must extend Base", e.name)));
            }
        }
        Ok(())
    }

    /// Default layout: Base = {age, bmi}; Multiple adds questionnaire items;
    /// densitometric groups are Base plus their measurement.
    pub fn default_schema() -> Self {
        use RfGroup::*;
        let all = [Base, Multiple, Abmd, Frax, Tbs];
        let yes_no = ["no", "yes"];
        RiskFactorSchema {
            entries: vec![
                RiskFactor::continuous("age", &all),
                RiskFactor::continuous("bmi", &all),
                RiskFactor::categorical("fall_history", &yes_no, &[Multiple]),
                RiskFactor::categorical("smoking", &yes_no, &[Multiple]),
                RiskFactor::categorical("alcohol", &yes_no, &[Multiple]),
                RiskFactor::categorical("cancer", &yes_no, &[Multiple]),
                RiskFactor::categorical("hypertension", &yes_no, &[Multiple]),
                RiskFactor::continuous("abmd", &[Abmd]),
                RiskFactor::continuous("frax", &[Frax]),
                RiskFactor::continuous("tbs", &[Tbs]),
            ],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: RiskFactorSchema = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema is always serializable")
    }

    pub fn get(&self, name: &str) -> Option<&RiskFactor> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn group(&self, g: RfGroup) -> impl Iterator<Item = &RiskFactor> {
        self.entries.iter().filter(move |e| e.in_group(g))
    }

    /// Encoded vector length `k` for group `g`.
    pub fn width(&self, g: RfGroup) -> usize {
        self.group(g).map(RiskFactor::width).sum()
    }

    /// Column names of the encoded vector, e.g. `age`, `smoking=yes`.
    pub fn encoded_names(&self, g: RfGroup) -> Vec<String> {
        self.group(g)
            .flat_map(|e| match &e.kind {
                RfKind::Continuous => vec![e.name.clone()],
                RfKind::Categorical { levels } => levels.iter().map(|l| format!("{}={l}", e.name)).collect(),
            })
            .collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    /// Continuous values as reals, categorical values as level indices.
    pub rf_values: BTreeMap<String, f64>,
    pub event_time_years: Option<f64>,
    pub event_observed: bool,
    pub followup_years: f64,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(FormError::Validation(format!("patient {}: {msg}", self.patient_id)));
        if !(self.followup_years.is_finite() && self.followup_years >= 0.0) {
            return bad("followup_years must be a nonnegative number");
        }
        match (self.event_observed, self.event_time_years) {
            (true, None) => return bad("event observed without an event time"),
            (false, Some(_)) => return bad("event time given but no event observed"),
            (true, Some(t)) if !(t.is_finite() && t >= 0.0) => return bad("event time must be nonnegative"),
            _ => {}
        }
        Ok(())
    }

    /// Check that every value names a schema factor and categorical values
    /// are valid level indices.
    pub fn validate_against(&self, schema: &RiskFactorSchema) -> Result<()> {
        self.validate()?;
        for (name, &v) in &self.rf_values {
            let e = schema
                .get(name)
                .ok_or_else(|| FormError::Validation(format!("patient {}: unknown risk factor `{name}`", self.patient_id)))?;
            if let RfKind::Categorical { levels } = &e.kind {
                if v.fract() != 0.0 || v < 0.0 || v as usize >= levels.len() {
                    return Err(FormError::Validation(format!(
                        "patient {}: `{name}` level index {v} out of range",
                        self.patient_id
                    )));
                }
            } else if !v.is_finite() {
                return Err(FormError::Validation(format!("patient {}: `{name}` is not finite", self.patient_id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutcomeStatus {
    Positive,
    Negative,
    Censored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeLabel {
    pub status: OutcomeStatus,
    pub horizon_years: f64,
}

impl OutcomeLabel {
    pub fn is_labeled(&self) -> bool {
        self.status != OutcomeStatus::Censored
    }

    pub fn is_positive(&self) -> bool {
        self.status == OutcomeStatus::Positive
    }
}

/// Fracture status by `horizon_years`. Patients whose status at the horizon
/// is unknown (follow-up ended early without an event) are `Censored`.
pub fn label_fracture(record: &PatientRecord, horizon_years: f64) -> Result<OutcomeLabel> {
    if !(horizon_years > 0.0) {
        return Err(FormError::Validation(format!("horizon must be positive, got {horizon_years}")));
    }
    record.validate()?;
    let status = match record.event_time_years {
        Some(t) if record.event_observed && t <= horizon_years => OutcomeStatus::Positive,
        _ if record.followup_years >= horizon_years => OutcomeStatus::Negative,
        Some(t) if t > horizon_years => OutcomeStatus::Negative,
        _ => OutcomeStatus::Censored,
    };
    Ok(OutcomeLabel { status, horizon_years })
}

/// Training-split statistics (sample mean and n-1 standard deviation) for
/// every continuous factor. Records lacking a value are skipped.
pub fn fit_normalization(records: &[PatientRecord], schema: &RiskFactorSchema) -> Result<RiskFactorSchema> {
    if records.is_empty() {
        return Err(FormError::Validation("cannot fit normalization on an empty training set".into()));
    }
    let mut out = schema.clone();
    for e in out.entries.iter_mut().filter(|e| e.kind == RfKind::Continuous) {
        let vals: Vec<f64> = records.iter().filter_map(|r| r.rf_values.get(&e.name).copied()).collect();
        if vals.len() < 2 {
            return Err(FormError::Validation(format!("need at least two values of `{}` to normalize", e.name)));
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        if std == 0.0 {
            return Err(FormError::Config(format!("`{}` is constant on the training split (std 0)", e.name)));
        }
        e.mean = Some(mean);
        e.std = Some(std);
    }
    Ok(out)
}

/// One-hot categorical blocks and z-scored continuous values for the factors
/// of group `g`, in schema order.
pub fn encode_risk_factors(record: &PatientRecord, schema: &RiskFactorSchema, g: RfGroup) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(schema.width(g));
    for e in schema.group(g) {
        let v = *record.rf_values.get(&e.name).ok_or_else(|| FormError::MissingRiskFactor {
            patient_id: record.patient_id.clone(),
            factor: e.name.clone(),
        })?;
        match &e.kind {
            RfKind::Continuous => {
                let (Some(mean), Some(std)) = (e.mean, e.std) else {
                    return Err(FormError::Config(format!("`{}` has no fitted normalization", e.name)));
                };
                if std == 0.0 {
                    return Err(FormError::Config(format!("`{}` has zero std", e.name)));
                }
                out.push((v - mean) / std);
            }
            RfKind::Categorical { levels } => {
                let idx = v as usize;
                if v.fract() != 0.0 || v < 0.0 || idx >= levels.len() {
                    return Err(FormError::Validation(format!("`{}` level index {v} out of range", e.name)));
                }
                out.extend((0..levels.len()).map(|l| if l == idx { 1.0 } else { 0.0 }));
            }
        }
    }
    Ok(out)
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Write the cohort manifest CSV: `patient_id, event_observed,
/// event_time_years, followup_years` then one column per schema factor.
pub fn write_manifest<W: Write>(w: W, schema: &RiskFactorSchema, records: &[PatientRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["patient_id", "event_observed", "event_time_years", "followup_years"];
    header.extend(schema.names());
    wr.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.patient_id.clone(),
            if r.event_observed { "1".into() } else { "0".into() },
            r.event_time_years.map(fmt_num).unwrap_or_default(),
            fmt_num(r.followup_years),
        ];
        for e in &schema.entries {
            row.push(r.rf_values.get(&e.name).map(|&v| fmt_num(v)).unwrap_or_default());
        }
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Read a manifest. Categorical cells may hold a level name or index; empty
/// cells are missing values. Extra columns not in the schema are rejected.
pub fn read_manifest<R: Read>(r: R, schema: &RiskFactorSchema) -> Result<Vec<PatientRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    let fixed = ["patient_id", "event_observed", "event_time_years", "followup_years"];
    if header.len() < 4 || header[..4] != fixed {
        return Err(FormError::Validation(format!("manifest header must start with {fixed:?}")));
    }
    for name in &header[4..] {
        if schema.get(name).is_none() {
            return Err(FormError::Validation(format!("manifest column `{name}` not in schema")));
        }
    }
    let parse = |s: &str, what: &str| -> Result<f64> {
        s.trim().parse::<f64>().map_err(|_| FormError::Validation(format!("cannot parse {what} `{s}`")))
    };
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let event_observed = match row[1].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(FormError::Validation(format!("event_observed must be 0/1, got `{other}`"))),
        };
        let event_time_years = match row[2].trim() {
            "" => None,
            s => Some(parse(s, "event_time_years")?),
        };
        let mut rf_values = BTreeMap::new();
        for (name, cell) in header[4..].iter().zip(row.iter().skip(4)) {
            let cell = cell.trim();
            if cell.is_empty() {
                continue;
            }
            let e = schema.get(name).expect("checked above");
            let v = match &e.kind {
                RfKind::Categorical { levels } => match levels.iter().position(|l| l == cell) {
                    Some(i) => i as f64,
                    None => parse(cell, name)?,
                },
                RfKind::Continuous => parse(cell, name)?,
            };
            rf_values.insert(name.clone(), v);
        }
        let rec = PatientRecord {
            patient_id: row[0].to_string(),
            rf_values,
            event_time_years,
            event_observed,
            followup_years: parse(&row[3], "followup_years")?,
        };
        rec.validate_against(schema)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path, schema: &RiskFactorSchema) -> Result<Vec<PatientRecord>> {
    read_manifest(std::fs::File::open(path)?, schema)
}

pub fn save_manifest(path: &Path, schema: &RiskFactorSchema, records: &[PatientRecord]) -> Result<()> {
    write_manifest(std::fs::File::create(path)?, schema, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(event: Option<f64>, followup: f64) -> PatientRecord {
        PatientRecord {
            patient_id: "p".into(),
            rf_values: BTreeMap::new(),
            event_time_years: event,
            event_observed: event.is_some(),
            followup_years: followup,
        }
    }

    #[test]
    fn label_examples() {
        assert_eq!(label_fracture(&rec(Some(3.0), 3.0), 10.0).unwrap().status, OutcomeStatus::Positive);
        assert_eq!(label_fracture(&rec(None, 4.0), 10.0).unwrap().status, OutcomeStatus::Censored);
        assert_eq!(label_fracture(&rec(None, 12.0), 10.0).unwrap().status, OutcomeStatus::Negative);
        assert_eq!(label_fracture(&rec(Some(12.0), 12.0), 10.0).unwrap().status, OutcomeStatus::Negative);
        assert!(label_fracture(&rec(None, -1.0), 10.0).is_err());
        assert!(label_fracture(&rec(None, 1.0), 0.0).is_err());
    }

    fn small_schema() -> RiskFactorSchema {
        use RfGroup::*;
        RiskFactorSchema::new(vec![
            RiskFactor::continuous("age", &[Base, Multiple]),
            RiskFactor::continuous("bmi", &[Base, Multiple]),
            RiskFactor::categorical("smoking", &["no", "yes"], &[Multiple]),
        ])
        .unwrap()
    }

    #[test]
    fn group_widths() {
        let s = small_schema();
        assert_eq!(s.width(RfGroup::Base), 2);
        assert_eq!(s.width(RfGroup::Multiple), 4);
        let d = RiskFactorSchema::default_schema();
        d.validate().unwrap();
        assert_eq!(d.width(RfGroup::Frax), d.width(RfGroup::Base) + 1);
    }

    #[test]
    fn one_hot_and_centering() {
        let mut s = RiskFactorSchema::new(vec![
            RiskFactor::continuous("age", &[RfGroup::Base, RfGroup::Multiple]),
            RiskFactor::categorical("site", &["a", "b", "c"], &[RfGroup::Base, RfGroup::Multiple]),
        ])
        .unwrap();
        s.entries[0].mean = Some(70.0);
        s.entries[0].std = Some(5.0);
        let mut r = rec(None, 12.0);
        r.rf_values.insert("age".into(), 70.0);
        r.rf_values.insert("site".into(), 1.0);
        assert_eq!(encode_risk_factors(&r, &s, RfGroup::Base).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        r.rf_values.remove("site");
        assert!(matches!(encode_risk_factors(&r, &s, RfGroup::Base), Err(FormError::MissingRiskFactor { .. })));
        s.entries[0].std = Some(0.0);
        r.rf_values.insert("site".into(), 0.0);
        assert!(matches!(encode_risk_factors(&r, &s, RfGroup::Base), Err(FormError::Config(_))));
    }

    #[test]
    fn normalization_statistics() {
        let s = small_schema();
        let mk = |age: f64, bmi: f64| {
            let mut r = rec(None, 12.0);
            r.rf_values.insert("age".into(), age);
            r.rf_values.insert("bmi".into(), bmi);
            r
        };
        let fitted = fit_normalization(&[mk(1.0, 20.0), mk(2.0, 21.0), mk(3.0, 25.0)], &s).unwrap();
        assert_eq!(fitted.get("age").unwrap().mean, Some(2.0));
        assert_eq!(fitted.get("age").unwrap().std, Some(1.0));
        assert!(matches!(fit_normalization(&[mk(1.0, 2.0), mk(1.0, 3.0)], &s), Err(FormError::Config(_))));
        assert!(fit_normalization(&[], &s).is_err());
        let refit = fit_normalization(&[mk(10.0, 20.0), mk(20.0, 21.0)], &s).unwrap();
        assert_ne!(refit.get("age").unwrap().mean, fitted.get("age").unwrap().mean);
    }

    #[test]
    fn schema_rules() {
        assert!(RiskFactorSchema::new(vec![RiskFactor::categorical("x", &["only"], &[RfGroup::Multiple])]).is_err());
        assert!(RiskFactorSchema::new(vec![RiskFactor::continuous("x", &[RfGroup::Base])]).is_err());
        assert!(RiskFactorSchema::new(vec![
            RiskFactor::continuous("x", &[RfGroup::Multiple]),
            RiskFactor::continuous("x", &[RfGroup::Multiple])
        ])
        .is_err());
        let d = RiskFactorSchema::default_schema();
        assert_eq!(RiskFactorSchema::from_toml(&d.to_toml()).unwrap(), d);
    }

    #[test]
    fn manifest_round_trip_with_level_names() {
        let s = small_schema();
        let csv = "patient_id,event_observed,event_time_years,followup_years,age,bmi,smoking\n\
                   a,1,2.5,2.5,70,25,yes\n\
                   b,0,,11,80,,0\n";
        let recs = read_manifest(csv.as_bytes(), &s).unwrap();
        assert_eq!(recs[0].rf_values["smoking"], 1.0);
        assert!(!recs[1].rf_values.contains_key("bmi"));
        let mut buf = Vec::new();
        write_manifest(&mut buf, &s, &recs).unwrap();
        assert_eq!(read_manifest(buf.as_slice(), &s).unwrap(), recs);
        let bad = "patient_id,event_observed,event_time_years,followup_years,weight\n";
        assert!(read_manifest(bad.as_bytes(), &s).is_err());
    }

    proptest! {
        #[test]
        fn labeling_total_and_monotone(
            event in proptest::option::of(0.0f64..20.0),
            extra in 0.0f64..10.0,
            followup_if_none in 0.0f64..20.0,
            h1 in 0.1f64..20.0,
            h2 in 0.1f64..20.0,
        ) {
            let r = match event {
                Some(t) => rec(Some(t), t + extra * 0.0),
                None => rec(None, followup_if_none),
            };
            let (lo, hi) = if h1 <= h2 { (h1, h2) } else { (h2, h1) };
            let a = label_fracture(&r, lo).unwrap().status;
            let b = label_fracture(&r, hi).unwrap().status;
            if a == OutcomeStatus::Positive { prop_assert_eq!(b, OutcomeStatus::Positive); }
            if b == OutcomeStatus::Negative { prop_assert_eq!(a, OutcomeStatus::Negative); }
        }

        #[test]
        fn encoding_width_and_one_hot_blocks(age in 60.0f64..95.0, bmi in 15.0f64..40.0, smk in 0usize..2) {
            let mut s = small_schema();
            for e in s.entries.iter_mut().filter(|e| e.kind == RfKind::Continuous) {
                e.mean = Some(50.0);
                e.std = Some(3.0);
            }
            let mut r = rec(None, 12.0);
            r.rf_values.insert("age".into(), age);
            r.rf_values.insert("bmi".into(), bmi);
            r.rf_values.insert("smoking".into(), smk as f64);
            let v = encode_risk_factors(&r, &s, RfGroup::Multiple).unwrap();
            prop_assert_eq!(v.len(), s.width(RfGroup::Multiple));
            prop_assert_eq!(v[2] + v[3], 1.0);
        }
    }
}
