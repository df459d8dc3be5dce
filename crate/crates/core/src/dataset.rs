//! Sample metadata, the manifest text format and the action-unit to
//! objective-class mapping.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

/// Number of objective classes (I to V).
pub const NUM_CLASSES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ObjectiveClass {
    I,
    II,
    III,
    IV,
    V,
}

impl ObjectiveClass {
    pub const ALL: [ObjectiveClass; NUM_CLASSES] = [Self::I, Self::II, Self::III, Self::IV, Self::V];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::I => "I",
            Self::II => "II",
            Self::III => "III",
            Self::IV => "IV",
            Self::V => "V",
        }
    }
}

impl fmt::Display for ObjectiveClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown objective class `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DatabaseId {
    Casme2,
    Samm,
    Synthetic,
}

impl DatabaseId {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Casme2 => "CASME2",
            Self::Samm => "SAMM",
            Self::Synthetic => "SYNTHETIC",
        }
    }
}

impl fmt::Display for DatabaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatabaseId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "CASME2" => Ok(Self::Casme2),
            "SAMM" => Ok(Self::Samm),
            "SYNTHETIC" => Ok(Self::Synthetic),
            _ => Err(format!("unknown database id `{s}`")),
        }
    }
}

/// Which synthetic occlusion a sample carries. Random blocks are tagged with
/// their area percentage, a multiple of 5 between 5 and 50.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OcclusionTag {
    None,
    Mask,
    Glass,
    Random(u8),
}

impl OcclusionTag {
    pub fn random(percent: u8) -> Option<Self> {
        (percent >= 5 && percent <= 50 && percent % 5 == 0).then_some(Self::Random(percent))
    }
}

impl fmt::Display for OcclusionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("NONE"),
            Self::Mask => f.write_str("MASK"),
            Self::Glass => f.write_str("GLASS"),
            Self::Random(p) => write!(f, "RANDOM_{p:02}"),
        }
    }
}

impl FromStr for OcclusionTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "NONE" => Ok(Self::None),
            "MASK" => Ok(Self::Mask),
            "GLASS" => Ok(Self::Glass),
            _ => s
                .strip_prefix("RANDOM_")
                .filter(|p| p.len() == 2)
                .and_then(|p| p.parse::<u8>().ok())
                .and_then(Self::random)
                .ok_or_else(|| format!("unknown occlusion tag `{s}`")),
        }
    }
}

/// One micro-expression clip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub database_id: DatabaseId,
    pub subject_id: String,
    pub frames_dir: String,
    pub onset_idx: usize,
    pub apex_idx: usize,
    pub offset_idx: usize,
    pub au_code: String,
    /// `None` when the AU combination is outside the five objective classes.
    pub objective_class: Option<ObjectiveClass>,
    pub occlusion_tag: OcclusionTag,
}

impl AnnotationRecord {
    /// Checks the per-record invariants.
    pub fn validate(&self) -> Result<(), String> {
        if self.sample_id.is_empty() {
            return Err("empty sample_id".into());
        }
        if self.subject_id.is_empty() {
            return Err("empty subject_id".into());
        }
        if !(self.onset_idx <= self.apex_idx && self.apex_idx <= self.offset_idx) {
            return Err(format!(
                "frame indices out of order: onset {} apex {} offset {}",
                self.onset_idx, self.apex_idx, self.offset_idx
            ));
        }
        if let Some(class) = self.objective_class {
            match map_aus_to_objective_class(&self.au_code) {
                Some(mapped) if mapped == class => {}
                Some(mapped) => {
                    return Err(format!(
                        "objective class {class} disagrees with `{}` (maps to {mapped})",
                        self.au_code
                    ))
                }
                None => {
                    return Err(format!(
                        "objective class {class} given but `{}` is not in the AU table",
                        self.au_code
                    ))
                }
            }
        }
        Ok(())
    }

    fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.sample_id,
            self.database_id,
            self.subject_id,
            self.frames_dir,
            self.onset_idx,
            self.apex_idx,
            self.offset_idx,
            self.au_code,
            self.objective_class.map_or("UNMAPPED", ObjectiveClass::as_str),
            self.occlusion_tag
        )
    }

    fn from_line(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != MANIFEST_COLUMNS.len() {
            return Err(format!(
                "expected {} tab-separated fields, found {}",
                MANIFEST_COLUMNS.len(),
                fields.len()
            ));
        }
        let index = |i: usize| -> Result<usize, String> {
            fields[i]
                .trim()
                .parse()
                .map_err(|_| format!("{} is not a frame index: `{}`", MANIFEST_COLUMNS[i], fields[i]))
        };
        let objective_class = match fields[8].trim() {
            "UNMAPPED" => None,
            other => Some(other.parse()?),
        };
        let record = Self {
            sample_id: fields[0].trim().to_string(),
            database_id: fields[1].trim().parse()?,
            subject_id: fields[2].trim().to_string(),
            frames_dir: fields[3].trim().to_string(),
            onset_idx: index(4)?,
            apex_idx: index(5)?,
            offset_idx: index(6)?,
            au_code: fields[7].trim().to_string(),
            objective_class,
            occlusion_tag: fields[9].trim().parse()?,
        };
        record.validate()?;
        Ok(record)
    }
}

/// Column order of the manifest format.
pub const MANIFEST_COLUMNS: [&str; 10] = [
    "sample_id",
    "database_id",
    "subject_id",
    "frames_dir",
    "onset_idx",
    "apex_idx",
    "offset_idx",
    "au_code",
    "objective_class",
    "occlusion_tag",
];

const SOURCE_NOTE_PREFIX: &str = "#source_note:";

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum RecordError {
    #[error("line {line_no}: malformed record: {reason}")]
    MalformedLine { line_no: usize, reason: String },
    #[error("line {line_no}: duplicate sample id `{sample_id}`")]
    DuplicateSampleId { line_no: usize, sample_id: String },
}

impl RecordError {
    pub fn line_no(&self) -> usize {
        match self {
            Self::MalformedLine { line_no, .. } | Self::DuplicateSampleId { line_no, .. } => *line_no,
        }
    }
}

/// All problems found while parsing a manifest. Parsing never drops a line
/// silently: every invalid line shows up here.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("{} invalid manifest line(s), first: {}", .0.len(), .0[0])]
pub struct ManifestError(pub Vec<RecordError>);

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum DistributionError {
    #[error("sample `{0}` has no objective class")]
    UnmappedRecordPresent(String),
}

/// Per-class sample counts of a manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub counts: [usize; NUM_CLASSES],
    pub total: usize,
    pub subjects: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<AnnotationRecord>,
    pub source_note: String,
}

impl DatasetManifest {
    pub fn new(records: Vec<AnnotationRecord>, source_note: impl Into<String>) -> Result<Self, ManifestError> {
        let manifest = Self {
            records,
            source_note: source_note.into(),
        };
        let mut seen = BTreeSet::new();
        let mut errors = Vec::new();
        for (i, r) in manifest.records.iter().enumerate() {
            if let Err(reason) = r.validate() {
                errors.push(RecordError::MalformedLine { line_no: i + 1, reason });
            }
            if !seen.insert(r.sample_id.as_str()) {
                errors.push(RecordError::DuplicateSampleId {
                    line_no: i + 1,
                    sample_id: r.sample_id.clone(),
                });
            }
        }
        if errors.is_empty() {
            Ok(manifest)
        } else {
            Err(ManifestError(errors))
        }
    }

    /// Parses the tab-separated manifest format. Line numbers in errors are
    /// 1-based and count header and blank lines.
    pub fn parse_str(text: &str) -> Result<Self, ManifestError> {
        let mut records = Vec::new();
        let mut source_note = String::new();
        let mut errors = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if let Some(note) = line.strip_prefix(SOURCE_NOTE_PREFIX) {
                source_note = note.trim().to_string();
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            match AnnotationRecord::from_line(line) {
                Ok(record) => {
                    if seen.contains(&record.sample_id) {
                        errors.push(RecordError::DuplicateSampleId {
                            line_no,
                            sample_id: record.sample_id,
                        });
                    } else {
                        seen.insert(record.sample_id.clone());
                        records.push(record);
                    }
                }
                Err(reason) => errors.push(RecordError::MalformedLine { line_no, reason }),
            }
        }
        if errors.is_empty() {
            Ok(Self { records, source_note })
        } else {
            Err(ManifestError(errors))
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if !self.source_note.is_empty() {
            out.push_str(SOURCE_NOTE_PREFIX);
            out.push(' ');
            out.push_str(&self.source_note);
            out.push('\n');
        }
        out.push('#');
        out.push_str(&MANIFEST_COLUMNS.join("\t"));
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&AnnotationRecord> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.subject_id.as_str()).collect()
    }

    /// Records that carry an objective class. Unmapped samples stay in the
    /// manifest but never enter folds.
    pub fn mapped(&self) -> impl Iterator<Item = &AnnotationRecord> {
        self.records.iter().filter(|r| r.objective_class.is_some())
    }

    /// Concatenates manifests, e.g. CASME II and SAMM into the composite set.
    pub fn merge(parts: &[&DatasetManifest], source_note: &str) -> Result<Self, ManifestError> {
        let records = parts.iter().flat_map(|m| m.records.iter().cloned()).collect();
        Self::new(records, source_note)
    }

    pub fn class_distribution(&self) -> Result<ClassDistribution, DistributionError> {
        let mut counts = [0; NUM_CLASSES];
        for r in &self.records {
            let class = r
                .objective_class
                .ok_or_else(|| DistributionError::UnmappedRecordPresent(r.sample_id.clone()))?;
            counts[class.index()] += 1;
        }
        Ok(ClassDistribution {
            counts,
            total: self.records.len(),
            subjects: self.subjects().len(),
        })
    }
}

/// The AU table as printed, including its quirks (a missing `U` in `A23`,
/// stray whitespace). Normalization absorbs both.
pub const AU_CLASS_TABLE: [(ObjectiveClass, &str); 34] = [
    (ObjectiveClass::I, "AU6"),
    (ObjectiveClass::I, "AU12"),
    (ObjectiveClass::I, "AU6+AU12"),
    (ObjectiveClass::I, "AU6+AU7+AU12"),
    (ObjectiveClass::I, "AU7+AU12"),
    (ObjectiveClass::II, "AU1+AU2"),
    (ObjectiveClass::II, "AU5"),
    (ObjectiveClass::II, "AU25"),
    (ObjectiveClass::II, "AU1+AU2+AU25"),
    (ObjectiveClass::II, "AU25+AU26"),
    (ObjectiveClass::II, "AU5+AU24"),
    (ObjectiveClass::III, "A23"),
    (ObjectiveClass::III, "AU4"),
    (ObjectiveClass::III, "AU4+AU7"),
    (ObjectiveClass::III, "AU4+AU5"),
    (ObjectiveClass::III, "AU4+AU5+AU7"),
    (ObjectiveClass::III, "AU17+AU24"),
    (ObjectiveClass::III, "AU4+AU6+AU7"),
    (ObjectiveClass::III, "AU4+AU38"),
    (ObjectiveClass::IV, "AU10"),
    (ObjectiveClass::IV, "AU9"),
    (ObjectiveClass::IV, "AU4+AU9"),
    (ObjectiveClass::IV, "AU4+AU40"),
    (ObjectiveClass::IV, "AU4+AU5+AU40"),
    (ObjectiveClass::IV, "AU4+AU7+AU9"),
    (ObjectiveClass::IV, "AU4 +AU9+AU17"),
    (ObjectiveClass::IV, "AU4+AU7+AU10"),
    (ObjectiveClass::IV, "AU4+AU5+AU7+AU9"),
    (ObjectiveClass::IV, "AU7+AU10"),
    (ObjectiveClass::V, "AU1"),
    (ObjectiveClass::V, "AU15"),
    (ObjectiveClass::V, "AU1+AU4"),
    (ObjectiveClass::V, "AU6+AU15"),
    (ObjectiveClass::V, "AU15+AU17"),
];

/// Lookup table from normalized AU combination to objective class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectiveClassMap {
    entries: BTreeMap<String, ObjectiveClass>,
}

impl ObjectiveClassMap {
    pub fn standard() -> Self {
        let entries = AU_CLASS_TABLE
            .iter()
            .map(|&(class, aus)| (normalize_au_code(aus), class))
            .collect();
        Self { entries }
    }

    pub fn get(&self, au_code: &str) -> Option<ObjectiveClass> {
        self.entries.get(&normalize_au_code(au_code)).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, ObjectiveClass)> {
        self.entries.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Maps an AU combination such as `"AU12+AU6"` to its objective class.
pub fn map_aus_to_objective_class(au_code: &str) -> Option<ObjectiveClass> {
    let key = normalize_au_code(au_code);
    if key.is_empty() {
        return None;
    }
    AU_CLASS_TABLE
        .iter()
        .find(|(_, aus)| normalize_au_code(aus) == key)
        .map(|&(class, _)| class)
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum AuToken {
    Unit(u32),
    Other(String),
}

fn parse_au_token(token: &str) -> AuToken {
    // Laterality such as `AU10(R)` carries no class information.
    let token = token.split('(').next().unwrap_or("");
    let rest = token
        .strip_prefix("AU")
        .or_else(|| token.strip_prefix('A'))
        .unwrap_or(token);
    let rest = match rest.as_bytes() {
        [b'L' | b'R' | b'B', d, ..] if d.is_ascii_digit() => &rest[1..],
        _ => rest,
    };
    if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
        if let Ok(n) = rest.parse() {
            return AuToken::Unit(n);
        }
    }
    AuToken::Other(token.to_string())
}

/// Canonical form of an AU string: whitespace removed, upper-cased, each
/// token rewritten as `AU<n>`, laterality dropped, tokens sorted by unit
/// number and deduplicated.
pub fn normalize_au_code(au_code: &str) -> String {
    let cleaned: String = au_code
        .chars()
        .filter(|c| !c.is_whitespace())
        .flat_map(char::to_uppercase)
        .collect();
    let mut tokens: Vec<AuToken> = cleaned
        .split('+')
        .filter(|t| !t.is_empty())
        .map(parse_au_token)
        .filter(|t| !matches!(t, AuToken::Other(s) if s.is_empty()))
        .collect();
    tokens.sort();
    tokens.dedup();
    tokens
        .iter()
        .map(|t| match t {
            AuToken::Unit(n) => format!("AU{n}"),
            AuToken::Other(s) => s.clone(),
        })
        .collect::<Vec<_>>()
        .join("+")
}

/// Reference sample counts per objective class for the two source databases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceCorpus {
    Casme2,
    Samm,
    Composite,
}

impl ReferenceCorpus {
    fn parts(self) -> &'static [(DatabaseId, [usize; NUM_CLASSES], usize)] {
        const CASME2: (DatabaseId, [usize; NUM_CLASSES], usize) = (DatabaseId::Casme2, [25, 15, 99, 26, 20], 26);
        const SAMM: (DatabaseId, [usize; NUM_CLASSES], usize) = (DatabaseId::Samm, [24, 13, 20, 8, 3], 21);
        match self {
            Self::Casme2 => &[CASME2],
            Self::Samm => &[SAMM],
            Self::Composite => &[CASME2, SAMM],
        }
    }
}

/// One AU combination per class, used when fabricating fixture records.
pub fn representative_au_code(class: ObjectiveClass) -> &'static str {
    match class {
        ObjectiveClass::I => "AU6+AU12",
        ObjectiveClass::II => "AU1+AU2",
        ObjectiveClass::III => "AU4+AU7",
        ObjectiveClass::IV => "AU9",
        ObjectiveClass::V => "AU15",
    }
}

/// A metadata-only manifest with the published per-class and per-subject
/// counts. Frames do not exist; the fixture exercises counting and fold
/// construction.
pub fn reference_manifest(corpus: ReferenceCorpus) -> DatasetManifest {
    let mut records = Vec::new();
    for &(db, counts, subjects) in corpus.parts() {
        let mut n = 0usize;
        for class in ObjectiveClass::ALL {
            for _ in 0..counts[class.index()] {
                let subject = n % subjects + 1;
                let (sample_id, subject_id) = match db {
                    DatabaseId::Casme2 => (format!("casme2_{n:03}"), format!("casme2/sub{subject:02}")),
                    DatabaseId::Samm => (format!("samm_{n:03}"), format!("samm/{:03}", subject + 5)),
                    DatabaseId::Synthetic => (format!("syn_{n:03}"), format!("syn/{subject:02}")),
                };
                records.push(AnnotationRecord {
                    frames_dir: format!("frames/{sample_id}"),
                    sample_id,
                    database_id: db,
                    subject_id,
                    onset_idx: 0,
                    apex_idx: 10,
                    offset_idx: 20,
                    au_code: representative_au_code(class).to_string(),
                    objective_class: Some(class),
                    occlusion_tag: OcclusionTag::None,
                });
                n += 1;
            }
        }
    }
    DatasetManifest {
        records,
        source_note: "reference counts fixture".to_string(),
    }
}
