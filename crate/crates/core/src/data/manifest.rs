use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_EXTENSIONS: [&str; 3] = ["ppm", "pgm", "dcst"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    /// Index into [`Manifest::classes`].
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub records: Vec<Record>,
    /// Directory that record paths are relative to.
    pub root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    classes: Vec<String>,
    records: Vec<RecordFile>,
}

#[derive(Serialize, Deserialize)]
struct RecordFile {
    id: String,
    path: String,
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<String>,
}

impl Manifest {
    pub fn new(classes: Vec<String>, records: Vec<Record>, root: impl Into<PathBuf>) -> Result<Self> {
        let m = Self {
            classes,
            records,
            root: root.into(),
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Config(format!("duplicate record id {:?}", r.id)));
            }
            if r.label >= self.classes.len() {
                return Err(Error::Config(format!(
                    "record {:?} has label {} outside the {} classes",
                    r.id,
                    r.label,
                    self.classes.len()
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn path_of(&self, record: &Record) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn get(&self, id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn index(&self) -> BTreeMap<&str, &Record> {
        self.records.iter().map(|r| (r.id.as_str(), r)).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ManifestFile {
            classes: self.classes.clone(),
            records: self
                .records
                .iter()
                .map(|r| RecordFile {
                    id: r.id.clone(),
                    path: r.path.clone(),
                    label: self.classes[r.label].clone(),
                    tag: r.tag.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest JSON file; record paths resolve against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ManifestFile = serde_json::from_str(&text)?;
        let lookup: BTreeMap<&str, usize> = file.classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let mut records = Vec::with_capacity(file.records.len());
        for r in file.records {
            let label = *lookup
                .get(r.label.as_str())
                .ok_or_else(|| Error::Config(format!("record {:?} has unknown class {:?}", r.id, r.label)))?;
            records.push(Record {
                id: r.id,
                path: r.path,
                label,
                tag: r.tag,
            });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(file.classes, records, root)
    }
}

/// Builds a manifest from `root/<class>/<file>`; classes and ids are sorted
/// lexicographically and ids are `<class>/<file stem>`.
pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut class_dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            class_dirs.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Config(format!("{} contains no class directories", root.display())));
    }
    let mut records = Vec::new();
    for (label, class) in class_dirs.iter().enumerate() {
        let dir = root.join(class);
        let mut files = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                continue;
            }
            let ext = path
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_default();
            if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                return Err(Error::Config(format!(
                    "{}: unknown image extension {ext:?} (expected one of {IMAGE_EXTENSIONS:?})",
                    path.display()
                )));
            }
            files.push(entry.file_name().to_string_lossy().into_owned());
        }
        if files.is_empty() {
            return Err(Error::Config(format!("class directory {} is empty", dir.display())));
        }
        files.sort();
        for f in files {
            let stem = Path::new(&f).file_stem().unwrap().to_string_lossy().into_owned();
            records.push(Record {
                id: format!("{class}/{stem}"),
                path: format!("{class}/{f}"),
                label,
                tag: None,
            });
        }
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Manifest::new(class_dirs, records, root)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRow {
    pub class: String,
    pub total: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train_frac: f64,
    pub labeled_frac: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub test: Vec<String>,
    pub audit: Vec<AuditRow>,
}

impl DatasetSplit {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn pool(&self, name: &str) -> Result<&[String]> {
        match name {
            "labeled" => Ok(&self.labeled),
            "unlabeled" => Ok(&self.unlabeled),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown pool {other:?}"))),
        }
    }

    pub fn render_audit(&self) -> String {
        let mut out = format!("{:<16} {:>6} {:>8} {:>10} {:>6}\n", "class", "total", "labeled", "unlabeled", "test");
        let mut sums = [0usize; 4];
        for r in &self.audit {
            out += &format!("{:<16} {:>6} {:>8} {:>10} {:>6}\n", r.class, r.total, r.labeled, r.unlabeled, r.test);
            for (s, v) in sums.iter_mut().zip([r.total, r.labeled, r.unlabeled, r.test]) {
                *s += v;
            }
        }
        out += &format!("{:<16} {:>6} {:>8} {:>10} {:>6}\n", "all", sums[0], sums[1], sums[2], sums[3]);
        out
    }
}

/// Per class: shuffle, keep `round(train_frac·n)` for training, then
/// `max(1, round(labeled_frac·n_train))` of those as labeled.
pub fn stratified_split(manifest: &Manifest, train_frac: f64, labeled_frac: f64, seed: u64) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&train_frac) || !(0.0..=1.0).contains(&labeled_frac) || labeled_frac == 0.0 {
        return Err(Error::Config(format!(
            "fractions must lie in (0, 1]: train {train_frac}, labeled {labeled_frac}"
        )));
    }
    let mut pools = [Vec::new(), Vec::new(), Vec::new()];
    let mut audit = Vec::with_capacity(manifest.num_classes());
    for (c, class) in manifest.classes.iter().enumerate() {
        let members: Vec<usize> = (0..manifest.records.len())
            .filter(|&i| manifest.records[i].label == c)
            .collect();
        let n = members.len();
        let n_train = (train_frac * n as f64).round() as usize;
        let n_labeled = ((labeled_frac * n_train as f64).round() as usize).max(1);
        if n_train == 0 || n_labeled > n_train {
            return Err(Error::Config(format!(
                "class {class:?} has {n} samples, too few for a labeled example at train fraction {train_frac}"
            )));
        }
        let order = rng::permutation(&mut rng::stream(seed, "split", c as u64), n);
        for (rank, &k) in order.iter().enumerate() {
            let pool = if rank < n_labeled {
                0
            } else if rank < n_train {
                1
            } else {
                2
            };
            pools[pool].push(members[k]);
        }
        audit.push(AuditRow {
            class: class.clone(),
            total: n,
            labeled: n_labeled,
            unlabeled: n_train - n_labeled,
            test: n - n_train,
        });
    }
    let [labeled, unlabeled, test] = pools.map(|mut idx| {
        idx.sort_unstable();
        idx.into_iter().map(|i| manifest.records[i].id.clone()).collect::<Vec<_>>()
    });
    Ok(DatasetSplit {
        seed,
        train_frac,
        labeled_frac,
        manifest: None,
        labeled,
        unlabeled,
        test,
        audit,
    })
}
