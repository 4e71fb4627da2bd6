//! Dataset manifest: CSV of image paths and scores, with a seeded
//! content-level train/test split. All rows sharing a path-stem prefix
//! (everything before the first underscore) are treated as one content group
//! and land in the same split.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{labels, stream};
use crate::scalar::Scalar;

use super::{io, DistortionKind, DistortionSpec, Image};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// As written in the CSV; relative paths resolve against `base_dir`.
    pub path: PathBuf,
    pub mos: f64,
    pub distortion: Option<DistortionSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub splits: Option<SplitIndices>,
}

/// Content group of a path: file stem up to the first underscore.
pub fn group_key(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    stem.split('_').next().unwrap_or_default().to_string()
}

impl DatasetManifest {
    /// Parses `path,mos[,kind,level]` rows and checks every image exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let manifest_path = path.display().to_string();
        let err_at = |line: usize, detail: String| Error::Manifest {
            path: manifest_path.clone(),
            line,
            detail,
        };

        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| err_at(1, "empty manifest".into()))?;
        if !header.trim_end().starts_with("path,mos") {
            return Err(err_at(
                1,
                format!("expected `path,mos` header, got `{header}`"),
            ));
        }

        let mut entries = Vec::new();
        let mut raw_specs: Vec<Option<(DistortionKind, u32)>> = Vec::new();
        let mut max_level = 1u32;
        for (index, line) in lines {
            let line_no = index + 1;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 2 && fields.len() != 4 {
                return Err(err_at(
                    line_no,
                    format!("expected 2 or 4 fields, got {}", fields.len()),
                ));
            }
            let entry_path = PathBuf::from(fields[0]);
            let mos: f64 = fields[1]
                .trim()
                .parse()
                .map_err(|_| err_at(line_no, format!("non-numeric mos `{}`", fields[1])))?;
            if !mos.is_finite() {
                return Err(err_at(line_no, format!("non-finite mos {mos}")));
            }
            let resolved = if entry_path.is_absolute() {
                entry_path.clone()
            } else {
                base_dir.join(&entry_path)
            };
            if !resolved.is_file() {
                return Err(err_at(
                    line_no,
                    format!("image file not found: {}", resolved.display()),
                ));
            }
            let kind_field = fields.get(2).map(|s| s.trim()).unwrap_or("none");
            let spec = if fields.len() == 4 && kind_field != "none" && !kind_field.is_empty() {
                let kind = DistortionKind::parse(kind_field).ok_or_else(|| {
                    err_at(line_no, format!("unknown distortion kind `{}`", fields[2]))
                })?;
                let level: u32 = fields[3]
                    .trim()
                    .parse()
                    .map_err(|_| err_at(line_no, format!("bad level `{}`", fields[3])))?;
                max_level = max_level.max(level);
                Some((kind, level))
            } else {
                None
            };
            raw_specs.push(spec);
            entries.push(ManifestEntry {
                path: entry_path,
                mos,
                distortion: None,
            });
        }
        for (entry, raw) in entries.iter_mut().zip(raw_specs) {
            if let Some((kind, level)) = raw {
                entry.distortion = Some(DistortionSpec {
                    kind,
                    level,
                    levels: max_level,
                    sigma: kind.default_sigma(level),
                });
            }
        }
        Ok(Self {
            base_dir,
            entries,
            splits: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("path,mos,kind,level\n");
        for entry in &self.entries {
            let (kind, level) = match &entry.distortion {
                Some(spec) => (spec.kind.to_string(), spec.level.to_string()),
                None => ("none".into(), "0".into()),
            };
            out.push_str(&format!(
                "{},{},{},{}\n",
                entry.path.display(),
                entry.mos,
                kind,
                level
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn resolve(&self, index: usize) -> PathBuf {
        let p = &self.entries[index].path;
        if p.is_absolute() {
            p.clone()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_image<T: Scalar>(&self, index: usize) -> Result<Image<T>> {
        io::read_any(&self.resolve(index))
    }

    /// Seeded content-level split: groups are shuffled, the first
    /// `round(ratio * groups)` go to train (clamped so neither side is empty
    /// when there are at least two groups), and every entry follows its group.
    pub fn split(&self, ratio: f64, seed: u64) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "split ratio {ratio} must be in (0,1)"
            )));
        }
        if self.entries.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot split an empty manifest".into(),
            ));
        }
        let mut group_order: Vec<String> = Vec::new();
        let mut group_of: HashMap<String, usize> = HashMap::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (i, entry) in self.entries.iter().enumerate() {
            let key = group_key(&entry.path);
            let gid = *group_of.entry(key.clone()).or_insert_with(|| {
                group_order.push(key);
                members.push(Vec::new());
                group_order.len() - 1
            });
            members[gid].push(i);
        }

        let mut order: Vec<usize> = (0..group_order.len()).collect();
        order.shuffle(&mut stream(seed, &[labels::SPLIT]));
        let groups = order.len();
        let mut train_groups = (groups as f64 * ratio).round() as usize;
        if groups >= 2 {
            train_groups = train_groups.clamp(1, groups - 1);
        }

        let mut train = Vec::new();
        let mut test = Vec::new();
        for (rank, &gid) in order.iter().enumerate() {
            let target = if rank < train_groups {
                &mut train
            } else {
                &mut test
            };
            target.extend(&members[gid]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok(Self {
            base_dir: self.base_dir.clone(),
            entries: self.entries.clone(),
            splits: Some(SplitIndices { train, test }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use tempfile::tempdir;

    fn write_dummy_images(dir: &Path, names: &[&str]) {
        for name in names {
            let image: Image<f64> = Array3::from_elem((4, 4, 1), 0.5);
            io::write_image(&dir.join(name), &image).unwrap();
        }
    }

    fn manifest_with(names: &[&str], rows: &[String]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempdir().unwrap();
        write_dummy_images(dir.path(), names);
        let path = dir.path().join("manifest.csv");
        let mut text = String::from("path,mos,kind,level\n");
        for row in rows {
            text.push_str(row);
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn load_parses_entries_and_specs() {
        let (dir, path) = manifest_with(
            &["a_blur1.pgm", "a_noise2.pgm"],
            &[
                "a_blur1.pgm,90,gaussian_blur,1".into(),
                "a_noise2.pgm,70.5,gaussian_noise,2".into(),
            ],
        );
        let manifest = DatasetManifest::load(&path).unwrap();
        assert_eq!(manifest.entries.len(), 2);
        assert_eq!(manifest.entries[1].mos, 70.5);
        let spec = manifest.entries[0].distortion.unwrap();
        assert_eq!(spec.kind, DistortionKind::GaussianBlur);
        assert_eq!(spec.level, 1);
        assert_eq!(spec.levels, 2);
        drop(dir);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let (dir, path) = manifest_with(
            &["a_blur1.pgm"],
            &["a_blur1.pgm,ninety,gaussian_blur,1".into()],
        );
        match DatasetManifest::load(&path) {
            Err(Error::Manifest { line, detail, .. }) => {
                assert_eq!(line, 2);
                assert!(detail.contains("non-numeric"));
            }
            other => panic!("expected manifest error, got {other:?}"),
        }
        drop(dir);

        let (dir, path) = manifest_with(&[], &["missing.pgm,50".into()]);
        match DatasetManifest::load(&path) {
            Err(Error::Manifest { line, detail, .. }) => {
                assert_eq!(line, 2);
                assert!(detail.contains("not found"));
            }
            other => panic!("expected manifest error, got {other:?}"),
        }
        drop(dir);
    }

    #[test]
    fn bad_header_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, "file,score\nx.pgm,1\n").unwrap();
        assert!(matches!(
            DatasetManifest::load(&path),
            Err(Error::Manifest { line: 1, .. })
        ));
    }

    #[test]
    fn split_ratio_and_determinism() {
        let names: Vec<String> = (0..10).map(|i| format!("img{i:02}.pgm")).collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let rows: Vec<String> = names.iter().map(|n| format!("{n},50")).collect();
        let (dir, path) = manifest_with(&name_refs, &rows);
        let manifest = DatasetManifest::load(&path).unwrap();

        let split = manifest.split(0.8, 3).unwrap();
        let s = split.splits.as_ref().unwrap();
        assert_eq!(s.train.len(), 8);
        assert_eq!(s.test.len(), 2);
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let again = manifest.split(0.8, 3).unwrap();
        assert_eq!(split.splits, again.splits);
        let other = manifest.split(0.8, 4).unwrap();
        assert_ne!(split.splits, other.splits);
        drop(dir);
    }

    #[test]
    fn split_keeps_content_groups_together() {
        let mut names = Vec::new();
        let mut rows = Vec::new();
        for i in 0..20 {
            for level in 1..=5 {
                let name = format!("img{i:03}_blur{level}.pgm");
                rows.push(format!("{name},{},gaussian_blur,{level}", 100 - level * 10));
                names.push(name);
            }
        }
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let (dir, path) = manifest_with(&name_refs, &rows);
        let manifest = DatasetManifest::load(&path).unwrap();
        let split = manifest.split(0.8, 11).unwrap();
        let s = split.splits.as_ref().unwrap();
        assert_eq!(s.train.len(), 80);
        assert_eq!(s.test.len(), 20);

        let groups_in = |idx: &[usize]| -> std::collections::HashSet<String> {
            idx.iter()
                .map(|&i| group_key(&split.entries[i].path))
                .collect()
        };
        let train_groups = groups_in(&s.train);
        let test_groups = groups_in(&s.test);
        assert!(train_groups.is_disjoint(&test_groups));
        drop(dir);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempdir().unwrap();
        write_dummy_images(dir.path(), &["x_blur1.pgm"]);
        let manifest = DatasetManifest {
            base_dir: dir.path().to_path_buf(),
            entries: vec![ManifestEntry {
                path: "x_blur1.pgm".into(),
                mos: 83.25,
                distortion: Some(DistortionSpec::new(DistortionKind::GaussianBlur, 1, 5).unwrap()),
            }],
            splits: None,
        };
        let path = dir.path().join("manifest.csv");
        manifest.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.entries.len(), 1);
        assert_eq!(back.entries[0].mos, 83.25);
        assert_eq!(
            back.entries[0].distortion.unwrap().kind,
            DistortionKind::GaussianBlur
        );
    }

    #[test]
    fn group_key_takes_stem_prefix() {
        assert_eq!(group_key(Path::new("images/img007_blur3.pgm")), "img007");
        assert_eq!(group_key(Path::new("img007.pgm")), "img007");
        assert_eq!(group_key(Path::new("a_b_c.ppm")), "a");
    }
}
