//! On-disk source/target datasets.
//!
//! Layout under the dataset root:
//!
//! ```text
//! dataset.ini                      scene parameters
//! manifest.tsv                     one row per sample
//! {source,target}/images/{split}_{index:04}.ppm
//! {source,target}/labels/{split}_{index:04}.pgm
//! ```
//!
//! Images and labels load through separate calls so that a caller can read
//! a domain's images without touching its label files.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pfr_core::synth::{content_seeds, generate_scene, DomainStyle, LabeledSample, SceneSpec, SynthError};
use pfr_core::Tensor;

use crate::config::{ConfigError, Ini};
use crate::pnm::{self, PnmError};

pub const MANIFEST: &str = "manifest.tsv";
pub const DATASET_INFO: &str = "dataset.ini";
const MANIFEST_HEADER: &str = "domain\tsplit\tindex\timage_path\tlabel_path\tcontent_seed";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Pnm(#[from] PnmError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {detail}")]
    Manifest { path: PathBuf, line: usize, detail: String },
    #[error(transparent)]
    Info(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.into(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Source, Domain::Target];
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(format!("unknown domain {other:?} (expected source or target)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Val];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split {other:?} (expected train or val)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub domain: Domain,
    pub split: Split,
    pub index: usize,
    /// Relative to the dataset root.
    pub image_path: String,
    pub label_path: String,
    pub content_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.domain, r.split, r.index, r.image_path, r.label_path, r.content_seed
            ));
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, DatasetError> {
        let err = |line: usize, detail: String| DatasetError::Manifest {
            path: path.into(),
            line,
            detail,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == MANIFEST_HEADER => {}
            _ => return Err(err(1, "missing or wrong header".into())),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(err(i + 1, format!("expected 6 fields, found {}", f.len())));
            }
            rows.push(ManifestRow {
                domain: f[0].parse().map_err(|e| err(i + 1, e))?,
                split: f[1].parse().map_err(|e| err(i + 1, e))?,
                index: f[2].parse().map_err(|_| err(i + 1, "bad index".into()))?,
                image_path: f[3].into(),
                label_path: f[4].into(),
                content_seed: f[5].parse().map_err(|_| err(i + 1, "bad content_seed".into()))?,
            });
        }
        Ok(Manifest { rows })
    }

    pub fn load(root: &Path) -> Result<Self, DatasetError> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Self::parse(&text, &path)
    }

    /// Rows of one domain and split, ordered by index.
    pub fn select(&self, domain: Domain, split: Split) -> Vec<&ManifestRow> {
        let mut rows: Vec<&ManifestRow> = self
            .rows
            .iter()
            .filter(|r| r.domain == domain && r.split == split)
            .collect();
        rows.sort_by_key(|r| r.index);
        rows
    }
}

/// Parameters a dataset was rendered with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetInfo {
    pub image_size: usize,
    pub num_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
    pub paired: bool,
}

impl DatasetInfo {
    fn to_ini(&self) -> String {
        format!(
            "[data]\nimage_size = {}\nnum_classes = {}\nn_train = {}\nn_val = {}\nseed = {}\npaired = {}\n",
            self.image_size, self.num_classes, self.n_train, self.n_val, self.seed, self.paired
        )
    }

    pub fn load(root: &Path) -> Result<Self, DatasetError> {
        let path = root.join(DATASET_INFO);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut ini = Ini::parse(&text, &["data"])?;
        let info = DatasetInfo {
            image_size: ini.require("data", "image_size")?,
            num_classes: ini.require("data", "num_classes")?,
            n_train: ini.require("data", "n_train")?,
            n_val: ini.require("data", "n_val")?,
            seed: ini.require("data", "seed")?,
            paired: ini.require("data", "paired")?,
        };
        ini.finish()?;
        Ok(info)
    }
}

fn file_stem(split: Split, index: usize) -> String {
    format!("{split}_{index:04}")
}

/// Renders `n_train + n_val` scenes per domain under `out_dir`. Scene
/// generation runs on up to `threads` workers; output is independent of
/// the thread count.
#[allow(clippy::too_many_arguments)]
pub fn render_dataset(
    spec: &SceneSpec,
    source_style: &DomainStyle,
    target_style: &DomainStyle,
    n_train: usize,
    n_val: usize,
    out_dir: &Path,
    paired: bool,
    seed: u64,
    threads: usize,
) -> Result<Manifest, DatasetError> {
    spec.validate()?;
    source_style.validate(spec.num_classes)?;
    target_style.validate(spec.num_classes)?;
    if n_train == 0 || n_val == 0 {
        return Err(DatasetError::Invalid("n_train and n_val must be positive".into()));
    }
    let (src_seeds, tgt_seeds) = content_seeds(seed, n_train + n_val, paired);
    let mut rows = Vec::new();
    let mut jobs = Vec::new();
    for (domain, style, seeds) in [
        (Domain::Source, source_style, &src_seeds),
        (Domain::Target, target_style, &tgt_seeds),
    ] {
        for d in ["images", "labels"] {
            let dir = out_dir.join(domain.to_string()).join(d);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        for (k, &content_seed) in seeds.iter().enumerate() {
            let (split, index) = if k < n_train {
                (Split::Train, k)
            } else {
                (Split::Val, k - n_train)
            };
            let stem = file_stem(split, index);
            let row = ManifestRow {
                domain,
                split,
                index,
                image_path: format!("{domain}/images/{stem}.ppm"),
                label_path: format!("{domain}/labels/{stem}.pgm"),
                content_seed,
            };
            jobs.push((style, row.clone()));
            rows.push(row);
        }
    }

    let threads = threads.max(1);
    let chunk = jobs.len().div_ceil(threads);
    std::thread::scope(|scope| -> Result<(), DatasetError> {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || -> Result<(), DatasetError> {
                    for (style, row) in part {
                        let s = generate_scene(spec, style, row.content_seed)?;
                        write_sample(out_dir, row, &s)?;
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("render worker panicked")?;
        }
        Ok(())
    })?;

    let manifest = Manifest { rows };
    let path = out_dir.join(MANIFEST);
    fs::write(&path, manifest.to_tsv()).map_err(io_err(&path))?;
    let info = DatasetInfo {
        image_size: spec.image_size,
        num_classes: spec.num_classes,
        n_train,
        n_val,
        seed,
        paired,
    };
    let path = out_dir.join(DATASET_INFO);
    fs::write(&path, info.to_ini()).map_err(io_err(&path))?;
    Ok(manifest)
}

fn write_sample(root: &Path, row: &ManifestRow, s: &LabeledSample) -> Result<(), DatasetError> {
    pnm::write_ppm(&root.join(&row.image_path), &s.image)?;
    pnm::write_pgm(&root.join(&row.label_path), s.width(), s.height(), &s.label)?;
    Ok(())
}

/// Images of one domain and split, in index order. Label files are not
/// opened.
pub fn load_images(root: &Path, manifest: &Manifest, domain: Domain, split: Split) -> Result<Vec<Tensor<f32>>, DatasetError> {
    manifest
        .select(domain, split)
        .iter()
        .map(|r| Ok(pnm::read_ppm(&root.join(&r.image_path))?))
        .collect()
}

/// Label maps of one domain and split, in index order.
pub fn load_labels(root: &Path, manifest: &Manifest, domain: Domain, split: Split) -> Result<Vec<Vec<u8>>, DatasetError> {
    manifest
        .select(domain, split)
        .iter()
        .map(|r| Ok(pnm::read_pgm(&root.join(&r.label_path))?.2))
        .collect()
}

/// Whether every label file of a domain and split exists.
pub fn labels_present(root: &Path, manifest: &Manifest, domain: Domain, split: Split) -> bool {
    let rows = manifest.select(domain, split);
    !rows.is_empty() && rows.iter().all(|r| root.join(&r.label_path).is_file())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            image_size: 16,
            ..SceneSpec::default()
        }
    }

    fn render(dir: &Path, paired: bool, threads: usize) -> Manifest {
        let spec = small_spec();
        render_dataset(
            &spec,
            &DomainStyle::source_default(5),
            &DomainStyle::target_default(5),
            10,
            3,
            dir,
            paired,
            7,
            threads,
        )
        .unwrap()
    }

    #[test]
    fn counting_contract() {
        let dir = tempfile::tempdir().unwrap();
        let m = render(dir.path(), false, 1);
        assert_eq!(m.rows.len(), 26);
        for d in Domain::ALL {
            assert_eq!(m.select(d, Split::Train).len(), 10);
            assert_eq!(m.select(d, Split::Val).len(), 3);
            let images = fs::read_dir(dir.path().join(d.to_string()).join("images")).unwrap();
            assert_eq!(images.count(), 13);
        }
        let files = m.rows.len() * 2;
        assert_eq!(files, 52);
        assert_eq!(Manifest::load(dir.path()).unwrap(), m);
        let info = DatasetInfo::load(dir.path()).unwrap();
        assert_eq!((info.image_size, info.num_classes, info.paired), (16, 5, false));
    }

    #[test]
    fn unpaired_seeds_are_disjoint_and_paired_labels_match() {
        let dir = tempfile::tempdir().unwrap();
        let m = render(dir.path(), false, 1);
        let mut seeds: Vec<u64> = m.rows.iter().map(|r| r.content_seed).collect();
        let n = seeds.len();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), n);

        let dir = tempfile::tempdir().unwrap();
        let m = render(dir.path(), true, 1);
        for split in Split::ALL {
            for (s, t) in m.select(Domain::Source, split).iter().zip(m.select(Domain::Target, split)) {
                let a = fs::read(dir.path().join(&s.label_path)).unwrap();
                let b = fs::read(dir.path().join(&t.label_path)).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = render(a.path(), false, 1);
        let mb = render(b.path(), false, 3);
        assert_eq!(ma, mb);
        for r in &ma.rows {
            for p in [&r.image_path, &r.label_path] {
                assert_eq!(fs::read(a.path().join(p)).unwrap(), fs::read(b.path().join(p)).unwrap());
            }
        }
    }

    #[test]
    fn loading_images_ignores_missing_labels() {
        let dir = tempfile::tempdir().unwrap();
        let m = render(dir.path(), false, 1);
        fs::remove_dir_all(dir.path().join("target/labels")).unwrap();
        assert!(!labels_present(dir.path(), &m, Domain::Target, Split::Val));
        assert!(labels_present(dir.path(), &m, Domain::Source, Split::Val));
        let imgs = load_images(dir.path(), &m, Domain::Target, Split::Train).unwrap();
        assert_eq!(imgs.len(), 10);
        assert_eq!(imgs[0].shape(), &[3, 16, 16]);
        assert!(load_labels(dir.path(), &m, Domain::Target, Split::Val).is_err());
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let text = format!("{MANIFEST_HEADER}\nsource\ttrain\t0\ta\tb\t1\nsource\ttest\t0\ta\tb\t1\n");
        let e = Manifest::parse(&text, Path::new("m.tsv")).unwrap_err();
        assert!(matches!(e, DatasetError::Manifest { line: 3, .. }), "{e}");
    }
}
