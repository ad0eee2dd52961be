use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::{default_specs, synth_clip, AnomalyRecipe, SynthMachineSpec};
use crate::dsp::{load_wav, write_wav, SampleFormat, Waveform};
use crate::error::{Error, Result};
use crate::metrics::Label;
use crate::model::{ClassMap, IdLabel};

pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainNormal,
    TestNormal,
    TestAnomalous,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::TrainNormal, Split::TestNormal, Split::TestAnomalous];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::TrainNormal => "train_normal",
            Split::TestNormal => "test_normal",
            Split::TestAnomalous => "test_anomalous",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn label(self) -> Label {
        match self {
            Split::TestAnomalous => Label::Anomalous,
            _ => Label::Normal,
        }
    }
}

/// Settings of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub train_clips: usize,
    pub test_normal_clips: usize,
    pub test_anomalous_clips: usize,
    /// Defect used by the default machines.
    pub anomaly: AnomalyRecipe,
    /// Explicit machine list; the default set is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub machines: Option<Vec<SynthMachineSpec>>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_clips: 40,
            test_normal_clips: 10,
            test_anomalous_clips: 10,
            anomaly: AnomalyRecipe::narrowband(6000.0),
            machines: None,
        }
    }
}

impl CorpusConfig {
    pub fn specs(&self) -> Vec<SynthMachineSpec> {
        self.machines.clone().unwrap_or_else(|| default_specs(&self.anomaly))
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::TrainNormal => self.train_clips,
            Split::TestNormal => self.test_normal_clips,
            Split::TestAnomalous => self.test_anomalous_clips,
        }
    }
}

/// One row of `manifest.csv`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path of the WAV file relative to the corpus root, `/`-separated.
    pub clip: String,
    pub machine_type: String,
    pub machine_id: String,
    pub split: Split,
    pub label: Label,
}

impl ManifestEntry {
    /// The clip path without its extension; unique within a corpus.
    pub fn clip_id(&self) -> &str {
        self.clip.strip_suffix(".wav").unwrap_or(&self.clip)
    }

    pub fn path(&self, root: &Path) -> PathBuf {
        self.clip.split('/').fold(root.to_path_buf(), |p, part| p.join(part))
    }
}

fn prepare_root(root: &Path, force: bool) -> Result<()> {
    match fs::read_dir(root) {
        Ok(mut entries) => {
            if entries.next().is_some() {
                if !force {
                    return Err(Error::io(
                        root,
                        io::Error::new(io::ErrorKind::AlreadyExists, "directory is not empty (use --force to overwrite)"),
                    ));
                }
                fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
            }
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(Error::io(root, e)),
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))
}

/// Writes the corpus as `root/<type>/<id>/<split>/<clip>.wav` plus a
/// manifest. A non-empty `root` is replaced only when `force` is set.
pub fn build_corpus(cfg: &CorpusConfig, sample_rate: u32, clip_len: usize, root: &Path, force: bool) -> Result<Vec<ManifestEntry>> {
    let specs = cfg.specs();
    for s in &specs {
        s.validate(sample_rate)?;
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in &specs {
        if !seen.insert((&s.machine_type, &s.machine_id)) {
            return Err(Error::Config(format!("machine {}/{} listed twice", s.machine_type, s.machine_id)));
        }
        if [&s.machine_type, &s.machine_id]
            .iter()
            .any(|n| n.is_empty() || n.contains(['/', '\\']) || n.starts_with('.'))
        {
            return Err(Error::Config(format!("machine name {}/{} is not a plain directory name", s.machine_type, s.machine_id)));
        }
    }
    prepare_root(root, force)?;

    let mut jobs = Vec::new();
    for (si, spec) in specs.iter().enumerate() {
        for (ki, split) in Split::ALL.into_iter().enumerate() {
            let mut stream = ChaCha8Rng::seed_from_u64(cfg.seed);
            stream.set_stream(((si as u64) << 8) | ki as u64);
            for i in 0..cfg.count(split) {
                let prefix = if split == Split::TestAnomalous { "anomaly" } else { "normal" };
                let entry = ManifestEntry {
                    clip: format!("{}/{}/{}/{prefix}_{i:04}.wav", spec.machine_type, spec.machine_id, split.as_str()),
                    machine_type: spec.machine_type.clone(),
                    machine_id: spec.machine_id.clone(),
                    split,
                    label: split.label(),
                };
                jobs.push((spec, entry, stream.next_u64()));
            }
        }
    }
    jobs.par_iter().try_for_each(|(spec, entry, seed)| {
        let wave = synth_clip(spec, entry.split == Split::TestAnomalous, *seed, sample_rate, clip_len)?;
        let path = entry.path(root);
        let dir = path.parent().expect("clip paths have a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_wav(&path, &wave, SampleFormat::Pcm16)
    })?;

    let mut manifest: Vec<ManifestEntry> = jobs.into_iter().map(|(_, e, _)| e).collect();
    manifest.sort_by(|a, b| a.clip.cmp(&b.clip));
    let path = root.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for e in &manifest {
        w.serialize(e).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn sorted_dir(path: &Path) -> Result<Vec<(String, PathBuf, bool)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        let is_dir = entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir();
        out.push((entry.file_name().to_string_lossy().into_owned(), entry.path(), is_dir));
    }
    out.sort();
    Ok(out)
}

fn unexpected(path: &Path, detail: &str) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// A corpus on disk, listed in lexicographic path order.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    classes: ClassMap,
}

/// Scans `root/<type>/<id>/<split>/*.wav`. Unknown split directories and
/// stray files are rejected; `manifest.csv` at the root is ignored.
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let mut entries = Vec::new();
    for (machine_type, type_dir, is_dir) in sorted_dir(root)? {
        if !is_dir {
            if machine_type == MANIFEST {
                continue;
            }
            return Err(unexpected(&type_dir, "expected a machine-type directory"));
        }
        for (machine_id, id_dir, is_dir) in sorted_dir(&type_dir)? {
            if !is_dir {
                return Err(unexpected(&id_dir, "expected a machine-id directory"));
            }
            for (split_name, split_dir, is_dir) in sorted_dir(&id_dir)? {
                let split = match Split::parse(&split_name) {
                    Some(s) if is_dir => s,
                    _ => return Err(unexpected(&split_dir, "unknown split (expected train_normal, test_normal or test_anomalous)")),
                };
                for (file, path, is_dir) in sorted_dir(&split_dir)? {
                    if is_dir || !file.ends_with(".wav") {
                        return Err(unexpected(&path, "expected a .wav file"));
                    }
                    entries.push(ManifestEntry {
                        clip: format!("{machine_type}/{machine_id}/{split_name}/{file}"),
                        machine_type: machine_type.clone(),
                        machine_id: machine_id.clone(),
                        split,
                        label: split.label(),
                    });
                }
            }
        }
    }
    entries.sort_by(|a, b| a.clip.cmp(&b.clip));
    let classes = ClassMap::from_pairs(entries.iter().map(|e| (e.machine_type.clone(), e.machine_id.clone())));
    Ok(Dataset {
        root: root.to_path_buf(),
        entries,
        classes,
    })
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// One class per (machine type, machine ID) pair present on disk.
    pub fn classes(&self) -> &ClassMap {
        &self.classes
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn id_label(&self, entry: &ManifestEntry) -> &IdLabel {
        self.classes
            .get(&entry.machine_type, &entry.machine_id)
            .expect("class map covers every entry")
    }

    /// Loads a clip; its source id is the clip id.
    pub fn load(&self, entry: &ManifestEntry) -> Result<Waveform> {
        Ok(load_wav(entry.path(&self.root))?.with_source_id(entry.clip_id()))
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<(Waveform, IdLabel, Split, Label)>> + '_ {
        self.entries
            .iter()
            .map(|e| Ok((self.load(e)?, self.id_label(e).clone(), e.split, e.label)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            seed: 3,
            train_clips: 2,
            test_normal_clips: 1,
            test_anomalous_clips: 1,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn layout_and_manifest_agree() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("data");
        let manifest = build_corpus(&small(), 16000, 800, &root, false).unwrap();
        assert_eq!(manifest.len(), 8 * 4);
        assert_eq!(read_manifest(&root.join(MANIFEST)).unwrap(), manifest);
        let ds = read_dataset(&root).unwrap();
        assert_eq!(ds.entries(), &manifest[..]);
        assert_eq!(ds.classes().len(), 8);
        assert_eq!(ds.split(Split::TrainNormal).count(), 16);
        let first = &ds.entries()[0];
        assert_eq!(first.clip, "fan/id_00/test_anomalous/anomaly_0000.wav");
        let (wave, label, split, l) = ds.iter().next().unwrap().unwrap();
        assert_eq!(wave.len(), 800);
        assert_eq!(wave.source_id(), "fan/id_00/test_anomalous/anomaly_0000");
        assert_eq!((label.class_index, split, l), (0, Split::TestAnomalous, Label::Anomalous));
    }

    #[test]
    fn rebuilds_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let m = build_corpus(&small(), 16000, 400, &a, false).unwrap();
        build_corpus(&small(), 16000, 400, &b, false).unwrap();
        for e in &m {
            assert_eq!(fs::read(e.path(&a)).unwrap(), fs::read(e.path(&b)).unwrap());
        }
        let other = CorpusConfig { seed: 4, ..small() };
        build_corpus(&other, 16000, 400, &b, true).unwrap();
        assert_ne!(fs::read(m[0].path(&a)).unwrap(), fs::read(m[0].path(&b)).unwrap());
    }

    #[test]
    fn refuses_non_empty_target() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("keep.txt"), "x").unwrap();
        let err = build_corpus(&small(), 16000, 400, dir.path(), false).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(dir.path().join("keep.txt").exists());
    }

    #[test]
    fn layout_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_dataset(dir.path()).unwrap().entries().is_empty());
        fs::create_dir_all(dir.path().join("fan/id_00/validation")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Data { .. })));
        assert!(matches!(read_dataset(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
