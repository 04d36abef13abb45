//! Line-oriented episode manifests.
//!
//! ```text
//! # comment
//! version=1
//! backbone=resnet101
//! episode=fold0-0001
//! class=3
//! query.features=q/l00.hstn,q/l01.hstn,...
//! query.mask=q/mask.hstn
//! support.features=s0/l00.hstn,...
//! support.mask=s0/mask.hstn
//! prediction=pred/0001.hstn
//! ```
//!
//! `version` and `backbone` come first. Each `episode=` line opens a block;
//! every `support.features` line must be followed by its `support.mask`.
//! `prediction` is optional. Paths are relative to the manifest's directory
//! unless absolute. Feature paths list every extracted layer in pyramid
//! order, level 1 first.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::arch::{level_groups, Backbone, LevelFeatures, ModelSpec};
use crate::conv4d::Variant;
use crate::correlation::FeatureSet;
use crate::episode::{Episode, Support};
use crate::error::{Error, Result};
use crate::io::{read_header, read_tensor, write_tensor};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

/// Feature schedule a manifest's files must follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleTag {
    Backbone(Backbone),
    /// The 64×64, 8/4/2 training-test scale.
    Toy,
}

impl ScheduleTag {
    pub const ALL: [ScheduleTag; 4] = [
        ScheduleTag::Backbone(Backbone::Vgg16),
        ScheduleTag::Backbone(Backbone::Resnet50),
        ScheduleTag::Backbone(Backbone::Resnet101),
        ScheduleTag::Toy,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ScheduleTag::Backbone(b) => b.tag(),
            ScheduleTag::Toy => "toy",
        }
    }

    pub fn model_spec(self, variant: Variant) -> ModelSpec {
        match self {
            ScheduleTag::Backbone(b) => ModelSpec::full(b, variant),
            ScheduleTag::Toy => ModelSpec::toy(variant),
        }
    }

    pub fn levels(self) -> [LevelFeatures; 3] {
        self.model_spec(Variant::CenterPivot).levels
    }

    pub fn feature_dims(self) -> Vec<[usize; 3]> {
        self.model_spec(Variant::CenterPivot).feature_dims()
    }

    pub fn mask_dims(self) -> [usize; 2] {
        let (h, w) = self.model_spec(Variant::CenterPivot).image_size;
        [h, w]
    }
}

impl fmt::Display for ScheduleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ScheduleTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "toy" {
            return Ok(ScheduleTag::Toy);
        }
        s.parse().map(ScheduleTag::Backbone).map_err(|_| {
            Error::Config(format!("unknown backbone tag {s:?} (vgg16, resnet50, resnet101, toy)"))
        })
    }
}

/// A path together with the manifest line that named it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileRef {
    pub path: PathBuf,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportEntry {
    pub features: Vec<FileRef>,
    pub mask: FileRef,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeEntry {
    pub id: String,
    pub line: usize,
    pub class_id: usize,
    pub query_features: Vec<FileRef>,
    pub query_mask: FileRef,
    pub supports: Vec<SupportEntry>,
    pub prediction: Option<FileRef>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeManifest {
    pub schedule: ScheduleTag,
    pub episodes: Vec<EpisodeEntry>,
    /// Where relative paths are resolved.
    pub base_dir: PathBuf,
    /// The manifest file, for diagnostics.
    pub source: PathBuf,
}

#[derive(Default)]
struct Draft {
    id: String,
    line: usize,
    class_id: Option<usize>,
    query_features: Option<Vec<FileRef>>,
    query_mask: Option<FileRef>,
    supports: Vec<SupportEntry>,
    pending_support: Option<(Vec<FileRef>, usize)>,
    prediction: Option<FileRef>,
}

fn file_list(value: &str, line: usize) -> Vec<FileRef> {
    value
        .split(',')
        .map(|p| FileRef {
            path: PathBuf::from(p.trim()),
            line,
        })
        .collect()
}

impl EpisodeManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, path, base)
    }

    pub fn parse(text: &str, source: impl Into<PathBuf>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let source = source.into();
        let err = |line: usize, message: String| Error::Manifest {
            path: source.clone(),
            line,
            message,
        };
        let mut version = None;
        let mut schedule = None;
        let mut episodes = Vec::new();
        let mut draft: Option<Draft> = None;

        let finish = |d: Draft| -> Result<EpisodeEntry> {
            if let Some((_, l)) = d.pending_support {
                return Err(err(l, "support.features without a following support.mask".into()));
            }
            let missing = |what: &str| err(d.line, format!("episode {:?} has no {what}", d.id));
            let query_features = d.query_features.ok_or_else(|| missing("query.features"))?;
            let query_mask = d.query_mask.ok_or_else(|| missing("query.mask"))?;
            let class_id = d.class_id.ok_or_else(|| missing("class"))?;
            if d.supports.is_empty() {
                return Err(missing("support (K must be at least 1)"));
            }
            Ok(EpisodeEntry {
                id: d.id,
                line: d.line,
                class_id,
                query_features,
                query_mask,
                supports: d.supports,
                prediction: d.prediction,
            })
        };

        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(n, format!("expected key=value, got {line:?}")))?;
            if value.is_empty() {
                return Err(err(n, format!("{key} has an empty value")));
            }
            match key {
                "version" => {
                    let v: u32 = value.parse().map_err(|_| err(n, format!("bad version {value:?}")))?;
                    if v != MANIFEST_VERSION {
                        return Err(err(n, format!("unsupported manifest version {v}")));
                    }
                    version = Some(v);
                }
                "backbone" => {
                    if draft.is_some() || !episodes.is_empty() {
                        return Err(err(n, "backbone must precede the first episode".into()));
                    }
                    schedule = Some(value.parse::<ScheduleTag>().map_err(|e| err(n, e.to_string()))?);
                }
                "episode" => {
                    if version.is_none() || schedule.is_none() {
                        return Err(err(n, "version and backbone must precede the first episode".into()));
                    }
                    if let Some(d) = draft.take() {
                        episodes.push(finish(d)?);
                    }
                    draft = Some(Draft {
                        id: value.to_string(),
                        line: n,
                        ..Default::default()
                    });
                }
                _ => {
                    let d = draft
                        .as_mut()
                        .ok_or_else(|| err(n, format!("{key} outside an episode block")))?;
                    let dup = |what: &str| err(n, format!("duplicate {what} in episode {:?}", d.id));
                    match key {
                        "class" => {
                            if d.class_id.is_some() {
                                return Err(dup("class"));
                            }
                            d.class_id = Some(value.parse().map_err(|_| err(n, format!("bad class id {value:?}")))?);
                        }
                        "query.features" => {
                            if d.query_features.is_some() {
                                return Err(dup("query.features"));
                            }
                            d.query_features = Some(file_list(value, n));
                        }
                        "query.mask" => {
                            if d.query_mask.is_some() {
                                return Err(dup("query.mask"));
                            }
                            d.query_mask = Some(FileRef {
                                path: value.into(),
                                line: n,
                            });
                        }
                        "support.features" => {
                            if d.pending_support.is_some() {
                                return Err(err(n, "support.features twice without support.mask".into()));
                            }
                            d.pending_support = Some((file_list(value, n), n));
                        }
                        "support.mask" => {
                            let (features, _) = d
                                .pending_support
                                .take()
                                .ok_or_else(|| err(n, "support.mask without preceding support.features".into()))?;
                            d.supports.push(SupportEntry {
                                features,
                                mask: FileRef {
                                    path: value.into(),
                                    line: n,
                                },
                            });
                        }
                        "prediction" => {
                            if d.prediction.is_some() {
                                return Err(dup("prediction"));
                            }
                            d.prediction = Some(FileRef {
                                path: value.into(),
                                line: n,
                            });
                        }
                        _ => return Err(err(n, format!("unknown key {key:?}"))),
                    }
                }
            }
        }
        if let Some(d) = draft.take() {
            episodes.push(finish(d)?);
        }
        let schedule = schedule.ok_or_else(|| err(0, "missing backbone".into()))?;
        if version.is_none() {
            return Err(err(0, "missing version".into()));
        }
        if episodes.is_empty() {
            return Err(err(0, "manifest lists no episodes".into()));
        }
        Ok(Self {
            schedule,
            episodes,
            base_dir: base_dir.into(),
            source,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |fs: &[FileRef]| {
            fs.iter()
                .map(|f| f.path.display().to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(s, "version={MANIFEST_VERSION}").unwrap();
        writeln!(s, "backbone={}", self.schedule).unwrap();
        for e in &self.episodes {
            writeln!(s, "episode={}", e.id).unwrap();
            writeln!(s, "class={}", e.class_id).unwrap();
            writeln!(s, "query.features={}", join(&e.query_features)).unwrap();
            writeln!(s, "query.mask={}", e.query_mask.path.display()).unwrap();
            for sup in &e.supports {
                writeln!(s, "support.features={}", join(&sup.features)).unwrap();
                writeln!(s, "support.mask={}", sup.mask.path.display()).unwrap();
            }
            if let Some(p) = &e.prediction {
                writeln!(s, "prediction={}", p.path.display()).unwrap();
            }
        }
        s
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn diag(&self, f: &FileRef, message: String) -> Error {
        Error::Manifest {
            path: self.source.clone(),
            line: f.line,
            message: format!("{}: {message}", f.path.display()),
        }
    }

    fn check_file(&self, f: &FileRef, want: &[usize], what: &str) -> Result<()> {
        let (_, dims) = read_header(self.resolve(&f.path)).map_err(|e| self.diag(f, e.to_string()))?;
        if dims != want {
            return Err(self.diag(f, format!("{what} expected dims {want:?}, found {dims:?}")));
        }
        Ok(())
    }

    fn check_features(&self, files: &[FileRef], line: usize, who: &str) -> Result<()> {
        let want = self.schedule.feature_dims();
        if files.len() != want.len() {
            return Err(Error::Manifest {
                path: self.source.clone(),
                line,
                message: format!(
                    "{who} lists {} feature files, the {} schedule has {} layers",
                    files.len(),
                    self.schedule,
                    want.len()
                ),
            });
        }
        for (i, (f, w)) in files.iter().zip(&want).enumerate() {
            self.check_file(f, w, &format!("{who} layer {i}"))?;
        }
        Ok(())
    }

    /// Checks that every referenced file exists and matches the schedule.
    /// Only headers are read.
    pub fn validate(&self) -> Result<()> {
        let mask = self.schedule.mask_dims();
        for e in &self.episodes {
            self.check_features(&e.query_features, e.query_features[0].line, "query")?;
            self.check_file(&e.query_mask, &mask, "query mask")?;
            for (k, s) in e.supports.iter().enumerate() {
                self.check_features(&s.features, s.features[0].line, &format!("support {k}"))?;
                self.check_file(&s.mask, &mask, &format!("support {k} mask"))?;
            }
            if let Some(p) = &e.prediction {
                self.check_file(p, &mask, "prediction")?;
            }
        }
        Ok(())
    }

    fn read<T: Real>(&self, f: &FileRef) -> Result<Tensor<T>> {
        Ok(read_tensor(self.resolve(&f.path))
            .map_err(|e| self.diag(f, e.to_string()))?
            .into_real())
    }

    fn feature_set<T: Real>(&self, files: &[FileRef]) -> Result<FeatureSet<T>> {
        let entries = files
            .iter()
            .enumerate()
            .map(|(i, f)| Ok((i, self.read(f)?)))
            .collect::<Result<Vec<_>>>()?;
        FeatureSet::new(entries, level_groups(&self.schedule.levels()))
    }

    /// Validates, then reads episode `i` in full.
    pub fn load_episode<T: Real>(&self, i: usize) -> Result<Episode<T>> {
        let e = &self.episodes[i];
        self.check_features(&e.query_features, e.query_features[0].line, "query")?;
        Ok(Episode {
            class_id: e.class_id,
            query: self.feature_set(&e.query_features)?,
            query_mask: self.read(&e.query_mask)?,
            supports: e
                .supports
                .iter()
                .map(|s| {
                    Ok(Support {
                        features: self.feature_set(&s.features)?,
                        mask: self.read(&s.mask)?,
                    })
                })
                .collect::<Result<_>>()?,
        })
    }

    pub fn load_prediction<T: Real>(&self, i: usize) -> Result<Option<Tensor<T>>> {
        self.episodes[i].prediction.as_ref().map(|p| self.read(p)).transpose()
    }
}

/// Writes `episodes` under `dir` as HSTN files plus `manifest.txt` and returns
/// the manifest path. `predictions`, when given, are written alongside.
pub fn write_episodes<T: Real>(
    dir: impl AsRef<Path>,
    schedule: ScheduleTag,
    episodes: &[Episode<T>],
    predictions: Option<&[Tensor<T>]>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let rel = |p: String| FileRef {
        path: PathBuf::from(p),
        line: 0,
    };
    let write_set = |fs: &FeatureSet<T>, stem: &str| -> Result<Vec<FileRef>> {
        fs.entries()
            .iter()
            .map(|(l, t)| {
                let name = format!("{stem}.l{l:02}.hstn");
                write_tensor(t, dir.join(&name))?;
                Ok(rel(name))
            })
            .collect()
    };
    for (i, e) in episodes.iter().enumerate() {
        let id = format!("ep{i:04}");
        let query_features = write_set(&e.query, &format!("{id}.query"))?;
        let qm = format!("{id}.query.mask.hstn");
        write_tensor(&e.query_mask, dir.join(&qm))?;
        let supports = e
            .supports
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let features = write_set(&s.features, &format!("{id}.support{k}"))?;
                let m = format!("{id}.support{k}.mask.hstn");
                write_tensor(&s.mask, dir.join(&m))?;
                Ok(SupportEntry { features, mask: rel(m) })
            })
            .collect::<Result<_>>()?;
        let prediction = match predictions {
            Some(ps) => {
                let p = format!("{id}.prediction.hstn");
                write_tensor(&ps[i], dir.join(&p))?;
                Some(rel(p))
            }
            None => None,
        };
        entries.push(EpisodeEntry {
            id,
            line: 0,
            class_id: e.class_id,
            query_features,
            query_mask: rel(qm),
            supports,
            prediction,
        });
    }
    let path = dir.join("manifest.txt");
    let m = EpisodeManifest {
        schedule,
        episodes: entries,
        base_dir: dir.to_path_buf(),
        source: path.clone(),
    };
    fs::write(&path, m.to_text())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::{generate_synthetic_episode, SyntheticEpisodeSpec};
    use std::fs::OpenOptions;

    fn toy_episodes(n: usize) -> Vec<Episode<f32>> {
        (0..n as u64)
            .map(|seed| {
                generate_synthetic_episode(&SyntheticEpisodeSpec {
                    seed,
                    shots: 2,
                    class_id: seed as usize % 2,
                    ..Default::default()
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn toy_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let eps = toy_episodes(2);
        let preds: Vec<_> = eps.iter().map(|e| e.query_mask.clone()).collect();
        let path = write_episodes(dir.path(), ScheduleTag::Toy, &eps, Some(&preds)).unwrap();
        let m = EpisodeManifest::load(&path).unwrap();
        m.validate().unwrap();
        assert_eq!(m.episodes.len(), 2);
        assert_eq!(m.schedule, ScheduleTag::Toy);
        for (i, e) in eps.iter().enumerate() {
            assert_eq!(&m.load_episode::<f32>(i).unwrap(), e);
            assert_eq!(m.load_prediction::<f32>(i).unwrap().as_ref(), Some(&e.query_mask));
        }
        let again = EpisodeManifest::parse(&m.to_text(), &path, dir.path()).unwrap();
        assert_eq!(again.to_text(), m.to_text());
    }

    /// Writes a correct header and extends the file sparsely to full length.
    fn sparse_tensor(path: &Path, dims: &[usize]) {
        let mut bytes = b"HSTN".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(0);
        bytes.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let len = bytes.len() + 4 * dims.iter().product::<usize>();
        fs::write(path, &bytes).unwrap();
        OpenOptions::new().write(true).open(path).unwrap().set_len(len as u64).unwrap();
    }

    fn backbone_manifest(dir: &Path, tag: ScheduleTag, dims: &[[usize; 3]]) -> PathBuf {
        let mut files = Vec::new();
        for who in ["q", "s"] {
            let mut names = Vec::new();
            for (i, d) in dims.iter().enumerate() {
                let name = format!("{who}{i:02}.hstn");
                sparse_tensor(&dir.join(&name), d);
                names.push(name);
            }
            sparse_tensor(&dir.join(format!("{who}mask.hstn")), &tag.mask_dims());
            files.push(names.join(","));
        }
        let text = format!(
            "version=1\nbackbone={tag}\nepisode=e0\nclass=7\nquery.features={}\nquery.mask=qmask.hstn\nsupport.features={}\nsupport.mask=smask.hstn\n",
            files[0], files[1]
        );
        let path = dir.join("manifest.txt");
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn every_backbone_schedule_validates() {
        for tag in ScheduleTag::ALL {
            let dir = tempfile::tempdir().unwrap();
            let path = backbone_manifest(dir.path(), tag, &tag.feature_dims());
            let m = EpisodeManifest::load(&path).unwrap();
            m.validate().unwrap_or_else(|e| panic!("{tag}: {e}"));
            assert_eq!(m.episodes[0].query_features.len(), tag.feature_dims().len());
        }
    }

    #[test]
    fn shape_mismatch_names_file_and_dims() {
        let tag = ScheduleTag::Backbone(Backbone::Resnet50);
        let mut dims = tag.feature_dims();
        dims[5] = [1024, 26, 25];
        let dir = tempfile::tempdir().unwrap();
        let path = backbone_manifest(dir.path(), tag, &dims);
        let err = EpisodeManifest::load(&path).unwrap().validate().unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Manifest { line: 5, .. }), "{msg}");
        assert!(msg.contains("q05.hstn"), "{msg}");
        assert!(msg.contains("[1024, 25, 25]") && msg.contains("[1024, 26, 25]"), "{msg}");
    }

    #[test]
    fn missing_or_truncated_files_are_reported() {
        let tag = ScheduleTag::Backbone(Backbone::Vgg16);
        let dir = tempfile::tempdir().unwrap();
        let path = backbone_manifest(dir.path(), tag, &tag.feature_dims());
        fs::remove_file(dir.path().join("s02.hstn")).unwrap();
        let msg = EpisodeManifest::load(&path).unwrap().validate().unwrap_err().to_string();
        assert!(msg.contains(":7:") && msg.contains("s02.hstn"), "{msg}");
        let f = dir.path().join("q01.hstn");
        let len = fs::metadata(&f).unwrap().len();
        OpenOptions::new().write(true).open(&f).unwrap().set_len(len - 1).unwrap();
        let msg = EpisodeManifest::load(&path).unwrap().validate().unwrap_err().to_string();
        assert!(msg.contains("q01.hstn") && msg.contains("truncated"), "{msg}");
    }

    #[test]
    fn wrong_layer_count_is_rejected() {
        let tag = ScheduleTag::Backbone(Backbone::Resnet101);
        let dir = tempfile::tempdir().unwrap();
        let dims = &tag.feature_dims()[..29];
        let path = backbone_manifest(dir.path(), tag, dims);
        let msg = EpisodeManifest::load(&path).unwrap().validate().unwrap_err().to_string();
        assert!(msg.contains("29 feature files") && msg.contains("30 layers"), "{msg}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let head = "version=1\nbackbone=toy\n";
        let cases = [
            ("backbone=resnet18\n", 1),
            ("version=2\n", 1),
            ("episode=a\nclass=0\n", 1),
            (&*format!("{head}episode=a\nclass=0\nquery.features=a\nquery.mask=m\n"), 3),
            (&*format!("{head}episode=a\nclass=0\nquery.features=a\nquery.mask=m\nsupport.features=b\n"), 7),
            (&*format!("{head}episode=a\nsupport.mask=m\n"), 4),
            (&*format!("{head}episode=a\nclass=x\n"), 4),
            (&*format!("{head}episode=a\nwhat=1\n"), 4),
            (&*format!("{head}class=1\n"), 3),
            (&*format!("{head}episode=a\nnot a pair\n"), 4),
            (head, 0),
        ];
        for (text, line) in cases {
            match EpisodeManifest::parse(text, "m.txt", ".") {
                Err(Error::Manifest { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        let ok = format!("{head}# note\n\nepisode=a\nclass=2\nquery.features=a, b\nquery.mask=m\nsupport.features=c\nsupport.mask=n\n");
        let m = EpisodeManifest::parse(&ok, "m.txt", "/data").unwrap();
        assert_eq!(m.episodes[0].query_features[1].path, PathBuf::from("b"));
        assert_eq!(m.resolve(Path::new("b")), PathBuf::from("/data/b"));
        assert_eq!(m.resolve(Path::new("/abs/b")), PathBuf::from("/abs/b"));
    }

    #[test]
    fn schedule_tags_parse() {
        for t in ScheduleTag::ALL {
            assert_eq!(t.tag().parse::<ScheduleTag>().unwrap(), t);
        }
        assert!("resnet18".parse::<ScheduleTag>().is_err());
        assert_eq!(ScheduleTag::Toy.mask_dims(), [64, 64]);
        assert_eq!(ScheduleTag::Backbone(Backbone::Vgg16).mask_dims(), [400, 400]);
    }
}
