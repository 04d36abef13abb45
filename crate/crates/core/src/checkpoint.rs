//! Checkpoint directories: one HSTN file per parameter and Adam moment, plus
//! `manifest.txt`.
//!
//! ```text
//! format=hypercorr-checkpoint
//! version=1
//! dtype=f32
//! meta.schedule=toy
//! adam.step=120
//! adam.lr=0.001
//! ...
//! param=squeeze1.stage1.conv.support.weight dims=8x2x3x3 file=p0000.hstn m=m0000.hstn v=v0000.hstn
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::io::{read_tensor_as, write_tensor};
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const FORMAT: &str = "hypercorr-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";

fn dims_text(d: &[usize]) -> String {
    d.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Writes `store` (and `adam`, if given) to `dir`, creating it if needed.
/// `meta` pairs are stored as `meta.<key>=<value>`.
pub fn save<T: Real>(
    dir: impl AsRef<Path>,
    store: &ParamStore<T>,
    adam: Option<&AdamState<T>>,
    meta: &[(&str, String)],
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut s = String::new();
    writeln!(s, "format={FORMAT}").unwrap();
    writeln!(s, "version={VERSION}").unwrap();
    writeln!(s, "dtype={}", T::DTYPE.name()).unwrap();
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::input(format!("metadata {k:?} cannot be stored on one line")));
        }
        writeln!(s, "meta.{k}={v}").unwrap();
    }
    if let Some(a) = adam {
        if a.m.len() != store.len() {
            return Err(Error::shape("optimizer state does not match the parameter store"));
        }
        let c = a.config;
        writeln!(s, "adam.step={}", a.step).unwrap();
        writeln!(s, "adam.lr={:?}", c.lr).unwrap();
        writeln!(s, "adam.beta1={:?}", c.beta1).unwrap();
        writeln!(s, "adam.beta2={:?}", c.beta2).unwrap();
        writeln!(s, "adam.eps={:?}", c.eps).unwrap();
    }
    for (i, (_, p)) in store.iter().enumerate() {
        let file = format!("p{i:04}.hstn");
        write_tensor(&p.value, dir.join(&file))?;
        write!(s, "param={} dims={} file={file}", p.name, dims_text(p.value.dims())).unwrap();
        if let Some(a) = adam {
            let (m, v) = (format!("m{i:04}.hstn"), format!("v{i:04}.hstn"));
            write_tensor(&a.m[i], dir.join(&m))?;
            write_tensor(&a.v[i], dir.join(&v))?;
            write!(s, " m={m} v={v}").unwrap();
        }
        s.push('\n');
    }
    fs::write(dir.join(MANIFEST), s)?;
    Ok(())
}

/// The `meta.*` entries of a checkpoint, without reading any tensor.
pub fn read_meta(dir: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(dir.as_ref().join(MANIFEST))?;
    Ok(text
        .lines()
        .filter_map(|l| l.trim().strip_prefix("meta.")?.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

struct ParamLine {
    name: String,
    dims: Vec<usize>,
    file: String,
    moments: Option<(String, String)>,
    line: usize,
}

/// What a checkpoint holds besides the parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Restored<T> {
    pub adam: Option<AdamState<T>>,
    pub meta: BTreeMap<String, String>,
}

/// Loads the checkpoint in `dir` into `store`, whose names and shapes must
/// match it exactly.
pub fn load_into<T: Real>(dir: impl AsRef<Path>, store: &mut ParamStore<T>) -> Result<Restored<T>> {
    let dir = dir.as_ref();
    let source: PathBuf = dir.join(MANIFEST);
    let text = fs::read_to_string(&source)?;
    let err = |line: usize, message: String| Error::Manifest {
        path: source.clone(),
        line,
        message,
    };
    let mut header = BTreeMap::new();
    let mut meta = BTreeMap::new();
    let mut params = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with("param=") {
            let mut fields = BTreeMap::new();
            for part in line.split_whitespace() {
                let (k, v) = part
                    .split_once('=')
                    .ok_or_else(|| err(n, format!("expected key=value, got {part:?}")))?;
                fields.insert(k, v);
            }
            let get = |k: &str| fields.get(k).map(|v| v.to_string()).ok_or_else(|| err(n, format!("param line lacks {k}")));
            let dims = get("dims")?
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| err(n, format!("bad dims {d:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let moments = match (fields.get("m"), fields.get("v")) {
                (Some(m), Some(v)) => Some((m.to_string(), v.to_string())),
                (None, None) => None,
                _ => return Err(err(n, "m and v must appear together".into())),
            };
            params.push(ParamLine {
                name: get("param")?,
                dims,
                file: get("file")?,
                moments,
                line: n,
            });
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(n, format!("expected key=value, got {line:?}")))?;
        match k.strip_prefix("meta.") {
            Some(m) => {
                meta.insert(m.to_string(), v.to_string());
            }
            None => {
                header.insert(k.to_string(), (v.to_string(), n));
            }
        }
    }
    let field = |k: &str| header.get(k).ok_or_else(|| err(0, format!("missing {k}")));
    if field("format")?.0 != FORMAT {
        return Err(err(field("format")?.1, "not a checkpoint manifest".into()));
    }
    let (v, l) = field("version")?;
    if v.parse::<u32>().ok() != Some(VERSION) {
        return Err(err(*l, format!("unsupported checkpoint version {v}")));
    }
    let (dt, l) = field("dtype")?;
    if dt != T::DTYPE.name() {
        return Err(err(*l, format!("checkpoint holds {dt}, {} requested", T::DTYPE.name())));
    }
    if params.len() != store.len() {
        return Err(err(0, format!("checkpoint has {} parameters, the model {}", params.len(), store.len())));
    }

    let mut values = Vec::with_capacity(params.len());
    let mut moments = Vec::new();
    for p in &params {
        let id = store
            .id(&p.name)
            .ok_or_else(|| err(p.line, format!("model has no parameter {}", p.name)))?;
        let want = store.get(id).value.dims();
        if p.dims != want {
            return Err(err(p.line, format!("{} expected dims {want:?}, found {:?}", p.name, p.dims)));
        }
        let read = |f: &str| -> Result<Tensor<T>> {
            let t = read_tensor_as::<T>(dir.join(f)).map_err(|e| err(p.line, format!("{f}: {e}")))?;
            if t.dims() != want {
                return Err(err(p.line, format!("{f}: expected dims {want:?}, found {:?}", t.dims())));
            }
            Ok(t)
        };
        values.push((id, read(&p.file)?));
        if let Some((m, v)) = &p.moments {
            moments.push((id, read(m)?, read(v)?));
        }
    }

    let adam = if header.contains_key("adam.step") {
        if moments.len() != params.len() {
            return Err(err(0, "optimizer state present but some parameters lack moments".into()));
        }
        let num = |k: &str| -> Result<f64> {
            let (v, l) = field(k)?;
            v.parse().map_err(|_| err(*l, format!("bad {k} {v:?}")))
        };
        let (step, l) = field("adam.step")?;
        let step = step.parse().map_err(|_| err(*l, format!("bad adam.step {step:?}")))?;
        let config = AdamConfig {
            lr: num("adam.lr")?,
            beta1: num("adam.beta1")?,
            beta2: num("adam.beta2")?,
            eps: num("adam.eps")?,
        };
        let mut state = AdamState::new(store, config);
        state.step = step;
        for (id, m, v) in moments {
            state.m[id.index()] = m;
            state.v[id.index()] = v;
        }
        Some(state)
    } else {
        None
    };
    for (id, t) in values {
        store.get_mut(id).value = t;
    }
    Ok(Restored { adam, meta })
}
