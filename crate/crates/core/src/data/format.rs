use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Split, VideoSample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"C2FT";
pub const FEATURE_VERSION: u32 = 1;

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a temporary sibling and renames, so readers never observe
/// a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Little-endian cursor over a byte buffer that reports truncation.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'a str) -> Self {
        Reader { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("{}: truncated at byte {} (needed {n} more)", self.what, self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("{}: size overflow", self.what)))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, data: &[f64]) {
    out.reserve(data.len() * 4);
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_features(v: &Tensor) -> Result<Vec<u8>> {
    if v.ndim() != 2 {
        return Err(Error::Shape(format!("features must be [T x F], got {:?}", v.shape())));
    }
    let mut out = Vec::with_capacity(16 + 4 * v.numel());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(v.dim(0) as u32).to_le_bytes());
    out.extend_from_slice(&(v.dim(1) as u32).to_le_bytes());
    push_f32s(&mut out, v.data());
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes, "feature file");
    if r.take(4)? != FEATURE_MAGIC {
        return Err(Error::Format("feature file: bad magic".into()));
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("feature file: unsupported version {version}")));
    }
    let t = r.u32()? as usize;
    let f = r.u32()? as usize;
    let data = r.f32s(t * f)?;
    r.finish()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("feature file: non-finite value".into()));
    }
    Tensor::new(vec![t, f], data)
}

pub fn save_features(path: &Path, v: &Tensor) -> Result<()> {
    write_atomic(path, &encode_features(v)?)
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    decode_features(&read(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Action names indexed by class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("action name {n:?} must be non-empty without whitespace")));
            }
            if names[..i].contains(n) {
                return Err(Error::Data(format!("duplicate action name {n:?}")));
            }
        }
        Ok(LabelMap { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Lines of `id name`.
    pub fn to_text(&self) -> String {
        self.names.iter().enumerate().map(|(i, n)| format!("{i} {n}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut names: Vec<Option<String>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(id), Some(name), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Format(format!("mapping line {}: expected \"id name\"", lineno + 1)));
            };
            let id: usize = id
                .parse()
                .map_err(|_| Error::Format(format!("mapping line {}: bad id {id:?}", lineno + 1)))?;
            if id >= names.len() {
                names.resize(id + 1, None);
            }
            if names[id].replace(name.to_string()).is_some() {
                return Err(Error::Format(format!("mapping: id {id} listed twice")));
            }
        }
        let names = names
            .into_iter()
            .enumerate()
            .map(|(i, n)| n.ok_or_else(|| Error::Format(format!("mapping: id {i} missing"))))
            .collect::<Result<Vec<_>>>()?;
        LabelMap::new(names)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Format(format!("{}: not UTF-8", path.display())))?;
        LabelMap::parse(&text)
    }

    pub fn encode(&self, labels: &[usize]) -> Result<String> {
        let mut s = String::with_capacity(labels.len() * 10);
        for &l in labels {
            let n = self.name(l).ok_or_else(|| Error::Data(format!("label id {l} has no name")))?;
            s.push_str(n);
            s.push('\n');
        }
        Ok(s)
    }

    /// One action name per line; `expected_len` is checked when given.
    pub fn decode(&self, text: &str, expected_len: Option<usize>) -> Result<Vec<usize>> {
        let labels = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|n| self.id(n).ok_or_else(|| Error::Data(format!("unknown action name {n:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(t) = expected_len {
            if labels.len() != t {
                return Err(Error::Data(format!("{} labels for {t} frames", labels.len())));
            }
        }
        Ok(labels)
    }
}

pub fn save_labels(path: &Path, labels: &[usize], map: &LabelMap) -> Result<()> {
    write_atomic(path, map.encode(labels)?.as_bytes())
}

pub fn load_labels(path: &Path, map: &LabelMap, expected_len: Option<usize>) -> Result<Vec<usize>> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Format(format!("{}: not UTF-8", path.display())))?;
    map.decode(&text, expected_len).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub features: String,
    pub labels: String,
    pub activity: usize,
    pub split: Split,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MAPPING_FILE: &str = "mapping.txt";

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if self.entries[..i].iter().any(|o| o.id == e.id) {
                return Err(Error::Data(format!("manifest: duplicate video id {:?}", e.id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let m: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }
}

/// A loaded dataset directory (manifest, mapping and all referenced files).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub map: LabelMap,
    pub train: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = Manifest::load(&root.join(MANIFEST_FILE))?;
        let map = LabelMap::load(&root.join(MAPPING_FILE))?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut feat_dim = None;
        for e in &manifest.entries {
            let features = load_features(&root.join(&e.features))?;
            if *feat_dim.get_or_insert(features.dim(1)) != features.dim(1) {
                return Err(Error::Data(format!("video {}: feature width differs from other videos", e.id)));
            }
            let labels = load_labels(&root.join(&e.labels), &map, Some(features.dim(0)))?;
            let v = VideoSample::new(e.id.clone(), features, labels, e.activity)?;
            match e.split {
                Split::Train => train.push(v),
                Split::Test => test.push(v),
            }
        }
        if train.is_empty() && test.is_empty() {
            return Err(Error::Data(format!("{}: manifest lists no videos", root.display())));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            map,
            train,
            test,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.map.len()
    }

    pub fn feat_dim(&self) -> usize {
        self.train.iter().chain(&self.test).next().map_or(0, VideoSample::feat_dim)
    }

    /// One more than the largest activity id present.
    pub fn num_activities(&self) -> usize {
        self.train.iter().chain(&self.test).map(|v| v.activity + 1).max().unwrap_or(0)
    }

    pub fn split(&self, split: Split) -> &[VideoSample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}
