use std::collections::HashMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::error::{MuseError, Result};
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Decay,
    NoDecay,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Gradient accumulator, same shape as `value`.
    pub grad: Tensor,
    pub group: ParamGroup,
}

/// Named parameters of one model. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(MuseError::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad, group });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// `grad += scale * g` for every parameter touched by `grads`.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.norm_sq()).sum::<f64>().sqrt()
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        for p in &self.params {
            a.tensors.push((p.name.clone(), p.value.clone()));
        }
        a
    }

    /// Overwrite values from an archive; every parameter must be present
    /// with an identical shape.
    pub fn load_values(&mut self, archive: &Archive) -> Result<()> {
        for p in &mut self.params {
            let t = archive.tensor(&p.name).ok_or_else(|| MuseError::Archive {
                path: "<archive>".into(),
                reason: format!("missing parameter {}", p.name),
            })?;
            if t.shape() != p.value.shape() {
                return Err(MuseError::Archive {
                    path: "<archive>".into(),
                    reason: format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    ),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Sparse per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n_params: usize) -> Self {
        Gradients { grads: vec![None; n_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(c);
        }
    }
}

const MAGIC: &str = "MUSE-ARCHIVE 1";

/// Text manifest plus raw little-endian f64 buffers.
///
/// ```text
/// MUSE-ARCHIVE 1
/// meta <key> <value>
/// tensor <name> f64 <d0>x<d1>... <offset> <bytes>
/// end
/// <payload>
/// ```
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            assert!(!k.contains(char::is_whitespace) && !v.contains('\n'));
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let bytes = t.len() * 8;
            header.push_str(&format!("tensor {name} f64 {} {offset} {bytes}\n", dims.join("x")));
            offset += bytes;
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |reason: String| MuseError::Archive { path: origin.to_string(), reason };
        let mut reader = std::io::Cursor::new(bytes);
        let mut line = String::new();
        let mut read_line = |line: &mut String| -> Result<()> {
            line.clear();
            reader
                .read_line(line)
                .map_err(|e| MuseError::io(origin, e))?;
            if line.is_empty() {
                return Err(MuseError::Archive {
                    path: origin.to_string(),
                    reason: "truncated manifest".into(),
                });
            }
            Ok(())
        };
        read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(bad(format!("bad magic {:?}", line.trim_end())));
        }
        let mut meta = Vec::new();
        let mut specs = Vec::new();
        loop {
            read_line(&mut line)?;
            let l = line.trim_end_matches('\n');
            if l == "end" {
                break;
            }
            if let Some(rest) = l.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = l.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 5 || f[1] != "f64" {
                    return Err(bad(format!("bad tensor line {l:?}")));
                }
                let shape = f[2]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("bad shape in {l:?}")))?;
                let off: usize = f[3].parse().map_err(|_| bad(format!("bad offset in {l:?}")))?;
                let len: usize = f[4].parse().map_err(|_| bad(format!("bad length in {l:?}")))?;
                specs.push((f[0].to_string(), shape, off, len));
            } else {
                return Err(bad(format!("unexpected manifest line {l:?}")));
            }
        }
        let start = reader.position() as usize;
        let payload = &bytes[start..];
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape, off, len) in specs {
            let n: usize = shape.iter().product();
            if len != n * 8 || off + len > payload.len() {
                return Err(bad(format!("tensor {name} extent out of bounds")));
            }
            let data = payload[off..off + len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?));
        }
        Ok(Archive { meta, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| MuseError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| MuseError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = std::fs::File::open(path).map_err(|e| MuseError::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| MuseError::io(path, e))?;
        Archive::from_bytes(&bytes, &path.display().to_string())
    }
}
