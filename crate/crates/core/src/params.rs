//! Named parameter storage and the `DYNROUTE-CKPT-1` checkpoint format.
//!
//! A checkpoint is a text preamble followed by raw little-endian `f64` data:
//!
//! ```text
//! DYNROUTE-CKPT-1
//! meta <single-line JSON>
//! params <count>
//! <name> <dims joined by 'x', or '-' for a scalar>
//! ...
//! data
//! <binary payload, parameters in manifest order>
//! ```

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Index;
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_HEADER: &str = "DYNROUTE-CKPT-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

/// Tape handles for every parameter, indexed by [`ParamId`].
pub struct ParamVars(Vec<Var>);

impl Index<ParamId> for ParamVars {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn load_into(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Replaces values with those of `other`, which must have the same layout.
    pub fn assign_from(&mut self, other: &Params) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config("parameter layout differs from checkpoint".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Config(format!(
                    "parameter shape {:?} differs from checkpoint {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W, meta: &str) -> Result<()> {
        if meta.contains('\n') {
            return Err(Error::Usage("checkpoint metadata must be a single line".into()));
        }
        writeln!(out, "{CHECKPOINT_HEADER}")?;
        writeln!(out, "meta {meta}")?;
        writeln!(out, "params {}", self.len())?;
        for (name, t) in self.iter() {
            let dims = if t.ndim() == 0 {
                "-".to_string()
            } else {
                t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            writeln!(out, "{name} {dims}")?;
        }
        writeln!(out, "data")?;
        for t in &self.tensors {
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Returns the parameters and the metadata line.
    pub fn read_checkpoint<R: Read>(input: R) -> Result<(Params, String)> {
        let mut reader = BufReader::new(input);
        let mut line = String::new();
        let mut next_line = |reader: &mut BufReader<R>, what: &str| -> Result<String> {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Data(format!("checkpoint truncated before {what}")));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        let header = next_line(&mut reader, "header")?;
        if header != CHECKPOINT_HEADER {
            return Err(Error::Data(format!("not a checkpoint: header {header:?}")));
        }
        let meta = next_line(&mut reader, "meta")?
            .strip_prefix("meta ")
            .ok_or_else(|| Error::Data("checkpoint missing meta line".into()))?
            .to_string();
        let count: usize = next_line(&mut reader, "params")?
            .strip_prefix("params ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::Data("checkpoint missing params count".into()))?;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let entry = next_line(&mut reader, "manifest entry")?;
            let (name, dims) = entry
                .rsplit_once(' ')
                .ok_or_else(|| Error::Data(format!("bad manifest entry {entry:?}")))?;
            let shape = if dims == "-" {
                Vec::new()
            } else {
                dims.split('x')
                    .map(|d| d.parse::<usize>().map_err(|_| Error::Data(format!("bad dims in {entry:?}"))))
                    .collect::<Result<Vec<_>>>()?
            };
            manifest.push((name.to_string(), shape));
        }
        if next_line(&mut reader, "data marker")? != "data" {
            return Err(Error::Data("checkpoint missing data marker".into()));
        }
        let mut params = Params::new();
        let mut buf = [0u8; 8];
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                reader
                    .read_exact(&mut buf)
                    .map_err(|_| Error::Data(format!("checkpoint data truncated in {name}")))?;
                data.push(f64::from_le_bytes(buf));
            }
            params.add(name, Tensor::new(shape, data));
        }
        if reader.read(&mut buf)? != 0 {
            return Err(Error::Data("trailing bytes after checkpoint data".into()));
        }
        Ok((params, meta))
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(file), meta)
    }

    pub fn load(path: &Path) -> Result<(Params, String)> {
        Params::read_checkpoint(std::fs::File::open(path)?)
    }
}
