//! Textual checkpoint format.
//!
//! ```text
//! sqworld-checkpoint 1
//! meta <key> <value...>
//! tensor <name> <d0>x<d1>x...
//! <v0> <v1> ...
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so a
//! save/load cycle is bit-exact. Meta values run to the end of the line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::layers::{Module, Param};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &str = "sqworld-checkpoint 1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

fn escape(v: &str) -> String {
    v.replace('\\', "\\\\").replace('\n', "\\n").replace('\r', "\\r")
}

fn unescape(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(o) => out.push(o),
            None => out.push('\\'),
        }
    }
    out
}

impl Checkpoint {
    pub fn put_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.tensors
            .insert(name.to_string(), (t.shape().to_vec(), t.data().iter().map(|v| v.f64()).collect()));
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let (shape, data) = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Parse(format!("checkpoint has no tensor {name}")))?;
        Tensor::from_vec(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn put_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Parse(format!("checkpoint has no meta {key}")))
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::Parse(format!("checkpoint meta {key} is malformed")))
    }

    /// Stores every parameter of `module` under `prefix` + its name.
    pub fn put_module<T: Scalar>(&mut self, prefix: &str, module: &impl Module<T>) {
        module.visit(&mut |p: &Param<T>| self.put_tensor(&format!("{prefix}{}", p.name), &p.value));
    }

    /// Loads every parameter of `module`; shapes must match exactly.
    pub fn load_module<T: Scalar>(&self, prefix: &str, module: &mut impl Module<T>) -> Result<()> {
        let mut err = None;
        module.visit_mut(&mut |p: &mut Param<T>| {
            if err.is_some() {
                return;
            }
            match self.tensor::<T>(&format!("{prefix}{}", p.name)) {
                Ok(t) if t.shape() == p.value.shape() => p.value = t,
                Ok(t) => {
                    err = Some(Error::Shape(format!(
                        "checkpoint tensor {} has shape {:?}, model expects {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )))
                }
                Err(e) => err = Some(e),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta {k} {}", escape(v));
        }
        for (name, (shape, data)) in &self.tensors {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "tensor {name} {}", dims.join("x"));
            let vals: Vec<String> = data.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(s, "{}", vals.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Parse("not a checkpoint (bad header)".into()));
        }
        let mut ck = Checkpoint::default();
        while let Some(line) = lines.next() {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.insert(k.to_string(), unescape(v));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let (name, dims) = rest
                    .rsplit_once(' ')
                    .ok_or_else(|| Error::Parse(format!("bad tensor line: {line}")))?;
                let shape = if dims.is_empty() {
                    vec![]
                } else {
                    dims.split('x')
                        .map(|d| d.parse::<usize>().map_err(|e| Error::Parse(format!("tensor {name}: {e}"))))
                        .collect::<Result<Vec<_>>>()?
                };
                let data_line = lines.next().ok_or_else(|| Error::Parse(format!("tensor {name} has no data")))?;
                let data = data_line
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(format!("tensor {name}: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                if data.len() != shape.iter().product::<usize>() {
                    return Err(Error::Parse(format!("tensor {name}: element count does not match shape")));
                }
                ck.tensors.insert(name.to_string(), (shape, data));
            } else {
                return Err(Error::Parse(format!("unexpected line: {line}")));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
