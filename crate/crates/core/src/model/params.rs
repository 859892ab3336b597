use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Leading bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8] = b"SLICENET1\n";

/// Index of a parameter in its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Counted as an embedding rather than a non-embedding parameter.
    pub embedding: bool,
}

/// Named learnable tensors in a fixed insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Binding(Vec<Var>);

impl Binding {
    /// Wrap handles already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        embedding: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let (id, _) = self.params.insert_full(name, Param { value, embedding });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).expect("valid id").0
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Param)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (n, p))| (ParamId(i), n.as_str(), p))
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.keys().map(String::as_str).collect()
    }

    /// `(embedding, non-embedding)` scalar counts.
    pub fn counts(&self) -> (usize, usize) {
        self.params.values().fold((0, 0), |(e, n), p| {
            if p.embedding {
                (e + p.value.len(), n)
            } else {
                (e, n + p.value.len())
            }
        })
    }

    /// Put every parameter on `tape`, as gradient-receiving leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        Binding(
            self.params
                .values()
                .map(|p| {
                    if trainable {
                        tape.param(p.value.clone())
                    } else {
                        tape.constant(p.value.clone())
                    }
                })
                .collect(),
        )
    }

    /// Serialise in checkpoint format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        for (name, p) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.value.rank() as u8);
            for &e in p.value.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        out
    }

    /// Replace values from checkpoint bytes. Names, order and shapes must
    /// match this store; the first mismatch is reported by name.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = parse_checkpoint(bytes)?;
        for (i, (name, tensor)) in entries.iter().enumerate() {
            match self.params.get_index(i) {
                Some((have, p)) if have == name && p.value.shape() == tensor.shape() => {}
                Some((have, p)) => {
                    let first = if have != name { have } else { name };
                    return Err(Error::Checkpoint(format!(
                        "parameter mismatch at {first}: checkpoint has {name} {:?}, model has {have} {:?}",
                        tensor.shape(),
                        p.value.shape()
                    )));
                }
                None => {
                    return Err(Error::Checkpoint(format!(
                        "parameter mismatch at {name}: not present in the model"
                    )))
                }
            }
        }
        if entries.len() != self.params.len() {
            let missing = self.name(ParamId(entries.len()));
            return Err(Error::Checkpoint(format!(
                "parameter mismatch at {missing}: missing from checkpoint"
            )));
        }
        for (i, (_, tensor)) in entries.into_iter().enumerate() {
            self.params[i].value = tensor;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Decode checkpoint bytes into `(name, tensor)` pairs in file order.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(Error::Checkpoint("missing SLICENET1 header".into()));
    }
    let mut r = Reader {
        bytes,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let mut out = Vec::new();
    // Entries run until exactly 8 bytes (the trailing count) remain.
    while bytes.len() - r.pos > 8 {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    let count = r.u64()?;
    if count as usize != out.len() {
        return Err(Error::Checkpoint(format!(
            "trailer says {count} parameters, file holds {}",
            out.len()
        )));
    }
    Ok(out)
}
