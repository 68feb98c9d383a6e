//! Named parameter tensors and the binary checkpoint container.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Ordered collection of named trainable tensors. Iteration order is
/// insertion order, which fixes the checkpoint layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S> {
    tensors: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Graph handles for a [`ParamSet`] bound onto one computation record.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Records every tensor as a leaf. With `trainable` the leaves collect
    /// gradients; otherwise they are constants.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    /// Adds the leaf gradients of `g` into each tensor's `grad`, scaled by `weight`.
    pub fn accumulate_grads(&mut self, g: &Graph<S>, bound: &Bound, weight: S) {
        for (name, t) in self.tensors.iter_mut() {
            let v = bound.get(name);
            let Some(src) = g.grad(v) else { continue };
            let dst = t.grad.get_or_insert_with(|| vec![S::zero(); src.len()]);
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s * weight);
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Elementwise mean of several parameter sets with identical layout.
    pub fn average(sets: &[&ParamSet<S>]) -> Result<ParamSet<S>> {
        let first = *sets.first().ok_or_else(|| contract("average of zero checkpoints"))?;
        for other in &sets[1..] {
            if other.tensors.len() != first.tensors.len() {
                return Err(contract("checkpoints differ in tensor count"));
            }
            for ((na, ta), (nb, tb)) in first.tensors.iter().zip(&other.tensors) {
                if na != nb || ta.shape() != tb.shape() {
                    return Err(Error::Shape {
                        op: "average_checkpoints",
                        lhs: ta.shape().to_vec(),
                        rhs: tb.shape().to_vec(),
                    });
                }
            }
        }
        let k = S::from_usize(sets.len()).unwrap();
        let mut out = ParamSet::new();
        for (name, t) in &first.tensors {
            let mut data = vec![S::zero(); t.len()];
            for set in sets {
                let src = set.tensors[name].data();
                data.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
            }
            data.iter_mut().for_each(|d| *d = *d / k);
            out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
        }
        Ok(out)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `header` integers then every tensor as
/// `(name len, name, rank, dims, f64 values)`, all little-endian.
pub fn write_checkpoint<W: Write>(mut w: W, header: &[u32], params: &ParamSet<f64>) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for h in header {
        w.write_all(&h.to_le_bytes())?;
    }
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Byte cursor that reports offsets on malformed input.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let start = self.pos as u64;
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::Parse {
                offset: start,
                msg: format!(
                    "bad magic {:?}, expected {:?}",
                    got,
                    std::str::from_utf8(magic).unwrap()
                ),
            });
        }
        Ok(())
    }
}

/// Reads a checkpoint written by [`write_checkpoint`] with `header_len` header integers.
pub fn read_checkpoint<R: Read>(mut r: R, header_len: usize) -> Result<(Vec<u32>, ParamSet<f64>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor::new(&buf);
    c.magic(CHECKPOINT_MAGIC)?;
    let at = c.offset();
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse {
            offset: at,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let header = (0..header_len)
        .map(|_| c.u32("config field"))
        .collect::<Result<Vec<_>>>()?;
    let mut params = ParamSet::new();
    while !c.at_end() {
        let at = c.offset();
        let n = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(n, "name")?)
            .map_err(|_| Error::Parse {
                offset: at,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_owned();
        let rank = c.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| c.u32("dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let data = (0..count).map(|_| c.f64("value")).collect::<Result<Vec<_>>>()?;
        params.insert(name, Tensor::new(dims, data)?);
    }
    Ok((header, params))
}

pub fn save_checkpoint(path: &Path, header: &[u32], params: &ParamSet<f64>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), header, params)
}

pub fn load_checkpoint(path: &Path, header_len: usize) -> Result<(Vec<u32>, ParamSet<f64>)> {
    read_checkpoint(std::fs::File::open(path)?, header_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(vals: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::new(vec![2], vals[..2].to_vec()).unwrap());
        p.insert("b", Tensor::new(vec![1, 1], vals[2..3].to_vec()).unwrap());
        p
    }

    #[test]
    fn average_identity_and_symmetry() {
        let a = set(&[1.0, -2.0, 3.5]);
        assert_eq!(ParamSet::average(&[&a]).unwrap(), a);
        let neg = set(&[-1.0, 2.0, -3.5]);
        let z = ParamSet::average(&[&a, &neg]).unwrap();
        assert!(z.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn average_rejects_shape_mismatch() {
        let a = set(&[1.0, 2.0, 3.0]);
        let mut b = a.clone();
        b.insert("b", Tensor::zeros(&[2]));
        assert!(ParamSet::average(&[&a, &b]).is_err());
        assert!(ParamSet::<f64>::average(&[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_bad_magic() {
        let a = set(&[1.25, f64::MIN_POSITIVE, -0.0]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[4, 5, 6], &a).unwrap();
        let (h, back) = read_checkpoint(&buf[..], 3).unwrap();
        assert_eq!(h, vec![4, 5, 6]);
        assert_eq!(back, a);
        assert_eq!(back.get("b").unwrap().data()[0].to_bits(), (-0.0f64).to_bits());

        buf[0] = b'X';
        match read_checkpoint(&buf[..], 3) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        let truncated = &buf[..buf.len() - 3];
        let mut fixed = truncated.to_vec();
        fixed[0] = b'M';
        assert!(matches!(read_checkpoint(&fixed[..], 3), Err(Error::Parse { .. })));
    }
}
