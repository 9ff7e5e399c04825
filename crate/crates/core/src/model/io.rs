use autodiff::{Array, ParamSet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Location of one parameter inside a flat little-endian `f64` buffer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in values, not bytes.
    pub offset: usize,
}

/// Appends every parameter to `out` and returns the layout.
pub fn write_params(params: &ParamSet, out: &mut Vec<u8>) -> Vec<ParamEntry> {
    let base = out.len() / 8;
    let mut offset = base;
    let mut entries = Vec::with_capacity(params.len());
    for (name, a) in params.iter() {
        entries.push(ParamEntry { name: name.to_string(), shape: a.shape().to_vec(), offset });
        for x in a.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        offset += a.len();
    }
    entries
}

/// Rebuilds a parameter set from `bytes` using `entries`.
pub fn read_params(bytes: &[u8], entries: &[ParamEntry]) -> Result<ParamSet> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Data(format!("parameter file length {} is not a multiple of 8", bytes.len())));
    }
    let mut set = ParamSet::new();
    for e in entries {
        let len: usize = e.shape.iter().product();
        let start = e.offset * 8;
        let end = start + len * 8;
        let chunk = bytes
            .get(start..end)
            .ok_or_else(|| Error::Data(format!("parameter {} runs past the end of the parameter file", e.name)))?;
        let data = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        set.insert(e.name.clone(), Array::new(&e.shape, data)?)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let mut p = ParamSet::new();
        p.insert("a", Array::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300])).unwrap();
        p.insert("b", Array::vector(vec![std::f64::consts::PI])).unwrap();
        let mut buf = vec![0u8; 16];
        let entries = write_params(&p, &mut buf);
        assert_eq!(entries[0].offset, 2);
        let back = read_params(&buf, &entries).unwrap();
        for ((_, x), (_, y)) in p.iter().zip(back.iter()) {
            let bits = |a: &Array| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(x), bits(y));
        }
    }
}
