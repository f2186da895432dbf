//! `ckpt-v1` container: named f64 tensors plus string metadata.
//!
//! Layout:
//!
//! ```text
//! ckpt-v1\n
//! <manifest length in bytes>\n
//! <manifest>                      one entry per line:
//!   meta\t<key>\t<escaped value>
//!   tensor\t<name>\t<d0,d1,..>\t<byte offset into payload>
//! <payload>                       little-endian f64, tensors back to back
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::Tensor;

const MAGIC: &str = "ckpt-v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::format("checkpoint", msg)
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            other => return Err(bad(format!("bad escape \\{other:?}"))),
        }
    }
    Ok(out)
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends every tensor of `params`, names prefixed by `prefix`.
    pub fn add_params(&mut self, prefix: &str, params: &dyn Params) {
        params.visit(prefix, &mut |name, t| self.tensors.push((name, t.clone())));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n.starts_with(prefix))
    }

    /// Overwrites every tensor of `params` from the entries under `prefix`.
    /// Missing names and shape changes are errors.
    pub fn restore(&self, prefix: &str, params: &mut dyn Params) -> Result<()> {
        let mut err = None;
        params.visit_mut(prefix, &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.get(&name) {
                Some(src) if src.shape() == t.shape() => *t = src.clone(),
                Some(src) => {
                    err = Some(bad(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                None => err = Some(bad(format!("missing tensor {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        for (k, v) in &self.meta {
            if k.contains(['\t', '\n']) {
                return Err(bad(format!("meta key {k:?} contains a separator")));
            }
            manifest.push_str(&format!("meta\t{k}\t{}\n", escape(v)));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(['\t', '\n']) {
                return Err(bad(format!("tensor name {name:?} is empty or contains a separator")));
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("tensor\t{name}\t{}\t{offset}\n", dims.join(",")));
            offset += t.numel() * 8;
        }
        let mut out = format!("{MAGIC}\n{}\n{manifest}", manifest.len()).into_bytes();
        out.reserve(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = 0usize;
        let mut line = |what: &str| -> Result<&str> {
            let rest = &bytes[cursor..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad(format!("unterminated {what}")))?;
            cursor += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad(format!("{what} is not UTF-8")))
        };
        let magic = line("header")?;
        if magic != MAGIC {
            return Err(bad(format!("unknown header {magic:?}")));
        }
        let len: usize = line("manifest length")?
            .parse()
            .map_err(|_| bad("manifest length is not a number"))?;
        let manifest_end = cursor
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("manifest runs past end of file"))?;
        let manifest =
            std::str::from_utf8(&bytes[cursor..manifest_end]).map_err(|_| bad("manifest is not UTF-8"))?;
        let payload = &bytes[manifest_end..];

        let mut ck = Checkpoint::new();
        let mut expected_offset = 0usize;
        for entry in manifest.lines() {
            let fields: Vec<&str> = entry.split('\t').collect();
            match fields.as_slice() {
                ["meta", k, v] => {
                    ck.meta.insert(k.to_string(), unescape(v)?);
                }
                ["tensor", name, dims, offset] => {
                    let shape = if dims.is_empty() {
                        Vec::new()
                    } else {
                        dims.split(',')
                            .map(|d| d.parse().map_err(|_| bad(format!("bad dimension in {name}"))))
                            .collect::<Result<Vec<usize>>>()?
                    };
                    let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset for {name}")))?;
                    if offset != expected_offset {
                        return Err(bad(format!("offset {offset} for {name}, expected {expected_offset}")));
                    }
                    let n: usize = shape.iter().product();
                    let end = offset + n * 8;
                    let raw = payload
                        .get(offset..end)
                        .ok_or_else(|| bad(format!("payload truncated in {name}")))?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect();
                    ck.tensors.push((name.to_string(), Tensor::new(shape, data)?));
                    expected_offset = end;
                }
                _ => return Err(bad(format!("bad manifest line {entry:?}"))),
            }
        }
        if expected_offset != payload.len() {
            return Err(bad(format!(
                "payload has {} bytes, manifest describes {expected_offset}",
                payload.len()
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NormParams;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.meta.insert("config".into(), "a\tb\nc\\d".into());
        ck.tensors.push(("x".into(), Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap()));
        ck.tensors.push(("s".into(), Tensor::scalar(0.1)));
        ck.tensors.push(("e".into(), Tensor::zeros(&[0, 3])));
        ck
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.meta, ck.meta);
        for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&ck.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn header_and_payload_layout() {
        let mut ck = Checkpoint::new();
        ck.tensors.push(("w".into(), Tensor::new(vec![1], vec![1.0]).unwrap()));
        let bytes = ck.to_bytes().unwrap();
        let manifest = "tensor\tw\t1\t0\n";
        let mut expected = format!("ckpt-v1\n{}\n{manifest}", manifest.len()).into_bytes();
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(b"ckpt-v2\n0\n").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"ckpt-v1\n999\nx").is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let mut ck = Checkpoint::new();
        let mut p = NormParams::new(3);
        p.g.data_mut()[0] = 7.0;
        ck.add_params("n/", &p);
        let mut q = NormParams::new(3);
        ck.restore("n/", &mut q).unwrap();
        assert_eq!(q, p);
        assert!(ck.restore("m/", &mut q).is_err());
        let mut wide = NormParams::new(4);
        assert!(ck.restore("n/", &mut wide).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_round_trip(
            rows in 0usize..4,
            cols in 1usize..4,
            seed in proptest::collection::vec(any::<f64>(), 16),
        ) {
            let data: Vec<f64> = seed.iter().copied().take(rows * cols).collect();
            let mut ck = Checkpoint::new();
            ck.tensors.push(("t".into(), Tensor::new(vec![rows, cols], data).unwrap()));
            let bytes = ck.to_bytes().unwrap();
            prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
        }
    }
}
