//! Checkpoint container: a UTF-8 text header followed by little-endian
//! `f32` blobs in header order.
//!
//! ```text
//! mtslvr-checkpoint 1
//! variant parallel
//! config backbone.variant parallel
//! tensor backbone/stem.conv.weight shared param 16x3x3x3
//! tensor backbone/stem.bn.running_mean shared buffer 16
//! end
//! <raw f32 data, one blob per tensor line>
//! ```

use std::io::{BufRead, Read, Write};

use super::{Group, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &str = "mtslvr-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub group: Group,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub variant: String,
    /// Verbatim `key value` echo of the run configuration.
    pub config: Vec<(String, String)>,
    pub tensors: Vec<CheckpointTensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(variant: &str, config: Vec<(String, String)>) -> Self {
        Checkpoint {
            variant: variant.to_string(),
            config,
            tensors: Vec::new(),
        }
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Appends every entry of `store`, names prefixed with `prefix/`.
    pub fn push_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for id in store.ids() {
            let t = store.get(id);
            self.tensors.push(CheckpointTensor {
                name: format!("{prefix}/{}", store.name(id)),
                group: store.group(id),
                trainable: store.is_trainable(id),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
            });
        }
    }

    /// Overwrites every entry of `store` from tensors named `prefix/<name>`.
    /// Names, shapes, groups and trainability must all match.
    pub fn load_store<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}/{}", store.name(id));
            let t = self
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if t.shape != store.get(id).shape() {
                return Err(bad(format!(
                    "tensor {name}: shape {:?} in file, {:?} expected",
                    t.shape,
                    store.get(id).shape()
                )));
            }
            if t.group != store.group(id) || t.trainable != store.is_trainable(id) {
                return Err(bad(format!("tensor {name}: group/kind mismatch")));
            }
            let data = t
                .data
                .iter()
                .map(|&v| T::from_f32(v).ok_or_else(|| bad("value not representable")))
                .collect::<Result<Vec<T>>>()?;
            *store.get_mut(id) = Tensor::new(&t.shape, data)?;
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        check_token(&self.variant)?;
        header.push_str(&format!("variant {}\n", self.variant));
        for (k, v) in &self.config {
            check_token(k)?;
            if v.contains('\n') {
                return Err(bad(format!("config value for {k} contains a newline")));
            }
            header.push_str(&format!("config {k} {v}\n"));
        }
        for t in &self.tensors {
            check_token(&t.name)?;
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(bad(format!("tensor {}: data length does not match shape", t.name)));
            }
            let dims = if t.shape.is_empty() {
                "-".to_string()
            } else {
                t.shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join("x")
            };
            let kind = if t.trainable { "param" } else { "buffer" };
            header.push_str(&format!("tensor {} {} {kind} {dims}\n", t.name, t.group.as_str()));
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        for t in &self.tensors {
            let mut buf = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = std::io::BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut std::io::BufReader<_>| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("unexpected end of header"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic line)"));
        }
        let mut ck = Checkpoint::default();
        let mut shapes = Vec::new();
        loop {
            let l = next_line(&mut r)?;
            if l == "end" {
                break;
            }
            let (tag, rest) = l.split_once(' ').ok_or_else(|| bad(format!("bad header line: {l}")))?;
            match tag {
                "variant" => ck.variant = rest.to_string(),
                "config" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.config.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    if parts.len() != 4 {
                        return Err(bad(format!("bad tensor line: {l}")));
                    }
                    let group = Group::parse(parts[1])
                        .ok_or_else(|| bad(format!("bad group in: {l}")))?;
                    let trainable = match parts[2] {
                        "param" => true,
                        "buffer" => false,
                        _ => return Err(bad(format!("bad kind in: {l}"))),
                    };
                    let shape = if parts[3] == "-" {
                        Vec::new()
                    } else {
                        parts[3]
                            .split('x')
                            .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dims in: {l}"))))
                            .collect::<Result<Vec<_>>>()?
                    };
                    shapes.push(shape.iter().product::<usize>());
                    ck.tensors.push(CheckpointTensor {
                        name: parts[0].to_string(),
                        group,
                        trainable,
                        shape,
                        data: Vec::new(),
                    });
                }
                _ => return Err(bad(format!("unknown header tag {tag}"))),
            }
        }
        for (t, n) in ck.tensors.iter_mut().zip(shapes) {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)
                .map_err(|_| bad(format!("truncated data for {}", t.name)))?;
            t.data = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes after tensor data", rest.len())));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Checkpoint::read_from(std::fs::File::open(path)?)
    }
}

fn check_token(s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(bad(format!("`{s}` must be a non-empty token without whitespace")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut s = ParamStore::<f32>::new();
        s.add("a.weight", Group::Shared, Tensor::new(&[2, 3], vec![0.5, -1.25, 3.0, 1e-30, -0.0, 7.0]).unwrap());
        s.add_buffer("a.mean", Group::Predictive, Tensor::new(&[2], vec![0.1, 0.2]).unwrap());
        s.add("s", Group::Contrastive, Tensor::scalar(4.0));
        let mut ck = Checkpoint::new("parallel", vec![("backbone.widths".into(), "16,32".into())]);
        ck.push_store("backbone", &s);
        ck
    }

    #[test]
    fn header_is_readable_text() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let text = String::from_utf8_lossy(&buf);
        assert!(text.starts_with("mtslvr-checkpoint 1\nvariant parallel\nconfig backbone.widths 16,32\n"));
        assert!(text.contains("tensor backbone/a.weight shared param 2x3\n"));
        assert!(text.contains("tensor backbone/a.mean predictive buffer 2\n"));
        assert!(text.contains("tensor backbone/s contrastive param -\nend\n"));
    }

    #[test]
    fn truncated_or_trailing_data_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(&buf[..buf.len() - 1]).is_err());
        let mut longer = buf.clone();
        longer.push(0);
        assert!(Checkpoint::read_from(longer.as_slice()).is_err());
        assert!(Checkpoint::read_from(&b"garbage\n"[..]).is_err());
    }

    #[test]
    fn load_store_checks_shapes() {
        let ck = sample();
        let mut s = ParamStore::<f32>::new();
        s.add("a.weight", Group::Shared, Tensor::zeros(&[3, 2]));
        assert!(ck.load_store("backbone", &mut s).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(bits in proptest::collection::vec(any::<u32>(), 1..64)) {
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let mut ck = Checkpoint::new("simple", vec![]);
            ck.tensors.push(CheckpointTensor {
                name: "x".into(),
                group: Group::Shared,
                trainable: true,
                shape: vec![data.len()],
                data: data.clone(),
            });
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(buf.as_slice()).unwrap();
            let got: Vec<u32> = back.tensors[0].data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, bits);
        }
    }
}
