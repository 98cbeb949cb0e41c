//! Checkpoint files: a UTF-8 manifest terminated by an `end` line, then every
//! tensor as little-endian `f64` in manifest order.
//!
//! ```text
//! LCR2S-CKPT 1
//! stage teacher
//! config_hash 3f2a...
//! seed 0
//! heads 16
//! params 13
//! image.w1 32 32
//! ...
//! end
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::model::{StudentParams, TeacherParams};
use crate::encoders::EncoderParams;
use crate::error::{Error, Result};
use crate::mhaf::MhafParams;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "LCR2S-CKPT 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Teacher,
    Student,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Teacher => "teacher",
            Stage::Student => "student",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Stage::Teacher),
            "student" => Ok(Stage::Student),
            _ => Err(Error::Config(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config_hash: String,
    pub seed: u64,
    /// MHAF head count; 0 for students.
    pub heads: usize,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_teacher(p: &TeacherParams, config_hash: &str, seed: u64) -> Self {
        Checkpoint {
            stage: Stage::Teacher,
            config_hash: config_hash.to_string(),
            seed,
            heads: p.mhaf.heads,
            tensors: p.named().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn from_student(p: &StudentParams, config_hash: &str, seed: u64) -> Self {
        Checkpoint {
            stage: Stage::Student,
            config_hash: config_hash.to_string(),
            seed,
            heads: 0,
            tensors: p.named().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    fn get(&self, name: &str) -> Result<Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Config(format!("checkpoint has no tensor {name:?}")))
    }

    fn encoder(&self, prefix: &str) -> Result<EncoderParams> {
        let p = EncoderParams {
            w1: self.get(&format!("{prefix}.w1"))?,
            b1: self.get(&format!("{prefix}.b1"))?,
            w2: self.get(&format!("{prefix}.w2"))?,
            b2: self.get(&format!("{prefix}.b2"))?,
        };
        let (i, d1, d) = (p.w1.shape(), p.b1.shape(), p.w2.shape());
        if i.len() != 2 || d1 != [i[1]] || d.len() != 2 || d[0] != i[1] || p.b2.shape() != [d[1]] {
            return Err(Error::Config(format!(
                "inconsistent {prefix} encoder shapes"
            )));
        }
        Ok(p)
    }

    fn mhaf(&self, prefix: &str, d: usize) -> Result<MhafParams> {
        let p = MhafParams {
            heads: self.heads,
            wx: self.get(&format!("{prefix}.wx"))?,
            wy: self.get(&format!("{prefix}.wy"))?,
            wz: self.get(&format!("{prefix}.wz"))?,
            fc_w: self.get(&format!("{prefix}.fc_w"))?,
            fc_b: self.get(&format!("{prefix}.fc_b"))?,
        };
        for (name, t) in p.tensors() {
            let want: &[usize] = if name == "fc_b" { &[d] } else { &[d, d] };
            if t.shape() != want {
                return Err(Error::Config(format!(
                    "{prefix}.{name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide d={d}",
                self.heads
            )));
        }
        Ok(p)
    }

    pub fn teacher(&self) -> Result<TeacherParams> {
        if self.stage != Stage::Teacher {
            return Err(Error::Config(format!(
                "expected a teacher checkpoint, found {}",
                self.stage
            )));
        }
        let image = self.encoder("image")?;
        let text = self.encoder("text")?;
        if (image.input_dim(), image.d1(), image.d()) != (text.input_dim(), text.d1(), text.d()) {
            return Err(Error::Config("image and text encoder dims differ".into()));
        }
        let d = image.d();
        let shared = self.tensors.iter().any(|(n, _)| n.starts_with("mhaf."));
        let (mhaf, text_mhaf) = if shared {
            (self.mhaf("mhaf", d)?, None)
        } else {
            (
                self.mhaf("mhaf_image", d)?,
                Some(self.mhaf("mhaf_text", d)?),
            )
        };
        Ok(TeacherParams {
            image,
            text,
            mhaf,
            text_mhaf,
        })
    }

    pub fn student(&self) -> Result<StudentParams> {
        if self.stage != Stage::Student {
            return Err(Error::Config(format!(
                "expected a student checkpoint, found {}",
                self.stage
            )));
        }
        Ok(StudentParams {
            image: self.encoder("image")?,
            text: self.encoder("text")?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = format!(
            "{CHECKPOINT_MAGIC}\nstage {}\nconfig_hash {}\nseed {}\nheads {}\nparams {}\n",
            self.stage,
            self.config_hash,
            self.seed,
            self.heads,
            self.tensors.len()
        );
        for (name, t) in &self.tensors {
            manifest.push_str(name);
            for d in t.shape() {
                manifest.push_str(&format!(" {d}"));
            }
            manifest.push('\n');
        }
        manifest.push_str("end\n");
        let mut out = manifest.into_bytes();
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut lines = Lines { bytes, pos: 0 };
        let (at, magic) = lines.next("header")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::format(
                at,
                format!("bad checkpoint header {magic:?}"),
            ));
        }
        let (at, stage) = lines.field("stage")?;
        let stage = stage
            .parse()
            .map_err(|_| Error::format(at, format!("unknown stage {stage:?}")))?;
        let (_, config_hash) = lines.field("config_hash")?;
        let (at, seed) = lines.field("seed")?;
        let seed = parse_int(at, &seed)?;
        let (at, heads) = lines.field("heads")?;
        let heads = parse_int(at, &heads)? as usize;
        let (at, count) = lines.field("params")?;
        let count = parse_int(at, &count)? as usize;
        let mut specs: Vec<(String, Vec<usize>)> = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let (at, line) = lines.next("parameter list end")?;
            let mut parts = line.split(' ');
            let name = parts.next().unwrap_or_default().to_string();
            let dims = parts
                .map(|p| parse_int(at, p).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if name.is_empty() || dims.is_empty() {
                return Err(Error::format(
                    at,
                    format!("malformed parameter line {line:?}"),
                ));
            }
            if specs.iter().any(|(n, _)| *n == name) {
                return Err(Error::format(at, format!("duplicate parameter {name:?}")));
            }
            specs.push((name, dims));
        }
        let (at, end) = lines.next("end")?;
        if end != "end" {
            return Err(Error::format(at, format!("expected `end`, found {end:?}")));
        }
        let pos = lines.pos;
        let expected: usize = specs
            .iter()
            .map(|(_, d)| d.iter().product::<usize>() * 8)
            .sum();
        let payload = &bytes[pos..];
        if payload.len() != expected {
            return Err(Error::format(
                pos as u64,
                format!(
                    "payload holds {} bytes, manifest expects {expected}",
                    payload.len()
                ),
            ));
        }
        let mut tensors = Vec::with_capacity(specs.len());
        let mut off = 0;
        for (name, dims) in specs {
            let n: usize = dims.iter().product();
            let data = payload[off..off + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            off += 8 * n;
            tensors.push((name, Tensor::new(dims, data)?));
        }
        Ok(Checkpoint {
            stage,
            config_hash,
            seed,
            heads,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Lines<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Lines<'_> {
    /// The next manifest line and its byte offset.
    fn next(&mut self, what: &str) -> Result<(u64, String)> {
        let start = self.pos;
        let len = self.bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(start as u64, format!("manifest ends before {what}")))?;
        let line = std::str::from_utf8(&self.bytes[start..start + len])
            .map_err(|_| Error::format(start as u64, "manifest is not UTF-8"))?
            .to_string();
        self.pos = start + len + 1;
        Ok((start as u64, line))
    }

    fn field(&mut self, key: &str) -> Result<(u64, String)> {
        let (at, line) = self.next(key)?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok((at, v.to_string())),
            _ => Err(Error::format(
                at,
                format!("expected `{key} ...`, found {line:?}"),
            )),
        }
    }
}

fn parse_int(at: u64, s: &str) -> Result<u64> {
    s.parse()
        .map_err(|_| Error::format(at, format!("invalid integer {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mhaf::MhafConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn teacher(shared: bool) -> TeacherParams {
        let cfg = MhafConfig {
            heads: 2,
            shared,
            ..MhafConfig::default()
        };
        TeacherParams::init(&mut ChaCha8Rng::seed_from_u64(0), 5, 3, 4, &cfg).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for shared in [true, false] {
            let ck = Checkpoint::from_teacher(&teacher(shared), "abc", 7);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
            assert_eq!(back.teacher().unwrap(), teacher(shared));
        }
    }

    #[test]
    fn truncated_payload() {
        let bytes = Checkpoint::from_teacher(&teacher(true), "abc", 7).to_bytes();
        match Checkpoint::from_bytes(&bytes[..bytes.len() - 5]) {
            Err(Error::Format { detail, .. }) => {
                assert!(detail.contains("expects"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_manifest() {
        assert!(matches!(
            Checkpoint::from_bytes(b"nope\n"),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b""),
            Err(Error::Format { .. })
        ));
        let ck = Checkpoint::from_teacher(&teacher(true), "abc", 7);
        let text = String::from_utf8_lossy(&ck.to_bytes()).replace("params 13", "params 12");
        assert!(Checkpoint::from_bytes(text.as_bytes()).is_err());
    }

    #[test]
    fn stage_guard() {
        let ck = Checkpoint::from_teacher(&teacher(true), "abc", 7);
        assert!(matches!(ck.student(), Err(Error::Config(_))));
    }
}
