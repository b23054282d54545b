//! Binary checkpoints of the generator and, optionally, the student score.
//!
//! Layout: the 8-byte magic `EMDCKPT1`, a little-endian `u64` byte length of
//! a JSON index, the index itself, then every parameter as a little-endian
//! `f64`. Each index entry names a network, its layer widths, conditioning
//! width and activation, and the offset and count of its parameters in the
//! data section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EmdError, Result};
use crate::schedule::NoiseFeatures;
use crate::student::{Generator, GeneratorMode, NeuralScore};
use crate::tensornet::{Activation, FeedNet};

pub const MAGIC: &[u8; 8] = b"EMDCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    widths: Vec<usize>,
    cond_width: usize,
    activation: String,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Index {
    iteration: u64,
    generator_mode: String,
    lambda_star: f64,
    generator_features: String,
    #[serde(default)]
    student_features: Option<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub generator: Generator,
    pub student: Option<NeuralScore>,
}

fn entry(name: &str, net: &FeedNet, offset: usize) -> TensorEntry {
    TensorEntry {
        name: name.to_string(),
        widths: net.widths().to_vec(),
        cond_width: net.cond_width(),
        activation: net.activation().name().to_string(),
        offset,
        len: net.n_params(),
    }
}

fn bad(msg: impl Into<String>) -> EmdError {
    EmdError::Parse(format!("checkpoint: {}", msg.into()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let g = &self.generator;
        let mut tensors = vec![entry("generator", &g.net, 0)];
        if let Some(s) = &self.student {
            tensors.push(entry("student", &s.net, g.net.n_params()));
        }
        let index = Index {
            iteration: self.iteration,
            generator_mode: g.mode().name().to_string(),
            lambda_star: g.lambda_star(),
            generator_features: g.features().name().to_string(),
            student_features: self.student.as_ref().map(|s| s.features.name().to_string()),
            tensors,
        };
        let json = serde_json::to_vec(&index).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * g.net.n_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let nets = std::iter::once(&g.net).chain(self.student.as_ref().map(|s| &s.net));
        for net in nets {
            for p in net.params() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end = 16usize.checked_add(len).filter(|e| *e <= bytes.len()).ok_or_else(|| bad("index runs past end of file"))?;
        let index: Index = serde_json::from_slice(&bytes[16..end]).map_err(|e| bad(e.to_string()))?;
        let data = &bytes[end..];
        if data.len() % 8 != 0 {
            return Err(bad("data section is not a whole number of f64 values"));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let total: usize = index.tensors.iter().map(|t| t.len).sum();
        if total != values.len() {
            return Err(bad(format!("index declares {total} values, file holds {}", values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(bad(format!("parameter {i} is not finite")));
        }

        let load = |name: &str| -> Result<Option<FeedNet>> {
            let Some(t) = index.tensors.iter().find(|t| t.name == name) else {
                return Ok(None);
            };
            let act = Activation::parse(&t.activation)
                .ok_or_else(|| bad(format!("unknown activation `{}`", t.activation)))?;
            let slice = values
                .get(t.offset..t.offset + t.len)
                .ok_or_else(|| bad(format!("tensor `{name}` out of range")))?;
            FeedNet::from_params(&t.widths, t.cond_width, act, slice.to_vec())
                .map(Some)
                .map_err(|e| bad(format!("tensor `{name}`: {e}")))
        };

        let gnet = load("generator")?.ok_or_else(|| bad("no generator tensor"))?;
        let mode = GeneratorMode::parse(&index.generator_mode)
            .ok_or_else(|| bad(format!("unknown generator mode `{}`", index.generator_mode)))?;
        let gfeat = NoiseFeatures::parse(&index.generator_features)
            .ok_or_else(|| bad(format!("unknown features `{}`", index.generator_features)))?;
        let generator = Generator::new(gnet, mode, index.lambda_star, gfeat).map_err(|e| bad(e.to_string()))?;

        let student = match load("student")? {
            None => None,
            Some(net) => {
                let name = index.student_features.as_deref().unwrap_or("scaled");
                let feat = NoiseFeatures::parse(name).ok_or_else(|| bad(format!("unknown features `{name}`")))?;
                Some(NeuralScore::new(net, feat).map_err(|e| bad(e.to_string()))?)
            }
        };
        Ok(Checkpoint {
            iteration: index.iteration,
            generator,
            student,
        })
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
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_ckpt(with_student: bool) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let generator = Generator::init(2, 2, &[8, 8], Activation::Silu, GeneratorMode::XPred, -3.0, NoiseFeatures::ScaledSinusoidal, &mut rng).unwrap();
        let student = with_student.then(|| NeuralScore::init(2, &[8], Activation::Tanh, NoiseFeatures::Scaled, &mut rng).unwrap());
        Checkpoint { iteration: 17, generator, student }
    }

    #[test]
    fn round_trip_is_exact() {
        for s in [false, true] {
            let c = sample_ckpt(s);
            let bytes = c.to_bytes().unwrap();
            assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("emd-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("g.ckpt");
        let c = sample_ckpt(true);
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn corrupt_inputs_are_parse_errors() {
        let bytes = sample_ckpt(true).to_bytes().unwrap();
        let cases: Vec<Vec<u8>> = vec![
            vec![],
            b"NOTACKPT\0\0\0\0\0\0\0\0".to_vec(),
            bytes[..bytes.len() - 8].to_vec(),
            bytes[..bytes.len() - 3].to_vec(),
            [&bytes[..], &[0u8; 8]].concat(),
            {
                let mut b = bytes.clone();
                b[8] = 0xff;
                b
            },
            {
                let mut b = bytes.clone();
                b[20] = b'#';
                b
            },
        ];
        for c in cases {
            assert!(matches!(Checkpoint::from_bytes(&c), Err(EmdError::Parse(_))));
        }
    }
}
