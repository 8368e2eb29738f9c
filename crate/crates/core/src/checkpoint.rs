//! Model checkpoints.
//!
//! ```text
//! b"DITICKPT" | version: u32 | header_len: u32 | header: JSON
//!   | count: u32 | count × (name_len: u32 | name: UTF-8 | tensor)
//! ```
//!
//! Tensors use the binary tensor format. The schedule is stored twice: its
//! parameters in the header and its `β` and `ᾱ` arrays as named tensors,
//! which are checked against a rebuild on load.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use diti_tensor::io::{read_tensor, write_tensor};
use diti_tensor::nn::{Linear, Mlp};
use diti_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::ddpm::{DenoiserModel, NetConfig};
use crate::diti::{EncoderDecoder, PartitionSpec};
use crate::error::{DitiError, Result};
use crate::schedule::{ScheduleConfig, VarianceSchedule};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DITICKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Header {
    Dm {
        schedule: ScheduleConfig,
        net: NetConfig,
    },
    Diti {
        schedule: ScheduleConfig,
        encoder: NetConfig,
        decoder: NetConfig,
        partition: PartitionSpec,
        /// Path of the frozen denoiser checkpoint this pair was trained against.
        dm_ref: String,
    },
}

impl Header {
    pub fn schedule(&self) -> ScheduleConfig {
        match self {
            Header::Dm { schedule, .. } | Header::Diti { schedule, .. } => *schedule,
        }
    }
}

/// A decoded checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: BTreeMap<String, Tensor>,
}

fn bad(msg: impl Into<String>) -> DitiError {
    DitiError::Checkpoint(msg.into())
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad(format!("length {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_string<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = read_u32(r)?;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| bad(format!("{what} is not UTF-8")))
}

fn schedule_tensors(s: &VarianceSchedule) -> [(String, Tensor); 2] {
    let t = |v: &[f64]| {
        Tensor::new(vec![v.len()], v.iter().map(|&x| x as f32).collect()).expect("finite schedule")
    };
    [
        ("schedule.beta".to_string(), t(s.betas())),
        ("schedule.alpha_bar".to_string(), t(s.alpha_bars())),
    ]
}

impl Checkpoint {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header)?;
        write_u32(w, header.len())?;
        w.write_all(&header)?;
        write_u32(w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = read_u32(r)?;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let count = read_u32(r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = read_string(r, "tensor name")?;
            let t = read_tensor(r)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(bad(format!("duplicate tensor {name:?}")));
            }
        }
        let ck = Self { header, tensors };
        ck.check_schedule()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut f)
    }

    pub fn schedule(&self) -> Result<VarianceSchedule> {
        self.header.schedule().build()
    }

    fn check_schedule(&self) -> Result<()> {
        let s = self.schedule()?;
        for (name, expected) in schedule_tensors(&s) {
            let got = self.tensor(&name)?;
            if got.data() != expected.data() {
                return Err(bad(format!("{name} does not match the header schedule")));
            }
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| bad(format!("missing tensor {name:?}")))
    }

    fn with_schedule(header: Header, s: &VarianceSchedule) -> Self {
        let tensors = schedule_tensors(s).into_iter().collect();
        Self { header, tensors }
    }

    fn insert_mlp(&mut self, prefix: &str, net: &Mlp) {
        for (name, p) in net.param_names(prefix).into_iter().zip(net.params()) {
            self.tensors.insert(name, p.clone().with_requires_grad(false));
        }
    }

    fn mlp(&self, prefix: &str, cfg: &NetConfig) -> Result<Mlp> {
        let layers = cfg.hidden.len() + 1;
        let mut out = Vec::with_capacity(layers);
        for i in 0..layers {
            let weight = self.tensor(&format!("{prefix}.{i}.weight"))?.clone();
            let bias = self.tensor(&format!("{prefix}.{i}.bias"))?.clone();
            let (fan_in, fan_out) = weight.dims2()?;
            if bias.shape() != [1, fan_out] {
                return Err(bad(format!("{prefix}.{i}.bias has shape {:?}", bias.shape())));
            }
            if i < cfg.hidden.len() && fan_out != cfg.hidden[i] {
                return Err(bad(format!("{prefix}.{i} has width {fan_out}, config says {}", cfg.hidden[i])));
            }
            if let Some(prev) = out.last().map(Linear::outputs) {
                if prev != fan_in {
                    return Err(bad(format!("{prefix}.{i} reads {fan_in} inputs, previous layer emits {prev}")));
                }
            }
            out.push(Linear {
                weight: weight.with_requires_grad(true),
                bias: bias.with_requires_grad(true),
            });
        }
        let extra = format!("{prefix}.{layers}.weight");
        if self.tensors.contains_key(&extra) {
            return Err(bad(format!("{prefix} has more layers than its config")));
        }
        Ok(Mlp {
            layers: out,
            activation: cfg.activation.into(),
            layer_norm: cfg.layer_norm,
        })
    }

    pub fn from_dm(model: &DenoiserModel, s: &VarianceSchedule) -> Self {
        let header = Header::Dm {
            schedule: s.config(),
            net: model.config.clone(),
        };
        let mut ck = Self::with_schedule(header, s);
        ck.insert_mlp("net", &model.net);
        ck
    }

    pub fn from_diti(ed: &EncoderDecoder, encoder: &NetConfig, decoder: &NetConfig, s: &VarianceSchedule, dm_ref: &str) -> Self {
        let header = Header::Diti {
            schedule: s.config(),
            encoder: encoder.clone(),
            decoder: decoder.clone(),
            partition: ed.partition.clone(),
            dm_ref: dm_ref.to_string(),
        };
        let mut ck = Self::with_schedule(header, s);
        ck.insert_mlp("encoder", &ed.encoder);
        ck.insert_mlp("decoder", &ed.decoder);
        ck
    }

    pub fn to_dm(&self) -> Result<DenoiserModel> {
        match &self.header {
            Header::Dm { net, .. } => DenoiserModel::from_net(self.mlp("net", net)?, net.clone()),
            Header::Diti { .. } => Err(bad("expected a denoiser checkpoint, found an encoder/decoder")),
        }
    }

    pub fn to_diti(&self) -> Result<EncoderDecoder> {
        match &self.header {
            Header::Diti {
                encoder,
                decoder,
                partition,
                ..
            } => EncoderDecoder::from_parts(self.mlp("encoder", encoder)?, self.mlp("decoder", decoder)?, partition.clone()),
            Header::Dm { .. } => Err(bad("expected an encoder/decoder checkpoint, found a denoiser")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diti::{make_partition, PartitionKind};
    use crate::seed;
    use rand::SeedableRng;

    fn small() -> NetConfig {
        NetConfig {
            hidden: vec![8, 8],
            ..NetConfig::default()
        }
    }

    fn sched() -> VarianceSchedule {
        ScheduleConfig {
            steps: 20,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
        .build()
        .unwrap()
    }

    fn bytes(ck: &Checkpoint) -> Vec<u8> {
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        buf
    }

    #[test]
    fn dm_round_trip_is_bit_exact() {
        let mut rng = seed::Rng::seed_from_u64(0);
        let m = DenoiserModel::new(16, small(), &mut rng).unwrap();
        let s = sched();
        let ck = Checkpoint::from_dm(&m, &s);
        let buf = bytes(&ck);
        let back = Checkpoint::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back.schedule().unwrap(), s);
        let m2 = back.to_dm().unwrap();
        for (a, b) in m.net.params().iter().zip(m2.net.params()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(bytes(&back), buf);
        assert!(back.to_diti().is_err());
    }

    #[test]
    fn diti_round_trip() {
        let mut rng = seed::Rng::seed_from_u64(1);
        let p = make_partition(PartitionKind::Balanced, 2, 4, 20).unwrap();
        let ed = EncoderDecoder::new(16, p, &small(), &small(), &mut rng).unwrap();
        let ck = Checkpoint::from_diti(&ed, &small(), &small(), &sched(), "dm.ckpt");
        let back = Checkpoint::read(&mut bytes(&ck).as_slice()).unwrap();
        let ed2 = back.to_diti().unwrap();
        assert_eq!(ed2.partition, ed.partition);
        for (a, b) in ed.encoder.params().iter().zip(ed2.encoder.params()) {
            assert_eq!(a.data(), b.data());
        }
        assert!(matches!(back.header, Header::Diti { ref dm_ref, .. } if dm_ref == "dm.ckpt"));
    }

    #[test]
    fn corrupted_inputs_are_rejected() {
        let mut rng = seed::Rng::seed_from_u64(0);
        let m = DenoiserModel::new(16, small(), &mut rng).unwrap();
        let mut ck = Checkpoint::from_dm(&m, &sched());
        let mut buf = bytes(&ck);
        buf[0] = b'X';
        assert!(Checkpoint::read(&mut buf.as_slice()).is_err());
        let good = bytes(&ck);
        assert!(Checkpoint::read(&mut &good[..good.len() - 3]).is_err());
        ck.tensors.insert("schedule.beta".into(), Tensor::zeros(&[20]));
        assert!(Checkpoint::read(&mut bytes(&ck).as_slice()).is_err());
        let mut ck = Checkpoint::from_dm(&m, &sched());
        ck.tensors.remove("net.1.bias");
        assert!(Checkpoint::read(&mut bytes(&ck).as_slice()).unwrap().to_dm().is_err());
    }
}
