//! `LFNN` checkpoint files.
//!
//! Layout (little-endian): magic `LFNN`, version `u16`, section count `u16`,
//! then per section a 4-byte tag, `depth: u32`, `depth` widths as `u32`, and
//! the `f32` parameters. A network section holds `Mlp::param_count(widths)`
//! values, a vector section (depth 1) holds `widths[0]`. The file ends with
//! the CRC32 of every preceding byte.

use std::io::{Read, Write};
use std::path::Path;

use super::mlp::Mlp;
use super::GaussianPolicy;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LFNN";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: GaussianPolicy,
    pub critic: Option<Mlp<f32>>,
}

fn put_section(buf: &mut Vec<u8>, tag: &[u8; 4], widths: &[usize], values: &[f32]) {
    buf.extend_from_slice(tag);
    buf.extend_from_slice(&(widths.len() as u32).to_le_bytes());
    for w in widths {
        buf.extend_from_slice(&(*w as u32).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let sections: u16 = if self.critic.is_some() { 3 } else { 2 };
        buf.extend_from_slice(&sections.to_le_bytes());
        let actor = &self.policy.actor;
        put_section(&mut buf, b"ACTR", actor.widths(), actor.params());
        put_section(&mut buf, b"LSTD", &[self.policy.log_std.len()], &self.policy.log_std);
        if let Some(critic) = &self.critic {
            put_section(&mut buf, b"CRIT", critic.widths(), critic.params());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if data.len() < 12 {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let (body, tail) = data.split_at(data.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("checkpoint CRC mismatch".into()));
        }
        let mut c = Cursor { data: body, pos: 0 };
        if &c.take::<4>()? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = u16::from_le_bytes(c.take()?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let sections = u16::from_le_bytes(c.take()?);
        let mut actor = None;
        let mut log_std = None;
        let mut critic = None;
        for _ in 0..sections {
            let tag = c.take::<4>()?;
            let depth = u32::from_le_bytes(c.take()?) as usize;
            if depth == 0 || depth > 64 {
                return Err(Error::Format(format!("bad section depth {depth}")));
            }
            let widths = (0..depth)
                .map(|_| Ok(u32::from_le_bytes(c.take()?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = if depth == 1 {
                widths[0]
            } else {
                Mlp::<f32>::param_count(&widths)
            };
            if count > (body.len() - c.pos) / 4 {
                return Err(Error::Format("truncated checkpoint section".into()));
            }
            let values = (0..count)
                .map(|_| Ok(f32::from_le_bytes(c.take()?)))
                .collect::<Result<Vec<_>>>()?;
            let net = || {
                Mlp::from_params(&widths, values.clone())
                    .ok_or_else(|| Error::Format("bad network widths".into()))
            };
            match &tag {
                b"ACTR" => actor = Some(net()?),
                b"LSTD" if depth == 1 => log_std = Some(values),
                b"CRIT" => critic = Some(net()?),
                _ => {
                    return Err(Error::Format(format!(
                        "unknown checkpoint section {}",
                        String::from_utf8_lossy(&tag)
                    )))
                }
            }
        }
        if c.pos != body.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        let actor = actor.ok_or_else(|| Error::Format("checkpoint has no actor".into()))?;
        let log_std = log_std.ok_or_else(|| Error::Format("checkpoint has no log_std".into()))?;
        if log_std.len() != actor.output_dim() {
            return Err(Error::Format("log_std length does not match actor output".into()));
        }
        Ok(Self {
            policy: GaussianPolicy { actor, log_std },
            critic,
        })
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .data
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        self.pos = end;
        Ok(slice.try_into().unwrap())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    Checkpoint::from_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{actor_widths, critic_widths};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        Checkpoint {
            policy: GaussianPolicy::random(0.7, &mut rng),
            critic: Some(Mlp::random(&critic_widths(), 1.0, &mut rng)),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.lfnn");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        let obs: Vec<f32> = (0..actor_widths()[0]).map(|i| (i as f32 * 0.37).sin()).collect();
        let a = ckpt.policy.mean(&obs);
        let b = back.policy.mean(&obs);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        bytes[100] ^= 0x10;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).is_err());
    }

    #[test]
    fn critic_is_optional() {
        let mut ckpt = sample();
        ckpt.critic = None;
        assert_eq!(Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap(), ckpt);
    }
}
