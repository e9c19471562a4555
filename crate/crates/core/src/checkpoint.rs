//! Binary checkpoints of a [`GuidanceModule`].
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "AIDCKPT\0" | version u32
//! actor spec | critic spec          (see `write_spec`)
//! phi: u64 len, f64 * len | theta: u64 len, f64 * len
//! actor adam: u64 step, f64 * len (m), f64 * len (v) | critic adam: same
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::actor_critic::GuidanceModule;
use crate::error::{Error, Result};
use crate::neural::{AdamState, HeadKind, NetSpec, Network, ParamVector};

pub const MAGIC: &[u8; 8] = b"AIDCKPT\0";
pub const VERSION: u32 = 1;

fn write_spec(out: &mut Vec<u8>, s: &NetSpec) {
    for v in [s.dim, s.embed_width, s.stem_width, s.stem_blocks, s.trunk_width, s.trunk_blocks] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(match s.head {
        HeadKind::Vector => 0,
        HeadKind::Scalar => 1,
    });
    out.push(s.scale_output as u8);
    out.extend_from_slice(&s.sigma_data.to_le_bytes());
}

fn write_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(module: &GuidanceModule) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    write_spec(&mut out, module.actor.spec());
    write_spec(&mut out, module.critic.spec());
    for p in [&module.phi, &module.theta] {
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        write_f64s(&mut out, p.values());
    }
    for a in [&module.actor_opt, &module.critic_opt] {
        out.extend_from_slice(&a.steps().to_le_bytes());
        write_f64s(&mut out, a.first_moment());
        write_f64s(&mut out, a.second_moment());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn spec(&mut self) -> Result<NetSpec> {
        let mut v = [0usize; 6];
        for x in &mut v {
            *x = self.u32()? as usize;
        }
        let head = match self.u8()? {
            0 => HeadKind::Vector,
            1 => HeadKind::Scalar,
            h => return Err(Error::Checkpoint(format!("unknown head tag {h}"))),
        };
        let scale_output = match self.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("invalid output-scaling flag {b}"))),
        };
        let sigma_data = self.f64()?;
        Ok(NetSpec {
            dim: v[0],
            embed_width: v[1],
            stem_width: v[2],
            stem_blocks: v[3],
            trunk_width: v[4],
            trunk_blocks: v[5],
            head,
            sigma_data,
            scale_output,
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<GuidanceModule> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let actor = Network::new(r.spec()?).map_err(|e| Error::Checkpoint(format!("actor spec: {e}")))?;
    let critic = Network::new(r.spec()?).map_err(|e| Error::Checkpoint(format!("critic spec: {e}")))?;
    let mut params = Vec::new();
    for net in [&actor, &critic] {
        let n = r.u64()? as usize;
        if n != net.param_count() {
            return Err(Error::Checkpoint(format!("expected {} parameters, found {n}", net.param_count())));
        }
        params.push(ParamVector::from_values(net.layout().clone(), r.f64s(n)?)?);
    }
    let mut opts = Vec::new();
    for net in [&actor, &critic] {
        let step = r.u64()?;
        let m = r.f64s(net.param_count())?;
        let v = r.f64s(net.param_count())?;
        opts.push(AdamState::from_parts(m, v, step)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let critic_opt = opts.pop().expect("two optimizers");
    let actor_opt = opts.pop().expect("two optimizers");
    let theta = params.pop().expect("two vectors");
    let phi = params.pop().expect("two vectors");
    Ok(GuidanceModule { actor, critic, phi, theta, actor_opt, critic_opt })
}

pub fn save(module: &GuidanceModule, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(module))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<GuidanceModule> {
    decode(&fs::read(path)?)
}

/// Errors unless the stored networks have exactly the expected specs.
pub fn check_compatible(module: &GuidanceModule, actor: &NetSpec, critic: &NetSpec) -> Result<()> {
    for (what, got, want) in [("actor", module.actor.spec(), actor), ("critic", module.critic.spec(), critic)] {
        if got != want {
            return Err(Error::Checkpoint(format!("{what} spec mismatch: checkpoint has {got:?}, config wants {want:?}")));
        }
    }
    Ok(())
}

/// Text manifest: one `key = value` per line in the given order.
pub fn write_manifest<W: Write>(entries: &[(String, String)], mut out: W) -> Result<()> {
    for (k, v) in entries {
        writeln!(out, "{k} = {v}")?;
    }
    Ok(())
}
