//! TSCK checkpoint files: named parameter arrays plus a JSON metadata
//! trailer carrying the network spec and training provenance.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::tensor::{write_f32_slice, Dims, SpikeTensor};

/// TSCK file magic, the ASCII bytes `TSCK`.
pub const TSCK_MAGIC: [u8; 4] = [0x54, 0x53, 0x43, 0x4B];
pub const TSCK_VERSION: u32 = 1;

/// Training metadata stored in the checkpoint trailer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub network_spec: NetworkSpec,
}

/// Write the network's parameter arrays and metadata.
pub fn save_checkpoint(net: &Network, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&TSCK_MAGIC);
    buf.extend_from_slice(&TSCK_VERSION.to_le_bytes());
    let count = u32::try_from(net.params().len())
        .map_err(|_| Error::Format("too many arrays".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for p in net.params() {
        let name = p.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("array name '{}' too long", p.name)))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name);
        let d = p.value.dims();
        buf.push(4u8); // rank
        for dim in [d.t, d.c, d.h, d.w] {
            let dim = u32::try_from(dim)
                .map_err(|_| Error::Format(format!("dimension {} exceeds u32", dim)))?;
            buf.extend_from_slice(&dim.to_le_bytes());
        }
        write_f32_slice(&mut buf, p.value.data())?;
    }
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| Error::Format(format!("metadata serialization failed: {}", e)))?;
    buf.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    std::fs::write(path, buf)?;
    Ok(())
}

/// Load a checkpoint, validating magic, version, and per-array dims against
/// the embedded spec. Returns the rebuilt network and its metadata; a corrupt
/// file yields an error and no partial network.
pub fn load_checkpoint(path: &Path) -> Result<(Network, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    let mut cur = std::io::Cursor::new(bytes.as_slice());

    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated TSCK header".into()))?;
    if magic != TSCK_MAGIC {
        return Err(Error::Format(format!("bad TSCK magic {:02x?}", magic)));
    }
    let version = read_u32(&mut cur)?;
    if version != TSCK_VERSION {
        return Err(Error::Format(format!("unsupported TSCK version {}", version)));
    }
    let count = read_u32(&mut cur)? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut cur)? as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name)
            .map_err(|_| Error::Format("truncated array name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        cur.read_exact(&mut rank)
            .map_err(|_| Error::Format("truncated array header".into()))?;
        if rank[0] != 4 {
            return Err(Error::Format(format!(
                "array '{}' has rank {}, expected 4",
                name, rank[0]
            )));
        }
        let t = read_u32(&mut cur)? as usize;
        let c = read_u32(&mut cur)? as usize;
        let h = read_u32(&mut cur)? as usize;
        let w = read_u32(&mut cur)? as usize;
        let dims = Dims::new(t, c, h, w);
        let mut payload = vec![0u8; dims.numel() * 4];
        cur.read_exact(&mut payload)
            .map_err(|_| Error::Format(format!("truncated payload for array '{}'", name)))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        arrays.push((
            name,
            SpikeTensor::from_vec(dims, data)
                .map_err(|e| Error::Format(format!("invalid array dims: {}", e)))?,
        ));
    }
    let meta_len = read_u64(&mut cur)? as usize;
    let mut meta_json = vec![0u8; meta_len];
    cur.read_exact(&mut meta_json)
        .map_err(|_| Error::Format("truncated metadata".into()))?;
    let mut tail = [0u8; 1];
    if cur.read(&mut tail)? != 0 {
        return Err(Error::Format("trailing bytes after TSCK metadata".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&meta_json)
        .map_err(|e| Error::Format(format!("invalid metadata JSON: {}", e)))?;

    let net = Network::from_arrays(meta.network_spec.clone(), arrays)?;
    Ok((net, meta))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated TSCK field".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated TSCK field".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated TSCK field".into()))?;
    Ok(u64::from_le_bytes(b))
}
