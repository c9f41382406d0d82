//! Flat parameter file for trained networks.
//!
//! Layout, all integers and floats little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `DIFFNET\0` |
//! | 4     | format version (1) |
//! | 4     | architecture tag: 0 MLP, 1 DeepONet |
//! | 8·k   | architecture sizes as `u64` (4 for an MLP; branch, trunk, `p`, outputs for a DeepONet) |
//! | 8     | training seed |
//! | 8     | fingerprint of the problem the network was trained on |
//! | 8     | parameter count `n` |
//! | 8·n   | parameters as `f64` |

use std::io::{self, Read, Write};

use diffnet::models::{Architecture, DeepOnetArchitecture, MlpArchitecture, NetworkParams};

const MAGIC: &[u8; 8] = b"DIFFNET\0";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelFileError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a model file")]
    Magic,
    #[error("unsupported model file version {0}")]
    Version(u32),
    #[error("corrupt model file: {0}")]
    Corrupt(String),
}

fn mlp_sizes(m: &MlpArchitecture) -> [u64; 4] {
    [m.input as u64, m.layers as u64, m.units as u64, m.output as u64]
}

/// Seed and problem fingerprint stored next to the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub fingerprint: u64,
}

/// 64-bit FNV-1a.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn write_model<W: Write>(mut out: W, params: &NetworkParams, tag: Provenance) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let sizes: Vec<u64> = match &params.arch {
        Architecture::Mlp(m) => {
            out.write_all(&0u32.to_le_bytes())?;
            mlp_sizes(m).to_vec()
        }
        Architecture::DeepOnet(d) => {
            out.write_all(&1u32.to_le_bytes())?;
            let mut s = mlp_sizes(&d.branch).to_vec();
            s.extend(mlp_sizes(&d.trunk));
            s.extend([d.p as u64, d.outputs as u64]);
            s
        }
    };
    for s in sizes {
        out.write_all(&s.to_le_bytes())?;
    }
    out.write_all(&tag.seed.to_le_bytes())?;
    out.write_all(&tag.fingerprint.to_le_bytes())?;
    out.write_all(&(params.values.len() as u64).to_le_bytes())?;
    for v in &params.values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_mlp<R: Read>(r: &mut R) -> Result<MlpArchitecture, ModelFileError> {
    let mut s = [0usize; 4];
    for v in &mut s {
        *v = read_u64(r)? as usize;
    }
    MlpArchitecture::new(s[0], s[1], s[2], s[3]).map_err(|e| ModelFileError::Corrupt(e.to_string()))
}

pub fn read_model<R: Read>(mut input: R) -> Result<(NetworkParams, Provenance), ModelFileError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelFileError::Magic);
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(ModelFileError::Version(version));
    }
    let arch = match read_u32(&mut input)? {
        0 => Architecture::Mlp(read_mlp(&mut input)?),
        1 => {
            let branch = read_mlp(&mut input)?;
            let trunk = read_mlp(&mut input)?;
            let p = read_u64(&mut input)? as usize;
            let outputs = read_u64(&mut input)? as usize;
            Architecture::DeepOnet(
                DeepOnetArchitecture::new(branch, trunk, p, outputs)
                    .map_err(|e| ModelFileError::Corrupt(e.to_string()))?,
            )
        }
        tag => return Err(ModelFileError::Corrupt(format!("unknown architecture tag {tag}"))),
    };
    let seed = read_u64(&mut input)?;
    let fingerprint = read_u64(&mut input)?;
    let n = read_u64(&mut input)? as usize;
    if n != arch.param_count() {
        return Err(ModelFileError::Corrupt(format!("{n} parameters for an architecture with {}", arch.param_count())));
    }
    let mut bytes = vec![0u8; 8 * n];
    input.read_exact(&mut bytes)?;
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let params = NetworkParams::new(arch, values).map_err(|e| ModelFileError::Corrupt(e.to_string()))?;
    Ok((params, Provenance { seed, fingerprint }))
}
