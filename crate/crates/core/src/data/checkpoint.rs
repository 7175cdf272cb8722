//! Fixed little-endian binary checkpoint format, version 1:
//!
//! ```text
//! "SSBN" | u32 version | u32 L+1 | L+1 x u32 widths
//! i64 seed | u32 epochs | u8 estimator | f64 delta | f64 psi | f64 sigma_beta_sq
//! per layer: mu, rho, omega as f64, row-major
//! ```

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{LayerParams, NetworkArch, PriorConfig, VariationalState};
use crate::vi::Estimator;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSBN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: NetworkArch,
    pub prior: PriorConfig,
    pub state: VariationalState,
    pub seed: i64,
    pub epochs: u32,
    pub estimator: Estimator,
    pub delta: f64,
}

impl Checkpoint {
    pub fn encoded_len(arch: &NetworkArch) -> usize {
        let widths = arch.widths().len();
        4 + 4 + 4 + 4 * widths + 8 + 4 + 1 + 8 + 8 + 8 + 3 * 8 * arch.total_slots()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::encoded_len(&self.arch));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let widths = self.arch.widths();
        out.extend_from_slice(&(widths.len() as u32).to_le_bytes());
        for &w in widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epochs.to_le_bytes());
        out.push(self.estimator.code());
        out.extend_from_slice(&self.delta.to_le_bytes());
        out.extend_from_slice(&self.prior.psi().to_le_bytes());
        out.extend_from_slice(&self.prior.sigma_beta_sq().to_le_bytes());
        for layer in self.state.layers() {
            for m in [&layer.mu, &layer.rho, &layer.omega] {
                for v in m.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not an SSBN checkpoint".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let count = cur.u32()? as usize;
        if count < 2 || count > (bytes.len() - cur.pos) / 4 {
            return Err(Error::Checkpoint(format!("implausible layer count {count}")));
        }
        let widths = (0..count)
            .map(|_| cur.u32().map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let arch = NetworkArch::new(widths).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let expected = Self::encoded_len(&arch);
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!(
                "size mismatch: {} bytes, architecture {arch} needs {expected}",
                bytes.len()
            )));
        }
        let seed = i64::from_le_bytes(cur.array()?);
        let epochs = cur.u32()?;
        let code = cur.take(1)?[0];
        let estimator = Estimator::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown estimator code {code}")))?;
        let delta = cur.f64()?;
        let psi = cur.f64()?;
        let sigma_beta_sq = cur.f64()?;
        let prior = PriorConfig::new(psi, sigma_beta_sq).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut layers = Vec::with_capacity(arch.num_layers());
        for l in 0..arch.num_layers() {
            let shape = arch.layer_shape(l);
            let mut mat = || -> Result<Array2<f64>> {
                let v = (0..shape.0 * shape.1).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
                Ok(Array2::from_shape_vec(shape, v).expect("length matches shape"))
            };
            let (mu, rho, omega) = (mat()?, mat()?, mat()?);
            layers.push(LayerParams { mu, rho, omega });
        }
        let state = VariationalState::new(&arch, layers).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            version,
            arch,
            prior,
            state,
            seed,
            epochs,
            estimator,
            delta,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn sample() -> Checkpoint {
        let arch = NetworkArch::new(vec![3, 2, 2]).unwrap();
        let prior = PriorConfig::new((-2.0f64).exp(), 1.0).unwrap();
        let mut state = VariationalState::initialize(&arch, &prior, &mut Stream::new(4));
        state.layers_mut()[0].mu[[0, 0]] = -0.0;
        state.layers_mut()[1].rho[[2, 1]] = f64::MIN_POSITIVE / 4.0;
        Checkpoint {
            version: CHECKPOINT_VERSION,
            arch,
            prior,
            state,
            seed: -7,
            epochs: 3,
            estimator: Estimator::ScoreFunction,
            delta: 0.1,
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.seed, -7);
        assert_eq!(back.estimator, Estimator::ScoreFunction);
        assert_eq!(back.state.layers()[0].mu[[0, 0]].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn one_layer_size() {
        let arch = NetworkArch::new(vec![1, 1]).unwrap();
        let prior = PriorConfig::new(0.5, 1.0).unwrap();
        let c = Checkpoint {
            version: 1,
            state: VariationalState::constant(&arch, 0.0, 0.0, 0.0).unwrap(),
            arch,
            prior,
            seed: 0,
            epochs: 0,
            estimator: Estimator::Relaxed,
            delta: 0.1,
        };
        // magic, version, width count, 2 widths, metadata block, 3 groups x 2 slots
        assert_eq!(c.to_bytes().len(), 4 + 4 + 4 + 4 * 2 + (8 + 4 + 1 + 8 + 8 + 8) + 3 * 2 * 8);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1])
            .unwrap_err()
            .to_string()
            .contains("size mismatch"));
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..6]).is_err());
    }
}
