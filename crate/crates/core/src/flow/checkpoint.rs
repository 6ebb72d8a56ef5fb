//! Versioned binary checkpoints for flows.
//!
//! Layout: magic, format version, JSON-encoded config, raw little-endian
//! f64 parameter bits, seed, step. Parameters round-trip bit-exactly, so a
//! reloaded flow reproduces log-densities to the last ulp.

use std::fs;
use std::path::Path;

use super::{ConditionalFlow, FlowConfig, FlowError};

const MAGIC: &[u8; 8] = b"IDFLOW01";
const VERSION: u32 = 1;

impl ConditionalFlow {
    pub fn to_bytes(&self) -> Vec<u8> {
        let config =
            serde_json::to_vec(self.config()).expect("flow config serializes");
        let flat = self.flat_params();
        let mut out = Vec::with_capacity(8 + 4 + 8 + config.len() + 8 + flat.len() * 8 + 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
        for v in &flat {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.config().seed.to_le_bytes());
        out.extend_from_slice(&self.step().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FlowError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(FlowError::Corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(FlowError::Corrupt(format!("unsupported version {version}")));
        }
        let config_len = cur.u64()? as usize;
        let config: FlowConfig = serde_json::from_slice(cur.take(config_len)?)
            .map_err(|e| FlowError::Corrupt(format!("config: {e}")))?;
        let n = cur.u64()? as usize;
        if n != config.param_count() {
            return Err(FlowError::Corrupt(format!(
                "parameter count {} does not match config ({})",
                n,
                config.param_count()
            )));
        }
        let mut flat = Vec::with_capacity(n);
        for _ in 0..n {
            flat.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        let _seed = cur.u64()?;
        let step = cur.u64()?;
        let mut flow = ConditionalFlow::init(config)?;
        flow.set_flat_params(&flat)?;
        flow.set_step(step);
        Ok(flow)
    }

    pub fn save(&self, path: &Path) -> Result<(), FlowError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FlowError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FlowError> {
        if self.pos + n > self.bytes.len() {
            return Err(FlowError::Corrupt("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, FlowError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
