//! Model checkpoints in the "ATRL" envelope, section `MODL`.
//!
//! Body: the nine budget fields as u64 (n, h, m_h, m_v, m_ff, l, tau, d,
//! d_out), the model options as a JSON string, then the parameter store.

use std::path::Path;

use super::{ModelBudget, ModelOptions, Result, Transformer};
use crate::envelope::{Reader, Writer};
use crate::params::ParamStore;

const TAG: &[u8; 4] = b"MODL";

impl Transformer {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::with_header(TAG);
        for v in self.budget.as_array() {
            w.u64(v as u64);
        }
        w.str(&serde_json::to_string(&self.options)?);
        self.params.write(&mut w);
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::with_header(bytes, TAG)?;
        let mut dims = [0usize; 9];
        for d in dims.iter_mut() {
            *d = r.usize()?;
        }
        let options: ModelOptions = serde_json::from_str(&r.str()?)?;
        let params = ParamStore::read(&mut r)?;
        r.expect_end()?;
        Transformer::from_parts(ModelBudget::from_array(dims), options, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
