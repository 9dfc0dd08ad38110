use std::path::Path;

use eta_tensor::{Scalar, Tensor};
use serde_json::json;

use super::model::{EnergyArch, EnergyModel};
use crate::archive::{Archive, ArrayData};
use crate::depth_net::DepthModel;
use crate::error::{Error, Result};

pub const ENERGY_CHECKPOINT_KIND: &str = "energy_model";

impl<T: Scalar> EnergyModel<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ar = Archive::new(json!({
            "kind": ENERGY_CHECKPOINT_KIND,
            "arch": self.arch,
            "k": self.k(),
            "tau": self.tau,
            "bound_to": self.bound_to,
        }));
        for (name, t) in self.phi.iter() {
            ar.push(&format!("phi.{name}"), t.shape(), ArrayData::F64(t.to_f64_vec()));
        }
        ar.write(path)
    }

    /// Loads a checkpoint and, with `depth` given, refuses it unless it was
    /// trained against that model.
    pub fn load(path: &Path, depth: Option<&DepthModel<T>>) -> Result<Self> {
        let ar = Archive::read(path)?;
        let fmt = |m: String| Error::Format { path: path.to_path_buf(), message: m };
        let h = &ar.header;
        if h["kind"] != ENERGY_CHECKPOINT_KIND {
            return Err(fmt(format!("not an energy model checkpoint (kind {})", h["kind"])));
        }
        let arch: EnergyArch =
            serde_json::from_value(h["arch"].clone()).map_err(|e| fmt(format!("bad architecture: {e}")))?;
        let tau = h["tau"].as_f64().filter(|t| *t > 0.0).ok_or_else(|| fmt("missing or invalid tau".into()))?;
        let bound_to = h["bound_to"].as_str().ok_or_else(|| fmt("missing bound_to".into()))?.to_string();
        arch.validate()?;
        let mut phi = std::mem::take(&mut EnergyModel::<T>::skeleton(&arch)?.phi);
        for i in 0..phi.len() {
            let key = format!("phi.{}", phi.name(i));
            let (shape, v) = ar.float_array(&key, path)?;
            if shape != phi.get(i).shape() {
                return Err(fmt(format!("array `{key}` has shape {shape:?}, expected {:?}", phi.get(i).shape())));
            }
            *phi.get_mut(i) = Tensor::from_vec(&shape, v.into_iter().map(T::lit).collect());
        }
        let model = EnergyModel { arch, phi, tau, bound_to };
        if let Some(d) = depth {
            model.check_binding(d)?;
        }
        Ok(model)
    }
}
