//! Self-describing weight files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Model, NetParams, Network, NetworkSpec};

pub const WEIGHTS_FORMAT: &str = "rotsiam-weights";
pub const WEIGHTS_VERSION: u32 = 1;

/// JSON container: header, one basis manifest per convolution layer, the
/// network spec and all coefficient and bias arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightsFile {
    pub format: String,
    pub version: u32,
    pub bases: Vec<String>,
    pub spec: NetworkSpec,
    pub params: NetParams,
}

impl WeightsFile {
    pub fn from_model(model: &Model) -> Self {
        Self {
            format: WEIGHTS_FORMAT.to_string(),
            version: WEIGHTS_VERSION,
            bases: model.net.bases().iter().map(|b| b.manifest()).collect(),
            spec: model.net.spec().clone(),
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        let net = Network::new(self.spec)?;
        let expected: Vec<String> = net.bases().iter().map(|b| b.manifest()).collect();
        if expected != self.bases {
            return Err(Error::InvalidArgument(
                "basis manifest in the weight file does not match the network spec".into(),
            ));
        }
        Model::new(net, self.params)
    }
}

pub fn save_weights(path: &Path, model: &Model) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string(&WeightsFile::from_model(model))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path)?;
    let file: WeightsFile = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if file.format != WEIGHTS_FORMAT || file.version != WEIGHTS_VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("unsupported header {} v{}", file.format, file.version),
        });
    }
    file.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip() {
        let net = Network::new(NetworkSpec::desk(4, 1, [2, 3, 3, 2]).unwrap()).unwrap();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let model = Model::new(net, params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        save_weights(&path, &model).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.net.spec(), model.net.spec());
    }

    #[test]
    fn rejects_wrong_header() {
        let net = Network::new(NetworkSpec::desk(1, 1, [2, 2, 2, 2]).unwrap()).unwrap();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let mut file = WeightsFile::from_model(&Model::new(net, params).unwrap());
        file.version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_tampered_manifest() {
        let net = Network::new(NetworkSpec::desk(4, 1, [2, 2, 2, 2]).unwrap()).unwrap();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let mut file = WeightsFile::from_model(&Model::new(net, params).unwrap());
        file.bases[0] = file.bases[0].replace("sigma = 0.6", "sigma = 0.7");
        assert!(file.into_model().is_err());
    }
}
