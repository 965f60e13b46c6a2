use std::fs;
use std::path::Path;

use super::{check_layout, ModelConfig, ModelKind};
use crate::error::{io_err, Error, Result};
use crate::gradcore::Parameters;

const PARAMS_FILE: &str = "params.bin";
const CONFIG_FILE: &str = "model.cfg";

/// A trained model: kind, configuration and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: Parameters,
}

/// Writes `params.bin` (with its manifest) and `model.cfg` into `dir`.
pub fn save_checkpoint(dir: &Path, kind: ModelKind, config: &ModelConfig, params: &Parameters) -> Result<()> {
    check_layout(kind, config, params)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    params.save(&dir.join(PARAMS_FILE))?;
    let cfg_path = dir.join(CONFIG_FILE);
    let text = format!("kind = {kind}\n{}", config.manifest());
    fs::write(&cfg_path, text).map_err(io_err(&cfg_path))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
    let kind = text
        .lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == "kind")
        .map(|(_, v)| v.trim().parse::<ModelKind>())
        .ok_or_else(|| Error::Format {
            path: cfg_path.clone(),
            msg: "missing `kind`".into(),
        })??;
    let config = ModelConfig::from_manifest(&text)?;
    let params = Parameters::load(&dir.join(PARAMS_FILE))?;
    check_layout(kind, &config, &params)?;
    Ok(Checkpoint { kind, config, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::init_params;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            segment_len: 64,
            ..Default::default()
        };
        let params = init_params(ModelKind::LstmTcnn, &cfg, 4).unwrap();
        save_checkpoint(dir.path(), ModelKind::LstmTcnn, &cfg, &params).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck, Checkpoint { kind: ModelKind::LstmTcnn, config: cfg.clone(), params });
        assert!(dir.path().join("params.bin.manifest").exists());

        let other = init_params(ModelKind::GnnTcnn, &cfg, 4).unwrap();
        assert!(save_checkpoint(dir.path(), ModelKind::LstmTcnn, &cfg, &other).is_err());
    }
}
