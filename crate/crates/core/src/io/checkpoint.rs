//! Checkpoint directories.
//!
//! ```text
//! <dir>/model.cfg      canonical configuration
//! <dir>/manifest       setting, folds and one `model = <name> <fold> <group|->` line per model
//! <dir>/<name>.tns     parameter records, concatenated in `ModelParams::views` order
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::config::{parse_str, Config};
use crate::io::tensor_file::{decode_all, encode_into, AnyTensor};
use crate::io::write_atomic;
use crate::model::ModelParams;
use crate::tensor::Tensor;
use crate::training::Setting;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredModel {
    pub fold: usize,
    pub group: Option<usize>,
    pub params: ModelParams<Tensor<f32>>,
}

impl StoredModel {
    pub fn name(&self) -> String {
        match self.group {
            None => format!("fold{}", self.fold),
            Some(g) => format!("fold{}_group{g}", self.fold),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub setting: Setting,
    pub folds: usize,
    pub models: Vec<StoredModel>,
}

pub fn params_bytes(params: &ModelParams<Tensor<f32>>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for t in params.views() {
        encode_into(t, &mut out)?;
    }
    Ok(out)
}

pub fn params_from_bytes(config: &Config, bytes: &[u8]) -> Result<ModelParams<Tensor<f32>>> {
    let flat = decode_all(bytes)?
        .into_iter()
        .map(|t| match t {
            AnyTensor::F32(t) => Ok(t),
            other => Err(Error::Contract(format!("parameter record has dtype {:?}", other.kind()))),
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_flat(&config.model, flat)
}

fn setting_number(s: Setting) -> u8 {
    match s {
        Setting::One => 1,
        Setting::Two => 2,
    }
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("setting = {}\nfolds = {}\n", setting_number(ckpt.setting), ckpt.folds);
    for m in &ckpt.models {
        write_atomic(&dir.join(format!("{}.tns", m.name())), &params_bytes(&m.params)?)?;
        let group = m.group.map_or("-".to_string(), |g| g.to_string());
        manifest.push_str(&format!("model = {} {} {group}\n", m.name(), m.fold));
    }
    write_atomic(&dir.join("model.cfg"), ckpt.config.canonical().as_bytes())?;
    write_atomic(&dir.join("manifest"), manifest.as_bytes())
}

fn manifest_err(dir: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::ConfigParse {
        path: dir.join("manifest").display().to_string(),
        line,
        msg: msg.into(),
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let cfg_path = dir.join("model.cfg");
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let config = parse_str(&text, &cfg_path.display().to_string())?;
    let man_path = dir.join("manifest");
    let manifest = std::fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let (mut setting, mut folds) = (None, None);
    let mut models = Vec::new();
    for (n, line) in manifest.lines().enumerate() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let value = value.trim();
        match key.trim() {
            "setting" => {
                setting = value.parse().ok().and_then(Setting::from_number);
                if setting.is_none() {
                    return Err(manifest_err(dir, n + 1, format!("bad setting `{value}`")));
                }
            }
            "folds" => folds = Some(value.parse().map_err(|_| manifest_err(dir, n + 1, "bad fold count"))?),
            "model" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                let [name, fold, group] = parts[..] else {
                    return Err(manifest_err(dir, n + 1, "expected `name fold group`"));
                };
                let fold = fold.parse().map_err(|_| manifest_err(dir, n + 1, "bad fold"))?;
                let group = match group {
                    "-" => None,
                    g => Some(g.parse().map_err(|_| manifest_err(dir, n + 1, "bad group"))?),
                };
                let path = dir.join(format!("{name}.tns"));
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let params = params_from_bytes(&config, &bytes)?;
                models.push(StoredModel { fold, group, params });
            }
            other => return Err(manifest_err(dir, n + 1, format!("unknown key `{other}`"))),
        }
    }
    let setting = setting.ok_or_else(|| manifest_err(dir, 0, "missing setting"))?;
    let folds = folds.ok_or_else(|| manifest_err(dir, 0, "missing folds"))?;
    if models.is_empty() {
        return Err(manifest_err(dir, 0, "no models"));
    }
    Ok(Checkpoint {
        config,
        setting,
        folds,
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::config::parse_str;

    #[test]
    fn save_load_round_trip() {
        let config = parse_str("depth = 8\nn_blocks = 2", "t").unwrap();
        let models = (0..2)
            .map(|g| StoredModel {
                fold: 1,
                group: Some(g),
                params: ModelParams::init(&config.model, g as u64),
            })
            .collect();
        let ckpt = Checkpoint {
            config,
            setting: Setting::Two,
            folds: 5,
            models,
        };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &ckpt).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, ckpt);
        // params bytes are stable
        let a = std::fs::read(dir.path().join("fold1_group0.tns")).unwrap();
        assert_eq!(a, params_bytes(&ckpt.models[0].params).unwrap());
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
