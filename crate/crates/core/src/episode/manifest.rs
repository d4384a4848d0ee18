//! Episode directories: tensor files plus an `episode.json` manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_tensor, write_tensor, Episode, FeatureSet, Level, QueryItem, SupportItem, TensorKind};
use crate::error::{HpanError, Result};

pub const MANIFEST_FILE: &str = "episode.json";

/// Role (`support[0].features.l3`, `query[2].mask`, ...) to relative file path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub class_id: String,
    pub seed: u64,
    pub tensors: BTreeMap<String, String>,
}

fn file_name(role: &str) -> String {
    role.replace('[', "_").replace(']', "").replace('.', "_") + ".hptn"
}

pub fn save_episode(dir: impl AsRef<Path>, ep: &Episode) -> Result<()> {
    let dir = dir.as_ref();
    ep.validate()?;
    fs::create_dir_all(dir).map_err(|e| HpanError::io(dir, e))?;
    let mut tensors = BTreeMap::new();
    let put_features = |prefix: String, fs: &FeatureSet, tensors: &mut BTreeMap<String, String>| -> Result<()> {
        for (lvl, fm) in [("l3", &fs.l3), ("l4", &fs.l4)] {
            let role = format!("{prefix}.features.{lvl}");
            let name = file_name(&role);
            write_tensor(dir.join(&name), fm)?;
            tensors.insert(role, name);
        }
        Ok(())
    };
    for (i, s) in ep.support.iter().enumerate() {
        put_features(format!("support[{i}]"), &s.features, &mut tensors)?;
    }
    for (t, q) in ep.query.iter().enumerate() {
        put_features(format!("query[{t}]"), &q.features, &mut tensors)?;
    }
    let masks = ep
        .support
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("support[{i}].mask"), Some(&s.mask)))
        .chain(
            ep.query
                .iter()
                .enumerate()
                .map(|(t, q)| (format!("query[{t}].mask"), q.mask.as_ref())),
        );
    for (role, mask) in masks {
        if let Some(m) = mask {
            let name = file_name(&role);
            write_tensor(dir.join(&name), m)?;
            tensors.insert(role, name);
        }
    }
    let manifest = EpisodeManifest {
        class_id: ep.class_id.clone(),
        seed: ep.seed,
        tensors,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|source| HpanError::Manifest {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, json).map_err(|e| HpanError::io(&path, e))
}

pub fn load_episode(dir: impl AsRef<Path>) -> Result<Episode> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| HpanError::io(&path, e))?;
    let manifest: EpisodeManifest = serde_json::from_str(&text).map_err(|source| HpanError::Manifest {
        path: path.clone(),
        source,
    })?;
    let get = |role: &str, kind: TensorKind| -> Result<Option<super::Tensor>> {
        match manifest.tensors.get(role) {
            Some(rel) => load_tensor(dir.join(rel), kind).map(Some),
            None => Ok(None),
        }
    };
    let features = |prefix: &str| -> Result<Option<FeatureSet>> {
        let l3 = get(&format!("{prefix}.features.l3"), TensorKind::Features(Level::L3))?;
        let l4 = get(&format!("{prefix}.features.l4"), TensorKind::Features(Level::L4))?;
        match (l3, l4) {
            (Some(a), Some(b)) => Ok(Some(FeatureSet {
                l3: a.into_features()?,
                l4: b.into_features()?,
            })),
            (None, None) => Ok(None),
            _ => Err(HpanError::Invariant(format!("{prefix} lists only one of l3/l4"))),
        }
    };

    let mut support = Vec::new();
    while let Some(fs) = features(&format!("support[{}]", support.len()))? {
        let role = format!("support[{}].mask", support.len());
        let mask = get(&role, TensorKind::Mask)?
            .ok_or_else(|| HpanError::Invariant(format!("{role} missing from manifest")))?
            .into_mask()?;
        support.push(SupportItem { features: fs, mask });
    }
    let mut query = Vec::new();
    while let Some(fs) = features(&format!("query[{}]", query.len()))? {
        let mask = get(&format!("query[{}].mask", query.len()), TensorKind::Mask)?
            .map(|t| t.into_mask())
            .transpose()?;
        query.push(QueryItem { features: fs, mask });
    }
    let ep = Episode {
        support,
        query,
        class_id: manifest.class_id,
        seed: manifest.seed,
    };
    ep.validate()?;
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::{synth_episode, SynthConfig};

    #[test]
    fn episode_directory_round_trip() {
        let cfg = SynthConfig {
            k: 2,
            t: 2,
            channels_l3: 6,
            channels_l4: 5,
            l3_height: 6,
            l3_width: 8,
            blob_radius: 3.0,
            ..SynthConfig::default()
        };
        let mut ep = synth_episode(&cfg, 42).unwrap();
        ep.query[1].mask = None;
        let dir = tempfile::tempdir().unwrap();
        save_episode(dir.path(), &ep).unwrap();
        let manifest: EpisodeManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert!(manifest.tensors.contains_key("support[1].features.l4"));
        assert!(manifest.tensors.contains_key("query[0].mask"));
        assert!(!manifest.tensors.contains_key("query[1].mask"));
        assert_eq!(load_episode(dir.path()).unwrap(), ep);
    }

    #[test]
    fn file_names_are_flat() {
        assert_eq!(file_name("support[3].features.l3"), "support_3_features_l3.hptn");
        assert_eq!(file_name("query[0].mask"), "query_0_mask.hptn");
    }
}
