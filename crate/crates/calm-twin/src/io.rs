//! File formats: JSONL trajectory datasets and JSON environment files.
//!
//! A dataset file holds one trajectory per line:
//! `{"id": ..., "steps": [{"time": ..., "state": {...}, "action": {...}}]}`.
//! An environment file holds `{"schemas", "knowledge", "dataset_path",
//! "epoch"}` with the dataset path resolved relative to the file itself.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{KnowledgeEntry, ModelError, ModellingEnvironment, Trajectory, VariableSchema};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn file_error(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_trajectories_jsonl(path: &Path) -> Result<Vec<Trajectory>, IoError> {
    let content = std::fs::read_to_string(path).map_err(file_error(path))?;
    let mut out = Vec::new();
    for (index, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(line).map_err(|e| IoError::Parse {
            path: path.to_path_buf(),
            line: index + 1,
            detail: e.to_string(),
        })?;
        traj.validate()?;
        out.push(traj);
    }
    Ok(out)
}

pub fn write_trajectories_jsonl(path: &Path, trajectories: &[Trajectory]) -> Result<(), IoError> {
    let mut content = String::new();
    for traj in trajectories {
        content.push_str(&serde_json::to_string(traj).expect("trajectory serializes"));
        content.push('\n');
    }
    std::fs::write(path, content).map_err(file_error(path))
}

/// On-disk environment description. `dataset_path` is relative to the
/// directory containing the environment file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvironmentFile {
    pub schemas: Vec<VariableSchema>,
    pub knowledge: Vec<KnowledgeEntry>,
    pub dataset_path: String,
    #[serde(default)]
    pub epoch: u64,
}

pub fn load_environment(path: &Path) -> Result<ModellingEnvironment, IoError> {
    let content = std::fs::read_to_string(path).map_err(file_error(path))?;
    let file: EnvironmentFile = serde_json::from_str(&content).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: 0,
        detail: e.to_string(),
    })?;
    let dataset_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&file.dataset_path);
    let dataset = read_trajectories_jsonl(&dataset_path)?;
    let mut env = ModellingEnvironment::new(file.schemas, dataset, file.knowledge)?;
    env.epoch = file.epoch;
    Ok(env)
}

/// Writes the environment JSON next to its dataset JSONL. `dataset_name`
/// is stored as given and the dataset lands in the same directory.
pub fn save_environment(
    path: &Path,
    env: &ModellingEnvironment,
    dataset_name: &str,
) -> Result<(), IoError> {
    let dataset_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(dataset_name);
    write_trajectories_jsonl(&dataset_path, &env.dataset)?;
    let file = EnvironmentFile {
        schemas: env.schemas.clone(),
        knowledge: env.knowledge.clone(),
        dataset_path: dataset_name.to_string(),
        epoch: env.epoch,
    };
    let json = serde_json::to_string_pretty(&file).expect("environment serializes");
    std::fs::write(path, json).map_err(file_error(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_pkpd, nsclc_knowledge, nsclc_schemas, PkPdParams, PkPdPolicy};

    #[test]
    fn dataset_roundtrips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let data = gen_pkpd(3, 8, &PkPdParams::default(), &PkPdPolicy::Untreated, 5).unwrap();
        write_trajectories_jsonl(&path, &data).unwrap();
        let back = read_trajectories_jsonl(&path).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn environment_roundtrips_with_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let env_path = dir.path().join("env.json");
        let data = gen_pkpd(2, 6, &PkPdParams::default(), &PkPdPolicy::Untreated, 5).unwrap();
        let mut env =
            ModellingEnvironment::new(nsclc_schemas(), data, nsclc_knowledge()).unwrap();
        env = env.update(Default::default()).unwrap();
        save_environment(&env_path, &env, "data.jsonl").unwrap();
        let back = load_environment(&env_path).unwrap();
        assert_eq!(back.epoch, 1);
        assert_eq!(back.dataset, env.dataset);
        assert_eq!(back.schemas, env.schemas);
    }

    #[test]
    fn bad_lines_report_path_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\": \"x\"}\n").unwrap();
        match read_trajectories_jsonl(&path) {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected: {other:?}"),
        }
    }
}
