use std::path::{Path, PathBuf};

use drt_core::model::RoutedLm;
use drt_core::training::{Checkpoint, Corpus};

use crate::error::CliError;

/// Parses `NAME=PATH`, or a bare path labeled by its file stem.
pub fn parse_domain(arg: &str) -> Result<(String, PathBuf), CliError> {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        Some(_) => Err(CliError::Usage(format!("bad domain `{arg}` (expected NAME=PATH)"))),
        None => {
            let p = PathBuf::from(arg);
            let stem = p
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| CliError::Usage(format!("cannot name domain `{arg}`")))?
                .to_string();
            Ok((stem, p))
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn domain_corpus(domains: &[(String, PathBuf)]) -> Result<Corpus, CliError> {
    let texts = domains
        .iter()
        .map(|(n, p)| Ok((n.clone(), read_text(p)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(Corpus::from_domains(&texts))
}

pub fn text_corpus(path: &Path) -> Result<Corpus, CliError> {
    Ok(Corpus::from_text(&read_text(path)?))
}

pub fn load_model(path: &Path) -> Result<RoutedLm<f64>, CliError> {
    if !path.exists() {
        return Err(CliError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")));
    }
    Ok(Checkpoint::<f64>::load(path)?.model)
}
