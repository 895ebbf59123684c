use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_BASE_URL: &str = "https://deepchemdata.s3-us-west-1.amazonaws.com/datasets";

pub const DATASET_NAMES: [&str; 5] = ["bbbp", "clintox", "hiv", "sider", "tox21"];

const MAX_DOWNLOAD_BYTES: u64 = 512 << 20;

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("unknown dataset {name:?}; valid names are {}", DATASET_NAMES.join(", "))]
    UnknownDataset { name: String },
    #[error("download of {url} failed: {reason}")]
    Network { url: String, reason: String },
    #[error("{path} has SHA-256 {actual} but {expected} was recorded")]
    ChecksumMismatch { path: PathBuf, expected: String, actual: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchOutcome {
    pub path: PathBuf,
    pub sha256: String,
    /// False when a verified copy was already present.
    pub downloaded: bool,
}

fn remote_name(name: &str) -> Option<&'static str> {
    Some(match name {
        "bbbp" => "BBBP.csv",
        "clintox" => "clintox.csv.gz",
        "hiv" => "HIV.csv",
        "sider" => "sider.csv.gz",
        "tox21" => "tox21.csv.gz",
        _ => return None,
    })
}

/// Local file name for a dataset, e.g. `bbbp.csv`.
pub fn dataset_file_name(name: &str) -> Result<String, FetchError> {
    remote_name(name)
        .map(|_| format!("{name}.csv"))
        .ok_or_else(|| FetchError::UnknownDataset { name: name.to_string() })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Downloads a benchmark CSV into `dest_dir` from the default mirror.
pub fn fetch_dataset(name: &str, dest_dir: &Path) -> Result<FetchOutcome, FetchError> {
    fetch_dataset_from(name, dest_dir, DEFAULT_BASE_URL)
}

/// Downloads `name` from `base_url` into `dest_dir/<name>.csv` and records
/// its SHA-256 in a `.sha256` sidecar. A copy whose checksum matches the
/// sidecar is kept without downloading; a copy without a sidecar is adopted.
pub fn fetch_dataset_from(name: &str, dest_dir: &Path, base_url: &str) -> Result<FetchOutcome, FetchError> {
    let file = dataset_file_name(name)?;
    let remote = remote_name(name).expect("validated above");
    let path = dest_dir.join(&file);
    let sidecar = dest_dir.join(format!("{file}.sha256"));

    if path.exists() {
        let actual = sha256_hex(&std::fs::read(&path)?);
        match std::fs::read_to_string(&sidecar) {
            Ok(recorded) => {
                let expected = recorded.split_whitespace().next().unwrap_or("").to_string();
                if expected != actual {
                    return Err(FetchError::ChecksumMismatch { path, expected, actual });
                }
            }
            Err(_) => std::fs::write(&sidecar, format!("{actual}  {file}\n"))?,
        }
        return Ok(FetchOutcome { path, sha256: actual, downloaded: false });
    }

    let url = format!("{}/{remote}", base_url.trim_end_matches('/'));
    let network = |reason: String| FetchError::Network { url: url.clone(), reason };
    log::info!("downloading {url}");
    let mut response = ureq::get(&url).call().map_err(|e| network(e.to_string()))?;
    let raw = response
        .body_mut()
        .with_config()
        .limit(MAX_DOWNLOAD_BYTES)
        .read_to_vec()
        .map_err(|e| network(e.to_string()))?;
    let bytes = if remote.ends_with(".gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| network(format!("bad gzip payload: {e}")))?;
        out
    } else {
        raw
    };

    std::fs::create_dir_all(dest_dir)?;
    let tmp = dest_dir.join(format!(".{file}.part"));
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, &path)?;
    let sha256 = sha256_hex(&bytes);
    std::fs::write(&sidecar, format!("{sha256}  {file}\n"))?;
    Ok(FetchOutcome { path, sha256, downloaded: true })
}
