use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::args::{Cli, Format};
use crate::error::{CliError, CliResult};

/// Defaults read from `--config`. Command-line flags and environment
/// variables win over anything here.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub node: Option<String>,
    pub ca: Option<String>,
    pub identity: Option<PathBuf>,
    pub format: Option<Format>,
    pub token: Option<String>,
    #[serde(default)]
    pub node_server: NodeServerSection,
    #[serde(default)]
    pub ca_server: CaServerSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeServerSection {
    pub dir: Option<PathBuf>,
    pub listen: Option<String>,
    pub guard_dir: Option<PathBuf>,
    pub ca_token: Option<String>,
    pub ca_root: Option<PathBuf>,
    pub poll_secs: Option<u64>,
    pub tick_secs: Option<u64>,
    pub examination_hours: Option<u64>,
    pub sign_len: Option<usize>,
    pub name_len: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaServerSection {
    pub dir: Option<PathBuf>,
    pub listen: Option<String>,
    pub sync_token: Option<String>,
    #[serde(default)]
    pub notify: Vec<String>,
    pub expiry_sweep_secs: Option<u64>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }
}

/// Global settings after merging flags, environment and config file.
pub struct Settings {
    pub node: Option<String>,
    pub ca: Option<String>,
    pub identity: Option<PathBuf>,
    pub format: Format,
    pub token: Option<String>,
    pub file: ConfigFile,
}

impl Settings {
    pub fn resolve(cli: &Cli) -> CliResult<Self> {
        let file = match &cli.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        Ok(Self {
            node: cli.node.clone().or_else(|| file.node.clone()).map(trim_url),
            ca: cli.ca.clone().or_else(|| file.ca.clone()).map(trim_url),
            identity: cli.identity.clone().or_else(|| file.identity.clone()),
            format: cli.format.or(file.format).unwrap_or_default(),
            token: cli.token.clone().or_else(|| file.token.clone()),
            file,
        })
    }

    pub fn node_url(&self) -> CliResult<&str> {
        self.node
            .as_deref()
            .ok_or_else(|| CliError::usage("no node URL; pass --node or set ARCHAIN_NODE"))
    }

    pub fn ca_url(&self) -> CliResult<&str> {
        self.ca
            .as_deref()
            .ok_or_else(|| CliError::usage("no CA URL; pass --ca or set ARCHAIN_CA"))
    }

    pub fn token(&self) -> CliResult<&str> {
        self.token.as_deref().ok_or_else(|| {
            CliError::usage("no session token; run `login` and pass --token or set ARCHAIN_TOKEN")
        })
    }

    pub fn identity_path(&self) -> CliResult<&Path> {
        self.identity.as_deref().ok_or_else(|| {
            CliError::usage("no identity file; pass --identity or set ARCHAIN_IDENTITY")
        })
    }
}

fn trim_url(s: String) -> String {
    s.trim_end_matches('/').to_string()
}
