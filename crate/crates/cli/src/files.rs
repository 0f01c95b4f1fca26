use std::fs;
use std::io::Write;
use std::path::Path;

use archain_core::identity::Identity;

use crate::error::{CliError, CliResult};

/// Loads an identity file, refusing one other users can read.
pub fn load_identity(path: &Path) -> CliResult<Identity> {
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let mode = fs::metadata(path)
            .map_err(|e| CliError::failed("IdentityFile", format!("{}: {e}", path.display())))?
            .permissions()
            .mode();
        if mode & 0o077 != 0 {
            return Err(CliError::failed(
                "IdentityFile",
                format!(
                    "{} is accessible to other users (mode {:o}); run chmod 600",
                    path.display(),
                    mode & 0o777
                ),
            ));
        }
    }
    Identity::load(path)
        .map_err(|e| CliError::failed("IdentityFile", format!("{}: {e}", path.display())))
}

pub fn save_identity(identity: &Identity, path: &Path) -> CliResult {
    identity
        .save(path)
        .map_err(|e| CliError::failed("IdentityFile", format!("{}: {e}", path.display())))
}

/// Writes a file only its owner can read.
pub fn write_private(path: &Path, bytes: &[u8]) -> CliResult {
    let mut options = fs::OpenOptions::new();
    options.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        options.mode(0o600);
    }
    let mut f = options.open(path)?;
    f.write_all(bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(path, fs::Permissions::from_mode(0o600))?;
    }
    Ok(())
}
