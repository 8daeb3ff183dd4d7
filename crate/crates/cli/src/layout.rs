use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::CliError;

/// Environment variable naming the directory under which runs without
/// `--out` are placed (as `<root>/<command>`).
pub const OUT_ROOT_ENV: &str = "LESIONLOC_OUT_ROOT";

pub fn default_out(command: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(command)
}

/// An output directory held exclusively for one run through a `.lock` file
/// that is removed on drop.
#[derive(Debug)]
pub struct OutDir {
    root: PathBuf,
    lock: PathBuf,
}

impl OutDir {
    pub fn acquire(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let lock = root.join(".lock");
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => CliError::Locked(root.to_path_buf()),
                _ => CliError::io(&lock, e),
            })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| CliError::io(&lock, e))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// `root/name`, created on first use.
    pub fn sub(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.root.join(name);
        fs::create_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn checkpoints(&self) -> Result<PathBuf, CliError> {
        self.sub("checkpoints")
    }

    pub fn logs(&self) -> Result<PathBuf, CliError> {
        self.sub("logs")
    }

    pub fn reports(&self) -> Result<PathBuf, CliError> {
        self.sub("reports")
    }

    pub fn overlays(&self) -> Result<PathBuf, CliError> {
        self.sub("overlays")
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&p, contents).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_acquire_fails_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutDir::acquire(dir.path()).unwrap();
        assert!(matches!(OutDir::acquire(dir.path()), Err(CliError::Locked(_))));
        drop(a);
        assert!(OutDir::acquire(dir.path()).is_ok());
    }
}
