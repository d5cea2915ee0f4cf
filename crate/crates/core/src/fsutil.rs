//! Write-to-temp then rename, so a failed or killed command never leaves a
//! partially written output behind.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

fn parent_of(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Writes a file atomically. `fill` receives a buffered writer over a
/// temporary file in the destination directory; if it fails, the
/// temporary is removed and `path` is untouched.
pub fn write_atomic<F>(path: &Path, fill: F) -> io::Result<()>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    let dir = parent_of(path);
    fs::create_dir_all(dir)?;
    let tmp = tempfile::Builder::new()
        .prefix(".reefcond-")
        .suffix(".partial")
        .tempfile_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    write_atomic(path, |w| w.write_all(bytes))
}

/// A directory being assembled under a temporary name beside its final
/// location. Dropping it without [`StagedDir::commit`] deletes it.
pub struct StagedDir {
    staging: Option<tempfile::TempDir>,
    target: PathBuf,
}

impl StagedDir {
    pub fn new(target: &Path) -> io::Result<Self> {
        let dir = parent_of(target);
        fs::create_dir_all(dir)?;
        let staging = tempfile::Builder::new()
            .prefix(".reefcond-")
            .suffix(".partial")
            .tempdir_in(dir)?;
        Ok(Self {
            staging: Some(staging),
            target: target.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        self.staging.as_ref().expect("staging dir present").path()
    }

    /// Moves the staged directory into place, replacing any previous
    /// directory at the target.
    pub fn commit(mut self) -> io::Result<PathBuf> {
        let staging = self.staging.take().expect("staging dir present");
        let staged = staging.keep();
        if self.target.exists() {
            let old = parent_of(&self.target).join(format!(
                ".reefcond-old-{}",
                std::process::id()
            ));
            fs::rename(&self.target, &old)?;
            fs::rename(&staged, &self.target)?;
            fs::remove_dir_all(&old)?;
        } else {
            fs::rename(&staged, &self.target)?;
        }
        Ok(self.target.clone())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    let mut file = fs::File::open(path)?;
    io::copy(&mut file, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}
