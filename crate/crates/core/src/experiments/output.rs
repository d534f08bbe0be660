use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Single writer for a run directory; remembers a checksum for every file it writes.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: Vec<FileRecord>,
}

impl OutputDir {
    pub fn create(root: &Path) -> io::Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[FileRecord] {
        &self.files
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> io::Result<()> {
        std::fs::write(self.root.join(name), bytes)?;
        let record = FileRecord { name: name.into(), sha256: hex::encode(Sha256::digest(bytes)), bytes: bytes.len() as u64 };
        self.files.retain(|f| f.name != name);
        self.files.push(record);
        Ok(())
    }

    /// Renders a table into memory with `fill`, then writes it.
    pub fn table(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> io::Result<()> {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write(name, &buf)
    }

    /// CSV from a header and preformatted rows.
    pub fn rows(&mut self, name: &str, header: &str, rows: &[String]) -> io::Result<()> {
        self.table(name, |buf| {
            writeln!(buf, "{header}")?;
            for r in rows {
                writeln!(buf, "{r}")?;
            }
            Ok(())
        })
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> io::Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// For the manifest itself, which cannot list its own checksum.
    pub fn write_untracked_json(&self, name: &str, value: &impl Serialize) -> io::Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
        text.push('\n');
        std::fs::write(self.root.join(name), text)
    }
}
