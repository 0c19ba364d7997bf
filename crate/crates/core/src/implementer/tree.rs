//! In-memory text file trees and their canonical zip encoding.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use thiserror::Error;
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} is not valid UTF-8 text")]
    NotText(String),
    #[error("zip error: {0}")]
    Zip(#[from] zip::result::ZipError),
    #[error("unsafe path in archive: {0}")]
    UnsafePath(String),
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> TreeError + '_ {
    move |source| TreeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Relative `/`-separated paths mapped to file contents.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FileTree(BTreeMap<String, String>);

impl FileTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, path: &str) -> Option<&str> {
        self.0.get(path).map(String::as_str)
    }

    pub fn insert(&mut self, path: String, contents: String) -> Option<String> {
        self.0.insert(path, contents)
    }

    pub fn remove(&mut self, path: &str) -> Option<String> {
        self.0.remove(path)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    /// Reads every regular file under `dir`, skipping hidden entries.
    pub fn from_dir(dir: &Path) -> Result<Self, TreeError> {
        let mut tree = Self::new();
        read_dir_into(dir, dir, &mut tree)?;
        Ok(tree)
    }

    pub fn write_to_dir(&self, dir: &Path) -> Result<(), TreeError> {
        for (rel, contents) in self.iter() {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(io_at(parent))?;
            }
            std::fs::write(&path, contents).map_err(io_at(&path))?;
        }
        Ok(())
    }

    /// Zip with entries sorted by path, stored uncompressed, with a fixed
    /// timestamp and mode, so identical trees give identical bytes.
    pub fn to_canonical_zip(&self) -> Result<Vec<u8>, TreeError> {
        let mut zip = ZipWriter::new(Cursor::new(Vec::new()));
        let opts = SimpleFileOptions::default()
            .compression_method(CompressionMethod::Stored)
            .last_modified_time(DateTime::default())
            .unix_permissions(0o644);
        for (path, contents) in self.iter() {
            zip.start_file(path, opts)?;
            zip.write_all(contents.as_bytes()).map_err(|source| TreeError::Io {
                path: path.to_string(),
                source,
            })?;
        }
        Ok(zip.finish()?.into_inner())
    }

    pub fn from_zip(bytes: &[u8]) -> Result<Self, TreeError> {
        let mut archive = ZipArchive::new(Cursor::new(bytes))?;
        let mut tree = Self::new();
        for i in 0..archive.len() {
            let mut entry = archive.by_index(i)?;
            if entry.is_dir() {
                continue;
            }
            let name = entry.name()?.to_string();
            if entry.enclosed_name().is_none() {
                return Err(TreeError::UnsafePath(name));
            }
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf).map_err(|source| TreeError::Io {
                path: name.clone(),
                source,
            })?;
            let text = String::from_utf8(buf).map_err(|_| TreeError::NotText(name.clone()))?;
            tree.insert(name, text);
        }
        Ok(tree)
    }

    /// Renders the tree as a prompt block: one fenced section per file.
    pub fn render_for_prompt(&self) -> String {
        let mut out = String::new();
        for (path, contents) in self.iter() {
            out.push_str(&format!("=== {path} ===\n{contents}"));
            if !contents.ends_with('\n') {
                out.push('\n');
            }
        }
        out
    }
}

fn read_dir_into(root: &Path, dir: &Path, tree: &mut FileTree) -> Result<(), TreeError> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(io_at(dir))?
        .collect::<Result<_, _>>()
        .map_err(io_at(dir))?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        if entry.file_name().to_string_lossy().starts_with('.') {
            continue;
        }
        let path = entry.path();
        let ft = entry.file_type().map_err(io_at(&path))?;
        if ft.is_dir() {
            read_dir_into(root, &path, tree)?;
        } else if ft.is_file() {
            let rel = path
                .strip_prefix(root)
                .expect("walk stays under root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            let bytes = std::fs::read(&path).map_err(io_at(&path))?;
            let text = String::from_utf8(bytes).map_err(|_| TreeError::NotText(rel.clone()))?;
            tree.insert(rel, text);
        }
    }
    Ok(())
}

impl FromIterator<(String, String)> for FileTree {
    fn from_iter<I: IntoIterator<Item = (String, String)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}
