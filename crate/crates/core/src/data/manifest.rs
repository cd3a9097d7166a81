//! `relative/path.pgm<TAB>tok tok tok` manifests and the images they name.

use std::path::{Path, PathBuf};

use crate::data::image::GrayImage;
use crate::data::pgm;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Image path as written in the manifest.
    pub id: String,
    pub image: GrayImage,
    pub tokens: Vec<String>,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((path, toks)) = line.split_once('\t') else {
            return Err(Error::Config(format!("manifest line {}: missing TAB", no + 1)));
        };
        if path.is_empty() {
            return Err(Error::Config(format!("manifest line {}: empty path", no + 1)));
        }
        out.push(ManifestEntry {
            path: PathBuf::from(path),
            tokens: toks.split_whitespace().map(String::from).collect(),
        });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&e.path.to_string_lossy());
        s.push('\t');
        s.push_str(&e.tokens.join(" "));
        s.push('\n');
    }
    s
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text).map_err(|e| e.context(path.display().to_string()))
}

/// Loads every image relative to the manifest's directory. Sequences longer
/// than `max_len` are rejected.
pub fn load_dataset(manifest: &Path, max_len: usize) -> Result<Vec<Example>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            if e.tokens.len() > max_len {
                return Err(Error::Config(format!(
                    "{} line {}: {} tokens exceed max length {max_len}",
                    manifest.display(),
                    i + 1,
                    e.tokens.len()
                )));
            }
            let image = pgm::read_image(&base.join(&e.path))?;
            Ok(Example {
                id: e.path.to_string_lossy().into_owned(),
                image,
                tokens: e.tokens,
            })
        })
        .collect()
}

/// Writes images as `images/{index:05}.pgm` plus the manifest file.
pub fn save_dataset(dir: &Path, manifest_name: &str, examples: &[(GrayImage, Vec<String>)], binary: bool) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut entries = Vec::with_capacity(examples.len());
    for (i, (img, tokens)) in examples.iter().enumerate() {
        let rel = PathBuf::from("images").join(format!("{i:05}.pgm"));
        pgm::write_image(&dir.join(&rel), img, binary)?;
        entries.push(ManifestEntry {
            path: rel,
            tokens: tokens.clone(),
        });
    }
    let path = dir.join(manifest_name);
    std::fs::write(&path, format_manifest(&entries)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let text = "a.pgm\tx ^ { 2 }\nb.pgm\t\n";
        let m = parse_manifest(text).unwrap();
        assert_eq!(m[0].tokens, ["x", "^", "{", "2", "}"]);
        assert!(m[1].tokens.is_empty());
        assert_eq!(format_manifest(&m), text);
        assert!(parse_manifest("no tab here\n").is_err());
    }

    #[test]
    fn dataset_write_then_read_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = GrayImage::blank(5, 3);
        img.set(1, 1, 0.0);
        img.set(2, 1, 128.0 / 255.0);
        let toks = vec!["1".to_string(), "+".to_string()];
        let path = save_dataset(dir.path(), "train.tsv", &[(img.clone(), toks.clone())], false).unwrap();
        let back = load_dataset(&path, 40).unwrap();
        assert_eq!(back[0].image, img);
        assert_eq!(back[0].tokens, toks);
        assert!(load_dataset(&path, 1).is_err());
    }
}
