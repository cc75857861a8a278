//! Folk-tune corpus loader: UTF-8 text, one tune per blank-line-separated
//! block, each block carrying at least a `K:` key header.

use std::path::Path;

use super::{assign_split, DataError, DatasetRecord, LoadedDataset, Payload, Transform};

/// Load a folk ABC corpus. `root` may be a single corpus file or a directory
/// of `.abc` files (read in lexicographic order).
pub fn load_folk_dataset(
    root: &Path,
    transforms: Vec<Box<dyn Transform>>,
    seed: u64,
) -> Result<LoadedDataset, DataError> {
    let mut sources: Vec<std::path::PathBuf> = Vec::new();
    if root.is_dir() {
        for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
            let entry = entry.map_err(|e| DataError::Io {
                path: root.to_path_buf(),
                source: e.into_io_error().unwrap_or_else(|| {
                    std::io::Error::new(std::io::ErrorKind::Other, "walk failed")
                }),
            })?;
            if entry.file_type().is_file()
                && entry.path().extension().is_some_and(|e| e.eq_ignore_ascii_case("abc"))
            {
                sources.push(entry.into_path());
            }
        }
    } else {
        sources.push(root.to_path_buf());
    }

    let mut records = Vec::new();
    for source in sources {
        let text = std::fs::read_to_string(&source)
            .map_err(|e| DataError::Io { path: source.clone(), source: e })?;
        let stem = source.file_stem().map(|s| s.to_string_lossy().into_owned());
        let stem = stem.unwrap_or_else(|| "corpus".to_string());
        for (block_index, block) in split_blocks(&text).into_iter().enumerate() {
            if !block.lines().any(|l| l.trim_start().starts_with("K:")) {
                return Err(DataError::CorpusFormat {
                    block: block_index,
                    msg: "tune block has no K: header".to_string(),
                });
            }
            let id = format!("{stem}#{block_index}");
            let split = assign_split(&id, seed);
            records.push(DatasetRecord { id, payload: Payload::Text(block), split });
        }
    }
    Ok(LoadedDataset::new("folk_abc", records, transforms, 0))
}

fn split_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current = String::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.trim().is_empty() {
                blocks.push(std::mem::take(&mut current).trim_end().to_string());
            }
            current.clear();
        } else {
            current.push_str(line);
            current.push('\n');
        }
    }
    if !current.trim().is_empty() {
        blocks.push(current.trim_end().to_string());
    }
    blocks
}
