//! MIDI corpus loader: a directory tree of `.mid` files, discovered
//! recursively in lexicographic order. Unreadable files are skipped with a
//! warning rather than failing the load.

use std::path::Path;

use super::{assign_split, DataError, DatasetRecord, LoadedDataset, Payload, Transform};
use crate::tokenize::midi::read_midi;

pub fn load_midi_dataset(
    root: &Path,
    transforms: Vec<Box<dyn Transform>>,
    seed: u64,
) -> Result<LoadedDataset, DataError> {
    if !root.is_dir() {
        return Err(DataError::Io {
            path: root.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        });
    }
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| DataError::Io {
            path: root.to_path_buf(),
            source: e
                .into_io_error()
                .unwrap_or_else(|| std::io::Error::new(std::io::ErrorKind::Other, "walk failed")),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        if !path.extension().is_some_and(|e| e.eq_ignore_ascii_case("mid")) {
            continue;
        }
        match read_midi(path) {
            Ok(_) => {
                let id = path
                    .strip_prefix(root)
                    .unwrap_or(path)
                    .to_string_lossy()
                    .into_owned();
                let split = assign_split(&id, seed);
                records.push(DatasetRecord {
                    id,
                    payload: Payload::MidiFile(path.to_path_buf()),
                    split,
                });
            }
            Err(err) => {
                eprintln!("warning: skipping unreadable MIDI file {}: {err}", path.display());
                skipped += 1;
            }
        }
    }
    Ok(LoadedDataset::new("midi_dir", records, transforms, skipped))
}
