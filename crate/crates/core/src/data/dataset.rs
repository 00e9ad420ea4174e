//! On-disk sequence layout.
//!
//! ```text
//! root/
//!   <sequence>/
//!     groundtruth.txt     one line per frame: frame_index cx cy w h [mask_path]
//!     img/000000.png      frame `frame_index`, zero padded to six digits
//!     masks/000000.png    optional single-channel masks (paths are relative)
//! ```
//!
//! Sequences are read lazily in directory-name order. A sequence with any
//! malformed line is skipped and counted as one warning.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::data::{FrameRef, MaskRef, SequenceRecord};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const ANNOTATION_FILE: &str = "groundtruth.txt";

pub fn frame_path(seq_dir: &Path, index: usize) -> PathBuf {
    seq_dir.join("img").join(format!("{index:06}.png"))
}

pub struct DatasetStream {
    dirs: std::vec::IntoIter<PathBuf>,
    warnings: usize,
}

impl DatasetStream {
    pub fn warnings(&self) -> usize {
        self.warnings
    }
}

impl Iterator for DatasetStream {
    type Item = Result<SequenceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let dir = self.dirs.next()?;
            match parse_sequence(&dir) {
                Ok(Some(rec)) => return Some(Ok(rec)),
                Ok(None) => {
                    self.warnings += 1;
                    continue;
                }
                Err(e) => return Some(Err(e)),
            }
        }
    }
}

/// Open a dataset root. Each subdirectory is one sequence.
pub fn load_dataset(root: &Path) -> Result<DatasetStream> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(DatasetStream {
        dirs: dirs.into_iter(),
        warnings: 0,
    })
}

fn parse_line(line: &str) -> Option<(usize, BBox, Option<String>)> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 5 && toks.len() != 6 {
        return None;
    }
    let idx = toks[0].parse().ok()?;
    let mut v = [0.0; 4];
    for (k, t) in toks[1..5].iter().enumerate() {
        v[k] = t.parse().ok()?;
    }
    let b = BBox::new(v[0], v[1], v[2], v[3]);
    b.is_valid().then(|| (idx, b, toks.get(5).map(|s| s.to_string())))
}

/// `Ok(None)` means the sequence is malformed and should be skipped.
fn parse_sequence(dir: &Path) -> Result<Option<SequenceRecord>> {
    let ann = dir.join(ANNOTATION_FILE);
    if !ann.is_file() {
        return Err(Error::Dataset(format!("missing annotation file {}", ann.display())));
    }
    let text = fs::read_to_string(&ann)?;
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut rec = SequenceRecord {
        id,
        frames: Vec::new(),
        boxes: Vec::new(),
        masks: Vec::new(),
        visible: Vec::new(),
    };
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((idx, b, mask)) = parse_line(line) else {
            log::warn!("{}:{}: malformed annotation, skipping sequence", ann.display(), n + 1);
            return Ok(None);
        };
        rec.frames.push(FrameRef::Path(frame_path(dir, idx)));
        rec.boxes.push(b);
        rec.masks.push(mask.map(|m| MaskRef::Path(dir.join(m))));
        rec.visible.push(true);
    }
    if rec.frames.is_empty() {
        log::warn!("{}: no annotated frames, skipping sequence", ann.display());
        return Ok(None);
    }
    Ok(Some(rec))
}

/// Write a sequence in the layout read by [`load_dataset`].
pub fn write_sequence(root: &Path, rec: &SequenceRecord) -> Result<PathBuf> {
    let dir = root.join(&rec.id);
    fs::create_dir_all(dir.join("img"))?;
    let mut lines = String::new();
    for (i, (f, b)) in rec.frames.iter().zip(&rec.boxes).enumerate() {
        f.load()?.save(frame_path(&dir, i))?;
        lines.push_str(&format!("{i} {} {} {} {}", b.cx, b.cy, b.w, b.h));
        if let Some(m) = &rec.masks[i] {
            fs::create_dir_all(dir.join("masks"))?;
            let rel = format!("masks/{i:06}.png");
            m.load()?.to_image().save(dir.join(&rel))?;
            lines.push(' ');
            lines.push_str(&rel);
        }
        lines.push('\n');
    }
    fs::write(dir.join(ANNOTATION_FILE), lines)?;
    Ok(dir)
}

/// Read every sequence, returning records and the warning count.
pub fn load_all(root: &Path) -> Result<(Vec<SequenceRecord>, usize)> {
    let mut stream = load_dataset(root)?;
    let mut out = Vec::new();
    for r in stream.by_ref() {
        out.push(r?);
    }
    Ok((out, stream.warnings()))
}

/// A sequence built from in-memory frames and boxes.
pub fn in_memory(id: &str, frames: Vec<image::RgbImage>, boxes: Vec<BBox>) -> SequenceRecord {
    let n = frames.len();
    SequenceRecord {
        id: id.to_string(),
        frames: frames.into_iter().map(|f| FrameRef::Memory(Arc::new(f))).collect(),
        boxes,
        masks: vec![None; n],
        visible: vec![true; n],
    }
}
