//! Split files and three-frame training samples.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::tensor::Tensor;

use super::io::{find_frame, load_image, read_intrinsics, resize_intrinsics, INTRINSICS_FILE};

/// One line of a split file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitEntry {
    pub sequence: String,
    pub frame: usize,
}

/// Parses `<sequence> <frame_index>` lines. Blank lines and lines starting
/// with `#` are ignored.
pub fn parse_split(path: &Path) -> Result<Vec<SplitEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_split_text(&text, path)
}

pub fn parse_split_text(text: &str, path: &Path) -> Result<Vec<SplitEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_error = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [sequence, frame] = fields[..] else {
            return Err(parse_error(format!(
                "expected `<sequence> <frame_index>`, found {} fields",
                fields.len()
            )));
        };
        let frame = frame
            .parse()
            .map_err(|_| parse_error(format!("frame index `{frame}` is not a non-negative integer")))?;
        entries.push(SplitEntry {
            sequence: sequence.to_string(),
            frame,
        });
    }
    Ok(entries)
}

/// Frames `t − 1`, `t`, `t + 1` sharing one set of intrinsics. Each frame is
/// `[1, 3, h, w]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTriplet {
    pub frames: [Tensor; 3],
    pub intrinsics: Intrinsics,
    pub sequence: String,
    pub index: usize,
}

impl TrainingTriplet {
    pub fn previous(&self) -> &Tensor {
        &self.frames[0]
    }

    pub fn target(&self) -> &Tensor {
        &self.frames[1]
    }

    pub fn next(&self) -> &Tensor {
        &self.frames[2]
    }

    /// Stable identifier used in logs and errors.
    pub fn id(&self) -> String {
        format!("{}/{}", self.sequence, self.index)
    }
}

/// File locations of one triplet.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletFiles {
    pub sequence: String,
    pub index: usize,
    pub frames: [PathBuf; 3],
    pub intrinsics: PathBuf,
}

impl TripletFiles {
    /// Loads the frames, resized to `size` when given, with intrinsics
    /// adjusted to match.
    pub fn load(&self, size: Option<(usize, usize)>) -> Result<TrainingTriplet> {
        let k = read_intrinsics(&self.intrinsics)?;
        let frames = [
            load_image(&self.frames[0], size)?,
            load_image(&self.frames[1], size)?,
            load_image(&self.frames[2], size)?,
        ];
        let [_, _, h, w] = frames[1].dims();
        if frames.iter().any(|f| f.dims() != frames[1].dims()) {
            return Err(Error::invalid(format!(
                "frames of {}/{} differ in size",
                self.sequence, self.index
            )));
        }
        let intrinsics = if (k.height, k.width) == (h, w) {
            k
        } else {
            resize_intrinsics(&k, w, h)
        };
        Ok(TrainingTriplet {
            frames,
            intrinsics,
            sequence: self.sequence.clone(),
            index: self.index,
        })
    }
}

/// Resolves the split entries to triplets in split order. Entries without
/// both neighbours on disk are skipped with a warning.
pub fn resolve_triplets(root: &Path, split: &Path) -> Result<Vec<TripletFiles>> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data root is not a directory"),
        ));
    }
    let mut out = Vec::new();
    for entry in parse_split(split)? {
        let dir = root.join(&entry.sequence);
        let t = entry.frame;
        let neighbours = t
            .checked_sub(1)
            .map(|p| [find_frame(&dir, p), find_frame(&dir, t), find_frame(&dir, t + 1)]);
        match neighbours {
            Some([Some(a), Some(b), Some(c)]) => out.push(TripletFiles {
                sequence: entry.sequence.clone(),
                index: t,
                frames: [a, b, c],
                intrinsics: dir.join(INTRINSICS_FILE),
            }),
            _ => log::warn!(
                "skipping {}/{}: frame or temporal neighbour missing",
                entry.sequence,
                t
            ),
        }
    }
    Ok(out)
}

/// Loads every triplet of the split.
pub fn load_triplets(root: &Path, split: &Path, size: Option<(usize, usize)>) -> Result<Vec<TrainingTriplet>> {
    resolve_triplets(root, split)?
        .iter()
        .map(|f| f.load(size))
        .collect()
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64
}

/// Drops triplets whose target barely differs from a neighbour: the mean
/// absolute difference to either neighbour is below `threshold`.
pub fn filter_static(triplets: Vec<TrainingTriplet>, threshold: f64) -> Vec<TrainingTriplet> {
    triplets
        .into_iter()
        .filter(|t| {
            let keep = mean_abs_diff(t.target(), t.previous()) >= threshold
                && mean_abs_diff(t.target(), t.next()) >= threshold;
            if !keep {
                log::info!("dropping static triplet {}", t.id());
            }
            keep
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::io::{frame_file_name, save_image, write_intrinsics};
    use crate::tensor::Shape;

    fn fixture(frames: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let seq = dir.path().join("seq_a");
        for i in 0..frames {
            let img = Tensor::from_fn(Shape::new(1, 3, 8, 8), |_, c, y, x| ((x + y + c + i) % 7) as f64 / 7.0);
            save_image(&seq.join(frame_file_name(i)), &img).unwrap();
        }
        let k = Intrinsics::new(8.0, 8.0, 3.5, 3.5, 8, 8).unwrap();
        write_intrinsics(&seq.join(INTRINSICS_FILE), &k).unwrap();
        dir
    }

    fn write_split(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("split.txt");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn five_frames_give_three_triplets() {
        let dir = fixture(5);
        let split = write_split(dir.path(), "seq_a 0\nseq_a 1\nseq_a 2\nseq_a 3\nseq_a 4\n");
        let t = load_triplets(dir.path(), &split, None).unwrap();
        assert_eq!(t.iter().map(|t| t.index).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(t[0].intrinsics.fx, 8.0);
    }

    #[test]
    fn empty_split_gives_no_triplets() {
        let dir = fixture(3);
        let split = write_split(dir.path(), "");
        assert!(load_triplets(dir.path(), &split, None).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_is_named() {
        let dir = fixture(3);
        let split = write_split(dir.path(), "seq_a 1\n\nseq_a one\n");
        match load_triplets(dir.path(), &split, None).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_root_is_an_io_error() {
        let dir = fixture(3);
        let split = write_split(dir.path(), "seq_a 1\n");
        let err = load_triplets(&dir.path().join("nope"), &split, None).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn resizing_adjusts_intrinsics() {
        let dir = fixture(3);
        let split = write_split(dir.path(), "seq_a 1\n");
        let t = load_triplets(dir.path(), &split, Some((4, 4))).unwrap();
        assert_eq!(t[0].target().dims(), [1, 3, 4, 4]);
        assert_eq!(t[0].intrinsics.fx, 4.0);
        assert_eq!(t[0].intrinsics.cx, 1.5);
    }

    #[test]
    fn static_triplets_are_dropped() {
        let still = Tensor::full(Shape::new(1, 3, 2, 2), 0.5);
        let moved = Tensor::full(Shape::new(1, 3, 2, 2), 0.7);
        let k = Intrinsics::new(2.0, 2.0, 0.5, 0.5, 2, 2).unwrap();
        let make = |a: &Tensor, i| TrainingTriplet {
            frames: [a.clone(), still.clone(), moved.clone()],
            intrinsics: k,
            sequence: "s".into(),
            index: i,
        };
        let kept = filter_static(vec![make(&still, 1), make(&moved, 2)], 0.01);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].index, 2);
    }
}
