//! On-disk dataset layout.
//!
//! A dataset directory holds `manifest.json` plus, per subject, a frame
//! file and optionally a gold CSV. Frame files are little-endian:
//!
//! ```text
//! b"PBVID1"  fps: f64  frames: u32  height: u32  width: u32  rgb8[frames*height*width*3]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigproc::csv_err;
use crate::synth::SubjectProfile;
use crate::{FrameSequence, PulseTrace, SkinType};

pub const FRAME_MAGIC: &[u8; 6] = b"PBVID1";
const HEADER_LEN: usize = 6 + 8 + 4 + 4 + 4;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameHeader {
    pub fps: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

fn u32_of(v: usize, what: &str, path: &Path) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(path, format!("{what} {v} does not fit in u32")))
}

pub fn write_frames(path: &Path, frames: &FrameSequence) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(FRAME_MAGIC);
    header.extend_from_slice(&frames.fps().to_le_bytes());
    for (v, what) in [
        (frames.len(), "frame count"),
        (frames.height(), "height"),
        (frames.width(), "width"),
    ] {
        header.extend_from_slice(&u32_of(v, what, path)?.to_le_bytes());
    }
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    w.write_all(frames.raw()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_header(path: &Path, buf: &[u8]) -> Result<FrameHeader> {
    if buf.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated frame header"));
    }
    if &buf[..6] != FRAME_MAGIC {
        return Err(Error::format(path, "not a PBVID1 frame file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as usize;
    let h = FrameHeader {
        fps: f64::from_le_bytes(buf[6..14].try_into().unwrap()),
        frames: u32_at(14),
        height: u32_at(18),
        width: u32_at(22),
    };
    if !(h.fps > 0.0 && h.fps.is_finite()) || h.frames == 0 || h.height == 0 || h.width == 0 {
        return Err(Error::format(path, format!("invalid frame header {h:?}")));
    }
    Ok(h)
}

pub fn read_frame_header(path: &Path) -> Result<FrameHeader> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        let n = f.read(&mut buf[got..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        got += n;
    }
    let h = parse_header(path, &buf[..got])?;
    let len = f.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
    let expected = HEADER_LEN + h.frames * h.height * h.width * 3;
    if len != expected {
        return Err(Error::format(
            path,
            format!("file is {len} bytes, header implies {expected}"),
        ));
    }
    Ok(h)
}

pub fn read_frames(path: &Path) -> Result<FrameSequence> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let h = parse_header(path, &buf)?;
    let body = buf.split_off(HEADER_LEN);
    if body.len() != h.frames * h.height * h.width * 3 {
        return Err(Error::format(
            path,
            format!(
                "expected {} frames of {}x{}, payload is {} bytes",
                h.frames,
                h.height,
                h.width,
                body.len()
            ),
        ));
    }
    FrameSequence::new(h.fps, h.height, h.width, body).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct GoldRow {
    frame_index: usize,
    value: f64,
}

pub fn write_gold_csv(path: &Path, gold: &PulseTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for (frame_index, &value) in gold.samples.iter().enumerate() {
        w.serialize(GoldRow { frame_index, value })
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rows must be numbered 0, 1, 2, ... in order.
pub fn read_gold_csv(path: &Path, fps: f64) -> Result<PulseTrace> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut samples = Vec::new();
    for row in r.deserialize::<GoldRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        if row.frame_index != samples.len() {
            return Err(Error::format(
                path,
                format!("expected frame_index {}, found {}", samples.len(), row.frame_index),
            ));
        }
        samples.push(row.value);
    }
    Ok(PulseTrace::new(fps, samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    /// Relative to the dataset directory.
    pub frames: PathBuf,
    pub gold: Option<PathBuf>,
    pub skin_type: Option<SkinType>,
    #[serde(default)]
    pub profile: Option<SubjectProfile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub fps: f64,
    pub height: usize,
    pub width: usize,
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }
}

/// A validated dataset. Frames stay on disk until asked for.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    frame_counts: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Subject<'a> {
    pub entry: &'a SubjectEntry,
    pub frame_count: usize,
    root: &'a Path,
    fps: f64,
}

impl Subject<'_> {
    pub fn id(&self) -> &str {
        &self.entry.id
    }

    pub fn has_gold(&self) -> bool {
        self.entry.gold.is_some()
    }

    pub fn frames(&self) -> Result<FrameSequence> {
        let path = self.root.join(&self.entry.frames);
        read_frames(&path).map_err(|e| subject_err(&self.entry.id, e))
    }

    pub fn gold(&self) -> Result<Option<PulseTrace>> {
        match &self.entry.gold {
            None => Ok(None),
            Some(rel) => {
                let path = self.root.join(rel);
                read_gold_csv(&path, self.fps)
                    .map(Some)
                    .map_err(|e| subject_err(&self.entry.id, e))
            }
        }
    }
}

fn subject_err(id: &str, e: Error) -> Error {
    match e {
        Error::Io { path, source } => Error::Io {
            path: PathBuf::from(format!("subject {id}: {}", path.display())),
            source,
        },
        Error::Format { path, msg } => Error::format(format!("subject {id}: {}", path.display()), msg),
        other => other,
    }
}

impl Dataset {
    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    pub fn fps(&self) -> f64 {
        self.manifest.fps
    }

    pub fn len(&self) -> usize {
        self.manifest.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.subjects.is_empty()
    }

    pub fn subjects(&self) -> impl Iterator<Item = Subject<'_>> {
        self.manifest
            .subjects
            .iter()
            .zip(&self.frame_counts)
            .map(|(entry, &frame_count)| Subject {
                entry,
                frame_count,
                root: &self.root,
                fps: self.manifest.fps,
            })
    }

    pub fn subject(&self, id: &str) -> Option<Subject<'_>> {
        self.subjects().find(|s| s.id() == id)
    }

    pub fn subject_ids(&self) -> Vec<&str> {
        self.manifest.subjects.iter().map(|s| s.id.as_str()).collect()
    }
}

/// Read and validate a dataset directory: every frame header and gold CSV
/// is checked, but frame payloads are not loaded.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(dir)?;
    let mut seen = std::collections::BTreeSet::new();
    let mut frame_counts = Vec::with_capacity(manifest.subjects.len());
    for s in &manifest.subjects {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::format(
                dir.join(MANIFEST_FILE),
                format!("duplicate subject id `{}`", s.id),
            ));
        }
        let fpath = dir.join(&s.frames);
        let h = read_frame_header(&fpath).map_err(|e| subject_err(&s.id, e))?;
        if h.fps != manifest.fps {
            return Err(Error::format(
                format!("subject {}: {}", s.id, fpath.display()),
                format!("fps {} differs from dataset fps {}", h.fps, manifest.fps),
            ));
        }
        if h.height != manifest.height || h.width != manifest.width {
            return Err(Error::format(
                format!("subject {}: {}", s.id, fpath.display()),
                format!(
                    "frames are {}x{}, manifest says {}x{}",
                    h.height, h.width, manifest.height, manifest.width
                ),
            ));
        }
        if let Some(rel) = &s.gold {
            let gpath = dir.join(rel);
            let gold = read_gold_csv(&gpath, manifest.fps).map_err(|e| subject_err(&s.id, e))?;
            if gold.len() != h.frames {
                return Err(Error::format(
                    format!("subject {}: {}", s.id, gpath.display()),
                    format!("gold has {} samples, expected {}", gold.len(), h.frames),
                ));
            }
        }
        frame_counts.push(h.frames);
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
        frame_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(frames: usize) -> FrameSequence {
        FrameSequence::from_fn(30.0, frames, 4, 5, |t, y, x| {
            [(t as f32 * 0.01) % 1.0, y as f32 / 4.0, x as f32 / 5.0]
        })
        .unwrap()
    }

    fn write_ds(dir: &Path, gold_len: usize) {
        write_frames(&dir.join("s0.pbvid"), &tiny(12)).unwrap();
        write_gold_csv(
            &dir.join("s0.csv"),
            &PulseTrace::new(30.0, (0..gold_len).map(|i| i as f64 * 0.5).collect()),
        )
        .unwrap();
        DatasetManifest {
            name: "t".into(),
            fps: 30.0,
            height: 4,
            width: 5,
            subjects: vec![SubjectEntry {
                id: "s0".into(),
                frames: "s0.pbvid".into(),
                gold: Some("s0.csv".into()),
                skin_type: Some(SkinType::III),
                profile: None,
            }],
        }
        .write(dir)
        .unwrap();
    }

    #[test]
    fn frames_roundtrip_and_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pbvid");
        let f = tiny(7);
        write_frames(&p, &f).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..6], b"PBVID1");
        assert_eq!(f64::from_le_bytes(bytes[6..14].try_into().unwrap()), 30.0);
        assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 7);
        assert_eq!(u32::from_le_bytes(bytes[18..22].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[22..26].try_into().unwrap()), 5);
        assert_eq!(read_frames(&p).unwrap(), f);
    }

    #[test]
    fn truncated_frame_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pbvid");
        write_frames(&p, &tiny(3)).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, bytes).unwrap();
        assert!(read_frames(&p).is_err());
        assert!(read_frame_header(&p).is_err());
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        write_ds(dir.path(), 12);
        let ds = load_dataset(dir.path()).unwrap();
        let s = ds.subject("s0").unwrap();
        assert_eq!(s.frame_count, 12);
        assert_eq!(s.frames().unwrap(), tiny(12));
        assert_eq!(s.gold().unwrap().unwrap().samples[3], 1.5);
    }

    #[test]
    fn missing_file_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        write_ds(dir.path(), 12);
        std::fs::remove_file(dir.path().join("s0.pbvid")).unwrap();
        let msg = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("s0.pbvid") && msg.contains("subject s0"), "{msg}");
    }

    #[test]
    fn gold_length_mismatch_reports_counts() {
        let dir = tempfile::tempdir().unwrap();
        write_ds(dir.path(), 10);
        let msg = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("10") && msg.contains("12"), "{msg}");
    }
}
