//! Per-frame feature sequences and their on-disk formats.
//!
//! Binary layout (little endian):
//!
//! ```text
//! magic  b"RFEAT\0\0\x01"   8 bytes
//! T      u32
//! D      u32
//! fps    f64
//! data   T*D f64, row-major
//! ```
//!
//! Text layout: a header line `T D fps` followed by `T` lines of `D`
//! whitespace-separated numbers. Lines starting with `#` are ignored.

use std::io::{self, BufRead, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

pub const MIN_FRAMES: usize = 4;
pub const MAGIC: &[u8; 8] = b"RFEAT\0\0\x01";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Vec<Vec<f64>>,
    fps: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("need at least {MIN_FRAMES} frames, got {0}")]
    TooShort(usize),
    #[error("frames must have at least one dimension")]
    NoDimensions,
    #[error("frame {frame} has {got} dimensions, expected {expected}")]
    RaggedFrame { frame: usize, got: usize, expected: usize },
    #[error("frame {frame}, dim {dim} is not finite")]
    NonFinite { frame: usize, dim: usize },
    #[error("fps must be positive and finite")]
    BadFps,
    #[error("malformed feature file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FeatureSequence {
    pub fn new(frames: Vec<Vec<f64>>, fps: f64) -> Result<Self, FeatureError> {
        if frames.len() < MIN_FRAMES {
            return Err(FeatureError::TooShort(frames.len()));
        }
        let dim = frames[0].len();
        if dim == 0 {
            return Err(FeatureError::NoDimensions);
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(FeatureError::BadFps);
        }
        for (t, row) in frames.iter().enumerate() {
            if row.len() != dim {
                return Err(FeatureError::RaggedFrame {
                    frame: t,
                    got: row.len(),
                    expected: dim,
                });
            }
            if let Some(d) = row.iter().position(|x| !x.is_finite()) {
                return Err(FeatureError::NonFinite { frame: t, dim: d });
            }
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].len()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn into_frames(self) -> Vec<Vec<f64>> {
        self.frames
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(self.len() as u32)?;
        w.write_u32::<LittleEndian>(self.dim() as u32)?;
        w.write_f64::<LittleEndian>(self.fps)?;
        for row in &self.frames {
            for &x in row {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{} {} {}", self.len(), self.dim(), self.fps)?;
        for row in &self.frames {
            let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    /// Reads either format, detected from the leading magic bytes.
    pub fn read<R: Read>(mut r: R) -> Result<Self, FeatureError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.starts_with(MAGIC) {
            Self::read_binary(&bytes[MAGIC.len()..])
        } else {
            Self::read_text(&bytes[..])
        }
    }

    fn read_binary(mut body: &[u8]) -> Result<Self, FeatureError> {
        let t = body.read_u32::<LittleEndian>()? as usize;
        let d = body.read_u32::<LittleEndian>()? as usize;
        let fps = body.read_f64::<LittleEndian>()?;
        let expected = t.checked_mul(d).and_then(|n| n.checked_mul(8));
        if expected != Some(body.len()) {
            return Err(FeatureError::Format(format!(
                "header says {t}x{d} but payload has {} bytes",
                body.len()
            )));
        }
        let mut frames = Vec::with_capacity(t);
        for _ in 0..t {
            let mut row = Vec::with_capacity(d);
            for _ in 0..d {
                row.push(body.read_f64::<LittleEndian>()?);
            }
            frames.push(row);
        }
        Self::new(frames, fps)
    }

    fn read_text(body: &[u8]) -> Result<Self, FeatureError> {
        let mut lines = body
            .lines()
            .map_while(Result::ok)
            .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| FeatureError::Format("missing header".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(FeatureError::Format(format!("header `{header}` is not `T D fps`")));
        }
        let parse_err = |what: &str| FeatureError::Format(format!("bad header field {what}"));
        let t: usize = parts[0].parse().map_err(|_| parse_err("T"))?;
        let d: usize = parts[1].parse().map_err(|_| parse_err("D"))?;
        let fps: f64 = parts[2].parse().map_err(|_| parse_err("fps"))?;

        let mut frames = Vec::with_capacity(t);
        for (i, line) in lines.enumerate() {
            let row = line
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| FeatureError::Format(format!("row {i}: {e}")))?;
            if row.len() != d {
                return Err(FeatureError::RaggedFrame {
                    frame: i,
                    got: row.len(),
                    expected: d,
                });
            }
            frames.push(row);
        }
        if frames.len() != t {
            return Err(FeatureError::Format(format!(
                "header says {t} frames, found {}",
                frames.len()
            )));
        }
        Self::new(frames, fps)
    }
}
