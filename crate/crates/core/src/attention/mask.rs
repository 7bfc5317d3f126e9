//! Chunkwise visibility for the streaming encoder.
//!
//! Frames are split into non-overlapping central chunks. A frame in chunk
//! `[start, end)` sees `[start - left, end + right)`, clipped to `[0, T)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marker for an unbounded extent.
pub const UNBOUNDED: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ChunkConfig {
    pub left: usize,
    pub central: usize,
    pub right: usize,
}

/// Half-open frame range `[start, end)` of one central chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig {
            left: 8,
            central: 8,
            right: 4,
        }
    }
}

impl ChunkConfig {
    pub fn new(left: usize, central: usize, right: usize) -> Result<Self> {
        let cfg = ChunkConfig { left, central, right };
        cfg.validate()?;
        Ok(cfg)
    }

    /// One chunk spanning the whole input: offline attention.
    pub fn full() -> Self {
        ChunkConfig {
            left: UNBOUNDED,
            central: UNBOUNDED,
            right: UNBOUNDED,
        }
    }

    pub fn is_full(&self) -> bool {
        self.central == UNBOUNDED
    }

    pub fn validate(&self) -> Result<()> {
        if self.left == 0 || self.central == 0 {
            return Err(Error::Config(format!(
                "chunk sizes need left >= 1 and central >= 1, got {self}"
            )));
        }
        Ok(())
    }

    pub fn chunk_of(&self, t: usize) -> Chunk {
        let index = t / self.central;
        let start = index * self.central;
        Chunk {
            index,
            start,
            end: start.saturating_add(self.central),
        }
    }

    pub fn chunks(&self, total: usize) -> Vec<Chunk> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < total {
            let c = self.chunk_of(start);
            out.push(Chunk {
                end: c.end.min(total),
                ..c
            });
            start = c.end;
        }
        out
    }

    /// Frames visible from any position of `chunk`.
    pub fn window(&self, chunk: Chunk, total: usize) -> (usize, usize) {
        (
            chunk.start.saturating_sub(self.left),
            chunk.end.saturating_add(self.right).min(total),
        )
    }

    /// Number of input frames that must have arrived before the encoder
    /// states of `chunk` can be computed.
    pub fn ready_at(&self, chunk: Chunk, total: usize) -> usize {
        self.window(chunk, total).1
    }
}

impl fmt::Display for ChunkConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == ChunkConfig::full() {
            return f.write_str("full");
        }
        let part = |v: usize| if v == UNBOUNDED { "inf".to_string() } else { v.to_string() };
        write!(f, "{},{},{}", part(self.left), part(self.central), part(self.right))
    }
}

impl FromStr for ChunkConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("full") {
            return Ok(ChunkConfig::full());
        }
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("expected `L,C,R` or `full`, got `{s}`")));
        }
        let parse = |p: &str| -> Result<usize> {
            if p.eq_ignore_ascii_case("inf") {
                Ok(UNBOUNDED)
            } else {
                p.parse()
                    .map_err(|_| Error::Config(format!("bad chunk size `{p}` in `{s}`")))
            }
        };
        ChunkConfig::new(parse(parts[0])?, parse(parts[1])?, parse(parts[2])?)
    }
}

impl TryFrom<String> for ChunkConfig {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ChunkConfig> for String {
    fn from(c: ChunkConfig) -> String {
        c.to_string()
    }
}

/// Row-major boolean visibility matrix; `true` means the key is visible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    visible: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, visible: Vec<bool>) -> Result<Self> {
        if visible.len() != rows * cols {
            return Err(Error::dim("mask", &[rows, cols], &[visible.len()]));
        }
        Ok(AttentionMask { rows, cols, visible })
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            visible: vec![true; rows * cols],
        }
    }

    /// Block-diagonal mask: each query sees only the keys of its own block.
    pub fn block_diagonal(sizes: &[usize]) -> Self {
        let n: usize = sizes.iter().sum();
        let mut visible = vec![false; n * n];
        let mut off = 0;
        for &s in sizes {
            for r in off..off + s {
                visible[r * n + off..r * n + off + s].fill(true);
            }
            off += s;
        }
        AttentionMask { rows: n, cols: n, visible }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.visible[r * self.cols + c]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.visible
    }
}

/// Chunkwise visibility over `total` encoder positions.
pub fn chunk_mask(total: usize, cfg: &ChunkConfig) -> AttentionMask {
    let mut visible = vec![false; total * total];
    for chunk in cfg.chunks(total) {
        let (lo, hi) = cfg.window(chunk, total);
        for t in chunk.start..chunk.end {
            visible[t * total + lo..t * total + hi].fill(true);
        }
    }
    AttentionMask {
        rows: total,
        cols: total,
        visible,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_config_sees_everything() {
        let m = chunk_mask(7, &ChunkConfig::full());
        assert!(m.as_slice().iter().all(|&v| v));
        let m = chunk_mask(7, &ChunkConfig::new(UNBOUNDED, 2, 7).unwrap());
        assert!(m.as_slice().iter().all(|&v| v));
    }

    #[test]
    fn hand_checked_window() {
        let cfg = ChunkConfig::new(2, 2, 1).unwrap();
        let m = chunk_mask(8, &cfg);
        let row: Vec<bool> = (0..8).map(|c| m.get(3, c)).collect();
        assert_eq!(row, [true, true, true, true, true, false, false, false]);
        // Chunk [0,2) has no left context to clip into.
        let row: Vec<bool> = (0..8).map(|c| m.get(0, c)).collect();
        assert_eq!(row, [true, true, true, false, false, false, false, false]);
    }

    #[test]
    fn large_chunks() {
        let cfg = ChunkConfig::new(64, 64, 32).unwrap();
        let m = chunk_mask(300, &cfg);
        // Frame 100 lives in chunk [64,128): sees [0,160).
        assert!(m.get(100, 0) && m.get(100, 159) && !m.get(100, 160));
        // Frame 200 lives in chunk [192,256): sees [128,288).
        assert!(!m.get(200, 127) && m.get(200, 128) && m.get(200, 287) && !m.get(200, 288));
    }

    #[test]
    fn empty_input_gives_empty_mask() {
        let m = chunk_mask(0, &ChunkConfig::default());
        assert_eq!((m.rows(), m.cols()), (0, 0));
    }

    #[test]
    fn ready_times() {
        let cfg = ChunkConfig::new(4, 4, 2).unwrap();
        let ready: Vec<usize> = cfg.chunks(16).into_iter().map(|c| cfg.ready_at(c, 16)).collect();
        assert_eq!(ready, [6, 10, 14, 16]);
    }

    #[test]
    fn parse_and_display() {
        let c: ChunkConfig = "8, 8, 4".parse().unwrap();
        assert_eq!(c, ChunkConfig::default());
        assert_eq!(c.to_string(), "8,8,4");
        assert_eq!("full".parse::<ChunkConfig>().unwrap(), ChunkConfig::full());
        assert!("0,8,4".parse::<ChunkConfig>().is_err());
        assert!("8,8".parse::<ChunkConfig>().is_err());
    }

    #[test]
    fn block_diagonal() {
        let m = AttentionMask::block_diagonal(&[2, 1]);
        assert!(m.get(0, 1) && m.get(1, 0) && !m.get(1, 2) && m.get(2, 2));
    }
}
