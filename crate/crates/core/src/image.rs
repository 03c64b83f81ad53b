//! Row-major image grids and the PGM / raw encodings used on disk and over
//! the wire.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

/// Depth in meters from the camera plane.
pub type DepthImage = Grid<f32>;
/// Object id per pixel; [`BACKGROUND_ID`] for shelf and misses.
pub type InstanceImage = Grid<u8>;
/// Binary mask with values in {0, 1}.
pub type MaskImage = Grid<u8>;
pub type LabelImage = Grid<Class>;

pub const BACKGROUND_ID: u8 = 255;

/// Per-pixel ground-truth classes; the discriminant is the on-disk code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[repr(u8)]
pub enum Class {
    Extract = 0,
    Support = 1,
    Collapse = 2,
    #[default]
    Background = 3,
}

impl Class {
    pub const ALL: [Class; 4] = [Class::Extract, Class::Support, Class::Collapse, Class::Background];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length");
        Self { width, height, data }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: T) {
        let i = self.index(row, col);
        self.data[i] = v;
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U, F: FnMut(&T) -> U>(&self, f: F) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Mirror about the vertical axis (left-right flip).
    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev().cloned());
        }
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn count<F: Fn(&T) -> bool>(&self, pred: F) -> usize {
        self.data.iter().filter(|v| pred(v)).count()
    }

    /// `(row, col)` of every pixel satisfying `pred`, in raster order.
    pub fn positions<F: Fn(&T) -> bool>(&self, pred: F) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, v)| pred(v))
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }
}

impl Grid<u8> {
    /// 8-bit binary PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Mask pixels scaled to 0/255 for viewing.
    pub fn mask_to_pgm(&self) -> Vec<u8> {
        self.map(|&v| if v != 0 { 255 } else { 0 }).to_pgm()
    }
}

impl Grid<Class> {
    pub fn to_codes(&self) -> Grid<u8> {
        self.map(|c| c.code())
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        self.to_codes().to_pgm()
    }

    pub fn class_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for c in &self.data {
            counts[c.code() as usize] += 1;
        }
        counts
    }
}

impl Grid<f32> {
    /// 16-bit PGM of depth in millimeters (rounded, clamped to 0..=65535),
    /// samples big-endian as the format requires.
    pub fn depth_to_pgm16(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for &d in &self.data {
            let mm = (f64::from(d) * 1000.0).round().clamp(0.0, 65535.0) as u16;
            out.extend_from_slice(&mm.to_be_bytes());
        }
        out
    }

    /// Raw little-endian f32 grid, row-major, no header.
    pub fn to_raw_le(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_raw_le(width: usize, height: usize, bytes: &[u8]) -> Option<Self> {
        if bytes.len() != width * height * 4 {
            return None;
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Some(Self { width, height, data })
    }
}

/// Parses an 8-bit P5 PGM.
pub fn parse_pgm8(bytes: &[u8]) -> Option<Grid<u8>> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let width: usize = fields[1].parse().ok()?;
    let height: usize = fields[2].parse().ok()?;
    let data = bytes.get(pos + 1..pos + 1 + width * height)?.to_vec();
    Some(Grid { width, height, data })
}
