//! Hierarchical base-32 cell codes.
//!
//! A point is discretized by alternately bisecting the longitude and latitude
//! ranges (longitude first) and packing the resulting bits five at a time
//! into the alphabet below. Because every extra character only refines the
//! previous bisections, the code of a cell at precision `a` is the prefix of
//! the code at any finer precision `b > a`: a code's prefixes are its
//! ancestors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ALPHABET: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";
pub const MAX_PRECISION: usize = 12;
/// Roughly 1.2 km x 0.6 km, close in area to an H3 resolution-8 hexagon.
pub const DEFAULT_PRECISION: usize = 6;

const INVALID: u8 = 0xff;

const fn build_decode_table() -> [u8; 128] {
    let mut table = [INVALID; 128];
    let mut i = 0;
    while i < 32 {
        table[ALPHABET[i] as usize] = i as u8;
        i += 1;
    }
    table
}

static DECODE: [u8; 128] = build_decode_table();

/// Index of `c` in [`ALPHABET`], if any.
pub fn alphabet_index(c: char) -> Option<u8> {
    let b = u32::from(c);
    if b >= 128 {
        return None;
    }
    match DECODE[b as usize] {
        INVALID => None,
        v => Some(v),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::input(format!("non-finite coordinate ({lat}, {lon})")));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::input(format!("latitude {lat} outside [-90, 90]")));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(Error::input(format!("longitude {lon} outside [-180, 180]")));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Exact extent of a cell in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BBox {
    pub const WORLD: BBox = BBox {
        lat_min: -90.0,
        lat_max: 90.0,
        lon_min: -180.0,
        lon_max: 180.0,
    };

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lat: (self.lat_min + self.lat_max) / 2.0,
            lon: (self.lon_min + self.lon_max) / 2.0,
        }
    }

    /// Closed containment test.
    pub fn contains(&self, p: &GeoPoint) -> bool {
        (self.lat_min..=self.lat_max).contains(&p.lat) && (self.lon_min..=self.lon_max).contains(&p.lon)
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        self.lat_min <= other.lat_min
            && other.lat_max <= self.lat_max
            && self.lon_min <= other.lon_min
            && other.lon_max <= self.lon_max
    }
}

/// A validated cell code. Its precision is its length in characters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CellId(String);

impl CellId {
    pub fn parse(code: &str) -> Result<Self> {
        if code.is_empty() {
            return Err(Error::input("empty cell code"));
        }
        if code.len() > MAX_PRECISION {
            return Err(Error::input(format!(
                "cell code {code:?} longer than {MAX_PRECISION} characters"
            )));
        }
        if let Some(bad) = code.chars().find(|&c| alphabet_index(c).is_none()) {
            return Err(Error::input(format!(
                "character {bad:?} of cell code {code:?} is not in the cell alphabet"
            )));
        }
        Ok(Self(code.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn precision(&self) -> usize {
        self.0.len()
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for CellId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

impl TryFrom<String> for CellId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)?;
        Ok(Self(s))
    }
}

impl From<CellId> for String {
    fn from(c: CellId) -> String {
        c.0
    }
}

impl AsRef<str> for CellId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Point-to-cell discretization scheme. Only prefix-hierarchical codecs fit
/// the sub-hash tokenizer.
pub trait CellCodec {
    fn encode(&self, p: &GeoPoint, precision: usize) -> Result<CellId>;
    fn decode(&self, cell: &CellId) -> BBox;
}

/// The interleaved-bit base-32 grid.
#[derive(Debug, Clone, Copy, Default)]
pub struct Base32Grid;

impl CellCodec for Base32Grid {
    fn encode(&self, p: &GeoPoint, precision: usize) -> Result<CellId> {
        encode_cell(p, precision)
    }

    fn decode(&self, cell: &CellId) -> BBox {
        decode_cell(cell)
    }
}

fn check_precision(precision: usize) -> Result<()> {
    if precision == 0 || precision > MAX_PRECISION {
        return Err(Error::input(format!(
            "precision {precision} outside 1..={MAX_PRECISION}"
        )));
    }
    Ok(())
}

pub fn encode_cell(p: &GeoPoint, precision: usize) -> Result<CellId> {
    check_precision(precision)?;
    let lat = p.lat;
    // one code per physical meridian
    let lon = if p.lon == 180.0 { -180.0 } else { p.lon };

    let (mut lat_lo, mut lat_hi) = (-90.0f64, 90.0f64);
    let (mut lon_lo, mut lon_hi) = (-180.0f64, 180.0f64);
    let mut code = String::with_capacity(precision);
    let mut even = true;
    for _ in 0..precision {
        let mut idx = 0usize;
        for _ in 0..5 {
            idx <<= 1;
            if even {
                let mid = (lon_lo + lon_hi) / 2.0;
                if lon >= mid {
                    idx |= 1;
                    lon_lo = mid;
                } else {
                    lon_hi = mid;
                }
            } else {
                let mid = (lat_lo + lat_hi) / 2.0;
                if lat >= mid {
                    idx |= 1;
                    lat_lo = mid;
                } else {
                    lat_hi = mid;
                }
            }
            even = !even;
        }
        code.push(ALPHABET[idx] as char);
    }
    Ok(CellId(code))
}

pub fn decode_cell(cell: &CellId) -> BBox {
    let mut b = BBox::WORLD;
    let mut even = true;
    for c in cell.0.chars() {
        // validated at construction
        let idx = alphabet_index(c).expect("CellId holds only alphabet characters");
        for shift in (0..5).rev() {
            let bit = (idx >> shift) & 1 == 1;
            if even {
                let mid = (b.lon_min + b.lon_max) / 2.0;
                if bit {
                    b.lon_min = mid;
                } else {
                    b.lon_max = mid;
                }
            } else {
                let mid = (b.lat_min + b.lat_max) / 2.0;
                if bit {
                    b.lat_min = mid;
                } else {
                    b.lat_max = mid;
                }
            }
            even = !even;
        }
    }
    b
}

/// Ancestor of `cell` at a coarser (or equal) precision.
pub fn parent(cell: &CellId, precision: usize) -> Result<CellId> {
    if precision == 0 || precision > cell.precision() {
        return Err(Error::input(format!(
            "cannot take precision-{precision} parent of {cell} (precision {})",
            cell.precision()
        )));
    }
    Ok(CellId(cell.0[..precision].to_owned()))
}
