// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// A `(layer, head)` pair, both 0-based. Orders layer-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: u32,
    pub head: u32,
}

impl HeadId {
    pub const fn new(layer: u32, head: u32) -> Self {
        Self { layer, head }
    }

    /// Position in a layer-major flattening with `num_heads` heads per layer.
    pub fn flat(&self, num_heads: u32) -> usize {
        self.layer as usize * num_heads as usize + self.head as usize
    }

    pub fn from_flat(index: usize, num_heads: u32) -> Self {
        Self {
            layer: (index / num_heads as usize) as u32,
            head: (index % num_heads as usize) as u32,
        }
    }

    pub fn within(&self, num_layers: u32, num_heads: u32) -> bool {
        self.layer < num_layers && self.head < num_heads
    }
}

/// Every head of an `num_layers x num_heads` model, layer-major.
pub fn all_heads(num_layers: u32, num_heads: u32) -> impl Iterator<Item = HeadId> {
    (0..num_layers).flat_map(move |l| (0..num_heads).map(move |h| HeadId::new(l, h)))
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = String;

    /// Parses `L3H8` (case-insensitive) or `3:8`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("expected a head like L3H8 or 3:8, got {s:?}");
        let (l, h) = if let Some((l, h)) = s.split_once(':') {
            (l, h)
        } else {
            let upper = s.to_ascii_uppercase();
            let rest = upper.strip_prefix('L').ok_or_else(bad)?;
            let (l, h) = rest.split_once('H').ok_or_else(bad)?;
            return Ok(HeadId::new(
                l.parse().map_err(|_| bad())?,
                h.parse().map_err(|_| bad())?,
            ));
        };
        Ok(HeadId::new(
            l.trim().parse().map_err(|_| bad())?,
            h.trim().parse().map_err(|_| bad())?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        let h: HeadId = "L17H24".parse().unwrap();
        assert_eq!(h, HeadId::new(17, 24));
        assert_eq!(h.to_string(), "L17H24");
        assert_eq!("3:8".parse::<HeadId>().unwrap(), HeadId::new(3, 8));
        assert!("H3L8".parse::<HeadId>().is_err());
    }

    #[test]
    fn flat_round_trip() {
        for (i, h) in all_heads(4, 7).enumerate() {
            assert_eq!(h.flat(7), i);
            assert_eq!(HeadId::from_flat(i, 7), h);
        }
    }
}
