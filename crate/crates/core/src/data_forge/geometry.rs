use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Zone {
    Upper,
    Middle,
    Lower,
}

/// One of the six lung zones. Canonical order: left upper/middle/lower,
/// then right upper/middle/lower.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LungRegion {
    pub side: Side,
    pub zone: Zone,
}

impl LungRegion {
    pub const COUNT: usize = 6;

    pub const ALL: [LungRegion; 6] = [
        LungRegion::new(Side::Left, Zone::Upper),
        LungRegion::new(Side::Left, Zone::Middle),
        LungRegion::new(Side::Left, Zone::Lower),
        LungRegion::new(Side::Right, Zone::Upper),
        LungRegion::new(Side::Right, Zone::Middle),
        LungRegion::new(Side::Right, Zone::Lower),
    ];

    pub const fn new(side: Side, zone: Zone) -> Self {
        Self { side, zone }
    }

    pub fn index(self) -> usize {
        let s = match self.side {
            Side::Left => 0,
            Side::Right => 3,
        };
        let z = match self.zone {
            Zone::Upper => 0,
            Zone::Middle => 1,
            Zone::Lower => 2,
        };
        s + z
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl Side {
    pub fn word(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

impl Zone {
    pub fn word(self) -> &'static str {
        match self {
            Zone::Upper => "upper",
            Zone::Middle => "middle",
            Zone::Lower => "lower",
        }
    }
}

impl fmt::Display for LungRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} lung", self.zone.word(), self.side.word())
    }
}

/// Half-open pixel rectangle `[top, bottom) × [left, right)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.bottom && col >= self.left && col < self.right
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }
}

/// Lung-field and zone geometry of a square synthetic radiograph. The
/// image's left half holds the left lung. Each field's bounding box is cut
/// into three equal-height bands (the last band absorbs the remainder).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ZoneLayout {
    pub size: usize,
}

impl ZoneLayout {
    pub fn new(size: usize) -> Self {
        Self { size }
    }

    /// Column of the mid-sternal line.
    pub fn midline(&self) -> usize {
        self.size / 2
    }

    pub fn field(&self, side: Side) -> Rect {
        let margin = self.size / 10;
        let gap = self.size / 16;
        let (left, right) = match side {
            Side::Left => (margin, self.midline() - gap),
            Side::Right => (self.midline() + gap, self.size - margin),
        };
        Rect {
            top: margin,
            left,
            bottom: self.size - margin,
            right,
        }
    }

    pub fn zone(&self, region: LungRegion) -> Rect {
        let f = self.field(region.side);
        let band = f.height() / 3;
        let k = match region.zone {
            Zone::Upper => 0,
            Zone::Middle => 1,
            Zone::Lower => 2,
        };
        let top = f.top + k * band;
        let bottom = if k == 2 { f.bottom } else { top + band };
        Rect {
            top,
            left: f.left,
            bottom,
            right: f.right,
        }
    }

    pub fn region_at(&self, row: usize, col: usize) -> Option<LungRegion> {
        LungRegion::ALL
            .into_iter()
            .find(|&r| self.zone(r).contains(row, col))
    }

    /// Zone membership bits of a binary mask (row-major, `size`²).
    pub fn occupied_regions(&self, mask: &[u8]) -> [bool; 6] {
        let mut bits = [false; 6];
        for (i, &m) in mask.iter().enumerate() {
            if m != 0 {
                if let Some(r) = self.region_at(i / self.size, i % self.size) {
                    bits[r.index()] = true;
                }
            }
        }
        bits
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_index_is_a_bijection() {
        for (i, r) in LungRegion::ALL.iter().enumerate() {
            assert_eq!(r.index(), i);
            assert_eq!(LungRegion::from_index(i), Some(*r));
        }
        assert_eq!(LungRegion::from_index(6), None);
    }

    #[test]
    fn zones_tile_each_field_without_overlap() {
        for size in [32, 64, 96, 224] {
            let layout = ZoneLayout::new(size);
            for side in [Side::Left, Side::Right] {
                let f = layout.field(side);
                for row in f.top..f.bottom {
                    for col in f.left..f.right {
                        let n = LungRegion::ALL
                            .iter()
                            .filter(|&&r| layout.zone(r).contains(row, col))
                            .count();
                        assert_eq!(n, 1);
                    }
                }
            }
            assert!(layout.field(Side::Left).right <= layout.midline());
            assert!(layout.field(Side::Right).left > layout.midline());
        }
    }
}
