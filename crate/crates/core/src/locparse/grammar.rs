//! The structured report grammar:
//!
//! ```text
//! report  := "No pulmonary infection."
//!          | status " pulmonary infection, " count " infected area" ["s"] ", " zones "."
//! status  := "Unilateral" | "Bilateral"
//! zones   := zone | zone (", " zone)* " and " zone        (canonical order)
//! zone    := ("upper" | "middle" | "lower") " " ("left" | "right") " lung"
//! ```

use std::fmt;

use crate::data_forge::{LungRegion, Side, Zone};

/// Every word the grammar can emit, in a fixed order.
pub const GRAMMAR_WORDS: [&str; 19] = [
    "no",
    "unilateral",
    "bilateral",
    "pulmonary",
    "infection",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "infected",
    "area",
    "areas",
    "upper",
    "middle",
    "lower",
    "left",
    "right",
];

/// Words that name a location.
pub const LOCATION_WORDS: [&str; 5] = ["upper", "middle", "lower", "left", "right"];

/// Words present in every infection report that carry no location.
pub const FILLER_WORDS: [&str; 4] = ["pulmonary", "infection", "area", "areas"];

const NUMBER_WORDS: [&str; 7] = ["zero", "one", "two", "three", "four", "five", "six"];

/// Six-zone binary location label, indexed by [`LungRegion`] canonical order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LocationLabel {
    bits: [bool; 6],
}

impl LocationLabel {
    pub const N: usize = 6;

    pub fn new(bits: [bool; 6]) -> Self {
        Self { bits }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Label whose bit `i` is bit `i` of `code` (0..64).
    pub fn from_code(code: u8) -> Self {
        let mut bits = [false; 6];
        for (i, b) in bits.iter_mut().enumerate() {
            *b = code >> i & 1 == 1;
        }
        Self { bits }
    }

    pub fn code(&self) -> u8 {
        self.bits
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &b)| acc | ((b as u8) << i))
    }

    pub fn all() -> impl Iterator<Item = LocationLabel> {
        (0u8..64).map(Self::from_code)
    }

    pub fn from_regions(regions: impl IntoIterator<Item = LungRegion>) -> Self {
        let mut label = Self::empty();
        for r in regions {
            label.bits[r.index()] = true;
        }
        label
    }

    pub fn bits(&self) -> [bool; 6] {
        self.bits
    }

    pub fn get(&self, region: LungRegion) -> bool {
        self.bits[region.index()]
    }

    pub fn set(&mut self, region: LungRegion, value: bool) {
        self.bits[region.index()] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn regions(&self) -> impl Iterator<Item = LungRegion> + '_ {
        LungRegion::ALL.into_iter().filter(|r| self.get(*r))
    }

    pub fn has_side(&self, side: Side) -> bool {
        self.regions().any(|r| r.side == side)
    }

    /// Targets as 0/1 reals.
    pub fn targets(&self) -> [f64; 6] {
        self.bits.map(|b| if b { 1.0 } else { 0.0 })
    }

    /// Compact `b0b1b2b3b4b5` form, e.g. `100001`.
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn parse_bit_string(s: &str) -> Option<Self> {
        let s = s.trim();
        if s.len() != 6 {
            return None;
        }
        let mut bits = [false; 6];
        for (b, c) in bits.iter_mut().zip(s.chars()) {
            *b = match c {
                '0' => false,
                '1' => true,
                _ => return None,
            };
        }
        Some(Self { bits })
    }
}

impl fmt::Display for LocationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bit_string())
    }
}

/// Renders a label as a canonical report.
pub fn synthesize_report(label: &LocationLabel) -> String {
    let left = label.has_side(Side::Left);
    let right = label.has_side(Side::Right);
    let status = match (left, right) {
        (false, false) => return "No pulmonary infection.".to_string(),
        (true, true) => "Bilateral",
        _ => "Unilateral",
    };
    let n = label.count();
    let zones: Vec<String> = label.regions().map(|r| r.to_string()).collect();
    let zone_list = match zones.as_slice() {
        [only] => only.clone(),
        [init @ .., last] => format!("{} and {}", init.join(", "), last),
        [] => unreachable!(),
    };
    format!(
        "{status} pulmonary infection, {} infected area{}, {zone_list}.",
        NUMBER_WORDS[n],
        if n == 1 { "" } else { "s" }
    )
}

/// Label plus any consistency warnings raised while reading a report.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedReport {
    pub label: LocationLabel,
    pub warnings: Vec<String>,
}

/// Lower-cased alphanumeric words of `text`.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Extracts the location label of a report. Never fails: zone phrases
/// decide the bits, and clause inconsistencies are only reported.
pub fn parse_report(text: &str) -> LocationLabel {
    parse_report_detailed(text).label
}

pub fn parse_report_detailed(text: &str) -> ParsedReport {
    let w = words(text);
    let mut label = LocationLabel::empty();
    let mut warnings = Vec::new();

    for win in w.windows(3) {
        if win[2] != "lung" {
            continue;
        }
        let zone = match win[0].as_str() {
            "upper" => Zone::Upper,
            "middle" => Zone::Middle,
            "lower" => Zone::Lower,
            _ => continue,
        };
        let side = match win[1].as_str() {
            "left" => Side::Left,
            "right" => Side::Right,
            _ => continue,
        };
        label.set(LungRegion::new(side, zone), true);
    }

    let says_none = w
        .windows(3)
        .any(|win| win[0] == "no" && win[1] == "pulmonary" && win[2] == "infection");
    let says_uni = w.iter().any(|x| x == "unilateral");
    let says_bi = w.iter().any(|x| x == "bilateral");
    let stated_count = w.windows(2).find_map(|win| {
        if win[1] != "infected" {
            return None;
        }
        NUMBER_WORDS
            .iter()
            .position(|&n| n == win[0])
            .or_else(|| win[0].parse::<usize>().ok())
    });

    let sides = [Side::Left, Side::Right]
        .iter()
        .filter(|&&s| label.has_side(s))
        .count();
    if label.is_empty() && !says_none {
        warnings.push("no location phrase or status clause recognised; label left empty".into());
    }
    if says_none && !label.is_empty() {
        warnings.push("report says no infection but names infected zones".into());
    }
    if says_uni && sides != 1 {
        warnings.push(format!("unilateral status but {sides} sides named"));
    }
    if says_bi && sides != 2 {
        warnings.push(format!("bilateral status but {sides} sides named"));
    }
    if let Some(c) = stated_count {
        if c != label.count() {
            warnings.push(format!(
                "count clause says {c} areas but {} zones named",
                label.count()
            ));
        }
    }
    ParsedReport { label, warnings }
}
