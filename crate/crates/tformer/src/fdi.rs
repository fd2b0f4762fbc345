//! FDI two-digit tooth numbering and the fixed 33-class table.
//!
//! Class index 0 is the gingiva; indices 1..=32 map to the FDI codes
//! 11-18, 21-28, 31-38, 41-48 in ascending code order.

use serde::{Deserialize, Serialize};

/// Gingiva plus 32 permanent teeth.
pub const CLASS_COUNT: usize = 33;

/// All legal FDI codes in class-index order (entry `i` is class `i`).
pub const FDI_CODES: [u8; CLASS_COUNT] = [
    0, 11, 12, 13, 14, 15, 16, 17, 18, 21, 22, 23, 24, 25, 26, 27, 28, 31, 32, 33, 34, 35, 36,
    37, 38, 41, 42, 43, 44, 45, 46, 47, 48,
];

/// Maps a class index (0..=32) to its FDI code.
pub fn class_to_fdi(class: usize) -> u8 {
    FDI_CODES[class]
}

/// Maps an FDI code to its class index, or `None` for illegal codes.
pub fn fdi_to_class(code: u8) -> Option<usize> {
    match code {
        0 => Some(0),
        11..=18 => Some(code as usize - 10),
        21..=28 => Some(code as usize - 20 + 8),
        31..=38 => Some(code as usize - 30 + 16),
        41..=48 => Some(code as usize - 40 + 24),
        _ => None,
    }
}

pub fn is_legal_fdi(code: u8) -> bool {
    fdi_to_class(code).is_some()
}

/// Which jaw a scan comes from; the network receives it as a one-hot pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Jaw {
    Maxillary,
    Mandible,
}

impl Jaw {
    /// Category vector fed to the network: maxillary `[1, 0]`, mandible `[0, 1]`.
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            Jaw::Maxillary => [1.0, 0.0],
            Jaw::Mandible => [0.0, 1.0],
        }
    }

    /// True if `code` may appear on this jaw (gingiva is legal on both).
    pub fn permits_fdi(self, code: u8) -> bool {
        match self {
            Jaw::Maxillary => code == 0 || (11..=18).contains(&code) || (21..=28).contains(&code),
            Jaw::Mandible => code == 0 || (31..=38).contains(&code) || (41..=48).contains(&code),
        }
    }
}

impl std::str::FromStr for Jaw {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "upper" | "maxillary" => Ok(Jaw::Maxillary),
            "lower" | "mandible" => Ok(Jaw::Mandible),
            other => Err(format!("unknown jaw {other:?} (expected upper or lower)")),
        }
    }
}

impl std::fmt::Display for Jaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Jaw::Maxillary => write!(f, "maxillary"),
            Jaw::Mandible => write!(f, "mandible"),
        }
    }
}

/// Default visualization palette: gingiva pink, teeth cycled by position so
/// adjacent teeth get contrasting colors.
pub fn label_color(fdi: u8) -> [u8; 3] {
    if fdi == 0 {
        return [235, 180, 180];
    }
    const CYCLE: [[u8; 3]; 8] = [
        [66, 135, 245],
        [245, 188, 66],
        [66, 245, 120],
        [186, 85, 211],
        [245, 93, 66],
        [64, 224, 208],
        [250, 240, 100],
        [160, 120, 255],
    ];
    CYCLE[(fdi % 10) as usize % 8]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_fdi_round_trip() {
        for class in 0..CLASS_COUNT {
            assert_eq!(fdi_to_class(class_to_fdi(class)), Some(class));
        }
    }

    #[test]
    fn codes_ascending_and_legal() {
        for w in FDI_CODES.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(!is_legal_fdi(19));
        assert!(!is_legal_fdi(29));
        assert!(!is_legal_fdi(1));
        assert!(!is_legal_fdi(49));
        assert!(is_legal_fdi(0));
        assert!(is_legal_fdi(48));
    }

    #[test]
    fn jaw_label_permissions() {
        assert!(Jaw::Maxillary.permits_fdi(11));
        assert!(!Jaw::Maxillary.permits_fdi(31));
        assert!(Jaw::Mandible.permits_fdi(48));
        assert!(!Jaw::Mandible.permits_fdi(28));
        assert!(Jaw::Maxillary.permits_fdi(0));
        assert!(Jaw::Mandible.permits_fdi(0));
    }
}
