use serde::{Deserialize, Serialize};

/// Which side of the cross-modal pair an instance comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Sketch,
    Image,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Sketch, Modality::Image];

    pub fn index(self) -> usize {
        match self {
            Modality::Sketch => 0,
            Modality::Image => 1,
        }
    }

    pub fn code(self) -> u8 {
        self.index() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Sketch),
            1 => Some(Modality::Image),
            _ => None,
        }
    }
}
