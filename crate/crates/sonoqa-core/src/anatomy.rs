//! Sections and their essential anatomical structures.
//!
//! A plane is standard only when every essential structure of its section
//! is present and meets the quality requirement. The registry below is the
//! single source of class ids for the detector, classifier, phantom
//! generator and report engine. The abdominal registry uses the four
//! structures actually scored (the stomach bubble entry subsumes the
//! stomach).

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Head,
    Abdominal,
    Heart,
}

pub const SECTIONS: [Section; 3] = [Section::Head, Section::Abdominal, Section::Heart];

impl Section {
    pub fn as_str(self) -> &'static str {
        match self {
            Section::Head => "head",
            Section::Abdominal => "abdominal",
            Section::Heart => "heart",
        }
    }

    pub fn parse(s: &str) -> Result<Section> {
        match s {
            "head" => Ok(Section::Head),
            "abdominal" => Ok(Section::Abdominal),
            "heart" => Ok(Section::Heart),
            other => Err(Error::Input(alloc::format!("unknown section '{other}'"))),
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One essential structure. `id` is its stable class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructureDef {
    pub id: usize,
    pub section: Section,
    pub abbrev: &'static str,
    pub name: &'static str,
}

/// Stable class registry: 6 head + 4 abdominal + 5 heart structures.
pub const STRUCTURES: [StructureDef; 15] = [
    StructureDef { id: 0, section: Section::Head, abbrev: "CSP", name: "cavum septi pellucidi" },
    StructureDef { id: 1, section: Section::Head, abbrev: "T", name: "thalamus" },
    StructureDef { id: 2, section: Section::Head, abbrev: "TV", name: "third ventricle" },
    StructureDef { id: 3, section: Section::Head, abbrev: "BM", name: "brain midline" },
    StructureDef { id: 4, section: Section::Head, abbrev: "LS", name: "lateral sulcus" },
    StructureDef { id: 5, section: Section::Head, abbrev: "CP", name: "choroid plexus" },
    StructureDef { id: 6, section: Section::Abdominal, abbrev: "ST", name: "stomach bubble" },
    StructureDef { id: 7, section: Section::Abdominal, abbrev: "SP", name: "spine" },
    StructureDef { id: 8, section: Section::Abdominal, abbrev: "UV", name: "umbilical vein" },
    StructureDef { id: 9, section: Section::Abdominal, abbrev: "AO", name: "aorta" },
    StructureDef { id: 10, section: Section::Heart, abbrev: "LV", name: "left ventricle" },
    StructureDef { id: 11, section: Section::Heart, abbrev: "LA", name: "left atrium" },
    StructureDef { id: 12, section: Section::Heart, abbrev: "RV", name: "right ventricle" },
    StructureDef { id: 13, section: Section::Heart, abbrev: "RA", name: "right atrium" },
    StructureDef { id: 14, section: Section::Heart, abbrev: "DAO", name: "descending aorta" },
];

pub const NUM_STRUCTURES: usize = STRUCTURES.len();
/// Class index reserved for background ROIs.
pub const BACKGROUND_CLASS: usize = NUM_STRUCTURES;
/// Structure classes plus background.
pub const NUM_CLASSES: usize = NUM_STRUCTURES + 1;

pub fn structure(id: usize) -> Result<&'static StructureDef> {
    STRUCTURES
        .get(id)
        .ok_or_else(|| Error::Input(alloc::format!("unknown structure id {id}")))
}

pub fn structure_by_abbrev(abbrev: &str) -> Result<&'static StructureDef> {
    STRUCTURES
        .iter()
        .find(|s| s.abbrev == abbrev)
        .ok_or_else(|| Error::Input(alloc::format!("unknown structure '{abbrev}'")))
}

/// Essential structures of a section, in registry order.
pub fn section_structures(section: Section) -> Vec<&'static StructureDef> {
    STRUCTURES.iter().filter(|s| s.section == section).collect()
}

pub fn abbrev_of(class_id: usize) -> String {
    if class_id == BACKGROUND_CLASS {
        String::from("background")
    } else {
        String::from(STRUCTURES[class_id].abbrev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_counts_per_section() {
        assert_eq!(section_structures(Section::Head).len(), 6);
        assert_eq!(section_structures(Section::Abdominal).len(), 4);
        assert_eq!(section_structures(Section::Heart).len(), 5);
        assert_eq!(NUM_CLASSES, 16);
    }

    #[test]
    fn ids_are_stable_and_dense() {
        for (i, s) in STRUCTURES.iter().enumerate() {
            assert_eq!(s.id, i);
        }
    }

    #[test]
    fn heart_has_descending_aorta() {
        assert!(section_structures(Section::Heart).iter().any(|s| s.abbrev == "DAO"));
    }

    #[test]
    fn lookup_by_abbrev() {
        assert_eq!(structure_by_abbrev("UV").unwrap().section, Section::Abdominal);
        assert!(structure_by_abbrev("XYZ").is_err());
    }
}
