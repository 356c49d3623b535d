use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ClassId = u32;

/// Number of vehicle classes in the reference taxonomy.
pub const CLASS_COUNT: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Superclass {
    ArmouredPersonnelCarrier,
    ScoutCar,
    BattleTank,
    Howitzer,
    MilitaryTruck,
}

impl Superclass {
    pub const ALL: [Superclass; 5] = [
        Superclass::ArmouredPersonnelCarrier,
        Superclass::ScoutCar,
        Superclass::BattleTank,
        Superclass::Howitzer,
        Superclass::MilitaryTruck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Superclass::ArmouredPersonnelCarrier => "armoured personnel carrier",
            Superclass::ScoutCar => "scout car",
            Superclass::BattleTank => "battle tank",
            Superclass::Howitzer => "howitzer",
            Superclass::MilitaryTruck => "military truck",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let name = name.trim().to_lowercase();
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl fmt::Display for Superclass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VehicleClass {
    pub id: ClassId,
    pub name: String,
    pub superclass: Superclass,
}

impl VehicleClass {
    /// Lowercase, hyphen-separated form of the name, used in file paths.
    pub fn slug(&self) -> String {
        slugify(&self.name)
    }
}

pub fn slugify(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}

#[derive(Debug, Error, PartialEq)]
pub enum TaxonomyError {
    #[error("class id {0} is not part of the taxonomy")]
    UnknownClass(ClassId),
    #[error("duplicate class id {0}")]
    DuplicateId(ClassId),
    #[error("duplicate class name {0:?}")]
    DuplicateName(String),
    #[error("class ids must be contiguous 0..{expected}, found {found:?}")]
    NonContiguous { expected: usize, found: Vec<ClassId> },
    #[error("unknown superclass {0:?}")]
    UnknownSuperclass(String),
}

/// The fifteen vehicle classes and their superclasses.
///
/// IDs follow the reference table's row order, superclass-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    classes: Vec<VehicleClass>,
}

const REFERENCE_CLASSES: [(&str, Superclass); CLASS_COUNT] = [
    ("Boxer", Superclass::ArmouredPersonnelCarrier),
    ("BTR-80", Superclass::ArmouredPersonnelCarrier),
    ("TPz Fuchs", Superclass::ArmouredPersonnelCarrier),
    ("Patria", Superclass::ArmouredPersonnelCarrier),
    ("Fennek", Superclass::ScoutCar),
    ("BRDM-2", Superclass::ScoutCar),
    ("Leopard", Superclass::BattleTank),
    ("M1 Abrams", Superclass::BattleTank),
    ("T90", Superclass::BattleTank),
    ("CV90", Superclass::BattleTank),
    ("M109", Superclass::Howitzer),
    ("2S19 Msta", Superclass::Howitzer),
    ("Panzerhaubitze 2000", Superclass::Howitzer),
    ("DAF YA 4440", Superclass::MilitaryTruck),
    ("Scania", Superclass::MilitaryTruck),
];

impl Default for Taxonomy {
    fn default() -> Self {
        Self::military_vehicles()
    }
}

impl Taxonomy {
    pub fn military_vehicles() -> Self {
        let classes = REFERENCE_CLASSES
            .iter()
            .enumerate()
            .map(|(id, (name, superclass))| VehicleClass {
                id: id as ClassId,
                name: (*name).to_string(),
                superclass: *superclass,
            })
            .collect();
        Self { classes }
    }

    /// Builds a taxonomy from explicit classes, enforcing unique contiguous
    /// ids `0..15` and unique names.
    pub fn from_classes(mut classes: Vec<VehicleClass>) -> Result<Self, TaxonomyError> {
        classes.sort_by_key(|c| c.id);
        let mut names = HashSet::new();
        for pair in classes.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(TaxonomyError::DuplicateId(pair[0].id));
            }
        }
        for c in &classes {
            if !names.insert(c.name.to_lowercase()) {
                return Err(TaxonomyError::DuplicateName(c.name.clone()));
            }
        }
        let contiguous = classes.len() == CLASS_COUNT
            && classes.iter().enumerate().all(|(i, c)| c.id == i as ClassId);
        if !contiguous {
            return Err(TaxonomyError::NonContiguous {
                expected: CLASS_COUNT,
                found: classes.iter().map(|c| c.id).collect(),
            });
        }
        Ok(Self { classes })
    }

    pub fn classes(&self) -> &[VehicleClass] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes.iter().map(|c| c.id)
    }

    pub fn get(&self, id: ClassId) -> Option<&VehicleClass> {
        self.classes.get(id as usize).filter(|c| c.id == id)
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.get(id).is_some()
    }

    pub fn require(&self, id: ClassId) -> Result<&VehicleClass, TaxonomyError> {
        self.get(id).ok_or(TaxonomyError::UnknownClass(id))
    }

    /// Looks a class up by display name or slug, ignoring case.
    pub fn by_name(&self, name: &str) -> Option<&VehicleClass> {
        let slug = slugify(name);
        self.classes.iter().find(|c| c.slug() == slug)
    }

    pub fn name_of(&self, id: ClassId) -> Option<&str> {
        self.get(id).map(|c| c.name.as_str())
    }
}
