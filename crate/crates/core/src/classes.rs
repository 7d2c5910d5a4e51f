//! Class tables of the two heads and the fixed mask palette.

use std::fmt;

use serde::{Deserialize, Serialize};

/// General indoor-scene categories, in label-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneralClass {
    Beam = 0,
    Board,
    Bookcase,
    Ceiling,
    Chair,
    Clutter,
    Column,
    Door,
    Floor,
    Sofa,
    Table,
    Wall,
    Window,
}

impl GeneralClass {
    pub const ALL: [GeneralClass; 13] = [
        Self::Beam,
        Self::Board,
        Self::Bookcase,
        Self::Ceiling,
        Self::Chair,
        Self::Clutter,
        Self::Column,
        Self::Door,
        Self::Floor,
        Self::Sofa,
        Self::Table,
        Self::Wall,
        Self::Window,
    ];

    /// Label given to pixels no object covers in synthetic scenes.
    pub const BACKGROUND: GeneralClass = GeneralClass::Wall;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        const NAMES: [&str; 13] = [
            "beam", "board", "bookcase", "ceiling", "chair", "clutter", "column", "door", "floor", "sofa", "table",
            "wall", "window",
        ];
        NAMES[self.index()]
    }

    pub fn is_walkable(self) -> bool {
        self == GeneralClass::Floor
    }
}

/// Transparent-object categories (index 0 is background).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransClass {
    Background = 0,
    Shelf,
    JarOrTank,
    Freezer,
    Window,
    GlassDoor,
    Eyeglass,
    Cup,
    GlassWall,
    GlassBowl,
    WaterBottle,
    StorageBox,
}

/// Stuff / thing partition of the transparency classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransGroup {
    Background,
    Stuff,
    Thing,
}

impl TransClass {
    pub const ALL: [TransClass; 12] = [
        Self::Background,
        Self::Shelf,
        Self::JarOrTank,
        Self::Freezer,
        Self::Window,
        Self::GlassDoor,
        Self::Eyeglass,
        Self::Cup,
        Self::GlassWall,
        Self::GlassBowl,
        Self::WaterBottle,
        Self::StorageBox,
    ];

    pub const STUFF: [TransClass; 3] = [Self::Window, Self::GlassDoor, Self::GlassWall];

    pub const THINGS: [TransClass; 8] = [
        Self::Shelf,
        Self::JarOrTank,
        Self::Freezer,
        Self::Eyeglass,
        Self::Cup,
        Self::GlassBowl,
        Self::WaterBottle,
        Self::StorageBox,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        const NAMES: [&str; 12] = [
            "background",
            "shelf",
            "jar_or_tank",
            "freezer",
            "window",
            "glass_door",
            "eyeglass",
            "cup",
            "glass_wall",
            "glass_bowl",
            "water_bottle",
            "storage_box",
        ];
        NAMES[self.index()]
    }

    pub fn group(self) -> TransGroup {
        match self {
            Self::Background => TransGroup::Background,
            Self::Window | Self::GlassDoor | Self::GlassWall => TransGroup::Stuff,
            _ => TransGroup::Thing,
        }
    }
}

/// A class from either head's table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "head", content = "class")]
pub enum SceneClass {
    General(GeneralClass),
    Trans(TransClass),
}

impl SceneClass {
    pub fn name(self) -> &'static str {
        match self {
            SceneClass::General(c) => c.name(),
            SceneClass::Trans(c) => c.name(),
        }
    }
}

impl fmt::Display for SceneClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Mask colours for the general head, by class index.
pub const GENERAL_PALETTE: [[u8; 3]; 13] = [
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [0, 0, 142],
];

/// Mask colours for the transparency head, by class index.
pub const TRANS_PALETTE: [[u8; 3]; 12] = [
    [0, 0, 0],
    [120, 120, 70],
    [235, 255, 7],
    [6, 230, 230],
    [204, 255, 4],
    [120, 120, 120],
    [140, 140, 140],
    [255, 51, 7],
    [224, 5, 255],
    [204, 5, 255],
    [150, 5, 61],
    [4, 250, 7],
];
