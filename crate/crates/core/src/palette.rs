//! The closed world of the synthetic data: shape kinds, subject colors and
//! background colors. Their names double as vocabulary words.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Star];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Star => "star",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubjectColor {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

impl SubjectColor {
    pub const ALL: [SubjectColor; 5] =
        [SubjectColor::Red, SubjectColor::Green, SubjectColor::Blue, SubjectColor::Yellow, SubjectColor::Purple];

    pub fn name(self) -> &'static str {
        match self {
            SubjectColor::Red => "red",
            SubjectColor::Green => "green",
            SubjectColor::Blue => "blue",
            SubjectColor::Yellow => "yellow",
            SubjectColor::Purple => "purple",
        }
    }

    pub fn rgb8(self) -> [u8; 3] {
        match self {
            SubjectColor::Red => [230, 30, 30],
            SubjectColor::Green => [30, 200, 40],
            SubjectColor::Blue => [30, 60, 230],
            SubjectColor::Yellow => [240, 220, 30],
            SubjectColor::Purple => [150, 40, 200],
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        self.rgb8().map(|c| c as f64 / 255.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Gray,
    White,
    Black,
}

impl Background {
    pub const ALL: [Background; 3] = [Background::Gray, Background::White, Background::Black];

    pub fn name(self) -> &'static str {
        match self {
            Background::Gray => "gray",
            Background::White => "white",
            Background::Black => "black",
        }
    }

    pub fn rgb8(self) -> [u8; 3] {
        match self {
            Background::Gray => [128, 128, 128],
            Background::White => [245, 245, 245],
            Background::Black => [15, 15, 15],
        }
    }
}

macro_rules! named_enum {
    ($ty:ident, $what:literal) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self, Error> {
                $ty::ALL
                    .iter()
                    .copied()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| Error::parse($what, format!("unknown {} {s:?}", $what)))
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(ShapeKind, "shape");
named_enum!(SubjectColor, "color");
named_enum!(Background, "background");
