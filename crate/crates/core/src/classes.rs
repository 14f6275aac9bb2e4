//! Object contents classes and robot actions shared across modules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The twelve kinds of bottle contents. Ordinals are stable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Capsule,
    Alcohol,
    RedDates,
    Tablet,
    Hawthorn,
    Pill,
    SemanCassiae,
    Oyster,
    WaxPill,
    CicadaSlough,
    Particle,
    Empty,
}

impl ObjectClass {
    pub const COUNT: usize = 12;

    pub const ALL: [ObjectClass; 12] = [
        ObjectClass::Capsule,
        ObjectClass::Alcohol,
        ObjectClass::RedDates,
        ObjectClass::Tablet,
        ObjectClass::Hawthorn,
        ObjectClass::Pill,
        ObjectClass::SemanCassiae,
        ObjectClass::Oyster,
        ObjectClass::WaxPill,
        ObjectClass::CicadaSlough,
        ObjectClass::Particle,
        ObjectClass::Empty,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Capsule => "capsule",
            ObjectClass::Alcohol => "alcohol",
            ObjectClass::RedDates => "red_dates",
            ObjectClass::Tablet => "tablet",
            ObjectClass::Hawthorn => "hawthorn",
            ObjectClass::Pill => "pill",
            ObjectClass::SemanCassiae => "seman_cassiae",
            ObjectClass::Oyster => "oyster",
            ObjectClass::WaxPill => "wax_pill",
            ObjectClass::CicadaSlough => "cicada_slough",
            ObjectClass::Particle => "particle",
            ObjectClass::Empty => "empty",
        }
    }

    /// Display name used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            ObjectClass::Capsule => "Capsule",
            ObjectClass::Alcohol => "Alcohol",
            ObjectClass::RedDates => "Red Dates",
            ObjectClass::Tablet => "Tablet",
            ObjectClass::Hawthorn => "Hawthorn",
            ObjectClass::Pill => "Pill",
            ObjectClass::SemanCassiae => "Seman Cassiae",
            ObjectClass::Oyster => "Oyster",
            ObjectClass::WaxPill => "Wax Pill",
            ObjectClass::CicadaSlough => "Cicada Slough",
            ObjectClass::Particle => "Particle",
            ObjectClass::Empty => "Empty",
        }
    }

    /// Word forms as they appear in instructions: (singular, plural).
    pub fn surface(self) -> (&'static str, &'static str) {
        match self {
            ObjectClass::Capsule => ("capsule", "capsules"),
            ObjectClass::Alcohol => ("alcohol", "alcohol"),
            ObjectClass::RedDates => ("red dates", "red dates"),
            ObjectClass::Tablet => ("tablet", "tablets"),
            ObjectClass::Hawthorn => ("hawthorn", "hawthorns"),
            ObjectClass::Pill => ("pill", "pills"),
            ObjectClass::SemanCassiae => ("seman cassiae", "seman cassiae"),
            ObjectClass::Oyster => ("oyster", "oysters"),
            ObjectClass::WaxPill => ("wax pill", "wax pills"),
            ObjectClass::CicadaSlough => ("cicada slough", "cicada sloughs"),
            ObjectClass::Particle => ("particle", "particles"),
            ObjectClass::Empty => ("empty", "empties"),
        }
    }

    /// Contents that rattle as discrete impacts.
    pub fn is_granular(self) -> bool {
        !matches!(self, ObjectClass::Alcohol | ObjectClass::CicadaSlough | ObjectClass::Empty)
    }

    pub fn is_weak(self) -> bool {
        matches!(self, ObjectClass::CicadaSlough | ObjectClass::Empty)
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == norm)
            .ok_or_else(|| format!("unknown object class `{s}`"))
    }
}

/// Robot action space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Pick,
    Yaw,
    Roll,
    Pitch,
    Shake,
    Place,
}

impl ActionKind {
    /// The probing actions, in the order they are executed on a held bottle.
    pub const PROBES: [ActionKind; 4] = [ActionKind::Yaw, ActionKind::Roll, ActionKind::Pitch, ActionKind::Shake];

    /// Wrist angular velocity during probing, rad/s. A set speed, not π.
    #[allow(clippy::approx_constant)]
    pub const PROBE_ANGULAR_VELOCITY: f64 = 3.14;

    pub fn is_probe(self) -> bool {
        Self::PROBES.contains(&self)
    }

    /// Index within [`ActionKind::PROBES`].
    pub fn probe_index(self) -> Option<usize> {
        Self::PROBES.iter().position(|a| *a == self)
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Pick => "pick",
            ActionKind::Yaw => "yaw",
            ActionKind::Roll => "roll",
            ActionKind::Pitch => "pitch",
            ActionKind::Shake => "shake",
            ActionKind::Place => "place",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pick" => Ok(ActionKind::Pick),
            "yaw" => Ok(ActionKind::Yaw),
            "roll" => Ok(ActionKind::Roll),
            "pitch" => Ok(ActionKind::Pitch),
            "shake" => Ok(ActionKind::Shake),
            "place" => Ok(ActionKind::Place),
            _ => Err(format!("unknown action `{s}`")),
        }
    }
}

/// Colors of bowls, bottles and landmark objects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
    Black,
    Orange,
}

impl Color {
    pub const ALL: [Color; 7] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::White,
        Color::Black,
        Color::Orange,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::White => "white",
            Color::Black => "black",
            Color::Orange => "orange",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == w)
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Non-container objects on the table that instructions can use as anchors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Landmark {
    Banana,
    Apple,
    Book,
}

impl Landmark {
    pub const ALL: [Landmark; 3] = [Landmark::Banana, Landmark::Apple, Landmark::Book];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Landmark::Banana => "banana",
            Landmark::Apple => "apple",
            Landmark::Book => "book",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|l| l.name() == w)
    }

    pub fn color(self) -> Color {
        match self {
            Landmark::Banana => Color::Yellow,
            Landmark::Apple => Color::Red,
            Landmark::Book => Color::Blue,
        }
    }
}

impl fmt::Display for Landmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_classes_with_stable_ordinals() {
        assert_eq!(ObjectClass::ALL.len(), ObjectClass::COUNT);
        for (i, c) in ObjectClass::ALL.iter().enumerate() {
            assert_eq!(c.ordinal(), i);
            assert_eq!(ObjectClass::from_ordinal(i), Some(*c));
            assert_eq!(c.name().parse::<ObjectClass>().unwrap(), *c);
        }
    }

    #[test]
    fn probing_subset_has_four_actions() {
        assert_eq!(ActionKind::PROBES.len(), 4);
        assert!(!ActionKind::Pick.is_probe() && !ActionKind::Place.is_probe());
    }
}
