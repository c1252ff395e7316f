use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Modalities an entity may carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    /// Graph structure.
    Structure,
    /// Bag-of-words over incident relations.
    Relation,
    /// Bag-of-words over attribute keys.
    Attribute,
    Visual,
    /// Entity names or descriptions.
    Surface,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Structure,
        Modality::Relation,
        Modality::Attribute,
        Modality::Visual,
        Modality::Surface,
    ];

    pub fn tag(self) -> char {
        match self {
            Modality::Structure => 'g',
            Modality::Relation => 'r',
            Modality::Attribute => 'a',
            Modality::Visual => 'v',
            Modality::Surface => 's',
        }
    }

    pub fn from_tag(c: char) -> Option<Self> {
        Modality::ALL.into_iter().find(|m| m.tag() == c)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.trim().chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Modality::from_tag(c),
            _ => None,
        }
        .ok_or_else(|| Error::Config(format!("unknown modality `{s}` (expected one of g,r,a,v,s)")))
    }
}

/// Parses a comma-separated modality list such as `g,v,s`.
pub fn parse_modalities(s: &str) -> Result<Vec<Modality>, Error> {
    let mut out: Vec<Modality> = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let m: Modality = part.parse()?;
        if out.contains(&m) {
            return Err(Error::Config(format!("modality `{m}` listed twice")));
        }
        out.push(m);
    }
    Ok(out)
}

pub fn format_modalities(ms: &[Modality]) -> String {
    ms.iter().map(|m| m.tag().to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip() {
        for m in Modality::ALL {
            assert_eq!(Modality::from_tag(m.tag()), Some(m));
        }
        assert_eq!(parse_modalities("g, v,s").unwrap().len(), 3);
        assert!(parse_modalities("g,g").is_err());
        assert!(parse_modalities("x").is_err());
    }
}
