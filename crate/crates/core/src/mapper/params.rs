use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use super::MapperError;

pub const DEFAULT_MIN_PTS: usize = 3;
pub const DEFAULT_COVER_N: usize = 10;
pub const DEFAULT_COVER_OVERLAP: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MapperKind {
    #[default]
    Classical,
    Ball,
}

/// DBSCAN / ball radius: either fixed or estimated with the k-distance elbow.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Epsilon {
    #[default]
    Auto,
    Fixed(f64),
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Epsilon::Auto => f.write_str("auto"),
            Epsilon::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl std::str::FromStr for Epsilon {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Epsilon::Auto);
        }
        s.parse::<f64>()
            .map(Epsilon::Fixed)
            .map_err(|_| format!("epsilon must be a number or `auto`, got `{s}`"))
    }
}

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Epsilon::Auto => s.serialize_str("auto"),
            Epsilon::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Epsilon::Fixed(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Construction parameters, mirroring the workspace control panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperParams {
    #[serde(default)]
    pub kind: MapperKind,
    #[serde(default = "default_cover_n")]
    pub cover_n: usize,
    #[serde(default = "default_cover_overlap")]
    pub cover_overlap: f64,
    #[serde(default = "default_min_pts")]
    pub min_pts: usize,
    #[serde(default)]
    pub epsilon: Epsilon,
}

fn default_cover_n() -> usize {
    DEFAULT_COVER_N
}
fn default_cover_overlap() -> f64 {
    DEFAULT_COVER_OVERLAP
}
fn default_min_pts() -> usize {
    DEFAULT_MIN_PTS
}

impl Default for MapperParams {
    fn default() -> Self {
        Self {
            kind: MapperKind::Classical,
            cover_n: DEFAULT_COVER_N,
            cover_overlap: DEFAULT_COVER_OVERLAP,
            min_pts: DEFAULT_MIN_PTS,
            epsilon: Epsilon::Auto,
        }
    }
}

impl MapperParams {
    pub fn classical(cover_n: usize, cover_overlap: f64, min_pts: usize, epsilon: Epsilon) -> Self {
        Self {
            kind: MapperKind::Classical,
            cover_n,
            cover_overlap,
            min_pts,
            epsilon,
        }
    }

    pub fn ball(eps: f64) -> Self {
        Self {
            kind: MapperKind::Ball,
            epsilon: Epsilon::Fixed(eps),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), MapperError> {
        if self.cover_n < 1 {
            return Err(MapperError::InvalidParams("cover_n must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.cover_overlap) {
            return Err(MapperError::InvalidParams(
                "cover_overlap must lie in [0, 1)".into(),
            ));
        }
        if self.min_pts < 1 {
            return Err(MapperError::InvalidParams("min_pts must be >= 1".into()));
        }
        match self.epsilon {
            Epsilon::Fixed(e) if !(e > 0.0 && e.is_finite()) => Err(MapperError::InvalidParams(
                "epsilon must be a positive finite number".into(),
            )),
            Epsilon::Auto if self.kind == MapperKind::Ball => Err(MapperError::InvalidParams(
                "ball mapper needs an explicit epsilon".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Hex SHA-256 of the canonical (key-sorted) JSON form. Independent of
    /// field order in any input document.
    pub fn params_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("params serialize");
        // serde_json::Map is a BTreeMap here, so keys come out sorted.
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_pts_defaults_to_three() {
        assert_eq!(MapperParams::default().min_pts, 3);
        let p: MapperParams = serde_json::from_str(r#"{"kind":"classical"}"#).unwrap();
        assert_eq!(p.min_pts, 3);
    }

    #[test]
    fn epsilon_round_trip() {
        let p = MapperParams::classical(6, 0.25, 3, Epsilon::Auto);
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"epsilon\":\"auto\""));
        assert_eq!(serde_json::from_str::<MapperParams>(&s).unwrap(), p);
        let q: MapperParams = serde_json::from_str(r#"{"epsilon":0.5,"kind":"ball"}"#).unwrap();
        assert_eq!(q.epsilon, Epsilon::Fixed(0.5));
    }

    #[test]
    fn hash_ignores_field_order() {
        let a: MapperParams = serde_json::from_str(
            r#"{"kind":"classical","cover_n":6,"cover_overlap":0.25,"min_pts":3,"epsilon":"auto"}"#,
        )
        .unwrap();
        let b: MapperParams = serde_json::from_str(
            r#"{"epsilon":"auto","min_pts":3,"cover_overlap":0.25,"cover_n":6,"kind":"classical"}"#,
        )
        .unwrap();
        assert_eq!(a.params_hash(), b.params_hash());
    }

    #[test]
    fn hash_separates_a_parameter_grid() {
        let mut seen = std::collections::HashSet::new();
        let mut count = 0;
        for kind in [MapperKind::Classical, MapperKind::Ball] {
            for n in 1..6 {
                for p in [0.0, 0.1, 0.25, 0.5] {
                    for m in 1..5 {
                        for e in [Epsilon::Auto, Epsilon::Fixed(0.1), Epsilon::Fixed(0.5)] {
                            let params = MapperParams { kind, cover_n: n, cover_overlap: p, min_pts: m, epsilon: e };
                            seen.insert(params.params_hash());
                            count += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(seen.len(), count);
    }

    #[test]
    fn validation() {
        assert!(MapperParams::classical(0, 0.2, 3, Epsilon::Auto).validate().is_err());
        assert!(MapperParams::classical(3, 1.0, 3, Epsilon::Auto).validate().is_err());
        assert!(MapperParams::classical(3, 0.2, 0, Epsilon::Auto).validate().is_err());
        assert!(MapperParams::classical(3, 0.2, 3, Epsilon::Fixed(-1.0)).validate().is_err());
        assert!(MapperParams { kind: MapperKind::Ball, ..Default::default() }.validate().is_err());
        assert!(MapperParams::ball(0.5).validate().is_ok());
    }
}
