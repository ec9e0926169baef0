//! Rating alphabet and the two target formulations: the investment-grade
//! label and an ordinal score in `[0, 1]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::average_ranks;

/// The standard 22-grade long-term scale, best to worst.
pub const STANDARD_GRADES: [&str; 22] = [
    "AAA", "AA+", "AA", "AA-", "A+", "A", "A-", "BBB+", "BBB", "BBB-", "BB+", "BB", "BB-", "B+",
    "B", "B-", "CCC+", "CCC", "CCC-", "CC", "C", "D",
];

/// Lowest rank (inclusive) still counted as investment grade: `BBB-`.
pub const INVESTMENT_GRADE_FLOOR: &str = "BBB-";

/// Moody's symbols mapped onto the standard letters.
const MOODYS_ALIASES: [(&str, &str); 19] = [
    ("AA1", "AA+"),
    ("AA2", "AA"),
    ("AA3", "AA-"),
    ("A1", "A+"),
    ("A2", "A"),
    ("A3", "A-"),
    ("BAA1", "BBB+"),
    ("BAA2", "BBB"),
    ("BAA3", "BBB-"),
    ("BA1", "BB+"),
    ("BA2", "BB"),
    ("BA3", "BB-"),
    ("B1", "B+"),
    ("B2", "B"),
    ("B3", "B-"),
    ("CAA1", "CCC+"),
    ("CAA2", "CCC"),
    ("CAA3", "CCC-"),
    ("CA", "CC"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub mode: TargetMode,
    /// Continuous mode only: replace scores by their average-tie rank / n.
    #[serde(default)]
    pub rank_rescale: bool,
}

/// An ordered rating alphabet, best grade first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    grades: Vec<String>,
    /// Alternative spellings resolved onto canonical grades before lookup.
    #[serde(default)]
    aliases: BTreeMap<String, String>,
    /// Rank of the worst grade still counted as investment grade.
    investment_floor: usize,
}

impl Default for RatingScale {
    fn default() -> Self {
        Self::standard()
    }
}

impl RatingScale {
    pub fn standard() -> Self {
        let grades = STANDARD_GRADES.iter().map(|g| g.to_string()).collect();
        let aliases = MOODYS_ALIASES
            .iter()
            .map(|(a, c)| (a.to_string(), c.to_string()))
            .collect();
        Self {
            grades,
            aliases,
            investment_floor: 9,
        }
    }

    /// A custom alphabet. `investment_floor` names the worst investment-grade
    /// grade.
    pub fn custom(
        grades: Vec<String>,
        aliases: BTreeMap<String, String>,
        investment_floor: &str,
    ) -> Result<Self> {
        let grades: Vec<String> = grades.iter().map(|g| normalize_grade(g)).collect();
        if grades.len() < 2 {
            return Err(Error::Config("rating scale needs at least two grades".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for g in &grades {
            if !seen.insert(g.as_str()) {
                return Err(Error::Config(format!("duplicate grade `{g}` in scale")));
            }
        }
        let floor = normalize_grade(investment_floor);
        let investment_floor = grades
            .iter()
            .position(|g| *g == floor)
            .ok_or_else(|| Error::UnknownGrade(floor.clone()))?;
        let aliases = aliases
            .into_iter()
            .map(|(a, c)| (normalize_grade(&a), normalize_grade(&c)))
            .collect();
        Ok(Self {
            grades,
            aliases,
            investment_floor,
        })
    }

    pub fn len(&self) -> usize {
        self.grades.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }

    pub fn grades(&self) -> &[String] {
        &self.grades
    }

    pub fn worst_rank(&self) -> usize {
        self.grades.len() - 1
    }

    /// Rank of a grade (0 = best). Accepts any spelling `normalize_grade`
    /// understands plus configured aliases.
    pub fn rank(&self, rating: &str) -> Option<usize> {
        let norm = normalize_grade(rating);
        let canonical = self.aliases.get(&norm).unwrap_or(&norm);
        self.grades.iter().position(|g| g == canonical)
    }

    pub fn contains(&self, rating: &str) -> bool {
        self.rank(rating).is_some()
    }

    /// Investment grade (1) versus junk (0).
    pub fn to_binary(&self, rating: &str) -> Result<u8> {
        let rank = self
            .rank(rating)
            .ok_or_else(|| Error::UnknownGrade(rating.to_string()))?;
        Ok(u8::from(rank <= self.investment_floor))
    }

    /// Equally spaced score, best grade 1.0 and worst 0.0.
    pub fn to_continuous(&self, rating: &str) -> Result<f64> {
        let rank = self
            .rank(rating)
            .ok_or_else(|| Error::UnknownGrade(rating.to_string()))?;
        let worst = self.worst_rank() as f64;
        Ok((worst - rank as f64) / worst)
    }
}

/// Trims, upper-cases and folds typographic minus signs to `-`.
pub fn normalize_grade(raw: &str) -> String {
    raw.trim()
        .chars()
        .map(|c| match c {
            '\u{2212}' | '\u{2013}' | '\u{2010}' => '-',
            c => c,
        })
        .filter(|c| !c.is_whitespace())
        .collect::<String>()
        .to_uppercase()
}

pub fn to_binary(rating: &str) -> Result<u8> {
    RatingScale::standard().to_binary(rating)
}

pub fn to_continuous(rating: &str, scale: &RatingScale) -> Result<f64> {
    scale.to_continuous(rating)
}

/// Replaces each score by its average-tie rank divided by n.
pub fn rank_rescale(scores: &[f64]) -> Vec<f64> {
    let n = scores.len() as f64;
    average_ranks(scores).into_iter().map(|r| r / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scale_has_22_distinct_grades() {
        let s = RatingScale::standard();
        assert_eq!(s.len(), 22);
        assert_eq!(s.rank("AAA"), Some(0));
        assert_eq!(s.rank("D"), Some(21));
        assert_eq!(s.rank("AA"), Some(2));
    }

    #[test]
    fn binary_endpoints_and_boundary() {
        assert_eq!(to_binary("AAA").unwrap(), 1);
        assert_eq!(to_binary("D").unwrap(), 0);
        assert_eq!(to_binary("BBB-").unwrap(), 1);
        assert_eq!(to_binary("BB+").unwrap(), 0);
        assert_eq!(to_binary("bbb\u{2212}").unwrap(), 1);
    }

    #[test]
    fn unknown_grade_is_named() {
        match to_binary("ZZ") {
            Err(Error::UnknownGrade(g)) => assert_eq!(g, "ZZ"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(RatingScale::standard().to_continuous("Q").is_err());
    }

    #[test]
    fn continuous_values() {
        let s = RatingScale::standard();
        assert_eq!(s.to_continuous("AAA").unwrap(), 1.0);
        assert_eq!(s.to_continuous("D").unwrap(), 0.0);
        // BBB sits at rank 8 of 0..=21
        assert!((s.to_continuous("BBB").unwrap() - 13.0 / 21.0).abs() < 1e-15);
    }

    #[test]
    fn moodys_symbols_resolve() {
        let s = RatingScale::standard();
        assert_eq!(s.rank("Baa3"), s.rank("BBB-"));
        assert_eq!(s.rank("Aaa"), Some(0));
        assert_eq!(s.to_binary("Ba1").unwrap(), 0);
    }

    #[test]
    fn rank_rescale_examples() {
        assert_eq!(rank_rescale(&[0.2, 0.9]), vec![0.5, 1.0]);
        let eq = rank_rescale(&[0.4; 5]);
        assert!(eq.iter().all(|&v| v == eq[0]));
    }

    #[test]
    fn custom_scale_validates() {
        let grades = vec!["HIGH".into(), "MID".into(), "LOW".into()];
        let s = RatingScale::custom(grades.clone(), BTreeMap::new(), "mid").unwrap();
        assert_eq!(s.to_binary("MID").unwrap(), 1);
        assert_eq!(s.to_binary("LOW").unwrap(), 0);
        assert_eq!(s.to_continuous("MID").unwrap(), 0.5);
        let dup = vec!["A".into(), "A".into()];
        assert!(RatingScale::custom(dup, BTreeMap::new(), "A").is_err());
        assert!(RatingScale::custom(grades, BTreeMap::new(), "NOPE").is_err());
    }

    proptest! {
        #[test]
        fn threshold_and_monotonicity(a in 0usize..22, b in 0usize..22) {
            let s = RatingScale::standard();
            let ga = STANDARD_GRADES[a];
            let gb = STANDARD_GRADES[b];
            let floor = s.to_continuous(INVESTMENT_GRADE_FLOOR).unwrap();
            let ca = s.to_continuous(ga).unwrap();
            prop_assert_eq!(s.to_binary(ga).unwrap() == 1, ca >= floor);
            if a < b {
                prop_assert!(ca > s.to_continuous(gb).unwrap());
            }
        }

        #[test]
        fn rank_rescale_preserves_order(xs in proptest::collection::vec(-5.0f64..5.0, 1..10)) {
            let r = rank_rescale(&xs);
            for i in 0..xs.len() {
                for j in 0..xs.len() {
                    if xs[i] < xs[j] { prop_assert!(r[i] < r[j]); }
                    if xs[i] == xs[j] { prop_assert_eq!(r[i], r[j]); }
                }
            }
        }
    }
}
