use serde::Serialize;

use super::Dataset;
use crate::loss::{alpha_table, AlphaTable, DEFAULT_BETA};

/// Instance counts of the eleven classes shared by DOTA and DIOR.
pub fn dota2dior_fixture() -> Vec<(&'static str, u64)> {
    vec![
        ("vehicle", 96_783),
        ("ship", 28_270),
        ("airplane", 6_055),
        ("harbor", 5_711),
        ("storage tank", 5_417),
        ("tennis court", 1_662),
        ("bridge", 1_040),
        ("baseball field", 516),
        ("track field", 417),
        ("basketball court", 358),
        ("airport", 154),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassCount {
    pub name: String,
    pub count: u64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassStats {
    pub classes: Vec<ClassCount>,
    pub total: u64,
    /// Absent when some class has no instances or there is only one class.
    pub alpha: Option<AlphaTable>,
}

impl ClassStats {
    pub fn from_counts<S: AsRef<str>>(names: &[S], counts: &[u64], beta: f64) -> Self {
        let total: u64 = counts.iter().sum();
        let classes = names
            .iter()
            .zip(counts)
            .map(|(n, &count)| ClassCount {
                name: n.as_ref().to_string(),
                count,
                fraction: if total == 0 { 0.0 } else { count as f64 / total as f64 },
            })
            .collect();
        Self {
            classes,
            total,
            alpha: alpha_table(counts, beta).ok(),
        }
    }
}

/// Per-class instance counts, fractions and the derived alpha table.
pub fn class_stats(ds: &Dataset, beta: f64) -> ClassStats {
    let mut counts = vec![0u64; ds.classes.len()];
    for a in &ds.annotations {
        if let Some(i) = ds.class_index(&a.class) {
            counts[i] += 1;
        }
    }
    ClassStats::from_counts(&ds.classes, &counts, beta)
}

impl ClassStats {
    /// Statistics of [`dota2dior_fixture`] with the default beta.
    pub fn dota2dior() -> Self {
        let fixture = dota2dior_fixture();
        let names: Vec<&str> = fixture.iter().map(|f| f.0).collect();
        let counts: Vec<u64> = fixture.iter().map(|f| f.1).collect();
        Self::from_counts(&names, &counts, DEFAULT_BETA)
    }
}
