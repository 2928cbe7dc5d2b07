use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use super::{AnnotationRecord, Dataset};
use crate::error::{Error, Result};

/// The eleven DIOR classes that DOTA also covers, most frequent first.
pub const DIOR_COMMON_CLASSES: [&str; 11] = [
    "vehicle",
    "ship",
    "airplane",
    "harbor",
    "storage tank",
    "tennis court",
    "bridge",
    "baseball field",
    "track field",
    "basketball court",
    "airport",
];

/// DOTA class name to DIOR class name.
pub fn dota2dior_table() -> BTreeMap<String, String> {
    [
        ("small-vehicle", "vehicle"),
        ("large-vehicle", "vehicle"),
        ("ship", "ship"),
        ("plane", "airplane"),
        ("harbor", "harbor"),
        ("storage-tank", "storage tank"),
        ("tennis-court", "tennis court"),
        ("bridge", "bridge"),
        ("baseball-diamond", "baseball field"),
        ("ground-track-field", "track field"),
        ("basketball-court", "basketball court"),
        ("airport", "airport"),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ClassMapReport {
    pub kept: usize,
    /// Annotations whose class has no entry in the table.
    pub dropped: usize,
    pub dropped_by_class: BTreeMap<String, usize>,
}

/// Rename classes through `table` onto the `classes` list, dropping
/// annotations of unmapped classes. An empty result is not an error; check
/// `report.kept`.
pub fn map_classes(
    ds: &Dataset,
    table: &BTreeMap<String, String>,
    classes: &[String],
) -> Result<(Dataset, ClassMapReport)> {
    let dest: HashSet<&str> = classes.iter().map(String::as_str).collect();
    if let Some((src, dst)) = table.iter().find(|(_, d)| !dest.contains(d.as_str())) {
        return Err(Error::Config(format!(
            "mapping `{src}` -> `{dst}` targets a class outside the destination list"
        )));
    }
    let mut report = ClassMapReport::default();
    let mut annotations = Vec::with_capacity(ds.annotations.len());
    for a in &ds.annotations {
        match table.get(&a.class) {
            Some(dst) => annotations.push(AnnotationRecord {
                class: dst.clone(),
                ..a.clone()
            }),
            None => *report.dropped_by_class.entry(a.class.clone()).or_insert(0) += 1,
        }
    }
    report.kept = annotations.len();
    report.dropped = ds.annotations.len() - report.kept;
    Ok((
        Dataset {
            classes: classes.to_vec(),
            images: ds.images.clone(),
            annotations,
        },
        report,
    ))
}
