//! The canonical case format: TOML with explicit field names and physical
//! units, versioned by a top-level `format_version`.
//!
//! ```toml
//! format_version = 1
//! name = "case30"
//! base_mva = 100.0
//!
//! [[bus]]
//! id = 1
//! kind = "slack"
//! pd_mw = 0.0
//! ...
//!
//! [[generator]]
//! bus = 1
//! ...
//! cost = { c2 = 0.00375, c1 = 2.0, c0 = 0.0 }
//! ```

use serde::{Deserialize, Serialize};

use super::{CaseError, RawBranch, RawBus, RawCase, RawGenerator};

pub const CANONICAL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CanonicalFile {
    format_version: u32,
    name: String,
    base_mva: f64,
    bus: Vec<RawBus>,
    #[serde(default)]
    branch: Vec<RawBranch>,
    generator: Vec<RawGenerator>,
}

pub fn parse_canonical(text: &str) -> Result<RawCase, CaseError> {
    let file: CanonicalFile = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1).unwrap_or(0);
        CaseError::Syntax { line, msg: e.message().to_string() }
    })?;
    if file.format_version != CANONICAL_FORMAT_VERSION {
        return Err(CaseError::Unsupported(format!(
            "canonical format version {} (this build reads {})",
            file.format_version, CANONICAL_FORMAT_VERSION
        )));
    }
    Ok(RawCase {
        name: file.name,
        base_mva: file.base_mva,
        bus: file.bus,
        branch: file.branch,
        generator: file.generator,
    })
}

pub fn write_canonical(raw: &RawCase) -> String {
    let file = CanonicalFile {
        format_version: CANONICAL_FORMAT_VERSION,
        name: raw.name.clone(),
        base_mva: raw.base_mva,
        bus: raw.bus.clone(),
        branch: raw.branch.clone(),
        generator: raw.generator.clone(),
    };
    toml::to_string(&file).expect("case data is always representable as TOML")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::fixtures::two_bus;
    use crate::netmodel::NetworkCase;

    #[test]
    fn round_trips_through_text() {
        let raw = two_bus(0.01, 0.1, 50.0, 20.0).to_raw();
        let text = write_canonical(&raw);
        assert!(text.starts_with("format_version = 1"));
        assert_eq!(parse_canonical(&text).unwrap(), raw);
    }

    #[test]
    fn missing_cost_reported_by_validation() {
        let raw = two_bus(0.01, 0.1, 50.0, 20.0).to_raw();
        let text = write_canonical(&raw);
        let stripped: String = text
            .lines()
            .filter(|l| {
                !l.starts_with("[generator.cost]")
                    && !l.starts_with("c2")
                    && !l.starts_with("c1")
                    && !l.starts_with("c0")
            })
            .map(|l| format!("{l}\n"))
            .collect();
        let parsed = parse_canonical(&stripped).unwrap();
        assert!(matches!(NetworkCase::from_raw(&parsed), Err(CaseError::MissingCost { gen: 1, .. })));
    }

    #[test]
    fn syntax_error_has_line() {
        let text = "format_version = 1\nname = \"x\"\nbase_mva = = 3\n";
        match parse_canonical(text) {
            Err(CaseError::Syntax { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let raw = two_bus(0.01, 0.1, 50.0, 20.0).to_raw();
        let text = write_canonical(&raw).replace("format_version = 1", "format_version = 9");
        assert!(matches!(parse_canonical(&text), Err(CaseError::Unsupported(_))));
    }
}
