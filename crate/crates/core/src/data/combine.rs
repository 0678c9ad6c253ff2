use std::collections::BTreeMap;

use super::{DataError, DatasetManifest, SourceCode};

const PRESETS_JSON: &str = include_str!("../../assets/combinations.json");

/// Every train-set combination string reported for the top models, keyed by
/// the string itself (e.g. `"a+b+c+d+e+g"`).
pub fn combination_presets() -> BTreeMap<String, Vec<SourceCode>> {
    serde_json::from_str(PRESETS_JSON).expect("shipped presets are valid")
}

/// Parses `"a+b+c"` into codes, rejecting repeats.
pub fn parse_combination(expr: &str) -> Result<Vec<SourceCode>, DataError> {
    let mut codes: Vec<SourceCode> = Vec::new();
    for part in expr.split('+') {
        let code = SourceCode::new(part.trim())?;
        if codes.contains(&code) {
            return Err(DataError::DuplicateCode(code.to_string()));
        }
        codes.push(code);
    }
    Ok(codes)
}

/// A preset name, or failing that a `+`-separated list of codes.
pub fn resolve_combination(name_or_expr: &str) -> Result<Vec<SourceCode>, DataError> {
    match combination_presets().remove(name_or_expr) {
        Some(codes) => Ok(codes),
        None => parse_combination(name_or_expr),
    }
}

/// Concatenates the manifests named by `combo`, in that order.
pub fn combine(
    manifests: &BTreeMap<SourceCode, DatasetManifest>,
    combo: &[SourceCode],
) -> Result<DatasetManifest, DataError> {
    let mut records = Vec::new();
    for (i, code) in combo.iter().enumerate() {
        if combo[..i].contains(code) {
            return Err(DataError::DuplicateCode(code.to_string()));
        }
        let m = manifests
            .get(code)
            .ok_or_else(|| DataError::UnknownCode(code.to_string()))?;
        records.extend_from_slice(m.records());
    }
    DatasetManifest::new(records, combo.to_vec())
}
