//! In-process predictors selectable from the command line:
//!
//! ```text
//! planted:rows=4-6+10,k=2.5,bias=0.3
//! linear:file=weights.csv
//! uniform:classes=3
//! ```

use std::collections::BTreeMap;

use evidence_core::predictor::{
    planted_rows_predictor, uniform_predictor, LinearSoftmaxPredictor, Predictor,
};

fn parse_params(body: &str) -> Result<BTreeMap<&str, &str>, String> {
    let mut params = BTreeMap::new();
    for part in body.split(',').filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {part:?}"))?;
        if params.insert(key.trim(), value.trim()).is_some() {
            return Err(format!("parameter {key:?} given twice"));
        }
    }
    Ok(params)
}

/// `4-6+10` -> {4, 5, 6, 10}; ranges are inclusive.
pub fn parse_rows(spec: &str) -> Result<Vec<usize>, String> {
    let mut rows = Vec::new();
    for part in spec.split('+') {
        let bad = || format!("bad row range {part:?}");
        match part.split_once('-') {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| bad())?;
                let b: usize = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                rows.extend(a..=b);
            }
            None => rows.push(part.trim().parse().map_err(|_| bad())?),
        }
    }
    Ok(rows)
}

fn number(params: &BTreeMap<&str, &str>, key: &str, default: f64) -> Result<f64, String> {
    params.get(key).map_or(Ok(default), |v| {
        v.parse().map_err(|_| format!("{key}={v} is not a number"))
    })
}

fn reject_unknown(params: &BTreeMap<&str, &str>, allowed: &[&str]) -> Result<(), String> {
    match params.keys().find(|k| !allowed.contains(k)) {
        Some(k) => Err(format!(
            "unknown parameter {k:?}; expected one of {allowed:?}"
        )),
        None => Ok(()),
    }
}

pub fn parse_builtin(spec: &str) -> Result<Box<dyn Predictor>, String> {
    let (name, body) = spec.split_once(':').unwrap_or((spec, ""));
    let params = parse_params(body)?;
    match name {
        "planted" => {
            reject_unknown(&params, &["rows", "k", "bias"])?;
            let rows = parse_rows(params.get("rows").ok_or("planted needs rows=a-b")?)?;
            let k = number(&params, "k", 1.0)?;
            let bias = number(&params, "bias", 0.0)?;
            Ok(Box::new(
                planted_rows_predictor(rows, k, bias).map_err(|e| e.to_string())?,
            ))
        }
        "linear" => {
            reject_unknown(&params, &["file"])?;
            let file = params.get("file").ok_or("linear needs file=weights.csv")?;
            Ok(Box::new(
                LinearSoftmaxPredictor::from_csv(file).map_err(|e| e.to_string())?,
            ))
        }
        "uniform" => {
            reject_unknown(&params, &["classes"])?;
            let classes = number(&params, "classes", 2.0)?;
            if classes.fract() != 0.0 || classes < 0.0 {
                return Err(format!("classes={classes} is not a count"));
            }
            Ok(Box::new(
                uniform_predictor(classes as usize).map_err(|e| e.to_string())?,
            ))
        }
        other => Err(format!(
            "unknown builtin {other:?}; use planted:..., linear:..., or uniform:..."
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_ranges() {
        assert_eq!(parse_rows("4-6").unwrap(), vec![4, 5, 6]);
        assert_eq!(parse_rows("1+3-4").unwrap(), vec![1, 3, 4]);
        assert!(parse_rows("6-4").is_err());
        assert!(parse_rows("x").is_err());
    }

    #[test]
    fn builtin_specs() {
        assert_eq!(
            parse_builtin("planted:rows=4-6")
                .unwrap()
                .info()
                .class_count,
            2
        );
        assert_eq!(
            parse_builtin("uniform:classes=3")
                .unwrap()
                .info()
                .class_count,
            3
        );
        assert!(parse_builtin("planted:rows=1,q=2").is_err());
        assert!(parse_builtin("planted").is_err());
        assert!(parse_builtin("resnet:depth=50").is_err());
        assert!(parse_builtin("linear:file=/does/not/exist.csv").is_err());
    }
}
