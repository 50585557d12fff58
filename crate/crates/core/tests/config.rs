use gmc_core::config::{merge, parse_counts, Preset, RunConfig, SCHEMA};
use serde_json::{json, Value};

/// Structural check of `v` against the subset of JSON Schema the shipped
/// schema uses: properties, required, items, oneOf, enum, const, type.
fn conforms(v: &Value, s: &Value, path: &str) -> Result<(), String> {
    if let Some(branches) = s.get("oneOf").and_then(Value::as_array) {
        let ok = branches.iter().filter(|b| conforms(v, b, path).is_ok()).count();
        return if ok == 1 { Ok(()) } else { Err(format!("{path}: {ok} oneOf branches match")) };
    }
    if let Some(e) = s.get("enum").and_then(Value::as_array) {
        if !e.contains(v) {
            return Err(format!("{path}: {v} not in enum"));
        }
    }
    if let Some(c) = s.get("const") {
        if c != v {
            return Err(format!("{path}: {v} != const {c}"));
        }
    }
    if let Some(t) = s.get("type") {
        let types: Vec<&str> = match t {
            Value::String(x) => vec![x.as_str()],
            Value::Array(xs) => xs.iter().filter_map(Value::as_str).collect(),
            _ => vec![],
        };
        let actual = match v {
            Value::Null => "null",
            Value::Bool(_) => "boolean",
            Value::Number(n) if n.is_u64() || n.is_i64() => "integer",
            Value::Number(_) => "number",
            Value::String(_) => "string",
            Value::Array(_) => "array",
            Value::Object(_) => "object",
        };
        let fits = types.iter().any(|&t| t == actual || (t == "number" && actual == "integer"));
        if !fits {
            return Err(format!("{path}: {actual} is not {types:?}"));
        }
    }
    if let (Some(props), Value::Object(obj)) = (s.get("properties").and_then(Value::as_object), v) {
        for (k, x) in obj {
            let sub = props.get(k).ok_or_else(|| format!("{path}.{k}: not in schema"))?;
            conforms(x, sub, &format!("{path}.{k}"))?;
        }
        for r in s.get("required").and_then(Value::as_array).into_iter().flatten() {
            let r = r.as_str().unwrap();
            if !obj.contains_key(r) {
                return Err(format!("{path}: missing required {r}"));
            }
        }
    }
    if let (Some(items), Value::Array(xs)) = (s.get("items"), v) {
        for (i, x) in xs.iter().enumerate() {
            conforms(x, items, &format!("{path}[{i}]"))?;
        }
    }
    Ok(())
}

fn schema() -> Value {
    serde_json::from_str(SCHEMA).unwrap()
}

#[test]
fn every_preset_validates_and_matches_the_schema() {
    let s = schema();
    for p in Preset::ALL {
        let cfg = RunConfig::preset(p);
        cfg.validate().unwrap();
        conforms(&cfg.to_value(), &s, p.name()).unwrap();
        assert_eq!(Preset::parse(p.name()).unwrap(), p);
    }
}

#[test]
fn schema_lists_every_serialized_field() {
    // Every top-level property in the schema is produced, and vice versa.
    let s = schema();
    let props: Vec<&String> = s["properties"].as_object().unwrap().keys().collect();
    let v = RunConfig::preset(Preset::ShortBeamDistributed).to_value();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    let mut a = props.clone();
    let mut b = keys.clone();
    a.sort();
    b.sort();
    assert_eq!(a, b);
}

#[test]
fn overrides_merge_over_the_preset() {
    let cfg = RunConfig::from_value(&json!({
        "preset": "short_beam_point",
        "zones": [8, 2],
        "optimizer": {"max_iterations": 7}
    }))
    .unwrap();
    assert_eq!(cfg.preset, Preset::ShortBeamPoint);
    assert_eq!(cfg.zones, vec![8, 2]);
    assert_eq!(cfg.optimizer.max_iterations, 7);
    // Untouched nested fields keep their defaults.
    assert_eq!(cfg.optimizer.patience, 5);
    assert_eq!(cfg.problem.compliance_factor, 2.0);
}

#[test]
fn unknown_fields_are_rejected() {
    assert!(RunConfig::from_value(&json!({"preset": "short_beam_point", "zonez": [2, 2]})).is_err());
    assert!(RunConfig::from_value(&json!({"preset": "short_beam_point", "optimizer": {"iters": 2}})).is_err());
    assert!(RunConfig::from_value(&json!({"preset": "no_such_preset"})).is_err());
}

#[test]
fn inconsistent_configs_fail_validation() {
    let bad = [
        json!({"preset": "short_beam_distributed", "zones": [7, 8]}),
        json!({"preset": "short_beam_distributed", "zones": [4, 2, 1]}),
        json!({"preset": "short_beam_distributed", "pool": 0}),
        json!({"preset": "short_beam_distributed", "cell": {"builtin": "orthogonal_cross_3d"}}),
        json!({"preset": "beam_3d_line", "material": {"model": "plane_stress_2d"}}),
        json!({"preset": "short_beam_distributed", "optimizer": {"detj": {"lo": 2.0}}}),
    ];
    for b in bad {
        assert!(RunConfig::from_value(&b).is_err(), "{b}");
    }
}

#[test]
fn merge_replaces_arrays_and_recurses_into_objects() {
    let mut a = json!({"x": {"y": 1, "z": [1, 2, 3]}, "w": 0});
    merge(&mut a, &json!({"x": {"z": [9]}, "v": true}));
    assert_eq!(a, json!({"x": {"y": 1, "z": [9]}, "w": 0, "v": true}));
}

#[test]
fn counts_parse() {
    assert_eq!(parse_counts("16x8").unwrap(), vec![16, 8]);
    assert_eq!(parse_counts("4X1x1").unwrap(), vec![4, 1, 1]);
    for bad in ["16", "0x4", "axb", "1x2x3x4"] {
        assert!(parse_counts(bad).is_err(), "{bad}");
    }
}

#[test]
fn config_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.json");
    let cfg = RunConfig::preset(Preset::Beam3dLine);
    std::fs::write(&p, serde_json::to_string_pretty(&cfg.to_value()).unwrap()).unwrap();
    assert_eq!(RunConfig::from_file(&p).unwrap(), cfg);
}
