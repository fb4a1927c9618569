//! Population export as a delimited table, one column per attribute.

use std::collections::BTreeMap;

use super::{
    AgentProfile, AttributeKind, AttributeValue, Big5Traits, NarrativeMode, ProfileError,
    ProfileSchema,
};

fn cell(value: &AttributeValue) -> String {
    match value {
        AttributeValue::Integer(v) => v.to_string(),
        AttributeValue::Real(v) => v.to_string(),
        AttributeValue::Category(v) => v.clone(),
        AttributeValue::Big5(t) => t
            .values()
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";"),
    }
}

pub fn population_to_csv(schema: &ProfileSchema, population: &[AgentProfile]) -> String {
    let story = schema.narrative_mode == NarrativeMode::Storytelling;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["agent_id".to_string(), "seed".to_string()];
    header.extend(schema.attributes.iter().map(|a| a.name.clone()));
    if story {
        header.push("narrative".into());
    }
    w.write_record(&header).expect("in-memory write");
    for p in population {
        let mut row = vec![p.agent_id.clone(), p.seed.to_string()];
        row.extend(
            schema
                .attributes
                .iter()
                .map(|a| p.attributes.get(&a.name).map(cell).unwrap_or_default()),
        );
        if story {
            row.push(p.narrative.clone().unwrap_or_default());
        }
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
}

pub fn population_from_csv(schema: &ProfileSchema, text: &str) -> Result<Vec<AgentProfile>, ProfileError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| ProfileError::Table(e.to_string()))?
        .clone();
    let column = |name: &str| header.iter().position(|h| h == name);
    let id_col = column("agent_id").ok_or_else(|| ProfileError::Table("missing agent_id column".into()))?;
    let seed_col = column("seed").ok_or_else(|| ProfileError::Table("missing seed column".into()))?;
    let narrative_col = column("narrative");
    let attr_cols: Vec<_> = schema
        .attributes
        .iter()
        .map(|a| {
            column(&a.name)
                .map(|c| (a, c))
                .ok_or_else(|| ProfileError::Table(format!("missing column {}", a.name)))
        })
        .collect::<Result<_, _>>()?;

    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| ProfileError::Table(format!("line {line}: {e}")))?;
        let bad = |what: &str| ProfileError::Table(format!("line {line}: {what}"));
        let mut attributes = BTreeMap::new();
        for (spec, col) in &attr_cols {
            let raw = row.get(*col).unwrap_or_default();
            let value = match &spec.kind {
                AttributeKind::Categorical { .. } => AttributeValue::Category(raw.to_owned()),
                AttributeKind::IntegerRange { .. } => {
                    AttributeValue::Integer(raw.parse().map_err(|_| bad(&spec.name))?)
                }
                AttributeKind::RealRange { .. } => {
                    AttributeValue::Real(raw.parse().map_err(|_| bad(&spec.name))?)
                }
                AttributeKind::Big5 => {
                    let parts: Vec<f64> = raw
                        .split(';')
                        .map(str::parse)
                        .collect::<Result<_, _>>()
                        .map_err(|_| bad(&spec.name))?;
                    let arr: [f64; 5] = parts.try_into().map_err(|_| bad(&spec.name))?;
                    AttributeValue::Big5(Big5Traits::from_values(arr))
                }
            };
            if !spec.contains(&value) {
                return Err(bad(&format!("{} value {raw:?} outside its domain", spec.name)));
            }
            attributes.insert(spec.name.clone(), value);
        }
        out.push(AgentProfile {
            agent_id: row.get(id_col).unwrap_or_default().to_owned(),
            attributes,
            narrative: narrative_col
                .and_then(|c| row.get(c))
                .filter(|s| !s.is_empty())
                .map(str::to_owned),
            seed: row
                .get(seed_col)
                .unwrap_or_default()
                .parse()
                .map_err(|_| bad("seed"))?,
        });
    }
    let mut ids = std::collections::HashSet::new();
    if let Some(dup) = out.iter().find(|p| !ids.insert(p.agent_id.as_str())) {
        return Err(ProfileError::Table(format!("duplicate agent_id {}", dup.agent_id)));
    }
    Ok(out)
}

/// A JSON array of profiles, checked against `schema` the same way as the
/// table form.
pub fn population_from_json(schema: &ProfileSchema, text: &str) -> Result<Vec<AgentProfile>, ProfileError> {
    let pop: Vec<AgentProfile> = serde_json::from_str(text).map_err(|e| ProfileError::Table(e.to_string()))?;
    let mut ids = std::collections::HashSet::new();
    for (i, p) in pop.iter().enumerate() {
        let bad = |what: String| ProfileError::Table(format!("entry {}: {what}", i + 1));
        if p.agent_id.is_empty() || !ids.insert(p.agent_id.as_str()) {
            return Err(bad(format!("missing or duplicate agent_id {:?}", p.agent_id)));
        }
        for spec in &schema.attributes {
            match p.attributes.get(&spec.name) {
                Some(v) if spec.contains(v) => {}
                Some(_) => return Err(bad(format!("{} outside its domain", spec.name))),
                None => return Err(bad(format!("missing {}", spec.name))),
            }
        }
        if let Some(extra) = p.attributes.keys().find(|k| schema.attribute(k).is_none()) {
            return Err(bad(format!("undeclared attribute {extra}")));
        }
    }
    Ok(pop)
}

/// Loads an uploaded population; `format` is `csv` or `json`.
pub fn load_population(schema: &ProfileSchema, bytes: &[u8], format: &str) -> Result<Vec<AgentProfile>, ProfileError> {
    let text = std::str::from_utf8(bytes).map_err(|_| ProfileError::Table("population is not UTF-8".into()))?;
    match format {
        "csv" | "delimited-table" => population_from_csv(schema, text),
        "json" | "structured-text" => population_from_json(schema, text),
        other => Err(ProfileError::Table(format!("unknown population format {other:?} (csv, json)"))),
    }
}
