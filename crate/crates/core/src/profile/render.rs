use super::{
    placeholder_key, sample::splitmix64, AgentProfile, AttributeKind, AttributeSpec, AttributeValue,
    Big5Traits, NarrativeMode, ProfileError, ProfileSchema,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraitBand {
    Low,
    Moderate,
    High,
}

impl TraitBand {
    pub fn as_str(self) -> &'static str {
        match self {
            TraitBand::Low => "low",
            TraitBand::Moderate => "moderate",
            TraitBand::High => "high",
        }
    }
}

/// Bands a trait score at thirds.
pub fn trait_band(score: f64) -> TraitBand {
    if score < 1.0 / 3.0 {
        TraitBand::Low
    } else if score < 2.0 / 3.0 {
        TraitBand::Moderate
    } else {
        TraitBand::High
    }
}

fn render_big5(traits: &Big5Traits) -> String {
    Big5Traits::NAMES
        .iter()
        .zip(traits.values())
        .map(|(name, v)| format!("{} {}", trait_band(v).as_str(), name))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Prompt text for one attribute value (without units).
pub fn render_value(spec: &AttributeSpec, value: &AttributeValue) -> String {
    match (value, &spec.kind) {
        (AttributeValue::Integer(v), _) => v.to_string(),
        (AttributeValue::Real(v), AttributeKind::RealRange { .. }) => format!("{v:.2}"),
        (AttributeValue::Real(v), _) => v.to_string(),
        (AttributeValue::Category(v), _) => v.clone(),
        (AttributeValue::Big5(t), _) => render_big5(t),
    }
}

/// Names of all `<NAME>` placeholders in `template`, in order of appearance.
pub(crate) fn placeholders(template: &str) -> Vec<String> {
    let mut out = Vec::new();
    scan(template, |segment| {
        if let Segment::Placeholder(name) = segment {
            out.push(name.to_owned());
        }
    });
    out
}

enum Segment<'a> {
    Text(&'a str),
    Placeholder(&'a str),
}

fn is_placeholder_name(inner: &str) -> bool {
    let mut chars = inner.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && inner
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | ' ' | '-'))
        && !inner.ends_with(' ')
}

fn scan<'a>(template: &'a str, mut emit: impl FnMut(Segment<'a>)) {
    let mut rest = template;
    while let Some(open) = rest.find('<') {
        let after = &rest[open + 1..];
        match after.find('>') {
            Some(close) if is_placeholder_name(&after[..close]) => {
                emit(Segment::Text(&rest[..open]));
                emit(Segment::Placeholder(&after[..close]));
                rest = &after[close + 1..];
            }
            _ => {
                emit(Segment::Text(&rest[..=open]));
                rest = after;
            }
        }
    }
    emit(Segment::Text(rest));
}

/// Renders persona text for `profile`.
///
/// Mechanistic schemas substitute every `<NAME>` in `template` with the named
/// attribute's value. Storytelling schemas ignore the template's wording and
/// compose a paragraph from a fixed sentence bank, picking sentence variants
/// from the profile seed; placeholders in the template must still resolve.
pub fn render_profile_prompt(
    profile: &AgentProfile,
    schema: &ProfileSchema,
    template: &str,
) -> Result<String, ProfileError> {
    let mut out = String::with_capacity(template.len() + 64);
    let mut unknown = None;
    scan(template, |segment| match segment {
        Segment::Text(t) => out.push_str(t),
        Segment::Placeholder(name) => {
            let key = placeholder_key(name);
            let found = schema
                .attributes
                .iter()
                .find(|a| placeholder_key(&a.name) == key)
                .and_then(|a| profile.attributes.get(&a.name).map(|v| render_value(a, v)));
            match found {
                Some(text) => out.push_str(&text),
                None => {
                    unknown.get_or_insert_with(|| name.to_owned());
                }
            }
        }
    });
    if let Some(name) = unknown {
        return Err(ProfileError::UnknownPlaceholder(name));
    }
    match schema.narrative_mode {
        NarrativeMode::Mechanistic => Ok(out),
        NarrativeMode::Storytelling => Ok(profile
            .narrative
            .clone()
            .unwrap_or_else(|| compose_story(profile, schema))),
    }
}

const OPENINGS: [&str; 3] = [
    "Here is a short account of who you are.",
    "This is your story.",
    "Picture yourself as the following person.",
];

const CATEGORY_SENTENCES: [&str; 3] = [
    "Your {label} is {value}.",
    "When asked about your {label}, you answer {value}.",
    "You would describe your {label} as {value}.",
];

const NUMBER_SENTENCES: [&str; 3] = [
    "Your {label} is {value}{units}.",
    "You report a {label} of {value}{units}.",
    "Your {label} comes to {value}{units}.",
];

const TRAIT_SENTENCES: [&str; 3] = [
    "In temperament you show {value}.",
    "People who know you would say you have {value}.",
    "Your personality combines {value}.",
];

pub(super) fn compose_story(profile: &AgentProfile, schema: &ProfileSchema) -> String {
    let pick = |slot: u64| (splitmix64(profile.seed ^ splitmix64(slot)) % 3) as usize;
    let mut sentences = vec![OPENINGS[pick(u64::MAX)].to_owned()];
    for (i, attr) in schema.attributes.iter().enumerate() {
        let Some(value) = profile.attributes.get(&attr.name) else {
            continue;
        };
        let bank = match attr.kind {
            AttributeKind::Categorical { .. } => &CATEGORY_SENTENCES,
            AttributeKind::IntegerRange { .. } | AttributeKind::RealRange { .. } => &NUMBER_SENTENCES,
            AttributeKind::Big5 => &TRAIT_SENTENCES,
        };
        let units = attr
            .units
            .as_deref()
            .map(|u| format!(" {u}"))
            .unwrap_or_default();
        sentences.push(
            bank[pick(i as u64)]
                .replace("{label}", &attr.name.replace('_', " "))
                .replace("{value}", &render_value(attr, value))
                .replace("{units}", &units),
        );
    }
    sentences.join(" ")
}
