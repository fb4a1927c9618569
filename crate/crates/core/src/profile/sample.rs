use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    render, validate_schema, AgentProfile, AttributeKind, AttributeValue, Big5Traits, Constraint,
    ConstraintKind, NarrativeMode, ProfileError, ProfileSchema, Term, TermTest,
};

/// Attempts per agent before a schema's forbids are declared unsatisfiable.
pub const MAX_SAMPLING_ATTEMPTS: u32 = 1000;

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed for item `index` of a run.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

pub fn agent_id(index: usize) -> String {
    format!("a{index}")
}

/// The term a multiplier reweights: the one on the last-declared attribute.
pub(super) fn multiplier_target<'a>(schema: &ProfileSchema, c: &'a Constraint) -> Option<&'a Term> {
    c.when
        .iter()
        .filter_map(|t| schema.position(&t.attribute).map(|p| (p, t)))
        .max_by_key(|(p, _)| *p)
        .map(|(_, t)| t)
}

/// Draws one attribute map.
///
/// Attributes are drawn in declared order. Before each categorical draw the
/// option weights are multiplied by every weight-multiplier whose other terms
/// are already satisfied. A finished draw that matches any forbid constraint
/// is thrown away and redrawn, up to [`MAX_SAMPLING_ATTEMPTS`] times.
pub fn sample_conditional<R: Rng + ?Sized>(
    schema: &ProfileSchema,
    rng: &mut R,
) -> Result<BTreeMap<String, AttributeValue>, ProfileError> {
    let multipliers: Vec<(usize, &Term, f64, &Constraint)> = schema
        .constraints
        .iter()
        .filter_map(|c| match c.kind {
            ConstraintKind::WeightMultiplier { factor } => {
                let target = multiplier_target(schema, c)?;
                Some((schema.position(&target.attribute)?, target, factor, c))
            }
            ConstraintKind::Forbid => None,
        })
        .collect();

    'attempt: for _ in 0..MAX_SAMPLING_ATTEMPTS {
        let mut drawn = BTreeMap::new();
        for (index, attr) in schema.attributes.iter().enumerate() {
            let value = match &attr.kind {
                AttributeKind::Categorical { options } => {
                    let mut weights: Vec<f64> = options.iter().map(|o| o.weight.max(0.0)).collect();
                    for (_, target, factor, constraint) in
                        multipliers.iter().filter(|(pos, ..)| *pos == index)
                    {
                        let earlier_hold = constraint
                            .when
                            .iter()
                            .filter(|t| !std::ptr::eq(*t, *target))
                            .all(|t| drawn.get(&t.attribute).is_some_and(|v| t.matches(v)));
                        if !earlier_hold {
                            continue;
                        }
                        if let TermTest::Equals { equals } = &target.test {
                            if let Some(i) = options.iter().position(|o| &o.value == equals) {
                                weights[i] *= factor;
                            }
                        }
                    }
                    match weighted_pick(&weights, rng) {
                        Some(i) => AttributeValue::Category(options[i].value.clone()),
                        None => continue 'attempt,
                    }
                }
                AttributeKind::IntegerRange { low, high } => {
                    AttributeValue::Integer(rng.random_range(*low..=*high))
                }
                AttributeKind::RealRange { low, high } => {
                    if low == high {
                        AttributeValue::Real(*low)
                    } else {
                        AttributeValue::Real(rng.random_range(*low..=*high))
                    }
                }
                AttributeKind::Big5 => {
                    let mut v = [0.0; 5];
                    for x in &mut v {
                        *x = rng.random::<f64>();
                    }
                    AttributeValue::Big5(Big5Traits::from_values(v))
                }
            };
            drawn.insert(attr.name.clone(), value);
        }

        let forbidden = schema
            .constraints
            .iter()
            .any(|c| matches!(c.kind, ConstraintKind::Forbid) && c.matches(&drawn));
        if !forbidden {
            return Ok(drawn);
        }
    }

    Err(ProfileError::Unsatisfiable {
        attempts: MAX_SAMPLING_ATTEMPTS,
        constraints: schema.constraints.iter().map(|c| c.to_string()).collect(),
    })
}

fn weighted_pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (i, w) in weights.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        last = Some(i);
        if u < *w {
            return Some(i);
        }
        u -= w;
    }
    last
}

/// Generates `n` profiles. Agent `i` is drawn from its own stream seeded by
/// `mix_seed(seed, i)`, so a smaller population is a prefix of a larger one.
pub fn generate_population(
    schema: &ProfileSchema,
    n: usize,
    seed: u64,
) -> Result<Vec<AgentProfile>, ProfileError> {
    let report = validate_schema(schema);
    if !report.is_empty() {
        return Err(ProfileError::InvalidSchema(report));
    }
    (0..n)
        .map(|index| {
            let agent_seed = mix_seed(seed, index as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(agent_seed);
            let attributes = sample_conditional(schema, &mut rng)?;
            let mut profile = AgentProfile {
                agent_id: agent_id(index),
                attributes,
                narrative: None,
                seed: agent_seed,
            };
            if schema.narrative_mode == NarrativeMode::Storytelling {
                profile.narrative = Some(render::compose_story(&profile, schema));
            }
            Ok(profile)
        })
        .collect()
}
