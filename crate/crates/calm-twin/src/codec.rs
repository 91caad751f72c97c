//! Text codec mapping trajectories to the prompt wire format and back.
//!
//! Encoding renders one line of pipe-separated steps:
//! `Time <t>: <name>: <value>, <name>: <value> | Time <t+1>: ...`.
//! Values use the fixed decimal count declared by their schema. Decoding is
//! noise tolerant: Markdown characters and prose lines emitted by language
//! models are stripped before parsing. The grammar is documented in
//! FORMAT.md at the repository root.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{TimeStep, Trajectory, VariableKind, VariableSchema};

/// Counts of repairs applied by the tolerant parser.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostics {
    /// Characters removed: Markdown noise in kept lines plus the full
    /// contents of dropped lines.
    pub stripped_characters: usize,
    /// Lines that survived cleanup and contributed steps.
    pub recovered_lines: usize,
    /// Byte position in the original text of the first stripped character
    /// or dropped line; `None` when the input was already clean.
    pub position_of_first_error: Option<usize>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("variable '{name}' missing at step {step}")]
    MissingVariable { name: String, step: usize },
    #[error("expected {want} steps, got {got}")]
    WrongStepCount { got: usize, want: usize },
    #[error("unparseable number at position {position}")]
    NumberParse { position: usize },
    #[error("malformed input at position {position}: {detail}")]
    Malformed { position: usize, detail: String },
}

/// Renders a value with a fixed number of decimals. Zero decimals renders
/// as a plain integer with no decimal point.
pub fn render_value(value: f64, decimals: u8) -> String {
    // Normalize -0.0 so non-negative data never renders a minus sign.
    let v = if value == 0.0 { 0.0 } else { value };
    format!("{:.*}", decimals as usize, v)
}

fn encode_series<F>(steps: &[TimeStep], schemas: &[VariableSchema], kind: VariableKind, f: F) -> String
where
    F: Fn(&TimeStep) -> &BTreeMap<String, f64>,
{
    let columns: Vec<&VariableSchema> = schemas
        .iter()
        .filter(|s| s.kind == kind)
        .filter(|s| steps.iter().any(|step| f(step).contains_key(&s.name)))
        .collect();
    if columns.is_empty() {
        return String::new();
    }
    let mut rendered = Vec::with_capacity(steps.len());
    for step in steps {
        let mut items = Vec::new();
        for schema in &columns {
            let Some(&value) = f(step).get(&schema.name) else {
                continue;
            };
            if schema.render_as_flag {
                if value.round() as i64 == 1 {
                    items.push(schema.name.clone());
                }
                // Flag variables are silent when off.
            } else {
                items.push(format!(
                    "{}: {}",
                    schema.name,
                    render_value(value, schema.decimals)
                ));
            }
        }
        if items.is_empty() {
            rendered.push(format!("Time {}:", step.time));
        } else {
            rendered.push(format!("Time {}: {}", step.time, items.join(", ")));
        }
    }
    rendered.join(" | ")
}

/// Renders the state variables of a step sequence.
pub fn encode_states_steps(steps: &[TimeStep], schemas: &[VariableSchema]) -> String {
    encode_series(steps, schemas, VariableKind::State, |s| &s.state)
}

/// Renders the action variables of a step sequence. Returns an empty
/// string when no action variable is present.
pub fn encode_actions_steps(steps: &[TimeStep], schemas: &[VariableSchema]) -> String {
    encode_series(steps, schemas, VariableKind::Action, |s| &s.action)
}

pub fn encode_states(traj: &Trajectory, schemas: &[VariableSchema]) -> String {
    encode_states_steps(&traj.steps, schemas)
}

pub fn encode_actions(traj: &Trajectory, schemas: &[VariableSchema]) -> String {
    encode_actions_steps(&traj.steps, schemas)
}

/// Strips Markdown noise from one line. A `-` is kept when immediately
/// followed by a digit so negative values survive. Returns the cleaned
/// line, the strip count, and the byte offset of the first strip.
fn strip_noise(line: &str) -> (String, usize, Option<usize>) {
    let chars: Vec<(usize, char)> = line.char_indices().collect();
    let mut out = String::with_capacity(line.len());
    let mut stripped = 0usize;
    let mut first = None;
    for (i, &(offset, ch)) in chars.iter().enumerate() {
        let drop = match ch {
            '*' | '`' => true,
            '-' => !chars
                .get(i + 1)
                .map(|(_, c)| c.is_ascii_digit())
                .unwrap_or(false),
            _ => false,
        };
        if drop {
            stripped += 1;
            first.get_or_insert(offset);
        } else {
            out.push(ch);
        }
    }
    (out, stripped, first)
}

/// Parses state text produced by [`encode_states`] (or a noisy variant of
/// it emitted by an LLM) into time steps.
///
/// Tolerant cleanup runs first: `*`, backticks, and non-numeric `-` are
/// removed, and whole lines that do not begin with `Time` are dropped.
/// When `expected_steps` is given the parse must yield exactly that many
/// steps. Every error signals the caller to retry generation.
pub fn decode_states(
    text: &str,
    schemas: &[VariableSchema],
    expected_steps: Option<usize>,
) -> Result<(Vec<TimeStep>, ParseDiagnostics), DecodeError> {
    let mut diagnostics = ParseDiagnostics::default();
    let mut kept_lines: Vec<String> = Vec::new();
    let mut line_start = 0usize;
    for line in text.split('\n') {
        let (clean, stripped, first_strip) = strip_noise(line);
        diagnostics.stripped_characters += stripped;
        if stripped > 0 {
            diagnostics
                .position_of_first_error
                .get_or_insert(line_start + first_strip.unwrap_or(0));
        }
        if clean.trim_start().starts_with("Time") {
            kept_lines.push(clean.trim().to_string());
            diagnostics.recovered_lines += 1;
        } else {
            let dropped = clean.chars().count();
            diagnostics.stripped_characters += dropped;
            if dropped > 0 {
                diagnostics.position_of_first_error.get_or_insert(line_start);
            }
        }
        line_start += line.len() + 1;
    }
    let cleaned = kept_lines.join(" | ");

    let mut steps = Vec::new();
    let mut offset = 0usize;

    for chunk in cleaned.split('|') {
        let chunk_start = offset;
        offset += chunk.len() + 1;
        let trimmed = chunk.trim();
        if trimmed.is_empty() {
            continue;
        }
        let pos = chunk_start + (chunk.len() - chunk.trim_start().len());
        let Some(rest) = trimmed.strip_prefix("Time") else {
            return Err(DecodeError::Malformed {
                position: pos,
                detail: "step does not begin with 'Time'".into(),
            });
        };
        let Some((time_text, vars_text)) = rest.split_once(':') else {
            return Err(DecodeError::Malformed {
                position: pos,
                detail: "missing ':' after time label".into(),
            });
        };
        let Ok(time) = time_text.trim().parse::<i64>() else {
            return Err(DecodeError::NumberParse { position: pos });
        };
        let mut step = TimeStep::new(time);
        let vars_text = vars_text.trim();
        if !vars_text.is_empty() {
            for item in vars_text.split(',') {
                let item = item.trim();
                if item.is_empty() {
                    continue;
                }
                let Some((name, value_text)) = item.split_once(':') else {
                    return Err(DecodeError::Malformed {
                        position: pos,
                        detail: format!("expected 'name: value', got '{item}'"),
                    });
                };
                let name = name.trim();
                let Ok(value) = value_text.trim().parse::<f64>() else {
                    return Err(DecodeError::NumberParse { position: pos });
                };
                step.state.insert(name.to_string(), value);
            }
        }
        steps.push(step);
    }

    if steps.is_empty() {
        return Err(DecodeError::Malformed {
            position: 0,
            detail: "no steps found".into(),
        });
    }
    if let Some(want) = expected_steps {
        if steps.len() != want {
            return Err(DecodeError::WrongStepCount {
                got: steps.len(),
                want,
            });
        }
    }

    let expected: Vec<&VariableSchema> = schemas
        .iter()
        .filter(|s| s.kind == VariableKind::State)
        .collect();
    for (i, step) in steps.iter().enumerate() {
        for schema in &expected {
            if !step.state.contains_key(&schema.name) {
                return Err(DecodeError::MissingVariable {
                    name: schema.name.clone(),
                    step: i,
                });
            }
        }
        for name in step.state.keys() {
            if !expected.iter().any(|s| &s.name == name) {
                return Err(DecodeError::Malformed {
                    position: 0,
                    detail: format!("unknown variable '{name}' at step {i}"),
                });
            }
        }
    }

    Ok((steps, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step(time: i64, state: &[(&str, f64)], action: &[(&str, f64)]) -> TimeStep {
        TimeStep {
            time,
            state: state.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            action: action.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    fn xy_schemas() -> Vec<VariableSchema> {
        vec![
            VariableSchema::state("x", "", 0),
            VariableSchema::state("y", "", 0),
            VariableSchema::action("z", "", 0),
        ]
    }

    #[test]
    fn encodes_the_reference_series() {
        let schemas = xy_schemas();
        let traj = Trajectory::new(
            "t",
            vec![
                step(0, &[("x", 1.0), ("y", 1.0)], &[("z", 0.0)]),
                step(1, &[("x", 2.0), ("y", 1.0)], &[("z", 0.0)]),
                step(2, &[("x", 3.0), ("y", 1.0)], &[("z", 1.0)]),
            ],
        );
        assert_eq!(
            encode_states(&traj, &schemas),
            "Time 0: x: 1, y: 1 | Time 1: x: 2, y: 1 | Time 2: x: 3, y: 1"
        );
        assert_eq!(
            encode_actions(&traj, &schemas),
            "Time 0: z: 0 | Time 1: z: 0 | Time 2: z: 1"
        );
    }

    #[test]
    fn encodes_single_step_single_variable() {
        let schemas = vec![VariableSchema::state("x", "", 0)];
        let traj = Trajectory::new("t", vec![step(0, &[("x", 0.0)], &[])]);
        assert_eq!(encode_states(&traj, &schemas), "Time 0: x: 0");
    }

    #[test]
    fn encodes_cf_step_with_mixed_decimals() {
        let schemas = vec![
            VariableSchema::state("FEV1PP", "", 1),
            VariableSchema::state("Weight", "kg", 1),
            VariableSchema::state("Height", "cm", 0),
        ];
        let traj = Trajectory::new(
            "p",
            vec![step(
                2008,
                &[("FEV1PP", 77.8), ("Weight", 70.1), ("Height", 174.0)],
                &[],
            )],
        );
        assert_eq!(
            encode_states(&traj, &schemas),
            "Time 2008: FEV1PP: 77.8, Weight: 70.1, Height: 174"
        );
    }

    #[test]
    fn renders_trailing_zero_when_decimals_positive() {
        assert_eq!(render_value(65.0, 1), "65.0");
        assert_eq!(render_value(81.0, 1), "81.0");
        assert_eq!(render_value(168.0, 0), "168");
        assert_eq!(render_value(-0.0, 1), "0.0");
    }

    #[test]
    fn flag_actions_render_bare_names() {
        let schemas = vec![VariableSchema::action("Dornase_Alfa", "", 0).with_flag_rendering()];
        let traj = Trajectory::new(
            "p",
            vec![
                step(2008, &[], &[("Dornase_Alfa", 1.0)]),
                step(2009, &[], &[("Dornase_Alfa", 1.0)]),
                step(2010, &[], &[("Dornase_Alfa", 1.0)]),
            ],
        );
        assert_eq!(
            encode_actions(&traj, &schemas),
            "Time 2008: Dornase_Alfa | Time 2009: Dornase_Alfa | Time 2010: Dornase_Alfa"
        );
    }

    #[test]
    fn flag_value_zero_renders_empty_step() {
        let schemas = vec![VariableSchema::action("Rx", "", 0).with_flag_rendering()];
        let traj = Trajectory::new(
            "p",
            vec![step(0, &[], &[("Rx", 0.0)]), step(1, &[], &[("Rx", 1.0)])],
        );
        assert_eq!(encode_actions(&traj, &schemas), "Time 0: | Time 1: Rx");
    }

    #[test]
    fn empty_action_schema_encodes_to_empty_string() {
        let schemas = vec![VariableSchema::state("x", "", 0)];
        let traj = Trajectory::new("t", vec![step(0, &[("x", 1.0)], &[])]);
        assert_eq!(encode_actions(&traj, &schemas), "");
    }

    #[test]
    fn decodes_markdown_wrapped_step() {
        let schemas = vec![
            VariableSchema::state("FEV1PP", "", 1),
            VariableSchema::state("Weight", "kg", 1),
            VariableSchema::state("Height", "cm", 0),
        ];
        let (steps, diag) = decode_states(
            "**Time 2011: FEV1PP: 71.2, Weight: 64.1, Height: 168**",
            &schemas,
            Some(1),
        )
        .unwrap();
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].time, 2011);
        assert_eq!(steps[0].state["FEV1PP"], 71.2);
        assert_eq!(diag.stripped_characters, 4);
        assert_eq!(diag.recovered_lines, 1);
        // First asterisk sits at byte 0 of the original text.
        assert_eq!(diag.position_of_first_error, Some(0));
    }

    #[test]
    fn drops_prose_lines_and_counts_them() {
        let schemas = vec![VariableSchema::state("x", "", 0)];
        let text = "Here is the simulation:\nTime 0: x: 1";
        let (steps, diag) = decode_states(text, &schemas, Some(1)).unwrap();
        assert_eq!(steps[0].state["x"], 1.0);
        assert_eq!(diag.stripped_characters, "Here is the simulation:".len());
    }

    #[test]
    fn clean_text_strips_nothing() {
        let schemas = vec![VariableSchema::state("x", "", 0)];
        let (_, diag) = decode_states("Time 0: x: 5", &schemas, None).unwrap();
        assert_eq!(diag.stripped_characters, 0);
        assert_eq!(diag.position_of_first_error, None);
    }

    #[test]
    fn dropped_prose_line_positions_are_reported() {
        let schemas = vec![VariableSchema::state("x", "", 0)];
        let (_, diag) =
            decode_states("Time 0: x: 1\nSure thing!", &schemas, Some(1)).unwrap();
        // The dropped prose line begins right after the first newline.
        assert_eq!(diag.position_of_first_error, Some(13));
    }

    #[test]
    fn negative_values_survive_the_dash_stripper() {
        let schemas = vec![VariableSchema::state("x", "", 1)];
        let (steps, diag) = decode_states("- Time 0: x: -5.5", &schemas, None).unwrap();
        assert_eq!(steps[0].state["x"], -5.5);
        // Only the bullet dash is stripped, not the minus sign.
        assert_eq!(diag.stripped_characters, 1);
    }

    #[test]
    fn malformed_number_reports_number_parse() {
        let schemas = vec![VariableSchema::state("x", "", 0)];
        let err = decode_states("Time 0: x: abc", &schemas, None).unwrap_err();
        assert!(matches!(err, DecodeError::NumberParse { .. }));
    }

    #[test]
    fn wrong_step_count_is_reported() {
        let schemas = vec![VariableSchema::state("x", "", 0)];
        let err = decode_states("Time 0: x: 1 | Time 1: x: 2", &schemas, Some(1)).unwrap_err();
        assert_eq!(err, DecodeError::WrongStepCount { got: 2, want: 1 });
    }

    #[test]
    fn missing_variable_is_reported_with_step() {
        let schemas = vec![
            VariableSchema::state("x", "", 0),
            VariableSchema::state("y", "", 0),
        ];
        let err = decode_states("Time 0: x: 1", &schemas, None).unwrap_err();
        assert_eq!(
            err,
            DecodeError::MissingVariable {
                name: "y".into(),
                step: 0
            }
        );
    }

    #[test]
    fn scientific_notation_is_accepted_on_input() {
        let schemas = vec![VariableSchema::state("x", "", 2)];
        let (steps, _) = decode_states("Time 0: x: 1.2e-3", &schemas, None).unwrap();
        assert_eq!(steps[0].state["x"], 1.2e-3);
    }

    #[test]
    fn empty_text_is_malformed() {
        let schemas = vec![VariableSchema::state("x", "", 0)];
        assert!(matches!(
            decode_states("", &schemas, None),
            Err(DecodeError::Malformed { .. })
        ));
    }

    fn arbitrary_schema_and_trajectory() -> impl Strategy<Value = (Vec<VariableSchema>, Trajectory)>
    {
        // Up to 10 state variables with mixed decimal counts, 1 to 30 steps.
        (1usize..=10, 1usize..=30, any::<u64>()).prop_map(|(nvars, nsteps, seed)| {
            use rand::Rng;
            let mut rng = crate::rng::substream(seed, "codec-prop");
            let schemas: Vec<VariableSchema> = (0..nvars)
                .map(|i| VariableSchema::state(&format!("v{i}"), "", rng.gen_range(0..=4)))
                .collect();
            let steps: Vec<TimeStep> = (0..nsteps)
                .map(|t| {
                    let mut step = TimeStep::new(t as i64);
                    for schema in &schemas {
                        let scale = 10f64.powi(schema.decimals as i32);
                        let raw: f64 = rng.gen_range(-1000.0..1000.0);
                        let rounded = (raw * scale).round() / scale;
                        step.state.insert(schema.name.clone(), rounded);
                    }
                    step
                })
                .collect();
            (schemas, Trajectory::new("prop", steps))
        })
    }

    proptest! {
        #[test]
        fn roundtrip_is_exact((schemas, traj) in arbitrary_schema_and_trajectory()) {
            let text = encode_states(&traj, &schemas);
            let (steps, diag) = decode_states(&text, &schemas, Some(traj.len())).unwrap();
            prop_assert_eq!(diag.stripped_characters, 0usize);
            prop_assert_eq!(steps.len(), traj.len());
            for (got, want) in steps.iter().zip(traj.steps.iter()) {
                prop_assert_eq!(got.time, want.time);
                prop_assert_eq!(&got.state, &want.state);
            }
        }

        #[test]
        fn non_negative_output_has_no_markdown_chars((schemas, traj) in arbitrary_schema_and_trajectory()) {
            let positive = Trajectory::new(
                "p",
                traj.steps
                    .iter()
                    .map(|s| {
                        let mut t = TimeStep::new(s.time);
                        t.state = s.state.iter().map(|(k, v)| (k.clone(), v.abs())).collect();
                        t
                    })
                    .collect(),
            );
            let text = encode_states(&positive, &schemas);
            prop_assert!(!text.contains('*'));
            prop_assert!(!text.contains('-'));
        }
    }
}
