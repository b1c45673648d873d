//! Named partial configs. A document selects one with `preset = "<name>"` and
//! its own keys take precedence.

const FLIP: &str = r#"
[illusion]
kind = "flip"
"#;

const ROTATION_OVERLAY: &str = r#"
[illusion]
kind = "rotation_overlay"
brightness_k = 2.0
"#;

const HIDDEN_OVERLAY: &str = r#"
[illusion]
kind = "hidden_overlay"
brightness_k = 3.0
weights = [1.0, 1.0, 1.0, 1.0, 3.0]
"#;

// Hidden-overlay benchmark variants. C is the default: score distillation,
// then eight target refreshes with the hidden image weighted 3x.
const METHOD_C: &str = r#"
[illusion]
kind = "hidden_overlay"
brightness_k = 3.0
weights = [1.0, 1.0, 1.0, 1.0, 3.0]

[backend]
kind = "external"
model = "stabilityai/stable-diffusion-xl-base-1.0"

[schedule]
phase1_steps = 500
phase2_strengths = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2]
"#;

// C on Stable Diffusion 1.5.
const METHOD_A: &str = r#"
[backend]
kind = "external"
model = "runwayml/stable-diffusion-v1-5"
"#;

// C with equal weights.
const METHOD_B: &str = r#"
[illusion]
weights = [1.0, 1.0, 1.0, 1.0, 1.0]
"#;

// Long score distillation, one smoothing refresh.
const METHOD_D: &str = r#"
[schedule]
phase1_steps = 4000
phase2_strengths = [0.2]
"#;

pub fn names() -> Vec<&'static str> {
    vec![
        "flip",
        "rotation_overlay",
        "hidden_overlay",
        "method_a",
        "method_b",
        "method_c",
        "method_d",
    ]
}

fn parse(text: &str) -> toml::Table {
    text.parse().expect("built-in preset is valid TOML")
}

pub fn table(name: &str) -> Option<toml::Table> {
    let layered = |over: &str| {
        let mut base = parse(METHOD_C);
        crate::config::merge(&mut base, parse(over));
        base
    };
    Some(match name {
        "flip" => parse(FLIP),
        "rotation_overlay" => parse(ROTATION_OVERLAY),
        "hidden_overlay" => parse(HIDDEN_OVERLAY),
        "method_a" => layered(METHOD_A),
        "method_b" => layered(METHOD_B),
        "method_c" => parse(METHOD_C),
        "method_d" => layered(METHOD_D),
        _ => return None,
    })
}
