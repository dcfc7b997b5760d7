//! TOML experiment configs. Unknown keys are errors.

use std::path::Path;

use crate::error::{Error, Result};
use crate::experiments::{BoundsPlan, ExperimentPlan, Thresholds};

/// Parse and validate a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentPlan> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentPlan> {
    let plan: ExperimentPlan = toml::from_str(text).map_err(|e| convert(text, &e))?;
    plan.validate()?;
    Ok(plan)
}

/// Canonical TOML of a resolved plan, used as the run's config snapshot.
pub fn to_toml_string(plan: &ExperimentPlan) -> Result<String> {
    toml::to_string(plan).map_err(|e| Error::Validation {
        field: "config".into(),
        message: e.to_string(),
    })
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

/// Dotted name of the innermost `[table]` header preceding `offset`.
fn section_at(text: &str, offset: usize) -> Option<String> {
    text[..offset.min(text.len())]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('[') && l.ends_with(']'))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string())
}

fn convert(text: &str, e: &toml::de::Error) -> Error {
    let message = e.message().to_string();
    let start = e.span().map_or(0, |s| s.start);
    if let Some(rest) = message.strip_prefix("unknown field `") {
        let key = rest.split('`').next().unwrap_or_default();
        let field = match section_at(text, start) {
            Some(s) => format!("{s}.{key}"),
            None => key.to_string(),
        };
        return Error::Validation {
            field,
            message: "unknown key".into(),
        };
    }
    let (line, column) = line_col(text, start);
    Error::Parse { line, column, message }
}

/// Annotated listing of every optional key and its default.
pub fn defaults_reference() -> String {
    let t = Thresholds::default();
    let b = BoundsPlan::default();
    format!(
        "\
# Top level
seed = 0                  # run seed; init and shuffle streams derive from it
pearson_window = 4        # rolling correlation window, in logged steps
log_every = 1             # observe every k-th optimizer step
tracked_samples = 4       # per-sample rows for the first k dataset indices
probe_batch = 4           # inputs averaged over in spectrum sweeps

[dataset]                 # kind = \"gaussian\" | \"linear_regression\" | \"idx\"
separation = 1.0          # gaussian: std of class centers
noise = 1.0               # gaussian: within-class std (linear_regression: 0.0)
seed = 0                  # dataset seed, independent of the run seed
classes = 10              # idx only

[net]
bias = true
embed = true

[sgd]
momentum = 0.9
weight_decay = 0.0005
cosine_anneal = true
seed = 0                  # extra offset mixed into the shuffle stream

[thresholds]
terminal_pearson = {}
sustained_pearson = {}

[bounds]
radii = {:?}
radius_directions = {}
l_probes = {}

[bounds.generalization]
x_card = {}
y_card = {}
n = {}
eps = {:?}
resamples = {}
seed = {}
",
        t.terminal_pearson,
        t.sustained_pearson,
        b.radii,
        b.radius_directions,
        b.l_probes,
        b.generalization.x_card,
        b.generalization.y_card,
        b.generalization.n,
        b.generalization.eps,
        b.generalization.resamples,
        b.generalization.seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::LossKind;

    const MINIMAL: &str = r#"
name = "mini"
loss = "softmax_ce"

[dataset]
kind = "gaussian"
n = 16
classes = 2
dim = 4

[net]
input_dim = 4
output_dim = 2
width = 8
depth_blocks = 1
skip = false
activation = "tanh"
normalization = "none"

[sgd]
lr0 = 0.05
batch_size = 2
epochs = 60
"#;

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let p = parse_config_str(MINIMAL).unwrap();
        assert_eq!(p.loss, LossKind::SoftmaxCe);
        assert_eq!(p.pearson_window, 4);
        let sgd = p.sgd.unwrap();
        assert_eq!(sgd.momentum, 0.9);
        assert_eq!(sgd.weight_decay, 5e-4);
        assert!(sgd.cosine_anneal);
        assert!(p.net.bias && p.net.embed);
        assert_eq!(p.thresholds, Thresholds::default());
    }

    #[test]
    fn unknown_key_names_the_key() {
        let text = MINIMAL.replace("lr0 = 0.05", "learning_rte = 0.05");
        match parse_config_str(&text) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "sgd.learning_rte"),
            other => panic!("{other:?}"),
        }
        let text = format!("bogus = 1\n{MINIMAL}");
        assert!(matches!(parse_config_str(&text), Err(Error::Validation { field, .. }) if field == "bogus"));
    }

    #[test]
    fn sweep_lists_parse() {
        let text = format!("{MINIMAL}\n[sweep]\ndepth = [1, 2, 4]\n");
        let p = parse_config_str(&text).unwrap();
        assert_eq!(p.sweep.unwrap().depth, Some(vec![1, 2, 4]));
        let text = format!("{MINIMAL}\n[sweep]\ndepth = []\n");
        assert!(matches!(parse_config_str(&text), Err(Error::Validation { field, .. }) if field == "sweep.depth"));
    }

    #[test]
    fn syntax_errors_carry_position() {
        let text = MINIMAL.replace("epochs = 60", "epochs = = 60");
        match parse_config_str(&text) {
            Err(Error::Parse { line, column, .. }) => {
                let expected = text.lines().position(|l| l.starts_with("epochs")).unwrap() + 1;
                assert_eq!(line, expected);
                assert!(column > 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_errors_are_parse_errors() {
        let text = MINIMAL.replace("epochs = 60", "epochs = \"sixty\"");
        assert!(matches!(parse_config_str(&text), Err(Error::Parse { .. })));
    }

    #[test]
    fn defaults_reference_parses_as_toml() {
        let v: toml::Table = toml::from_str(&defaults_reference()).unwrap();
        assert!(v.contains_key("bounds"));
    }

    #[test]
    fn snapshot_round_trips() {
        let p = parse_config_str(MINIMAL).unwrap();
        let text = to_toml_string(&p).unwrap();
        assert_eq!(parse_config_str(&text).unwrap(), p);
    }

    #[test]
    fn missing_file_is_io() {
        assert!(matches!(
            parse_config(Path::new("/nonexistent/conjulab.toml")),
            Err(Error::Io { .. })
        ));
    }
}
