//! The `commitq-env v1` text format, a TOML document:
//!
//! ```toml
//! format = "commitq-env v1"
//! states = ["s", "t"]
//! actions = ["go"]
//! feature_order = ["A", "B"]
//!
//! [features]
//! s = "A"
//! t = "B"
//!
//! [p0]
//! s = 1.0
//!
//! [rewards]
//! B = -1.0
//!
//! [[exits]]
//! name = "goal"
//! reward = 2.0
//!
//! [kernels]
//! go = [["s", "t", 1.0], ["t", "goal", 0.5]]
//!
//! [[options]]
//! name = "go"
//! weights = { go = 1.0 }
//! ```
//!
//! Kernel entries are `[from, to, prob]`; `to` may name an exit. Mass not
//! listed goes to the plain terminal state. `exits` and `options` are optional.
//! Without `feature_order`, features are numbered by first appearance in
//! `states`.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::Deserialize;
use toml::Spanned;

use crate::builder::EnvBuilder;
use crate::env::{validate, Environment, Next};
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "commitq-env v1";

#[derive(Debug, Deserialize, Clone, Copy)]
#[serde(untagged)]
enum Num {
    Float(f64),
    Int(i64),
}

impl Num {
    fn value(self) -> f64 {
        match self {
            Num::Float(f) => f,
            Num::Int(i) => i as f64,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExitDoc {
    name: Spanned<String>,
    reward: Num,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptionDoc {
    name: Spanned<String>,
    weights: BTreeMap<String, Spanned<Num>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvDoc {
    format: Spanned<String>,
    states: Vec<String>,
    actions: Vec<String>,
    #[serde(default)]
    feature_order: Vec<String>,
    features: BTreeMap<String, Spanned<String>>,
    p0: BTreeMap<String, Spanned<Num>>,
    #[serde(default)]
    rewards: BTreeMap<String, Spanned<Num>>,
    #[serde(default)]
    exits: Vec<ExitDoc>,
    kernels: BTreeMap<String, Vec<Spanned<(String, String, Num)>>>,
    #[serde(default)]
    options: Vec<OptionDoc>,
}

fn line_of(text: &str, span: Range<usize>) -> usize {
    text[..span.start.min(text.len())].matches('\n').count() + 1
}

fn at<T>(text: &str, span: Range<usize>, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { line: None, message } => Error::Format {
            line: Some(line_of(text, span)),
            message,
        },
        other => other,
    })
}

/// Parses and validates an environment file.
pub fn parse_env(text: &str) -> Result<Environment> {
    let doc: EnvDoc = toml::from_str(text).map_err(|e| Error::Format {
        line: e.span().map(|s| line_of(text, s)),
        message: e.message().to_string(),
    })?;
    if doc.format.get_ref() != FORMAT_TAG {
        return Err(Error::Format {
            line: Some(line_of(text, doc.format.span())),
            message: format!("expected format \"{FORMAT_TAG}\", found \"{}\"", doc.format.get_ref()),
        });
    }
    let mut b = EnvBuilder::new(doc.states.iter().cloned(), doc.actions.iter().cloned());
    for f in &doc.feature_order {
        b.declare_feature(f)?;
    }
    for s in &doc.states {
        let Some(f) = doc.features.get(s) else {
            return Err(Error::format(format!("state '{s}' has no feature")));
        };
        at(text, f.span(), b.assign(s, f.get_ref()).map(|_| ()))?;
    }
    if let Some(extra) = doc.features.iter().find(|(s, _)| !doc.states.contains(s)) {
        return Err(Error::Format {
            line: Some(line_of(text, extra.1.span())),
            message: format!("feature given for unknown state '{}'", extra.0),
        });
    }
    for e in &doc.exits {
        at(text, e.name.span(), b.exit(e.name.get_ref(), e.reward.value()).map(|_| ()))?;
    }
    for (s, p) in &doc.p0 {
        at(text, p.span(), b.start(s, p.get_ref().value()).map(|_| ()))?;
    }
    for (z, r) in &doc.rewards {
        at(text, r.span(), b.reward(z, r.get_ref().value()).map(|_| ()))?;
    }
    for (a, entries) in &doc.kernels {
        for entry in entries {
            let (from, to, p) = entry.get_ref();
            at(text, entry.span(), b.transition(a, from, to, p.value()).map(|_| ()))?;
        }
    }
    for o in &doc.options {
        let weights: Vec<(&str, f64)> = o
            .weights
            .iter()
            .map(|(a, w)| (a.as_str(), w.get_ref().value()))
            .collect();
        at(text, o.name.span(), b.option(o.name.get_ref(), &weights).map(|_| ()))?;
    }
    let env = b.build()?;
    let report = validate(&env);
    if let Some(v) = report.first() {
        return Err(Error::format(format!("invalid environment: {v}")));
    }
    Ok(env)
}

pub fn read_env(path: &std::path::Path) -> Result<Environment> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::format(format!("cannot read {}: {e}", path.display())))?;
    parse_env(&text)
}

fn quote(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn num(v: f64) -> String {
    // Debug formatting of f64 is the shortest string that round-trips.
    let s = format!("{v:?}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

/// Serializes an environment; `parse_env(&write_env(e))` reproduces `e` exactly.
pub fn write_env(env: &Environment) -> String {
    let mut out = String::new();
    let list = |v: &[String]| v.iter().map(|s| quote(s)).collect::<Vec<_>>().join(", ");
    out.push_str(&format!("format = {}\n", quote(FORMAT_TAG)));
    out.push_str(&format!("states = [{}]\n", list(env.state_names())));
    out.push_str(&format!("actions = [{}]\n", list(env.action_names())));
    out.push_str(&format!("feature_order = [{}]\n", list(env.feature_names())));

    out.push_str("\n[features]\n");
    for (x, s) in env.state_names().iter().enumerate() {
        out.push_str(&format!("{} = {}\n", quote(s), quote(&env.feature_names()[env.feature_of(x)])));
    }
    out.push_str("\n[p0]\n");
    for (x, s) in env.state_names().iter().enumerate() {
        if env.p0()[x] != 0.0 {
            out.push_str(&format!("{} = {}\n", quote(s), num(env.p0()[x])));
        }
    }
    out.push_str("\n[rewards]\n");
    for (z, f) in env.feature_names().iter().enumerate() {
        out.push_str(&format!("{} = {}\n", quote(f), num(env.reward(z))));
    }
    for t in &env.terminals()[1..] {
        out.push_str(&format!("\n[[exits]]\nname = {}\nreward = {}\n", quote(&t.name), num(t.reward)));
    }
    out.push_str("\n[kernels]\n");
    for (u, a) in env.action_names().iter().enumerate() {
        let mut entries = Vec::new();
        for x in 0..env.n_states() {
            for y in 0..env.n_states() {
                let p = env.kernel(u)[(y, x)];
                if p != 0.0 {
                    entries.push((x, Next::State(y), p));
                }
            }
            for e in 0..env.n_terminals() - 1 {
                let p = env.exit_kernel(u)[(e, x)];
                if p != 0.0 {
                    entries.push((x, Next::Terminal(e + 1), p));
                }
            }
        }
        let rendered: Vec<String> = entries
            .iter()
            .map(|&(x, to, p)| {
                let to = match to {
                    Next::State(y) => &env.state_names()[y],
                    Next::Terminal(t) => &env.terminals()[t].name,
                };
                format!("  [{}, {}, {}],", quote(&env.state_names()[x]), quote(to), num(p))
            })
            .collect();
        out.push_str(&format!("{} = [\n{}\n]\n", quote(a), rendered.join("\n")));
    }
    for o in env.options() {
        let weights: Vec<String> = o
            .weights()
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(u, w)| format!("{} = {}", quote(&env.action_names()[u]), num(*w)))
            .collect();
        out.push_str(&format!(
            "\n[[options]]\nname = {}\nweights = {{ {} }}\n",
            quote(o.name()),
            weights.join(", ")
        ));
    }
    out
}
