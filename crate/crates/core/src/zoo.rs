//! Constructors for the named example environments.
//!
//! Terminal "square" states that carry a reward are modelled as named exits.
//! Unless stated otherwise actions are deterministic.

use crate::builder::EnvBuilder;
use crate::env::{BehaviorPolicy, Environment};
use crate::error::{Error, Result};

/// Corridor of length `k`: states `0..=k`, actions `left`, `right`, start at 0.
///
/// State 0 is its own feature; states `1..=k` share the feature `corridor`,
/// whose reward is -1 per visit. `right` from `k` exits with reward `+k`;
/// `left` from 0 or 1 exits with `left_reward`. `left` from `k` steps back
/// to `k - 1` only with probability 1/2 and otherwise also takes the left
/// exit, which keeps every reactive policy proper under the finer
/// aggregation of [`corridor_green`].
pub fn corridor(k: usize, left_reward: f64) -> Result<Environment> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("corridor length {k} < 2")));
    }
    let mut b = corridor_builder(k, left_reward)?;
    b.assign("0", "start")?;
    for x in 1..=k {
        b.assign(&x.to_string(), "corridor")?;
    }
    b.reward("corridor", -1.0)?;
    b.build()
}

fn corridor_builder(k: usize, left_reward: f64) -> Result<EnvBuilder> {
    let names: Vec<String> = (0..=k).map(|x| x.to_string()).collect();
    let mut b = EnvBuilder::new(names, ["left", "right"]);
    b.exit("exit-left", left_reward)?;
    b.exit("exit-right", k as f64)?;
    b.start("0", 1.0)?;
    for x in 0..=k {
        let here = x.to_string();
        let right = if x == k { "exit-right".to_string() } else { (x + 1).to_string() };
        b.transition("right", &here, &right, 1.0)?;
        if x <= 1 {
            b.transition("left", &here, "exit-left", 1.0)?;
        } else if x == k {
            b.transition("left", &here, &(x - 1).to_string(), 0.5)?;
            b.transition("left", &here, "exit-left", 0.5)?;
        } else {
            b.transition("left", &here, &(x - 1).to_string(), 1.0)?;
        }
    }
    Ok(b)
}

/// The corridor MDP with states `1..k-1` aggregated into `green` and `k`
/// kept apart. The green feature is entered at 1 (from 0) and at `k - 1`
/// (from `k`), so its entrance space is two-dimensional.
pub fn corridor_green(k: usize) -> Result<Environment> {
    if k < 3 {
        return Err(Error::InvalidArgument(format!("green corridor length {k} < 3")));
    }
    let mut b = corridor_builder(k, -1.0)?;
    b.assign("0", "start")?;
    for x in 1..k {
        b.assign(&x.to_string(), "green")?;
    }
    b.assign(&k.to_string(), "end")?;
    b.reward("green", -1.0)?;
    b.reward("end", -1.0)?;
    b.build()
}

/// Variants of the five-state example with aggregated states `c, d, e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fig3Variant {
    /// `a` enters at `c`, `b` enters at `d`.
    A,
    /// Entrances swapped.
    B,
    /// Both enter at `c` with probability `1 - delta`, `d` with `delta`.
    C { delta: f64 },
    /// `a` enters at `e`, `b` enters at `d`.
    D,
}

/// Actions `up`, `right`; features `za = {a}`, `zb = {b}`, `zg = {c, d, e}`,
/// all with reward 0. `right` goes `a -> b -> goal` (return 0). `up` enters
/// the green feature. Inside it, `c --right--> d`, `c --up-->` exit -2,
/// `d` exits with -1 and `e` exits with +1 under either action.
pub fn fig3(variant: Fig3Variant) -> Result<Environment> {
    let mut b = EnvBuilder::new(["a", "b", "c", "d", "e"], ["up", "right"]);
    b.assign("a", "za")?;
    b.assign("b", "zb")?;
    for s in ["c", "d", "e"] {
        b.assign(s, "zg")?;
    }
    b.exit("goal", 0.0)?;
    b.exit("c-up", -2.0)?;
    b.exit("d-out", -1.0)?;
    b.exit("e-out", 1.0)?;
    b.start("a", 1.0)?;
    b.transition("right", "a", "b", 1.0)?;
    b.transition("right", "b", "goal", 1.0)?;
    b.transition("right", "c", "d", 1.0)?;
    b.transition("up", "c", "c-up", 1.0)?;
    b.always("d", "d-out", 1.0)?;
    b.always("e", "e-out", 1.0)?;
    match variant {
        Fig3Variant::A => {
            b.transition("up", "a", "c", 1.0)?;
            b.transition("up", "b", "d", 1.0)?;
        }
        Fig3Variant::B => {
            b.transition("up", "a", "d", 1.0)?;
            b.transition("up", "b", "c", 1.0)?;
        }
        Fig3Variant::C { delta } => {
            if !(delta > 0.0 && delta < 1.0) {
                return Err(Error::InvalidArgument(format!("delta {delta} outside (0, 1)")));
            }
            for s in ["a", "b"] {
                b.transition("up", s, "c", 1.0 - delta)?;
                b.transition("up", s, "d", delta)?;
            }
        }
        Fig3Variant::D => {
            b.transition("up", "a", "e", 1.0)?;
            b.transition("up", "b", "d", 1.0)?;
        }
    }
    b.build()
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("delta {delta} outside (0, 1)")))
    }
}

/// Shared wiring of the four-state examples: `a --right--> c`,
/// `a --up--> b`, `b --right--> d`, `phi(c) = phi(d) = z`.
fn four_state(
    c_exit: f64,
    d_exit: Option<f64>,
    b_up_exit: Option<f64>,
    b_reward: f64,
) -> Result<Environment> {
    let mut b = EnvBuilder::new(["a", "b", "c", "d"], ["up", "right"]);
    b.assign("a", "za")?;
    b.assign("b", "zb")?;
    b.assign("c", "z")?;
    b.assign("d", "z")?;
    b.exit("c-out", c_exit)?;
    if let Some(r) = d_exit {
        b.exit("d-out", r)?;
    }
    if let Some(r) = b_up_exit {
        b.exit("b-up", r)?;
    }
    b.start("a", 1.0)?;
    b.transition("right", "a", "c", 1.0)?;
    b.transition("up", "a", "b", 1.0)?;
    b.transition("right", "b", "d", 1.0)?;
    if b_up_exit.is_some() {
        b.transition("up", "b", "b-up", 1.0)?;
    }
    b.always("c", "c-out", 1.0)?;
    if d_exit.is_some() {
        b.always("d", "d-out", 1.0)?;
    }
    b.reward("zb", b_reward)?;
    b.build()
}

/// Behavior moving `up` with probability `delta` and `right` otherwise.
pub fn up_right_behavior(env: &Environment, delta: f64) -> Result<BehaviorPolicy> {
    check_delta(delta)?;
    let up = env.option_index("up").ok_or_else(|| Error::InvalidArgument("no 'up' option".into()))?;
    let row: Vec<f64> = (0..env.n_options())
        .map(|o| if o == up { delta } else { 1.0 - delta })
        .collect();
    BehaviorPolicy::new(vec![row; env.n_features()])
}

/// `c` exits with +1, `d` with -1, `b --up-->` terminates with 0; all
/// feature rewards 0. Optimal policies take `right` in `a`.
pub fn fig4(delta: f64) -> Result<(Environment, BehaviorPolicy)> {
    check_delta(delta)?;
    let env = four_state(1.0, Some(-1.0), None, 0.0)?;
    let behavior = up_right_behavior(&env, delta)?;
    Ok((env, behavior))
}

/// Same wiring with entering `b` costing -1, `b --up-->` exiting with -1,
/// `c` exiting with +2 and `d` terminating with 0. Optimal policies take
/// `right` in `a`.
pub fn prr(delta: f64) -> Result<(Environment, BehaviorPolicy)> {
    check_delta(delta)?;
    let env = four_state(2.0, None, Some(-1.0), -1.0)?;
    let behavior = up_right_behavior(&env, delta)?;
    Ok((env, behavior))
}

fn tmaze_builder(len: usize) -> Result<(EnvBuilder, Vec<(String, &'static str, Vec<String>)>)> {
    if len < 1 {
        return Err(Error::InvalidArgument("T-maze corridor length must be >= 1".into()));
    }
    let mut names = Vec::new();
    let mut layout = Vec::new();
    for g in ["up", "down"] {
        let start = format!("{g}-start");
        let corridor: Vec<String> = (1..=len).map(|i| format!("{g}-c{i}")).collect();
        let junction = format!("{g}-junction");
        names.push(start.clone());
        names.extend(corridor.iter().cloned());
        names.push(junction.clone());
        layout.push((start, g, corridor));
    }
    let mut b = EnvBuilder::new(names, ["up", "down", "right"]);
    b.exit("wall", -1.0)?;
    b.exit("correct", 1.0)?;
    b.exit("wrong", -1.0)?;
    for (start, g, corridor) in &layout {
        b.start(start, 0.5)?;
        let junction = format!("{g}-junction");
        let path: Vec<&String> = std::iter::once(start).chain(corridor.iter()).collect();
        for (i, s) in path.iter().enumerate() {
            let next = path.get(i + 1).map(|n| n.as_str()).unwrap_or(&junction);
            b.transition("right", s, next, 1.0)?;
            b.transition("up", s, "wall", 1.0)?;
            b.transition("down", s, "wall", 1.0)?;
        }
        let (good, bad) = if *g == "up" { ("up", "down") } else { ("down", "up") };
        b.transition(good, &junction, "correct", 1.0)?;
        b.transition(bad, &junction, "wrong", 1.0)?;
        b.transition("right", &junction, "wall", 1.0)?;
    }
    Ok((b, layout))
}

/// T-maze with the goal side shown only at the start. Features are the
/// pair (first observation, current observation): one feature per goal
/// side for the start, the corridor and the junction. Reward 0 per step,
/// +1 for the correct turn, -1 for the wrong turn or walking into a wall.
pub fn tmaze(len: usize) -> Result<Environment> {
    let (mut b, layout) = tmaze_builder(len)?;
    for (start, g, corridor) in &layout {
        b.assign(start, &format!("{g}/start"))?;
        for c in corridor {
            b.assign(c, &format!("{g}/corridor"))?;
        }
        b.assign(&format!("{g}-junction"), &format!("{g}/junction"))?;
    }
    b.build()
}

/// T-maze aggregated by the current observation only.
pub fn tmaze_memoryless(len: usize) -> Result<Environment> {
    let (mut b, layout) = tmaze_builder(len)?;
    for (start, g, corridor) in &layout {
        b.assign(start, &format!("{g}/start"))?;
        for c in corridor {
            b.assign(c, "corridor")?;
        }
        b.assign(&format!("{g}-junction"), "junction")?;
    }
    b.build()
}

/// Parses zoo references such as `corridor:k=5`, `fig3:variant=d`,
/// `fig4:delta=0.3`. Returns the environment and, where the example comes
/// with one, its behavior policy.
pub fn from_ref(reference: &str) -> Result<(Environment, Option<BehaviorPolicy>)> {
    let (name, params) = reference.split_once(':').unwrap_or((reference, ""));
    let mut kv = std::collections::BTreeMap::new();
    for part in params.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("bad parameter '{part}' in '{reference}'")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let num = |key: &str, default: Option<f64>| -> Result<f64> {
        match kv.get(key) {
            Some(v) => v
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("parameter {key}={v} is not a number"))),
            None => default.ok_or_else(|| Error::InvalidArgument(format!("'{name}' needs parameter {key}"))),
        }
    };
    let int = |key: &str, default: Option<f64>| -> Result<usize> {
        let v = num(key, default)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::InvalidArgument(format!("parameter {key}={v} is not a count")));
        }
        Ok(v as usize)
    };
    let allowed: &[&str] = match name {
        "corridor" => &["k", "left"],
        "corridor-green" => &["k"],
        "tmaze" | "tmaze-memoryless" => &["len"],
        "fig3" => &["variant", "delta"],
        "fig4" | "prr" => &["delta"],
        _ => return Err(Error::InvalidArgument(format!("unknown zoo environment '{name}'"))),
    };
    if let Some(k) = kv.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::InvalidArgument(format!("'{name}' has no parameter '{k}'")));
    }
    Ok(match name {
        "corridor" => (corridor(int("k", Some(5.0))?, num("left", Some(-1.0))?)?, None),
        "corridor-green" => (corridor_green(int("k", Some(5.0))?)?, None),
        "tmaze" => (tmaze(int("len", Some(3.0))?)?, None),
        "tmaze-memoryless" => (tmaze_memoryless(int("len", Some(3.0))?)?, None),
        "fig3" => {
            let variant = match kv.get("variant").map(String::as_str).unwrap_or("a") {
                "a" => Fig3Variant::A,
                "b" => Fig3Variant::B,
                "c" => Fig3Variant::C {
                    delta: num("delta", Some(0.3))?,
                },
                "d" => Fig3Variant::D,
                v => return Err(Error::InvalidArgument(format!("unknown fig3 variant '{v}'"))),
            };
            (fig3(variant)?, None)
        }
        "fig4" => {
            let (e, b) = fig4(num("delta", Some(0.3))?)?;
            (e, Some(b))
        }
        "prr" => {
            let (e, b) = prr(num("delta", Some(0.3))?)?;
            (e, Some(b))
        }
        _ => unreachable!(),
    })
}

/// Every zoo environment at default parameters, with its reference string.
pub fn catalog() -> Vec<(&'static str, Environment)> {
    [
        "corridor:k=2",
        "corridor:k=5",
        "corridor-green:k=5",
        "fig3:variant=a",
        "fig3:variant=b",
        "fig3:variant=c",
        "fig3:variant=d",
        "fig4:delta=0.3",
        "prr:delta=0.3",
        "tmaze:len=2",
        "tmaze-memoryless:len=2",
    ]
    .into_iter()
    .map(|r| (r, from_ref(r).expect("catalog entries are valid").0))
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{is_proper, validate, DEFAULT_ENUMERATION_CAP};

    #[test]
    fn catalog_is_valid_and_proper() {
        for (name, env) in catalog() {
            assert!(validate(&env).is_empty(), "{name}: {:?}", validate(&env));
            assert!(is_proper(&env, DEFAULT_ENUMERATION_CAP).unwrap().proper, "{name}");
        }
    }

    #[test]
    fn corridor_column_sums_by_hand() {
        let env = corridor(5, -1.0).unwrap();
        for u in 0..2 {
            let term = env.termination_matrix(u);
            for x in 0..env.n_states() {
                let total = env.kernel(u).column(x).sum() + term.column(x).sum();
                assert!((total - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(corridor(1, -1.0).is_err());
        assert!(corridor_green(2).is_err());
        assert!(fig4(0.0).is_err());
        assert!(prr(1.0).is_err());
        assert!(tmaze(0).is_err());
        assert!(fig3(Fig3Variant::C { delta: 1.5 }).is_err());
        assert!(from_ref("corridor:q=3").is_err());
        assert!(from_ref("nothing").is_err());
    }

    #[test]
    fn refs_parse_parameters() {
        let (env, b) = from_ref("corridor:k=7").unwrap();
        assert_eq!(env.n_states(), 8);
        assert!(b.is_none());
        let (_, b) = from_ref("fig4:delta=0.25").unwrap();
        assert!((b.unwrap().prob(0, 0) - 0.25).abs() < 1e-15);
    }
}
