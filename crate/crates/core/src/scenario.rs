//! Scenario files and the built-in scenarios.
//!
//! A scenario file is a list of `section.key = value` lines. Blank lines and
//! text after `#` are ignored. `adversary.directive`, `network.rule` and
//! `clients.request` may repeat; every other key is set at most once.
//!
//! ```text
//! config.n = 7
//! config.protocol = two-phase
//! config.t0 = none
//! adversary.controlled = n0,n1
//! adversary.directive = actor=n0 view=0 do=equivocate block-a=b1 block-b=b2 part-a=n1,n2,n3 part-b=n4,n5,n6
//! network.rule = kind=PREPARE sender=n0 dest=n1,n2,n3 view=0 action=delay:40 window=0..100
//! run.heights = 1
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::adversary::{AdvAction, AdversaryPlan, Directive, Trigger, TriggerEvent};
use crate::client::DEFAULT_RETRANS_AFTER;
use crate::error::{Error, Result};
use crate::model::{default_t0, Actor, ClientId, Config, MsgKind, NodeId};
use crate::netsim::{FaultAction, FaultRule, Matcher};
use crate::replica::Phase;

pub const DEFAULT_MAX_TICKS: u64 = 100_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub config: Config,
    pub clients: u32,
    /// Client submissions as `(client, time)`.
    pub requests: Vec<(ClientId, u64)>,
    pub retrans_after: u64,
    pub plan: AdversaryPlan,
    pub rules: Vec<FaultRule>,
    /// Heights each replica runs before halting; `None` runs until the tick
    /// bound.
    pub heights: Option<u64>,
    pub max_ticks: u64,
}

impl Scenario {
    pub fn new(name: impl Into<String>, config: Config) -> Self {
        Scenario {
            name: name.into(),
            config,
            clients: 0,
            requests: Vec::new(),
            retrans_after: DEFAULT_RETRANS_AFTER,
            plan: AdversaryPlan::honest(),
            rules: Vec::new(),
            heights: Some(1),
            max_ticks: DEFAULT_MAX_TICKS,
        }
    }

    /// Replaces the timer base, keeping an explicit `t0` untouched unless it
    /// was the default for the old base.
    pub fn set_t_star(&mut self, t_star: u64) {
        if self.config.t0 == Some(default_t0(self.config.t_star)) {
            self.config.t0 = Some(default_t0(t_star));
        }
        self.config.t_star = t_star;
    }

    pub fn parse(text: &str) -> Result<Scenario> {
        Parser::default().parse(text)
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let mut line = |s: String| {
            out.push_str(&s);
            out.push('\n');
        };
        line(format!("run.name = {}", self.name));
        line(format!("config.n = {}", c.n));
        line(format!("config.t_star = {}", c.t_star));
        line(format!("config.protocol = {}", c.protocol));
        line(format!("config.max_views = {}", c.max_views));
        line(format!("config.t0 = {}", c.t0.map_or("none".to_string(), |t| t.to_string())));
        line(format!("config.seed = {}", c.seed));
        line(format!("clients.count = {}", self.clients));
        for (client, at) in &self.requests {
            line(format!("clients.request = {client}@{at}"));
        }
        line(format!("clients.retrans_after = {}", self.retrans_after));
        line(format!("adversary.controlled = {}", join(&self.plan.controlled)));
        for d in &self.plan.directives {
            line(format!("adversary.directive = {}", directive_text(d)));
        }
        for r in &self.rules {
            line(format!("network.rule = {}", rule_text(r)));
        }
        line(format!("run.heights = {}", self.heights.map_or("none".to_string(), |h| h.to_string())));
        line(format!("run.max_ticks = {}", self.max_ticks));
        out
    }
}

fn join<'a, T: std::fmt::Display + 'a>(items: impl IntoIterator<Item = &'a T>) -> String {
    items
        .into_iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn directive_text(d: &Directive) -> String {
    let mut s = format!(
        "actor={} view={} phase={} on={} do={}",
        d.actor,
        d.trigger.view.map_or("any".to_string(), |v| v.to_string()),
        d.trigger.phase.map_or("any", Phase::as_str),
        d.trigger.event.as_str(),
        d.action.name()
    );
    match &d.action {
        AdvAction::Equivocate {
            block_a,
            block_b,
            part_a,
            part_b,
        } => {
            let _ = write!(
                s,
                " block-a={block_a} block-b={block_b} part-a={} part-b={}",
                join(part_a),
                join(part_b)
            );
        }
        AdvAction::HarvestResponses { block } => {
            let _ = write!(s, " block={}", block.as_deref().unwrap_or("*"));
        }
        AdvAction::ForgeLateResponse { block } => {
            let _ = write!(s, " block={block}");
        }
        AdvAction::AdoptStaleMessage { kind } => {
            let _ = write!(s, " kind={kind}");
        }
        AdvAction::Silence | AdvAction::ActHonest => {}
    }
    s
}

fn rule_text(r: &FaultRule) -> String {
    let m = &r.matcher;
    let star = |o: Option<String>| o.unwrap_or_else(|| "*".to_string());
    let action = match &r.action {
        FaultAction::Delay(d) => format!("delay:{d}"),
        FaultAction::Drop => "drop".to_string(),
        FaultAction::Redirect(to) => format!("redirect:{}", join(to)),
    };
    let until = if r.window.1 == u64::MAX {
        "max".to_string()
    } else {
        r.window.1.to_string()
    };
    format!(
        "kind={} sender={} dest={} view={} block={} action={action} window={}..{until}",
        star(m.kind.map(|k| k.to_string())),
        star(m.sender.map(|s| s.to_string())),
        star(m.dests.as_ref().map(join)),
        star(m.view.map(|v| v.to_string())),
        star(m.block_tag.clone()),
        r.window.0,
    )
}

#[derive(Default)]
struct Parser {
    seen: BTreeSet<String>,
}

/// A value with the 1-based column where it starts.
#[derive(Clone, Copy)]
struct Span<'a> {
    text: &'a str,
    line: usize,
    col: usize,
}

impl<'a> Span<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            column: self.col,
            message: message.into(),
        }
    }

    fn parse<T: FromStr>(&self, what: &str) -> Result<T> {
        self.text
            .parse()
            .map_err(|_| self.err(format!("invalid {what} `{}`", self.text)))
    }

    fn list<T: FromStr>(&self, what: &str) -> Result<Vec<T>> {
        if self.text.is_empty() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        let mut offset = 0;
        for part in self.text.split(',') {
            let span = Span {
                text: part.trim(),
                line: self.line,
                col: self.col + offset,
            };
            out.push(span.parse(what)?);
            offset += part.len() + 1;
        }
        Ok(out)
    }

    /// Whitespace separated `key=value` tokens.
    fn tokens(&self) -> Result<Vec<(Span<'a>, Span<'a>)>> {
        let mut out = Vec::new();
        let base = self.text.as_ptr() as usize;
        for tok in self.text.split_whitespace() {
            let col = self.col + (tok.as_ptr() as usize - base);
            let Some((k, v)) = tok.split_once('=') else {
                return Err(Span { text: tok, line: self.line, col }.err(format!("expected key=value, found `{tok}`")));
            };
            out.push((
                Span { text: k, line: self.line, col },
                Span {
                    text: v,
                    line: self.line,
                    col: col + k.len() + 1,
                },
            ));
        }
        Ok(out)
    }
}

fn opt<T: FromStr>(span: Span<'_>, what: &str, any: &[&str]) -> Result<Option<T>> {
    if any.contains(&span.text) {
        Ok(None)
    } else {
        span.parse(what).map(Some)
    }
}

impl Parser {
    fn parse(mut self, text: &str) -> Result<Scenario> {
        let mut s = Scenario::new("scenario", Config::new(4));
        let mut t0_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let content = raw.split('#').next().unwrap_or("");
            if content.trim().is_empty() {
                continue;
            }
            let key_col = content.len() - content.trim_start().len() + 1;
            let Some(eq) = content.find('=') else {
                return Err(Error::Parse {
                    line: line_no,
                    column: key_col,
                    message: "expected `section.key = value`".into(),
                });
            };
            let key = content[..eq].trim();
            let key_span = Span {
                text: key,
                line: line_no,
                col: key_col,
            };
            let after = &content[eq + 1..];
            let value = after.trim();
            let val_col = eq + 2 + (after.len() - after.trim_start().len());
            let val = Span {
                text: value,
                line: line_no,
                col: val_col,
            };
            let repeatable = matches!(key, "adversary.directive" | "network.rule" | "clients.request");
            if !repeatable && !self.seen.insert(key.to_string()) {
                return Err(key_span.err(format!("duplicate key `{key}`")));
            }
            match key {
                "run.name" => s.name = value.to_string(),
                "run.heights" => s.heights = opt(val, "height count", &["none"])?,
                "run.max_ticks" => s.max_ticks = val.parse("tick bound")?,
                "config.n" => s.config.n = val.parse("committee size")?,
                "config.t_star" => s.config.t_star = val.parse("t_star")?,
                "config.protocol" => s.config.protocol = val.parse("protocol")?,
                "config.max_views" => s.config.max_views = val.parse("max_views")?,
                "config.t0" => {
                    t0_set = true;
                    s.config.t0 = opt(val, "t0", &["none"])?;
                }
                "config.seed" => s.config.seed = val.parse("seed")?,
                "clients.count" => s.clients = val.parse("client count")?,
                "clients.retrans_after" => s.retrans_after = val.parse("retransmission delay")?,
                "clients.request" => {
                    let Some((c, at)) = value.split_once('@') else {
                        return Err(val.err("expected request as `c<i>@<time>`"));
                    };
                    let client = Span { text: c, ..val }.parse("client")?;
                    let time = Span {
                        text: at,
                        col: val.col + c.len() + 1,
                        ..val
                    }
                    .parse("request time")?;
                    s.requests.push((client, time));
                }
                "adversary.controlled" => {
                    s.plan.controlled = val.list::<NodeId>("node")?.into_iter().collect();
                }
                "adversary.directive" => s.plan.directives.push(parse_directive(val)?),
                "network.rule" => s.rules.push(parse_rule(val)?),
                _ => return Err(key_span.err(format!("unknown key `{key}`"))),
            }
        }
        if !t0_set {
            s.config.t0 = Some(default_t0(s.config.t_star));
        }
        Ok(s)
    }
}

fn parse_directive(val: Span<'_>) -> Result<Directive> {
    let mut actor = None;
    let mut trigger = Trigger::always();
    let mut action: Option<Span<'_>> = None;
    let mut extra: Vec<(Span<'_>, Span<'_>)> = Vec::new();
    for (k, v) in val.tokens()? {
        match k.text {
            "actor" => actor = Some(v.parse::<NodeId>("node")?),
            "view" => trigger.view = opt(v, "view", &["any", "*"])?,
            "phase" => trigger.phase = opt(v, "phase", &["any", "*"])?,
            "on" => {
                trigger.event =
                    TriggerEvent::parse(v.text).ok_or_else(|| v.err(format!("unknown trigger `{}`", v.text)))?
            }
            "do" => action = Some(v),
            _ => extra.push((k, v)),
        }
    }
    let actor = actor.ok_or_else(|| val.err("directive needs actor="))?;
    let action_span = action.ok_or_else(|| val.err("directive needs do="))?;
    let mut take = |name: &str| {
        let i = extra.iter().position(|(k, _)| k.text == name)?;
        Some(extra.remove(i).1)
    };
    fn required<'s>(s: Option<Span<'s>>, val: Span<'_>, action: &str, name: &str) -> Result<Span<'s>> {
        s.ok_or_else(|| val.err(format!("`{action}` needs {name}=")))
    }
    let action = match action_span.text {
        "equivocate" => {
            let block_a = required(take("block-a"), val, action_span.text, "block-a")?.text.to_string();
            let block_b = required(take("block-b"), val, action_span.text, "block-b")?.text.to_string();
            let part_a = required(take("part-a"), val, action_span.text, "part-a")?.list("node")?;
            let part_b = required(take("part-b"), val, action_span.text, "part-b")?.list("node")?;
            AdvAction::Equivocate {
                block_a,
                block_b,
                part_a,
                part_b,
            }
        }
        "silence" => AdvAction::Silence,
        "honest" => AdvAction::ActHonest,
        "harvest" => AdvAction::HarvestResponses {
            block: take("block").and_then(|b| (b.text != "*").then(|| b.text.to_string())),
        },
        "forge" => AdvAction::ForgeLateResponse {
            block: required(take("block"), val, action_span.text, "block")?.text.to_string(),
        },
        "adopt" => AdvAction::AdoptStaleMessage {
            kind: match take("kind") {
                Some(k) => k.parse::<MsgKind>("message kind")?,
                None => MsgKind::Prepare,
            },
        },
        other => return Err(action_span.err(format!("unknown action `{other}`"))),
    };
    if let Some((k, _)) = extra.first() {
        return Err(k.err(format!("unknown directive key `{}`", k.text)));
    }
    Ok(Directive { actor, trigger, action })
}

fn parse_rule(val: Span<'_>) -> Result<FaultRule> {
    let mut matcher = Matcher::default();
    let mut action = None;
    let mut window = (0, u64::MAX);
    for (k, v) in val.tokens()? {
        let any = v.text == "*";
        match k.text {
            "kind" => matcher.kind = opt(v, "message kind", &["*"])?,
            "sender" => matcher.sender = opt::<Actor>(v, "sender", &["*"])?,
            "dest" if any => matcher.dests = None,
            "dest" => matcher.dests = Some(v.list::<Actor>("destination")?.into_iter().collect()),
            "view" => matcher.view = opt(v, "view", &["*"])?,
            "block" => matcher.block_tag = (!any).then(|| v.text.to_string()),
            "action" => {
                let (name, arg) = v.text.split_once(':').unwrap_or((v.text, ""));
                let arg_span = Span {
                    text: arg,
                    col: v.col + name.len() + 1,
                    ..v
                };
                action = Some(match name {
                    "drop" => FaultAction::Drop,
                    "delay" => FaultAction::Delay(arg_span.parse("delay")?),
                    "redirect" => FaultAction::Redirect(arg_span.list("redirect target")?),
                    _ => return Err(v.err(format!("unknown fault action `{}`", v.text))),
                });
            }
            "window" => {
                let Some((a, b)) = v.text.split_once("..") else {
                    return Err(v.err("expected window as `from..to`"));
                };
                let from = Span { text: a, ..v }.parse("window start")?;
                let to_span = Span {
                    text: b,
                    col: v.col + a.len() + 2,
                    ..v
                };
                let to = if b == "max" { u64::MAX } else { to_span.parse("window end")? };
                window = (from, to);
            }
            _ => return Err(k.err(format!("unknown rule key `{}`", k.text))),
        }
    }
    let action = action.ok_or_else(|| val.err("rule needs action="))?;
    Ok(FaultRule {
        matcher,
        action,
        window,
    })
}

pub const BUILTINS: [&str; 5] = ["honest", "attack-f2", "attack-f1", "attack-f1-delta5", "timer-law"];

fn nodes(ids: &[u32]) -> Vec<NodeId> {
    ids.iter().copied().map(NodeId).collect()
}

/// Two controlled nodes: the view-0 speaker splits the committee between two
/// proposals, then both stay silent in view 1 while one of them signs a late
/// response for the second proposal and replays what it collected.
pub fn attack_f2() -> Scenario {
    let mut s = Scenario::new("attack-f2", Config::new(7));
    s.plan = AdversaryPlan {
        controlled: nodes(&[0, 1]).into_iter().collect(),
        directives: vec![
            Directive {
                actor: NodeId(0),
                trigger: Trigger::in_view(0),
                action: AdvAction::Equivocate {
                    block_a: "block1".into(),
                    block_b: "block2".into(),
                    part_a: nodes(&[1, 2, 3]),
                    part_b: nodes(&[4, 5, 6]),
                },
            },
            Directive {
                actor: NodeId(1),
                trigger: Trigger::always(),
                action: AdvAction::HarvestResponses {
                    block: Some("block2".into()),
                },
            },
            Directive {
                actor: NodeId(0),
                trigger: Trigger::in_view(1),
                action: AdvAction::Silence,
            },
            Directive {
                actor: NodeId(1),
                trigger: Trigger::in_view(1),
                action: AdvAction::Silence,
            },
            Directive {
                actor: NodeId(1),
                trigger: Trigger::in_view(1).on(TriggerEvent::PrepareDelivered),
                action: AdvAction::ForgeLateResponse { block: "block2".into() },
            },
        ],
    };
    s
}

/// One controlled node. The honest view-0 proposal is held back from three
/// nodes for `delta` ticks; the controlled node then adopts it after the
/// height was already decided in view 1.
pub fn attack_f1(delta: u64) -> Scenario {
    let name = if delta == 40 { "attack-f1".to_string() } else { format!("attack-f1-delta{delta}") };
    let mut s = Scenario::new(name, Config::new(7));
    s.rules.push(FaultRule {
        matcher: Matcher {
            kind: Some(MsgKind::Prepare),
            sender: Some(Actor::Node(NodeId(0))),
            dests: Some(nodes(&[1, 2, 3]).into_iter().map(Actor::Node).collect()),
            view: Some(0),
            block_tag: None,
        },
        action: FaultAction::Delay(delta),
        window: (0, 100),
    });
    s.plan = AdversaryPlan {
        controlled: [NodeId(1)].into(),
        directives: vec![
            Directive {
                actor: NodeId(1),
                trigger: Trigger::always(),
                action: AdvAction::HarvestResponses { block: None },
            },
            Directive {
                actor: NodeId(1),
                trigger: Trigger::in_view(1),
                action: AdvAction::Silence,
            },
            Directive {
                actor: NodeId(1),
                trigger: Trigger::always().on(TriggerEvent::StalePrepareDelivered),
                action: AdvAction::AdoptStaleMessage { kind: MsgKind::Prepare },
            },
        ],
    };
    s
}

pub fn honest() -> Scenario {
    let mut s = Scenario::new("honest", Config::new(7));
    s.clients = 1;
    s.requests.push((ClientId(0), 0));
    s.heights = Some(3);
    s
}

/// Every proposal is lost, so each view ends on its timer.
pub fn timer_law() -> Scenario {
    let mut s = Scenario::new("timer-law", Config::new(7));
    s.rules.push(FaultRule {
        matcher: Matcher {
            kind: Some(MsgKind::Prepare),
            ..Matcher::default()
        },
        action: FaultAction::Drop,
        window: (0, u64::MAX),
    });
    s
}

pub fn builtin(name: &str) -> Option<Scenario> {
    match name {
        "honest" => Some(honest()),
        "attack-f2" => Some(attack_f2()),
        "attack-f1" => Some(attack_f1(40)),
        "attack-f1-delta5" => Some(attack_f1(5)),
        "timer-law" => Some(timer_law()),
        _ => None,
    }
}
