//! Terminal conversation: the person at the keyboard plays the simulated
//! user's role.

use std::io::{self, BufRead, Write};
use std::sync::Arc;

use fact_crs::forest::InteractionForest;
use fact_crs::policy::{AblationFlags, AgentAction, PolicyConfig, Session, SessionStatus, UserFeedback};

/// Read one reply accepted by `accept`, re-prompting on anything else.
/// Returns `None` at end of input.
fn prompt<R: BufRead, W: Write, T>(
    input: &mut R,
    out: &mut W,
    question: &str,
    accept: impl Fn(&str) -> Option<T>,
) -> io::Result<Option<T>> {
    loop {
        write!(out, "{question} ")?;
        out.flush()?;
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            writeln!(out)?;
            return Ok(None);
        }
        match accept(line.trim()) {
            Some(v) => return Ok(Some(v)),
            None => writeln!(out, "  Please answer with one of the listed options.")?,
        }
    }
}

/// `accept`, `accept <k>` with 1 ≤ k ≤ n, or `reject` (first letters work too).
fn parse_feedback(line: &str, n: usize) -> Option<UserFeedback> {
    let lower = line.to_ascii_lowercase();
    let mut words = lower.split_whitespace();
    let verb = words.next()?;
    let arg = words.next();
    if words.next().is_some() {
        return None;
    }
    match (verb, arg) {
        ("r" | "reject", None) => Some(UserFeedback::Reject),
        ("a" | "accept", None) => Some(UserFeedback::Accept),
        ("a" | "accept", Some(k)) => match k.parse::<usize>() {
            Ok(k) if (1..=n).contains(&k) => Some(UserFeedback::Accept),
            _ => None,
        },
        _ => None,
    }
}

/// Run one session over `input`/`out`. Returns the final status, or
/// `Active` when input ends mid-conversation.
pub fn run_chat<R: BufRead, W: Write>(
    forest: Arc<InteractionForest>,
    policy: PolicyConfig,
    flags: AblationFlags,
    seed: u64,
    mut input: R,
    mut out: W,
) -> io::Result<SessionStatus> {
    let max_turns = policy.max_turns;
    let mut session = Session::start(forest.clone(), policy, flags, seed);
    writeln!(out, "Let's find an item for you. Up to {max_turns} turns.")?;
    while let Some(action) = session.current_action() {
        let turn = session.turn();
        match action {
            AgentAction::Ask { attribute } => {
                let label = forest.vocabulary.label(attribute).unwrap_or("?");
                let q = format!("[turn {turn}/{max_turns}] Do you prefer `{label}`? [y/n]");
                let reply = prompt(&mut input, &mut out, &q, |s| match s.to_ascii_lowercase().as_str() {
                    "y" | "yes" => Some(UserFeedback::AnswerYes),
                    "n" | "no" => Some(UserFeedback::AnswerNo),
                    _ => None,
                })?;
                let Some(fb) = reply else {
                    return Ok(session.status());
                };
                session.respond(fb).map_err(io::Error::other)?;
            }
            AgentAction::Recommend { items } => {
                writeln!(out, "[turn {turn}/{max_turns}] How about one of these?")?;
                for (r, x) in items.iter().enumerate() {
                    writeln!(out, "  {:>2}. item {:<6} score {:.4}", r + 1, x.item, x.score)?;
                }
                let n = items.len();
                let reply = prompt(&mut input, &mut out, "`accept <k>` or `reject`?", |s| parse_feedback(s, n))?;
                let Some(fb) = reply else {
                    return Ok(session.status());
                };
                session.respond(fb).map_err(io::Error::other)?;
            }
        }
    }
    match session.status() {
        SessionStatus::Succeeded => writeln!(out, "Success after {} turns.", session.turns_used().unwrap_or(0))?,
        _ => writeln!(out, "No match found; session failed after {} turns.", session.turns_used().unwrap_or(max_turns))?,
    }
    Ok(session.status())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feedback_parsing() {
        assert_eq!(parse_feedback("accept 1", 3), Some(UserFeedback::Accept));
        assert_eq!(parse_feedback("A", 3), Some(UserFeedback::Accept));
        assert_eq!(parse_feedback(" reject ", 3), Some(UserFeedback::Reject));
        assert_eq!(parse_feedback("accept 4", 3), None);
        assert_eq!(parse_feedback("accept 0", 3), None);
        assert_eq!(parse_feedback("reject 2", 3), None);
        assert_eq!(parse_feedback("maybe", 3), None);
        assert_eq!(parse_feedback("", 3), None);
    }
}
