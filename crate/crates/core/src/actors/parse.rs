//! Action grammar shared by chat completions and human submissions.
//!
//! QA: `Thought: ...` (optional) and `Action: Search[x] | Lookup[x] | Finish[x]`.
//! Synthetic: `Action: Hop[key] | Finish[answer]`.
//! Code: a fenced ```sql block, or `submit`.
//! The `Action:` prefix is optional when the whole reply is a single action.

use std::sync::LazyLock;

use regex::Regex;

use crate::trajectory::{ActionFamily, ActionKind, DatasetTag, TaskAction};

static BRACKET: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(Search|Lookup|Finish|Hop)\[(.*)\]$").expect("valid regex"));
static FENCE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)```(?:sql|SQL)?[ \t]*\n(.*?)```").expect("valid regex"));

fn line_value<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    text.lines()
        .map(str::trim)
        .find_map(|l| l.strip_prefix(label).map(str::trim))
}

fn bracket_action(line: &str, tag: DatasetTag) -> Result<(ActionKind, String), String> {
    let caps = BRACKET
        .captures(line.trim())
        .ok_or_else(|| format!("expected Kind[argument], got {:?}", line.trim()))?;
    let kind = match &caps[1] {
        "Search" => ActionKind::Search,
        "Lookup" => ActionKind::Lookup,
        "Finish" => ActionKind::Finish,
        _ => ActionKind::Hop,
    };
    if !kind.legal_for(tag) {
        return Err(format!("{} is not available here", kind.name()));
    }
    let arg = caps[2].trim().to_string();
    if arg.is_empty() {
        return Err(format!("{} needs an argument", kind.name()));
    }
    Ok((kind, arg))
}

/// Parses a model completion into an action legal for `tag`.
pub fn parse_action(text: &str, tag: DatasetTag) -> Result<TaskAction, String> {
    match tag.family() {
        ActionFamily::Qa | ActionFamily::Synthetic => {
            let line = line_value(text, "Action:").unwrap_or(text.trim());
            let (kind, arg) = bracket_action(line, tag)?;
            let thought = line_value(text, "Thought:").unwrap_or("");
            TaskAction::with_thought(kind, thought, &arg).map_err(|e| e.to_string())
        }
        ActionFamily::Code => {
            if let Some(caps) = FENCE.captures(text) {
                let sql = caps[1].trim();
                if sql.is_empty() {
                    return Err("empty sql block".into());
                }
                return TaskAction::new(ActionKind::SqlCommand, sql).map_err(|e| e.to_string());
            }
            let line = line_value(text, "Action:").unwrap_or(text.trim());
            if line.eq_ignore_ascii_case("submit") {
                return TaskAction::new(ActionKind::Submit, "submit").map_err(|e| e.to_string());
            }
            Err("expected a ```sql block or `submit`".into())
        }
    }
}

/// Parses text typed by a human. Code tasks also accept a bare statement.
pub fn parse_submission(text: &str, tag: DatasetTag) -> Result<TaskAction, String> {
    match parse_action(text, tag) {
        Ok(a) => Ok(a),
        Err(e) if tag.family() == ActionFamily::Code => {
            let sql = text.trim();
            if sql.is_empty() {
                Err(e)
            } else {
                TaskAction::new(ActionKind::SqlCommand, sql).map_err(|e| e.to_string())
            }
        }
        Err(e) => Err(e),
    }
}

/// Legal action templates for a dataset, as shown to humans.
pub fn action_templates(tag: DatasetTag) -> Vec<String> {
    ActionKind::legal_kinds(tag)
        .iter()
        .map(|k| match k {
            ActionKind::SqlCommand => "<sql statement>".to_string(),
            ActionKind::Submit => "submit".to_string(),
            ActionKind::Hop => "Hop[key]".to_string(),
            ActionKind::Search => "Search[entity]".to_string(),
            ActionKind::Lookup => "Lookup[keyword]".to_string(),
            _ => format!("{}[answer]", k.name()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qa_action_line() {
        let a = parse_action("Thought: it is the capital.\nAction: Finish[Paris]", DatasetTag::Hotpotqa).unwrap();
        assert_eq!(a.kind, ActionKind::Finish);
        assert_eq!(a.argument(), "Paris");
        assert_eq!(a.thought(), Some("it is the capital."));
        let bare = parse_submission("Search[Battle of Manila]", DatasetTag::Hotpotqa).unwrap();
        assert_eq!((bare.kind, bare.argument()), (ActionKind::Search, "Battle of Manila"));
    }

    #[test]
    fn rejects_missing_or_illegal_actions() {
        assert!(parse_action("Thought: hmm, not sure yet", DatasetTag::Hotpotqa).is_err());
        assert!(parse_action("Action: Hop[k1]", DatasetTag::Hotpotqa).is_err());
        assert!(parse_action("Action: Search[x]", DatasetTag::Synthetic).is_err());
        assert!(parse_action("Action: Finish[]", DatasetTag::Synthetic).is_err());
    }

    #[test]
    fn code_blocks_and_submit() {
        let a = parse_action("Let me check.\n```sql\nSELECT name FROM item;\n```", DatasetTag::Intercode).unwrap();
        assert_eq!((a.kind, a.argument()), (ActionKind::SqlCommand, "SELECT name FROM item;"));
        assert_eq!(parse_action("submit", DatasetTag::Intercode).unwrap().kind, ActionKind::Submit);
        assert!(parse_action("SELECT 1", DatasetTag::Intercode).is_err());
        assert_eq!(parse_submission("SELECT 1", DatasetTag::Intercode).unwrap().argument(), "SELECT 1");
    }

    #[test]
    fn render_round_trip() {
        for (text, tag) in [
            ("Search[Seven Days Battles]", DatasetTag::Hotpotqa),
            ("Lookup[1862]", DatasetTag::Strategyqa),
            ("Hop[k123]", DatasetTag::Synthetic),
            ("Finish[amber falcon]", DatasetTag::Synthetic),
            ("submit", DatasetTag::Intercode),
        ] {
            assert_eq!(parse_action(text, tag).unwrap().render(), text);
        }
    }
}
