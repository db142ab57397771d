//! Versioned prompt templates shipped under `templates/`.
//!
//! Every user template opens with a `## Task: <name>` line and wraps its
//! inputs in `<tag>` blocks; the generative mock backend relies on both.

use serde_json::json;

use crate::generation::QAPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub id: &'static str,
    pub system: &'static str,
    pub user: &'static str,
}

pub const GENERATION: Template = Template {
    id: "generation/v1",
    system: include_str!("../templates/generation.system.txt"),
    user: include_str!("../templates/generation.user.txt"),
};

pub const ADJUDICATION: Template = Template {
    id: "adjudication/v1",
    system: include_str!("../templates/adjudication.system.txt"),
    user: include_str!("../templates/adjudication.user.txt"),
};

pub const BACKFILL: Template = Template {
    id: "backfill/v1",
    system: include_str!("../templates/adjudication.system.txt"),
    user: include_str!("../templates/backfill.user.txt"),
};

pub const DISTRACTORS: Template = Template {
    id: "distractors/v1",
    system: include_str!("../templates/distractors.system.txt"),
    user: include_str!("../templates/distractors.user.txt"),
};

pub const APPRAISAL: Template = Template {
    id: "appraisal/v1",
    system: include_str!("../templates/distractors.system.txt"),
    user: include_str!("../templates/appraisal.user.txt"),
};

pub const REPLACEMENT: Template = Template {
    id: "replacement/v1",
    system: include_str!("../templates/distractors.system.txt"),
    user: include_str!("../templates/replacement.user.txt"),
};

pub const REPAIR: Template = Template {
    id: "repair/v1",
    system: include_str!("../templates/repair.system.txt"),
    user: include_str!("../templates/repair.user.txt"),
};

pub const ALL: [Template; 7] = [GENERATION, ADJUDICATION, BACKFILL, DISTRACTORS, APPRAISAL, REPLACEMENT, REPAIR];

/// Task names as they appear on the `## Task:` line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    QaGeneration,
    QaAdjudication,
    ReasoningBackfill,
    DistractorGeneration,
    DistractorAppraisal,
    DistractorReplacement,
    RecordRepair,
}

impl Task {
    pub fn detect(user: &str) -> Option<Task> {
        let line = user.lines().find(|l| l.starts_with("## Task:"))?;
        Some(match line.trim_start_matches("## Task:").trim() {
            "qa_generation" => Task::QaGeneration,
            "qa_adjudication" => Task::QaAdjudication,
            "reasoning_backfill" => Task::ReasoningBackfill,
            "distractor_generation" => Task::DistractorGeneration,
            "distractor_appraisal" => Task::DistractorAppraisal,
            "distractor_replacement" => Task::DistractorReplacement,
            "record_repair" => Task::RecordRepair,
            _ => return None,
        })
    }
}

impl Template {
    pub fn render_user(&self, vars: &[(&str, &str)]) -> String {
        render(self.user, vars)
    }

    pub fn system(&self) -> String {
        self.system.trim_end().to_string()
    }
}

/// Single-pass `{{name}}` substitution; substituted values are not rescanned.
/// Unknown placeholders render as empty strings.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) => {
                let name = after[..close].trim();
                if let Some((_, v)) = vars.iter().find(|(k, _)| *k == name) {
                    out.push_str(v);
                }
                rest = &after[close + 2..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// Contents of the first `<tag>` ... `</tag>` block; the closing tag is
/// searched from the end so passages may contain stray tag text.
pub fn block<'a>(user: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>\n");
    let close = format!("\n</{tag}>");
    let start = user.find(&open)? + open.len();
    let end = if tag == "passage" || tag == "raw" {
        user.rfind(&close)?
    } else {
        start + user[start..].find(&close)?
    };
    (end >= start).then(|| &user[start..end])
}

/// One-line JSON description of a pair, embedded in QC and distractor prompts.
pub fn pair_json(qa: &QAPair) -> String {
    json!({
        "id": qa.qa_id,
        "question": qa.question,
        "answer": qa.answer,
        "type": qa.qtype.as_str(),
        "reasoning": qa.reasoning,
    })
    .to_string()
}
