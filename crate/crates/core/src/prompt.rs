//! Generation prompt assembly: the calibration conversation followed by the
//! instruction, schema context and question.

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::catalog::{serialize_complicated_layout, ClearLayout, FkPlacement, LineEnd, Question, SchemaView};
use crate::gateway::{ChatExchange, ChatMessage};

const SYSTEM_PRIMING: &str = "You are now an excellent SQL writer, first I'll give you some tips and examples, and I need you to remember the tips, and do not make same mistakes.";

const TIP_COUNT_IN_ORDER_BY: &str = "\
Tips 1:
Question: Which A has most number of B?
Gold SQL: select A from B group by A order by count ( * ) desc limit 1;
Notice that the Gold SQL doesn't select COUNT(*) because the question only wants to know the A and the number should be only used in ORDER BY clause, there are many questions asks in this way, and I need you to remember this in the the following questions.";

const ACK_COUNT_IN_ORDER_BY: &str = "Thank you for the tip! I'll keep in mind that when the question only asks for a certain field, I should not include the COUNT(*) in the SELECT statement, but instead use it in the ORDER BY clause to sort the results based on the count of that field.";

const TIP_SET_OPERATIONS: &str = "\
Tips 2:
Don't use \"IN\", \"OR\", \"LEFT JOIN\" as it might cause extra results, use \"INTERSECT\" or \"EXCEPT\" instead, and remember to use \"DISTINCT\" or \"LIMIT\" when necessary.
For example,
Question: Who are the A who have been nominated for both B award and C award?
Gold SQL should be: select A from X where award = 'B' intersect select A from X where award = 'C';";

const ACK_SET_OPERATIONS: &str = "Thank you for the tip! I'll remember to use \"INTERSECT\" or \"EXCEPT\" instead of \"IN\", \"NOT IN\", or \"LEFT JOIN\" when I want to find records that match or don't match across two tables. Additionally, I'll make sure to use \"DISTINCT\" or \"LIMIT\" when necessary to avoid repetitive results or limit the number of results returned.";

pub const GENERATION_INSTRUCTION: &str = "### Complete sqlite SQL query only and with no explanation, and do not select extra columns that are not explicitly requested in the query.";
const BASIC_INSTRUCTION: &str = "### Complete sqlite SQL query only and with no explanation";
const TABLES_HEADER: &str = "### Sqlite SQL tables, with their properties:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    #[default]
    Clear,
    Complicated,
}

impl std::str::FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clear" => Ok(Self::Clear),
            "complicated" => Ok(Self::Complicated),
            other => Err(format!("unknown layout `{other}` (expected clear or complicated)")),
        }
    }
}

/// Which parts of the prompt are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub use_calibration: bool,
    pub use_linking: bool,
    pub use_foreign_keys: bool,
    pub layout: Layout,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            use_calibration: true,
            use_linking: true,
            use_foreign_keys: true,
            layout: Layout::Clear,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.layout == Layout::Complicated && self.use_linking {
            return Err("the complicated layout is only defined over full schemas; disable linking".into());
        }
        Ok(())
    }
}

/// Sampling parameters for the generation call.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSampling {
    pub n: u32,
    pub temperature: f64,
    pub model_name: String,
    pub max_output_tokens: u32,
    /// Estimated-token budget above which a warning is logged.
    pub token_budget: usize,
}

impl Default for GenerationSampling {
    fn default() -> Self {
        Self {
            n: 20,
            temperature: 1.0,
            model_name: "gpt-3.5-turbo-0301".into(),
            max_output_tokens: 512,
            token_budget: 1800,
        }
    }
}

/// The fixed five-turn conversation that steers the model away from
/// selecting `COUNT(*)` and from `IN`/`OR`/`LEFT JOIN` constructions.
pub fn calibration_history() -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(SYSTEM_PRIMING),
        ChatMessage::user(TIP_COUNT_IN_ORDER_BY),
        ChatMessage::assistant(ACK_COUNT_IN_ORDER_BY),
        ChatMessage::user(TIP_SET_OPERATIONS),
        ChatMessage::assistant(ACK_SET_OPERATIONS),
    ]
}

/// Final user turn of the generation prompt in the clear layout.
pub fn clear_generation_text(view: &dyn SchemaView, question: &Question, with_foreign_keys: bool) -> String {
    let fks = if with_foreign_keys {
        FkPlacement::Inline
    } else {
        FkPlacement::Omit
    };
    let block = ClearLayout::new(LineEnd::Bare, fks).render(view);
    format!(
        "{GENERATION_INSTRUCTION}\n {TABLES_HEADER}\n#\n{block}\n#\n### {}\nSELECT",
        question.text
    )
}

/// The plain clear-layout prompt (no extra-column warning, `;`-terminated
/// table lines, no foreign keys).
pub fn basic_clear_prompt(view: &dyn SchemaView, question: &Question) -> String {
    let block = ClearLayout::new(LineEnd::SemicolonLastPeriod, FkPlacement::Omit).render(view);
    format!(
        "{BASIC_INSTRUCTION}\n{TABLES_HEADER}\n#\n{block}\n#\n### {}\nSELECT",
        question.text
    )
}

/// Rough token estimate: four characters per token.
pub fn estimate_tokens(messages: &[ChatMessage]) -> usize {
    messages
        .iter()
        .map(|m| m.content.chars().count())
        .sum::<usize>()
        .div_ceil(4)
}

pub fn build_generation_prompt(
    view: &dyn SchemaView,
    question: &Question,
    config: &PromptConfig,
    sampling: &GenerationSampling,
) -> ChatExchange {
    let mut messages = if config.use_calibration {
        calibration_history()
    } else {
        Vec::new()
    };
    let final_turn = match config.layout {
        Layout::Clear => clear_generation_text(view, question, config.use_foreign_keys),
        Layout::Complicated => serialize_complicated_layout(view, question),
    };
    messages.push(ChatMessage::user(final_turn));
    let estimate = estimate_tokens(&messages);
    if estimate > sampling.token_budget {
        warn!(
            question = %question.question_id,
            estimate,
            budget = sampling.token_budget,
            "generation prompt exceeds the token budget"
        );
    }
    ChatExchange {
        messages,
        n: sampling.n,
        temperature: sampling.temperature,
        model_name: sampling.model_name.clone(),
        max_output_tokens: sampling.max_output_tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Column, DatabaseSchema, Table};
    use crate::gateway::Role;

    fn tiny() -> DatabaseSchema {
        DatabaseSchema::new(
            "x",
            vec![Table {
                name: "t".into(),
                columns: vec![Column {
                    name: "a".into(),
                    declared_type: String::new(),
                }],
            }],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn history_shape() {
        let h = calibration_history();
        let roles: Vec<Role> = h.iter().map(|m| m.role).collect();
        assert_eq!(
            roles,
            [Role::System, Role::User, Role::Assistant, Role::User, Role::Assistant]
        );
        assert!(h[1]
            .content
            .contains("select A from B group by A order by count ( * ) desc limit 1"));
        assert!(h[3].content.contains("use \"INTERSECT\" or \"EXCEPT\" instead"));
    }

    #[test]
    fn calibration_toggle_only_changes_prefix() {
        let q = Question::new("0", "x", "How many?");
        let sampling = GenerationSampling::default();
        let on = build_generation_prompt(&tiny(), &q, &PromptConfig::default(), &sampling);
        let off_cfg = PromptConfig {
            use_calibration: false,
            ..PromptConfig::default()
        };
        let off = build_generation_prompt(&tiny(), &q, &off_cfg, &sampling);
        assert_eq!(on.messages.len(), 6);
        assert_eq!(off.messages.len(), 1);
        assert_eq!(on.messages.last(), off.messages.last());
        assert!(off.messages[0].content.starts_with(GENERATION_INSTRUCTION));
    }

    #[test]
    fn complicated_requires_full_schema() {
        let cfg = PromptConfig {
            layout: Layout::Complicated,
            ..PromptConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(PromptConfig {
            use_linking: false,
            ..cfg
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn token_estimate() {
        assert_eq!(estimate_tokens(&[ChatMessage::user("abcde")]), 2);
    }
}
